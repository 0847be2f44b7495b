use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2, Axis};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// One fixed-length multichannel segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    /// `[channels, window_len]`.
    pub values: Array2<f32>,
    pub source_record: usize,
    pub start_sample: usize,
}

/// Z-normalizes every channel of `values` in place using that channel's own
/// statistics. Constant channels become all zeros.
pub fn normalize_channels(values: &mut Array2<f32>) {
    for mut row in values.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        if n == 0.0 {
            continue;
        }
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-24 * mean.abs().max(1.0).powi(2) {
            row.fill(0.0);
            continue;
        }
        let inv = 1.0 / var.sqrt();
        row.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
    }
}

/// Lazily cuts records into windows, one record in memory at a time.
pub struct WindowStream<'a> {
    manifest: &'a DatasetManifest,
    window_len: usize,
    stride: usize,
    record: usize,
    buffer: Option<Vec<f32>>,
    offset: usize,
}

impl<'a> WindowStream<'a> {
    fn load_next(&mut self) -> Option<Result<()>> {
        while self.record < self.manifest.len() {
            let r = &self.manifest.records[self.record];
            if r.num_samples < self.window_len {
                log::warn!(
                    "record {} has {} samples, shorter than window {}; skipped",
                    self.record,
                    r.num_samples,
                    self.window_len
                );
                self.record += 1;
                continue;
            }
            return Some(self.manifest.read_signal(self.record).map(|buf| {
                self.buffer = Some(buf);
                self.offset = 0;
            }));
        }
        None
    }
}

impl Iterator for WindowStream<'_> {
    type Item = Result<SignalWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.buffer.is_none() {
                if let Err(e) = self.load_next()? {
                    self.record += 1;
                    return Some(Err(e));
                }
            }
            let r = &self.manifest.records[self.record];
            if self.offset + self.window_len > r.num_samples {
                self.buffer = None;
                self.record += 1;
                continue;
            }
            let buf = self.buffer.as_ref().expect("loaded");
            let full = ArrayView2::from_shape((r.num_channels, r.num_samples), buf.as_slice())
                .expect("length checked on read");
            let mut values = full
                .slice(ndarray::s![.., self.offset..self.offset + self.window_len])
                .to_owned();
            normalize_channels(&mut values);
            let w = SignalWindow {
                values,
                source_record: self.record,
                start_sample: self.offset,
            };
            self.offset += self.stride;
            return Some(Ok(w));
        }
    }
}

/// Streams per-window normalized windows; trailing partial windows are dropped.
pub fn window_and_normalize(
    manifest: &DatasetManifest,
    window_len: usize,
    stride: usize,
) -> Result<WindowStream<'_>> {
    if window_len == 0 {
        return Err(Error::Config("window_len must be positive".into()));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    Ok(WindowStream {
        manifest,
        window_len,
        stride,
        record: 0,
        buffer: None,
        offset: 0,
    })
}

/// A contiguous in-memory collection of equally shaped windows, optionally
/// labelled, ready to be batched into tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub channels: usize,
    pub window_len: usize,
    /// `[n, channels, window_len]`, row-major.
    pub data: Vec<f32>,
    /// `[n, num_targets]` when labelled.
    pub labels: Option<Vec<f32>>,
    pub num_targets: usize,
    pub source_record: Vec<usize>,
}

impl WindowSet {
    pub fn empty(channels: usize, window_len: usize, num_targets: usize, labelled: bool) -> Self {
        WindowSet {
            channels,
            window_len,
            data: Vec::new(),
            labels: labelled.then(Vec::new),
            num_targets,
            source_record: Vec::new(),
        }
    }

    /// Collects every window of `manifest`, attaching record labels when all
    /// records carry them.
    pub fn from_manifest(manifest: &DatasetManifest, window_len: usize, stride: usize) -> Result<Self> {
        let channels = manifest.num_channels().unwrap_or(0);
        let num_targets = manifest.num_targets();
        let mut set = WindowSet::empty(channels, window_len, num_targets.unwrap_or(0), num_targets.is_some());
        for w in window_and_normalize(manifest, window_len, stride)? {
            let w = w?;
            let labels = manifest.records[w.source_record].labels.as_deref();
            set.push(&w, labels)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, w: &SignalWindow, labels: Option<&[f32]>) -> Result<()> {
        let (c, l) = w.values.dim();
        if c != self.channels || l != self.window_len {
            return Err(Error::Shape(format!(
                "window is {c}x{l}, set holds {}x{}",
                self.channels, self.window_len
            )));
        }
        self.data.extend(w.values.iter().copied());
        if let Some(dst) = self.labels.as_mut() {
            let src = labels.ok_or_else(|| Error::Data("unlabelled window in labelled set".into()))?;
            if src.len() != self.num_targets {
                return Err(Error::Shape(format!(
                    "label vector has {} entries, expected {}",
                    src.len(),
                    self.num_targets
                )));
            }
            dst.extend_from_slice(src);
        }
        self.source_record.push(w.source_record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.source_record.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_record.is_empty()
    }

    fn stride(&self) -> usize {
        self.channels * self.window_len
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn label(&self, i: usize) -> Option<&[f32]> {
        self.labels
            .as_ref()
            .map(|l| &l[i * self.num_targets..(i + 1) * self.num_targets])
    }

    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::empty(self.channels, self.window_len, self.num_targets, self.labels.is_some());
        for &i in indices {
            out.data.extend_from_slice(self.window(i));
            if let (Some(dst), Some(src)) = (out.labels.as_mut(), self.label(i)) {
                dst.extend_from_slice(src);
            }
            out.source_record.push(self.source_record[i]);
        }
        out
    }

    /// Windows whose source record satisfies `keep`.
    pub fn filter_records(&self, keep: impl Fn(usize) -> bool) -> WindowSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.source_record[i])).collect();
        self.subset(&idx)
    }

    /// `[b, channels, window_len]` tensor for the given window indices.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut buf = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            buf.extend_from_slice(self.window(i));
        }
        let t = Tensor::from_vec(buf, (indices.len(), self.channels, self.window_len), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// `[b, num_targets]` label tensor.
    pub fn label_batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("window set carries no labels".into()))?;
        let mut buf = Vec::with_capacity(indices.len() * self.num_targets);
        for &i in indices {
            buf.extend_from_slice(&labels[i * self.num_targets..(i + 1) * self.num_targets]);
        }
        let t = Tensor::from_vec(buf, (indices.len(), self.num_targets), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{write_signal, ManifestRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn manifest_with(dir: &std::path::Path, records: &[(usize, usize, Vec<f32>)]) -> DatasetManifest {
        let mut m = DatasetManifest {
            records: vec![],
            root: dir.to_path_buf(),
        };
        for (i, (c, n, values)) in records.iter().enumerate() {
            let name = format!("r{i}.f32");
            write_signal(&dir.join(&name), values).unwrap();
            m.records.push(ManifestRecord {
                signal_path: PathBuf::from(name),
                num_channels: *c,
                num_samples: *n,
                sampling_rate_hz: 240.0,
                labels: Some(vec![i as f32]),
                subject_id: format!("s{i}"),
            });
        }
        m
    }

    fn stats(row: ndarray::ArrayView1<f32>) -> (f64, f64) {
        let n = row.len() as f64;
        let m = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = row.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn three_windows_from_1800_samples() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f32> = (0..1800).map(|i| (i as f32 * 0.1).sin()).collect();
        let m = manifest_with(dir.path(), &[(1, 1800, values)]);
        let ws: Vec<_> = window_and_normalize(&m, 600, 600).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws.iter().map(|w| w.start_sample).collect::<Vec<_>>(), vec![0, 600, 1200]);
    }

    #[test]
    fn windowing_accounts_for_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        for (n, win) in [(1000usize, 300usize), (599, 600), (1234, 100), (600, 600)] {
            let m = manifest_with(dir.path(), &[(1, n, vec![1.0; n])]);
            let count = window_and_normalize(&m, win, win).unwrap().count();
            let remainder = if n >= win { n - count * win } else { n };
            assert_eq!(count * win + remainder, n);
            assert!(remainder < win || count == 0);
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut a = Array2::from_elem((2, 600), 5.0f32);
        a.row_mut(1).iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        normalize_channels(&mut a);
        assert!(a.row(0).iter().all(|&v| v == 0.0));
        let (m, s) = stats(a.row(1));
        assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gaussian_record_normalizes_each_channel() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..12 * 1800)
            .map(|_| 3.0 + 7.0 * rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        let m = manifest_with(dir.path(), &[(12, 1800, values)]);
        for w in window_and_normalize(&m, 600, 600).unwrap() {
            let w = w.unwrap();
            for row in w.values.rows() {
                let (mean, std) = stats(row);
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((std - 1.0).abs() < 1e-5, "std {std}");
            }
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = Array2::from_shape_fn((4, 333), |_| rng.gen_range(-50.0f32..80.0));
        normalize_channels(&mut a);
        let once = a.clone();
        normalize_channels(&mut a);
        let diff = (&a - &once).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn short_records_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(
            dir.path(),
            &[(1, 100, vec![0.5; 100]), (1, 1200, (0..1200).map(|i| i as f32).collect())],
        );
        let ws: Vec<_> = window_and_normalize(&m, 600, 600).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(ws.len(), 2);
        assert!(ws.iter().all(|w| w.source_record == 1));
    }

    #[test]
    fn overlapping_stride() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(dir.path(), &[(1, 1000, (0..1000).map(|i| i as f32).collect())]);
        assert_eq!(window_and_normalize(&m, 600, 100).unwrap().count(), 5);
        assert!(window_and_normalize(&m, 600, 0).is_err());
    }

    #[test]
    fn window_set_batches() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with(
            dir.path(),
            &[(2, 40, (0..80).map(|i| (i * i) as f32).collect()), (2, 20, (0..40).map(|i| i as f32).collect())],
        );
        let set = WindowSet::from_manifest(&m, 20, 20).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.source_record, vec![0, 0, 1]);
        assert_eq!(set.label(2), Some(&[1.0f32][..]));
        let t = set.batch(&[2, 0], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 2, 20]);
        let l = set.label_batch(&[2, 0], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(l.to_vec2::<f32>().unwrap(), vec![vec![1.0], vec![0.0]]);
    }
}
