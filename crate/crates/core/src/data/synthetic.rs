//! Seeded synthetic corpora: sums of per-channel sinusoids plus pink-ish
//! noise, with optional labels that are recoverable from the raw signal.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{write_signal, DatasetManifest, ManifestRecord};
use super::window::{normalize_channels, SignalWindow, WindowSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// One binary target: does the designated band carry above-median power.
    BandPower,
    /// One-hot over base-rate buckets.
    RateClass,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_records: usize,
    pub channels: usize,
    pub length_samples: usize,
    pub seed: u64,
    pub task: SyntheticTask,
    pub sampling_rate_hz: f64,
    pub records_per_subject: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_records: 64,
            channels: 12,
            length_samples: 1800,
            seed: 0,
            task: SyntheticTask::None,
            sampling_rate_hz: 240.0,
            records_per_subject: 1,
        }
    }
}

/// Edges of the base-rate buckets used by [`SyntheticTask::RateClass`], in Hz.
pub const RATE_RANGE_HZ: (f64, f64) = (0.8, 2.6);
pub const RATE_BUCKET_EDGES_HZ: [f64; 2] = [1.4, 2.0];
/// Designated band for [`SyntheticTask::BandPower`], in Hz.
pub const BAND_HZ: (f64, f64) = (9.0, 11.0);
/// Band amplitude is drawn from one of two disjoint ranges with equal
/// probability, so the population median lies between them.
const BAND_LOW: (f64, f64) = (0.0, 0.25);
const BAND_HIGH: (f64, f64) = (0.6, 1.0);

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("synthetic spec needs at least one channel".into()));
        }
        if self.length_samples == 0 {
            return Err(Error::Config("synthetic spec needs length_samples > 0".into()));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(Error::Config("sampling_rate_hz must be positive".into()));
        }
        if self.records_per_subject == 0 {
            return Err(Error::Config("records_per_subject must be positive".into()));
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        match self.task {
            SyntheticTask::BandPower => 1,
            SyntheticTask::RateClass => RATE_BUCKET_EDGES_HZ.len() + 1,
            SyntheticTask::None => 0,
        }
    }

    /// Record `index` as `[channels, length_samples]` plus its labels.
    /// Each record draws from its own stream, so records do not depend on
    /// `num_records`.
    pub fn record(&self, index: usize) -> (Array2<f32>, Option<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let fs = self.sampling_rate_hz;
        let n = self.length_samples;

        let rate = rng.gen_range(RATE_RANGE_HZ.0..RATE_RANGE_HZ.1);
        let band_high = rng.gen_bool(0.5);
        let (lo, hi) = if band_high { BAND_HIGH } else { BAND_LOW };
        let band_amp = rng.gen_range(lo..hi);
        let band_freq = rng.gen_range(BAND_HZ.0..BAND_HZ.1);
        let band_phase = rng.gen_range(0.0..2.0 * PI);

        let mut out = Array2::<f32>::zeros((self.channels, n));
        for c in 0..self.channels {
            let gain = rng.gen_range(0.5..1.5);
            let harmonics: Vec<(f64, f64)> = (1..=4)
                .map(|h| (gain * rng.gen_range(0.5..1.0) / h as f64, rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let band_gain = rng.gen_range(0.7..1.3);
            let mut ar = 0.0f64;
            let mut row = out.row_mut(c);
            for (t, v) in row.iter_mut().enumerate() {
                let time = t as f64 / fs;
                let mut x = 0.0;
                for (h, (a, phi)) in harmonics.iter().enumerate() {
                    x += a * (2.0 * PI * rate * (h + 1) as f64 * time + phi).sin();
                }
                if self.task == SyntheticTask::BandPower {
                    x += band_gain * band_amp * (2.0 * PI * band_freq * time + band_phase).sin();
                }
                // AR(1) plus white noise gives a 1/f-like spectrum tail
                let w: f64 = rng.sample(StandardNormal);
                ar = 0.95 * ar + 0.3 * (1.0 - 0.95f64.powi(2)).sqrt() * w;
                let white: f64 = rng.sample(StandardNormal);
                *v = (x + ar + 0.05 * white) as f32;
            }
        }
        let labels = match self.task {
            SyntheticTask::BandPower => Some(vec![if band_high { 1.0 } else { 0.0 }]),
            SyntheticTask::RateClass => {
                let bucket = RATE_BUCKET_EDGES_HZ.iter().filter(|&&e| rate >= e).count();
                let mut v = vec![0.0; RATE_BUCKET_EDGES_HZ.len() + 1];
                v[bucket] = 1.0;
                Some(v)
            }
            SyntheticTask::None => None,
        };
        (out, labels)
    }

    pub fn subject_id(&self, index: usize) -> String {
        format!("subj_{:06}", index / self.records_per_subject)
    }
}

/// Writes `num_records` signal files plus `manifest.tsv` into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let sig_dir = out_dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
    let mut records = Vec::with_capacity(spec.num_records);
    for i in 0..spec.num_records {
        let (values, labels) = spec.record(i);
        let rel = PathBuf::from("signals").join(format!("rec_{i:06}.f32"));
        write_signal(&out_dir.join(&rel), values.as_slice().expect("standard layout"))?;
        records.push(ManifestRecord {
            signal_path: rel,
            num_channels: spec.channels,
            num_samples: spec.length_samples,
            sampling_rate_hz: spec.sampling_rate_hz,
            labels,
            subject_id: spec.subject_id(i),
        });
    }
    let manifest = DatasetManifest {
        records,
        root: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Same corpus as [`generate_synthetic`], windowed and normalized in memory.
pub fn synthetic_windows(spec: &SyntheticSpec, window_len: usize) -> Result<WindowSet> {
    spec.validate()?;
    if window_len == 0 || window_len > spec.length_samples {
        return Err(Error::Config(format!(
            "window_len {window_len} incompatible with record length {}",
            spec.length_samples
        )));
    }
    let labelled = spec.task != SyntheticTask::None;
    let mut set = WindowSet::empty(spec.channels, window_len, spec.num_targets(), labelled);
    for i in 0..spec.num_records {
        let (values, labels) = spec.record(i);
        let mut start = 0;
        while start + window_len <= spec.length_samples {
            let mut w = values.slice(ndarray::s![.., start..start + window_len]).to_owned();
            normalize_channels(&mut w);
            set.push(
                &SignalWindow {
                    values: w,
                    source_record: i,
                    start_sample: start,
                },
                labels.as_deref(),
            )?;
            start += window_len;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;
    use crate::data::window::WindowSet;

    #[test]
    fn deterministic_files() {
        let spec = SyntheticSpec {
            num_records: 8,
            channels: 12,
            length_samples: 1800,
            seed: 7,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for i in 0..8 {
            let rel = format!("signals/rec_{i:06}.f32");
            assert_eq!(
                fs::read(a.path().join(&rel)).unwrap(),
                fs::read(b.path().join(&rel)).unwrap()
            );
        }
        assert_eq!(
            fs::read(a.path().join("manifest.tsv")).unwrap(),
            fs::read(b.path().join("manifest.tsv")).unwrap()
        );
        let m = load_manifest(&a.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.len(), 8);
    }

    #[test]
    fn band_power_prevalence() {
        let spec = SyntheticSpec {
            num_records: 300,
            channels: 2,
            length_samples: 64,
            seed: 1,
            task: SyntheticTask::BandPower,
            ..Default::default()
        };
        let positives: f32 = (0..spec.num_records).map(|i| spec.record(i).1.unwrap()[0]).sum();
        let prevalence = positives / spec.num_records as f32;
        assert!((0.4..=0.6).contains(&prevalence), "{prevalence}");
    }

    #[test]
    fn band_power_is_visible_in_spectrum() {
        // power near the designated band separates the classes on raw signals
        let spec = SyntheticSpec {
            num_records: 40,
            channels: 1,
            length_samples: 1200,
            seed: 5,
            task: SyntheticTask::BandPower,
            ..Default::default()
        };
        let band_power = |x: &[f32]| -> f64 {
            let mut p = 0.0;
            let mut f = BAND_HZ.0;
            while f <= BAND_HZ.1 {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let ph = 2.0 * PI * f * t as f64 / 240.0;
                    re += *v as f64 * ph.cos();
                    im += *v as f64 * ph.sin();
                }
                p += re * re + im * im;
                f += 0.1;
            }
            p
        };
        let (mut pos, mut neg) = (vec![], vec![]);
        for i in 0..spec.num_records {
            let (x, l) = spec.record(i);
            let p = band_power(x.as_slice().unwrap());
            if l.unwrap()[0] > 0.5 { pos.push(p) } else { neg.push(p) }
        }
        let min_pos = pos.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().cloned().fold(0.0, f64::max);
        assert!(min_pos > max_neg);
    }

    #[test]
    fn rate_class_is_one_hot() {
        let spec = SyntheticSpec {
            num_records: 60,
            channels: 1,
            length_samples: 16,
            task: SyntheticTask::RateClass,
            ..Default::default()
        };
        let mut counts = [0; 3];
        for i in 0..spec.num_records {
            let l = spec.record(i).1.unwrap();
            assert_eq!(l.iter().sum::<f32>(), 1.0);
            counts[l.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn zero_channels_rejected() {
        let spec = SyntheticSpec {
            channels: 0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&spec, dir.path()).is_err());
    }

    #[test]
    fn in_memory_matches_files() {
        let spec = SyntheticSpec {
            num_records: 3,
            channels: 2,
            length_samples: 250,
            seed: 2,
            task: SyntheticTask::RateClass,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&spec, dir.path()).unwrap();
        let from_disk = WindowSet::from_manifest(&m, 100, 100).unwrap();
        let in_mem = synthetic_windows(&spec, 100).unwrap();
        assert_eq!(from_disk, in_mem);
        assert_eq!(in_mem.len(), 6);
    }
}
