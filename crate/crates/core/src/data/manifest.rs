//! Line-oriented dataset manifests and raw `.f32` signal files.
//!
//! One record per line, tab-separated:
//!
//! ```text
//! signal_path  num_channels  num_samples  sampling_rate_hz  label_vector  subject_id
//! ```
//!
//! `label_vector` is comma-separated or `-` when absent. Relative signal paths
//! are resolved against the manifest's directory. Signal files are headerless,
//! channel-major, little-endian `f32`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub signal_path: PathBuf,
    pub num_channels: usize,
    pub num_samples: usize,
    pub sampling_rate_hz: f64,
    pub labels: Option<Vec<f32>>,
    pub subject_id: String,
}

impl ManifestRecord {
    pub fn expected_bytes(&self) -> u64 {
        (self.num_channels * self.num_samples * 4) as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative signal paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.signal_path.is_absolute() {
            record.signal_path.clone()
        } else {
            self.root.join(&record.signal_path)
        }
    }

    pub fn num_channels(&self) -> Option<usize> {
        self.records.first().map(|r| r.num_channels)
    }

    pub fn sampling_rate_hz(&self) -> Option<f64> {
        self.records.first().map(|r| r.sampling_rate_hz)
    }

    /// Number of label entries per record, if every record is labelled.
    pub fn num_targets(&self) -> Option<usize> {
        let first = self.records.first()?.labels.as_ref()?.len();
        self.records
            .iter()
            .all(|r| r.labels.as_ref().map(Vec::len) == Some(first))
            .then_some(first)
    }

    /// Reads record `index` as a `[channels][samples]` buffer.
    pub fn read_signal(&self, index: usize) -> Result<Vec<f32>> {
        let record = self
            .records
            .get(index)
            .ok_or_else(|| Error::Data(format!("record index {index} out of range")))?;
        let path = self.resolve(record);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != record.expected_bytes() {
            return Err(Error::SignalLength {
                record: index,
                path,
                expected: record.expected_bytes(),
                actual: bytes.len() as u64,
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let labels = match &r.labels {
                None => "-".to_string(),
                Some(v) => v
                    .iter()
                    .map(|x| format_label(*x))
                    .collect::<Vec<_>>()
                    .join(","),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.signal_path.display(),
                r.num_channels,
                r.num_samples,
                r.sampling_rate_hz,
                labels,
                r.subject_id
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn format_label(x: f32) -> String {
    if x.fract() == 0.0 && x.abs() < 1e7 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub fn write_signal(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_line(line: &str, lineno: usize) -> Result<ManifestRecord> {
    let bad = |msg: String| Error::ManifestLine { line: lineno, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(bad(format!("expected 6 tab-separated fields, found {}", fields.len())));
    }
    let num_channels: usize = fields[1]
        .trim()
        .parse()
        .map_err(|_| bad(format!("num_channels `{}` is not an integer", fields[1])))?;
    let num_samples: usize = fields[2]
        .trim()
        .parse()
        .map_err(|_| bad(format!("num_samples `{}` is not an integer", fields[2])))?;
    let sampling_rate_hz: f64 = fields[3]
        .trim()
        .parse()
        .map_err(|_| bad(format!("sampling_rate_hz `{}` is not a number", fields[3])))?;
    if !(sampling_rate_hz > 0.0 && sampling_rate_hz.is_finite()) {
        return Err(bad("sampling_rate_hz must be positive".into()));
    }
    if num_channels == 0 {
        return Err(bad("num_channels must be positive".into()));
    }
    let labels = match fields[4].trim() {
        "-" => None,
        s => Some(
            s.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f32>()
                        .map_err(|_| bad(format!("label `{v}` is not a number")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let subject_id = fields[5].trim().to_string();
    if subject_id.is_empty() {
        return Err(bad("empty subject_id".into()));
    }
    Ok(ManifestRecord {
        signal_path: PathBuf::from(fields[0]),
        num_channels,
        num_samples,
        sampling_rate_hz,
        labels,
        subject_id,
    })
}

/// Parses manifest text without touching signal files.
pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(line, i + 1)?);
    }
    let manifest = DatasetManifest {
        records,
        root: root.to_path_buf(),
    };
    if let Some(first) = manifest.records.first() {
        for (i, r) in manifest.records.iter().enumerate() {
            if r.sampling_rate_hz != first.sampling_rate_hz {
                return Err(Error::Data(format!(
                    "record {i}: sampling rate {} differs from {}",
                    r.sampling_rate_hz, first.sampling_rate_hz
                )));
            }
            if r.num_channels != first.num_channels {
                return Err(Error::Data(format!(
                    "record {i}: {} channels, expected {}",
                    r.num_channels, first.num_channels
                )));
            }
        }
    }
    Ok(manifest)
}

/// Loads and eagerly validates a manifest, including every signal file's size.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, &root)?;
    for (i, r) in manifest.records.iter().enumerate() {
        let p = manifest.resolve(r);
        let len = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        if len != r.expected_bytes() {
            return Err(Error::SignalLength {
                record: i,
                path: p,
                expected: r.expected_bytes(),
                actual: len,
            });
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_record(dir: &Path, name: &str, channels: usize, samples: usize, short: usize) {
        let values: Vec<f32> = (0..channels * samples).map(|i| i as f32).collect();
        write_signal(&dir.join(name), &values).unwrap();
        if short > 0 {
            let p = dir.join(name);
            let bytes = fs::read(&p).unwrap();
            fs::write(&p, &bytes[..bytes.len() - short]).unwrap();
        }
    }

    #[test]
    fn three_valid_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::new();
        for i in 0..3 {
            write_record(dir.path(), &format!("r{i}.f32"), 2, 50, 0);
            text.push_str(&format!("r{i}.f32\t2\t50\t240\t1,0\ts{i}\n"));
        }
        fs::write(dir.path().join("m.tsv"), text).unwrap();
        let m = load_manifest(&dir.path().join("m.tsv")).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[1].labels.as_deref(), Some(&[1.0, 0.0][..]));
        assert_eq!(m.num_targets(), Some(2));
        let sig = m.read_signal(2).unwrap();
        assert_eq!(sig.len(), 100);
        assert_eq!(sig[99], 99.0);
    }

    #[test]
    fn short_file_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::new();
        for i in 0..3 {
            write_record(dir.path(), &format!("r{i}.f32"), 1, 10, if i == 1 { 4 } else { 0 });
            text.push_str(&format!("r{i}.f32\t1\t10\t240\t-\ts{i}\n"));
        }
        fs::write(dir.path().join("m.tsv"), text).unwrap();
        match load_manifest(&dir.path().join("m.tsv")) {
            Err(Error::SignalLength { record, expected, actual, .. }) => {
                assert_eq!(record, 1);
                assert_eq!(expected, 40);
                assert_eq!(actual, 36);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.tsv"), "").unwrap();
        let m = load_manifest(&dir.path().join("m.tsv")).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.num_targets(), None);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_manifest("a.f32\t1\t10\t240\t-\ts\nb.f32\tx\t10\t240\t-\ts\n", Path::new("."))
            .unwrap_err();
        assert!(matches!(err, Error::ManifestLine { line: 2, .. }), "{err}");
        let err = parse_manifest("a.f32\t1\t10\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::ManifestLine { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_manifest(Path::new("/nonexistent/m.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn mixed_rates_rejected() {
        let err = parse_manifest("a\t1\t10\t240\t-\ts\nb\t1\t10\t250\t-\tt\n", Path::new("."))
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn text_round_trip() {
        let text = "a.f32\t12\t1800\t240\t1,0,0.5\tsubj1\nb.f32\t12\t600\t240\t-\tsubj2\n";
        let m = parse_manifest(text, Path::new(".")).unwrap();
        assert_eq!(m.to_text(), text);
    }
}
