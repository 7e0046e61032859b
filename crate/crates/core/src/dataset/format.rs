//! The `ITHD` container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "ITHD"
//! version      u32
//! manifest     u64 byte length, then canonical JSON text
//! count        u64
//! record*      u32 id length, id bytes (UTF-8)
//!              u8 gold label
//!              C x f32 final logits
//!              L*d x f32 hidden states, layer-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{check_record, DatasetManifest, HiddenRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ITHD";
pub const FORMAT_VERSION: u32 = 1;

/// Streaming writer; the record count is patched in on [`DatasetWriter::finish`].
pub struct DatasetWriter {
    path: PathBuf,
    out: Option<BufWriter<File>>,
    manifest: DatasetManifest,
    count_offset: u64,
    count: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let problems = manifest.problems();
        if !problems.is_empty() {
            return Err(Error::Input(format!("inconsistent manifest: {}", problems.join("; "))));
        }
        let json = manifest.to_canonical_json()?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut writer = Self {
            path,
            out: Some(BufWriter::new(file)),
            manifest: manifest.clone(),
            count_offset: 0,
            count: 0,
        };
        let result = writer.write_header(json.as_bytes());
        writer.or_discard(result)?;
        Ok(writer)
    }

    fn write_header(&mut self, json: &[u8]) -> Result<()> {
        let out = self.out.as_mut().expect("writer open");
        let io = |e| Error::io(&self.path, e);
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(json).map_err(io)?;
        self.count_offset = 4 + 4 + 8 + json.len() as u64;
        out.write_all(&0u64.to_le_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn write_record(&mut self, record: &HiddenRecord) -> Result<()> {
        let result = self.write_record_inner(record);
        self.or_discard(result)
    }

    fn write_record_inner(&mut self, record: &HiddenRecord) -> Result<()> {
        check_record(&self.manifest, record)
            .map_err(|e| Error::Input(format!("record {:?}: {e}", record.example_id)))?;
        let out = self.out.as_mut().ok_or_else(|| Error::State("writer closed".into()))?;
        let io = |e| Error::io(&self.path, e);
        let id = record.example_id.as_bytes();
        out.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(id).map_err(io)?;
        out.write_all(&[record.gold_label as u8]).map_err(io)?;
        write_floats(out, record.final_logits.data()).map_err(io)?;
        write_floats(out, record.hidden.data()).map_err(io)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        let result = self.finish_inner();
        self.or_discard(result)?;
        Ok(self.count)
    }

    fn finish_inner(&mut self) -> Result<()> {
        let mut out = self.out.take().ok_or_else(|| Error::State("writer closed".into()))?;
        let io = |e| Error::io(&self.path, e);
        out.seek(SeekFrom::Start(self.count_offset)).map_err(io)?;
        out.write_all(&self.count.to_le_bytes()).map_err(io)?;
        out.flush().map_err(io)?;
        Ok(())
    }

    fn or_discard<T>(&mut self, result: Result<T>) -> Result<T> {
        if result.is_err() {
            self.out = None;
            let _ = std::fs::remove_file(&self.path);
        }
        result
    }
}

fn write_floats(out: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Writes a whole dataset; on any failure the partial file is removed.
pub fn write_dataset(path: impl AsRef<Path>, manifest: &DatasetManifest, records: &[HiddenRecord]) -> Result<()> {
    let mut writer = DatasetWriter::create(path, manifest)?;
    for r in records {
        writer.write_record(r)?;
    }
    writer.finish()?;
    Ok(())
}

/// Streaming reader over an `ITHD` file.
pub struct DatasetReader<R = BufReader<File>> {
    input: R,
    manifest: DatasetManifest,
    count: u64,
    read: u64,
    offset: u64,
    failed: bool,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn from_reader(mut input: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut input, &mut magic, &mut offset, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"ITHD\"")));
        }
        let version = read_u32(&mut input, &mut offset, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (reader supports {FORMAT_VERSION})"
            )));
        }
        let len = read_u64(&mut input, &mut offset, "manifest length")?;
        if len > (1 << 40) {
            return Err(Error::Corruption {
                offset: offset - 8,
                detail: format!("implausible manifest length {len}"),
            });
        }
        let mut json = vec![0u8; len as usize];
        read_exact_at(&mut input, &mut json, &mut offset, "manifest")?;
        let manifest: DatasetManifest = serde_json::from_slice(&json).map_err(|e| Error::Corruption {
            offset: 16,
            detail: format!("manifest is not valid JSON: {e}"),
        })?;
        let count = read_u64(&mut input, &mut offset, "record count")?;
        Ok(Self {
            input,
            manifest,
            count,
            read: 0,
            offset,
            failed: false,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Record count declared in the header.
    pub fn declared_len(&self) -> u64 {
        self.count
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// True when no bytes follow the last declared record.
    pub fn at_clean_end(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => Ok(false),
            Err(e) => Err(Error::Corruption {
                offset: self.offset,
                detail: e.to_string(),
            }),
        }
    }

    fn read_record(&mut self) -> Result<HiddenRecord> {
        let (l, d, c) = (
            self.manifest.num_layers,
            self.manifest.hidden_dim,
            self.manifest.num_classes,
        );
        let start = self.offset;
        let id_len = read_u32(&mut self.input, &mut self.offset, "id length")? as usize;
        if id_len > (1 << 20) {
            return Err(Error::Corruption {
                offset: start,
                detail: format!("implausible id length {id_len}"),
            });
        }
        let mut id = vec![0u8; id_len];
        read_exact_at(&mut self.input, &mut id, &mut self.offset, "example id")?;
        let example_id = String::from_utf8(id).map_err(|_| Error::Corruption {
            offset: start + 4,
            detail: "example id is not UTF-8".into(),
        })?;
        let mut label = [0u8; 1];
        read_exact_at(&mut self.input, &mut label, &mut self.offset, "gold label")?;
        let logits = read_floats(&mut self.input, c, &mut self.offset, "final logits")?;
        let hidden = read_floats(&mut self.input, l * d, &mut self.offset, "hidden states")?;
        Ok(HiddenRecord {
            example_id,
            hidden: Tensor::new(vec![l, d], hidden)?,
            final_logits: Tensor::new(vec![c], logits)?,
            gold_label: usize::from(label[0]),
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<HiddenRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.read >= self.count {
            return None;
        }
        let result = self.read_record();
        match &result {
            Ok(_) => self.read += 1,
            Err(_) => self.failed = true,
        }
        Some(result)
    }
}

/// Reads the manifest and every record into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<HiddenRecord>)> {
    let reader = DatasetReader::open(path)?;
    let manifest = reader.manifest().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

fn read_exact_at(input: &mut impl Read, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| Error::Corruption {
        offset: *offset,
        detail: if e.kind() == ErrorKind::UnexpectedEof {
            format!("truncated while reading {what}")
        } else {
            format!("{what}: {e}")
        },
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32(input: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(input, &mut b, offset, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read, offset: &mut u64, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_at(input, &mut b, offset, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_floats(input: &mut impl Read, n: usize, offset: &mut u64, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_at(input, &mut bytes, offset, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ValidationStatus {
    Pass,
    Inconsistent,
    Corrupt,
}

impl ValidationStatus {
    /// Process exit code: 0 pass, 1 corrupt, 2 inconsistent.
    pub fn exit_code(self) -> i32 {
        match self {
            ValidationStatus::Pass => 0,
            ValidationStatus::Corrupt => 1,
            ValidationStatus::Inconsistent => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub status: ValidationStatus,
    pub records_checked: u64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.status == ValidationStatus::Pass
    }

    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }

    fn record(&mut self, name: &'static str, failure: Option<String>, severity: ValidationStatus) {
        let passed = failure.is_none();
        if !passed {
            self.status = self.status.max(severity);
        }
        self.checks.push(CheckResult {
            name,
            passed,
            detail: failure.unwrap_or_else(|| "ok".into()),
        });
    }
}

/// Checks a dataset file end to end. Problems are reported, never returned
/// as errors.
pub fn validate_dataset(path: impl AsRef<Path>) -> ValidationReport {
    let mut report = ValidationReport {
        checks: Vec::new(),
        status: ValidationStatus::Pass,
        records_checked: 0,
    };
    let mut reader = match DatasetReader::open(path.as_ref()) {
        Ok(r) => {
            report.record("header", None, ValidationStatus::Corrupt);
            r
        }
        Err(e) => {
            report.record("header", Some(e.to_string()), ValidationStatus::Corrupt);
            return report;
        }
    };

    let problems = reader.manifest().problems();
    let shape_failure = (!problems.is_empty()).then(|| problems.join("; "));
    let consistent = shape_failure.is_none();
    report.record("manifest shapes", shape_failure, ValidationStatus::Inconsistent);
    let missing = reader.manifest().missing_head_fields();
    report.record(
        "manifest completeness",
        (!missing.is_empty()).then(|| format!("missing {}", missing.join(", "))),
        ValidationStatus::Inconsistent,
    );
    if !consistent {
        return report;
    }

    let c = reader.manifest().num_classes;
    let mut structure = None;
    let mut labels = None;
    let mut finite = None;
    for item in reader.by_ref() {
        match item {
            Ok(r) => {
                report.records_checked += 1;
                if labels.is_none() && r.gold_label >= c {
                    labels = Some(format!(
                        "record {:?}: gold label {} >= C = {c}",
                        r.example_id, r.gold_label
                    ));
                }
                if finite.is_none() && !(r.hidden.all_finite() && r.final_logits.all_finite()) {
                    finite = Some(format!("record {:?} contains non-finite values", r.example_id));
                }
            }
            Err(e) => {
                structure = Some(e.to_string());
                break;
            }
        }
    }
    if structure.is_none() {
        match reader.at_clean_end() {
            Ok(true) => {}
            Ok(false) => {
                structure = Some(format!("trailing bytes after record {}", reader.declared_len()))
            }
            Err(e) => structure = Some(e.to_string()),
        }
    }
    report.record("record structure", structure, ValidationStatus::Corrupt);
    report.record("label range", labels, ValidationStatus::Inconsistent);
    report.record("finite values", finite, ValidationStatus::Corrupt);
    report
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    fn small() -> (DatasetManifest, Vec<HiddenRecord>) {
        generate_synthetic(&SyntheticConfig {
            layers: 3,
            dim: 5,
            classes: 4,
            n: 7,
            signal_layer: 2,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_and_exact_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ithd");
        let (manifest, records) = small();
        write_dataset(&path, &manifest, &records).unwrap();
        let (m2, r2) = read_dataset(&path).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(r2, records);

        let header = 4 + 4 + 8 + manifest.to_canonical_json().unwrap().len() + 8;
        let body: usize = records
            .iter()
            .map(|r| 4 + r.example_id.len() + 1 + 4 * 4 + 4 * 3 * 5)
            .sum();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, header + body);
        assert!(validate_dataset(&path).passed());
    }

    #[test]
    fn zero_records_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ithd");
        let (manifest, _) = small();
        write_dataset(&path, &manifest, &[]).unwrap();
        let reader = DatasetReader::open(&path).unwrap();
        assert_eq!(reader.declared_len(), 0);
        assert_eq!(reader.count(), 0);
        assert!(validate_dataset(&path).passed());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let err = DatasetReader::from_reader(Cursor::new(b"NOPE\x01\0\0\0".to_vec()))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ithd");
        let (manifest, records) = small();
        write_dataset(&path, &manifest, &records).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let results: Vec<_> = DatasetReader::from_reader(Cursor::new(cut.to_vec())).unwrap().collect();
        let last = results.last().unwrap();
        match last {
            Err(Error::Corruption { offset, .. }) => assert!(*offset > 0),
            other => panic!("expected corruption, got {other:?}"),
        }
        std::fs::write(&path, cut).unwrap();
        let report = validate_dataset(&path);
        assert_eq!(report.exit_code(), 1);
    }

    #[test]
    fn inconsistent_record_removes_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ithd");
        let (manifest, mut records) = small();
        records[3].gold_label = 9;
        assert!(write_dataset(&path, &manifest, &records).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn nan_and_class_mismatch_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.ithd");
        let (manifest, mut records) = small();
        records[4].hidden.data_mut()[2] = f32::NAN;
        write_dataset(&path, &manifest, &records).unwrap();
        let report = validate_dataset(&path);
        assert!(!report.passed());
        let failed = report.checks.iter().find(|c| !c.passed).unwrap();
        assert!(failed.detail.contains(&records[4].example_id), "{failed:?}");

        // Header claims C = 4 but the unembedding carries 3 rows.
        let path = dir.path().join("cmismatch.ithd");
        let (mut manifest, records) = small();
        let bytes = {
            write_dataset(&path, &manifest, &records).unwrap();
            std::fs::read(&path).unwrap()
        };
        let old_json = manifest.to_canonical_json().unwrap();
        let u = manifest.label_unembedding.as_mut().unwrap();
        u.truncate(3 * 5);
        let new_json = manifest.to_canonical_json().unwrap();
        let mut patched = bytes[..8].to_vec();
        patched.extend_from_slice(&(new_json.len() as u64).to_le_bytes());
        patched.extend_from_slice(new_json.as_bytes());
        patched.extend_from_slice(&bytes[16 + old_json.len()..]);
        std::fs::write(&path, patched).unwrap();
        let report = validate_dataset(&path);
        assert_eq!(report.exit_code(), 2, "{report:?}");
    }
}
