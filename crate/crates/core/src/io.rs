//! On-disk formats.
//!
//! Datasets (`FLDS`) and checkpoints (`FLWT`) are little-endian binary files
//! with a short fixed header; numeric payloads are raw `f64` bytes, so a read
//! returns bit-identical values. Traces are CSV with shortest round-trip
//! floats, or JSON. Every writer goes through a temporary file in the target
//! directory followed by a rename.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ForgettingRecord;
use crate::model::WeightMatrix;
use crate::optim::{TraceRow, TrainTrace};
use crate::synthgen::{Dataset, DistributionSpec, FeatureBasis, PatchedExample};

pub const DATASET_MAGIC: &[u8; 4] = b"FLDS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLWT";
pub const FORMAT_VERSION: u32 = 1;
pub const TRACE_CSV_HEADER: &str = "# featlab-trace v1";

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "unexpected end of file at byte {} (need {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<()> {
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    spec: DistributionSpec,
    basis: FeatureBasis,
    labels: Vec<i8>,
    has_fast_feature: Vec<bool>,
    permutations: Vec<Vec<usize>>,
    multiplicity: Vec<u32>,
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        basis: ds.basis.clone(),
        labels: ds.examples.iter().map(|e| e.label).collect(),
        has_fast_feature: ds.examples.iter().map(|e| e.has_fast_feature).collect(),
        permutations: ds.examples.iter().map(|e| e.permutation.clone()).collect(),
        multiplicity: ds.multiplicity.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let per = ds.spec.patches * ds.spec.d;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * per * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for ex in &ds.examples {
        push_f64s(&mut out, &ex.patches);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, DATASET_MAGIC)?;
    let len = r.u64()? as usize;
    let header: DatasetHeader = serde_json::from_slice(r.take(len)?)?;
    let n = header.labels.len();
    if header.has_fast_feature.len() != n || header.permutations.len() != n {
        return Err(Error::Format("per-example header arrays differ in length".into()));
    }
    let per = header.spec.patches * header.spec.d;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let patches = r.f64s(per)?;
        examples.push(PatchedExample::new(
            patches,
            header.labels[i],
            header.has_fast_feature[i],
            header.permutations[i].clone(),
        )?);
    }
    r.finish()?;
    Dataset::from_parts(header.spec, header.basis, examples, header.multiplicity)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Weights plus the provenance needed to interpret them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub weights: WeightMatrix,
    pub sigma_0: f64,
    pub seed: u64,
    pub iteration: u64,
}

pub fn encode_checkpoint(ck: &CheckpointFile) -> Vec<u8> {
    let w = &ck.weights;
    let mut out = Vec::with_capacity(48 + 8 * w.as_slice().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.filters() as u64).to_le_bytes());
    out.extend_from_slice(&(w.dim() as u64).to_le_bytes());
    out.extend_from_slice(&ck.sigma_0.to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.iteration.to_le_bytes());
    push_f64s(&mut out, w.as_slice());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let filters = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let sigma_0 = r.f64()?;
    let seed = r.u64()?;
    let iteration = r.u64()?;
    let n = filters
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("weight shape overflows".into()))?;
    let data = r.f64s(n)?;
    r.finish()?;
    Ok(CheckpointFile {
        weights: WeightMatrix::from_vec(filters, dim, data)?,
        sigma_0,
        seed,
        iteration,
    })
}

pub fn write_checkpoint(path: &Path, ck: &CheckpointFile) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read checkpoint {}: {e}", path.display()),
        ))
    })?;
    decode_checkpoint(&bytes)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    iter: usize,
    loss: f64,
    fast_alignment: f64,
    slow_alignment: f64,
    train_error: f64,
    test_error: Option<f64>,
    grad_norm: f64,
    perturbation_scale: f64,
}

pub fn encode_trace_csv(rows: &[TraceRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(CsvRow {
                iter: r.iteration,
                loss: r.loss,
                fast_alignment: r.fast_alignment,
                slow_alignment: r.slow_alignment,
                train_error: r.train_error,
                test_error: r.test_error,
                grad_norm: r.grad_norm,
                perturbation_scale: r.perturbation_scale,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn decode_trace_csv(bytes: &[u8]) -> Result<Vec<TraceRow>> {
    let mut reader = bytes;
    let mut first = String::new();
    loop {
        let mut b = [0u8; 1];
        if reader.read(&mut b)? == 0 || b[0] == b'\n' {
            break;
        }
        first.push(b[0] as char);
    }
    if first.trim_end() != TRACE_CSV_HEADER {
        return Err(Error::Format(format!("missing trace header, found {first:?}")));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<CsvRow>()
        .map(|row| {
            let r = row.map_err(csv_error)?;
            Ok(TraceRow {
                iteration: r.iter,
                loss: r.loss,
                fast_alignment: r.fast_alignment,
                slow_alignment: r.slow_alignment,
                train_error: r.train_error,
                test_error: r.test_error,
                grad_norm: r.grad_norm,
                perturbation_scale: r.perturbation_scale,
            })
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_atomic(path, &encode_trace_csv(rows)?)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    decode_trace_csv(&fs::read(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_trace_json(path: &Path) -> Result<TrainTrace> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[derive(Serialize)]
struct ForgettingCsvRow {
    example: usize,
    has_fast_feature: bool,
    score: u32,
    first_correct_epoch: Option<usize>,
}

pub fn encode_forgetting_csv(records: &[ForgettingRecord], ds: &Dataset) -> Result<Vec<u8>> {
    if records.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: ds.len(),
            got: records.len(),
        });
    }
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for (i, (rec, ex)) in records.iter().zip(ds.examples()).enumerate() {
            w.serialize(ForgettingCsvRow {
                example: i,
                has_fast_feature: ex.has_fast_feature(),
                score: rec.score,
                first_correct_epoch: rec.first_correct_epoch,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    Ok(out)
}
