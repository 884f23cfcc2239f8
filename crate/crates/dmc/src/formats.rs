//! Binary dataset (DMCD) and network (DMCW) files, plus dataset CSV.
//!
//! DMCD: `"DMC1"`, then little-endian u32 `version = 1`, `n_rows`,
//! `state_dim`, `action_dim`, `flags` (bit 0 reward, bit 1 terminal; both
//! required), then `n_rows` records of little-endian f32 `s, a, r, s', terminal`.
//!
//! DMCW: one record per network, concatenated: `"DMCW"`, u32 `version = 1`,
//! u32 layer count `L`, `L` pairs of u32 `(in, out)`, then every parameter
//! as little-endian f32 in layer order (weights row-major `in × out`, then
//! biases).

use std::fs;
use std::io::Write;
use std::path::Path;

use dmc_core::dataset::{Origin, TransitionDataset};
use dmc_core::tensor::{Activation, Mlp};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"DMC1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"DMCW";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_REWARD: u32 = 1;
const FLAG_TERMINAL: u32 = 2;
/// Guards header arithmetic against absurd dimensions.
const MAX_DIM: u32 = 1 << 16;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::format(self.path, offset as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated file: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(self.err(at, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(want))));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(self.err(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Reads `n` floats, rejecting non-finite ones with their offset.
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes_needed = n.checked_mul(4).ok_or_else(|| self.err(self.pos, format!("{what} size overflows")))?;
        let start = self.pos;
        let raw = self.take(bytes_needed, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(self.err(start + 4 * i, format!("non-finite value in {what}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn encode_dataset(ds: &TransitionDataset) -> Result<Vec<u8>> {
    ds.ensure_nonempty("dataset")?;
    let mut out = Vec::with_capacity(24 + ds.records().len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    for v in [FORMAT_VERSION, ds.len() as u32, ds.state_dim() as u32, ds.action_dim() as u32, FLAG_REWARD | FLAG_TERMINAL] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.records() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a DMCD image. Every row is tagged with `origin`.
pub fn decode_dataset(path: &Path, bytes: &[u8], origin: Origin) -> Result<TransitionDataset> {
    let mut r = Reader::new(path, bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let rows_at = r.pos;
    let n_rows = r.u32("n_rows")?;
    let dims_at = r.pos;
    let state_dim = r.u32("state_dim")?;
    let action_dim = r.u32("action_dim")?;
    let flags_at = r.pos;
    let flags = r.u32("flags")?;
    if n_rows == 0 {
        return Err(r.err(rows_at, "row count must be at least 1"));
    }
    if state_dim == 0 || state_dim > MAX_DIM || action_dim > MAX_DIM {
        return Err(r.err(dims_at, format!("dimensions out of range: state_dim {state_dim}, action_dim {action_dim}")));
    }
    if flags != FLAG_REWARD | FLAG_TERMINAL {
        return Err(r.err(flags_at, format!("flags {flags:#x}: reward and terminal columns are required")));
    }
    let record_len = 2 * state_dim as usize + action_dim as usize + 2;
    let total = (n_rows as usize).checked_mul(record_len).ok_or_else(|| r.err(rows_at, "row count overflows"))?;
    let data_at = r.pos;
    let data = r.floats(total, "records")?;
    if !r.at_end() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for row in 0..n_rows as usize {
        let i = row * record_len + record_len - 1;
        if data[i] != 0.0 && data[i] != 1.0 {
            return Err(r.err(data_at + 4 * i, format!("row {row}: terminal flag {} is not 0 or 1", data[i])));
        }
    }
    Ok(TransitionDataset::from_records(state_dim as usize, action_dim as usize, data, origin)?)
}

pub fn save_dataset(ds: &TransitionDataset, path: &Path) -> Result<()> {
    write_file(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path, origin: Origin) -> Result<TransitionDataset> {
    decode_dataset(path, &read_file(path)?, origin)
}

pub fn encode_networks(nets: &[&Mlp]) -> Vec<u8> {
    let mut out = Vec::new();
    for net in nets {
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let sizes = net.sizes();
        out.extend_from_slice(&((sizes.len() - 1) as u32).to_le_bytes());
        for w in sizes.windows(2) {
            out.extend_from_slice(&(w[0] as u32).to_le_bytes());
            out.extend_from_slice(&(w[1] as u32).to_le_bytes());
        }
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    out
}

/// Parses every DMCW record in the image; hidden layers use `activation`.
pub fn decode_networks(path: &Path, bytes: &[u8], activation: Activation) -> Result<Vec<Mlp>> {
    let mut r = Reader::new(path, bytes);
    let mut nets = Vec::new();
    while !r.at_end() {
        r.magic(WEIGHTS_MAGIC)?;
        r.version()?;
        let count_at = r.pos;
        let layers = r.u32("layer count")?;
        if layers == 0 || layers > 64 {
            return Err(r.err(count_at, format!("layer count {layers} out of range")));
        }
        let mut sizes = Vec::with_capacity(layers as usize + 1);
        for l in 0..layers {
            let at = r.pos;
            let (i, o) = (r.u32("layer input")?, r.u32("layer output")?);
            if i == 0 || o == 0 || i > MAX_DIM || o > MAX_DIM {
                return Err(r.err(at, format!("layer {l} dimensions {i} x {o} out of range")));
            }
            if l == 0 {
                sizes.push(i as usize);
            } else if sizes[l as usize] != i as usize {
                return Err(r.err(at, format!("layer {l} input {i} does not match previous output {}", sizes[l as usize])));
            }
            sizes.push(o as usize);
        }
        let params = r.floats(dmc_core::tensor::param_count(&sizes), "parameters")?;
        nets.push(Mlp::from_params(&sizes, activation, params)?);
    }
    if nets.is_empty() {
        return Err(r.err(0, "no networks in file"));
    }
    Ok(nets)
}

pub fn save_networks(nets: &[&Mlp], path: &Path) -> Result<()> {
    write_file(path, &encode_networks(nets))
}

pub fn load_networks(path: &Path, activation: Activation) -> Result<Vec<Mlp>> {
    decode_networks(path, &read_file(path)?, activation)
}

/// Column names `s0.., a0.., r, ns0.., terminal`.
pub fn csv_header(state_dim: usize, action_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..state_dim).map(|i| format!("s{i}")).collect();
    h.extend((0..action_dim).map(|i| format!("a{i}")));
    h.push("r".into());
    h.extend((0..state_dim).map(|i| format!("ns{i}")));
    h.push("terminal".into());
    h
}

/// Writes a dataset as CSV. Floats use the shortest representation that
/// parses back to the same value, so export/import is lossless.
pub fn export_csv(ds: &TransitionDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(csv_header(ds.state_dim(), ds.action_dim())).map_err(|e| csv_io(path, e))?;
    for i in 0..ds.len() {
        w.write_record(ds.record(i).iter().map(|v| v.to_string())).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv { path: path.to_path_buf(), line, reason: format!("{other:?}") },
    }
}

/// Reads a CSV whose header follows [`csv_header`]; dimensions are inferred
/// from the header.
pub fn import_csv(path: &Path, origin: Origin) -> Result<TransitionDataset> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = rd.headers().map_err(|e| csv_io(path, e))?.iter().map(str::to_owned).collect();
    let state_dim = header.iter().filter(|h| h.starts_with('s')).count();
    let action_dim = header.iter().filter(|h| h.starts_with('a')).count();
    if state_dim == 0 || header != csv_header(state_dim, action_dim) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("header must be {}", csv_header(state_dim.max(1), action_dim).join(",")),
        });
    }
    let mut data = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Csv { path: path.to_path_buf(), line, reason: format!("{} fields, expected {}", rec.len(), header.len()) });
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                line,
                reason: format!("column {}: `{field}` is not a number", header[col]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv { path: path.to_path_buf(), line, reason: format!("column {}: non-finite value", header[col]) });
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Csv { path: path.to_path_buf(), line: 1, reason: "row count must be at least 1".into() });
    }
    Ok(TransitionDataset::from_records(state_dim, action_dim, data, origin)?)
}
