//! Binary dataset and checkpoint files.
//!
//! Dataset: `DRCY`, then little-endian `u32` version, grid `n` and sample
//! count, then for each sample the row-major `n×n` permeability followed by
//! the pressure, as `f64`. A JSON sidecar (`<file>.json`) carries the split,
//! the normalization statistics and the generator config.
//!
//! Checkpoint: `VBCK`, `u32` version, a length-prefixed JSON header, a `u32`
//! tensor count, then per tensor a length-prefixed name, `u32` rows and cols
//! and the row-major `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use villani_core::darcy::{DarcyField, NormStats, ParamGroup};

use crate::config::usage;

pub const DATASET_MAGIC: [u8; 4] = *b"DRCY";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            bail!("{} is truncated", self.what);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        b.copy_from_slice(self.take(4)?);
        Ok(u32::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut b = [0u8; 8];
        let mut raw = self.take(n.checked_mul(8).context("size overflow")?)?;
        let mut out = Vec::with_capacity(n);
        while !raw.is_empty() {
            b.copy_from_slice(&raw[..8]);
            out.push(f64::from_le_bytes(b));
            raw = &raw[8..];
        }
        Ok(out)
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).with_context(|| format!("{what} does not fit in u32"))
}

pub fn write_dataset(path: &Path, fields: &[DarcyField]) -> Result<()> {
    let n = fields.first().map(|f| f.n).unwrap_or(0);
    let mut out = Vec::with_capacity(16 + fields.len() * 16 * n * n);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(n, "grid")?.to_le_bytes());
    out.extend_from_slice(&u32_of(fields.len(), "count")?.to_le_bytes());
    for f in fields {
        if f.n != n {
            bail!("samples of different grid sizes");
        }
        put_f64s(&mut out, &f.a);
        put_f64s(&mut out, &f.u);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DarcyField>> {
    let bytes = read_input(path)?;
    let mut r = Reader {
        buf: &bytes,
        what: "dataset file",
    };
    if r.take(4).map_err(|_| usage("not a dataset file"))? != DATASET_MAGIC {
        return Err(usage(format!("{} is not a dataset file", path.display())));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(usage(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let a = r.f64s(n * n)?;
        let u = r.f64s(n * n)?;
        fields.push(DarcyField { n, a, u });
    }
    if !r.buf.is_empty() {
        bail!("dataset file has trailing bytes");
    }
    Ok(fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsRecord {
    pub a_mean: f64,
    pub a_std: f64,
    pub u_mean: f64,
    pub u_std: f64,
}

impl From<NormStats> for StatsRecord {
    fn from(s: NormStats) -> Self {
        Self {
            a_mean: s.a_mean,
            a_std: s.a_std,
            u_mean: s.u_mean,
            u_std: s.u_std,
        }
    }
}

impl From<StatsRecord> for NormStats {
    fn from(s: StatsRecord) -> Self {
        Self {
            a_mean: s.a_mean,
            a_std: s.a_std,
            u_mean: s.u_mean,
            u_std: s.u_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub format: String,
    pub version: u32,
    pub grid: usize,
    pub count: usize,
    /// The first `n_train` samples are the training split.
    pub n_train: usize,
    pub seed: u64,
    /// Training-split statistics.
    pub stats: StatsRecord,
    pub config: serde_json::Value,
}

pub fn sidecar_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_sidecar(dataset: &Path) -> Result<DatasetSidecar> {
    let p = sidecar_path(dataset);
    let text =
        fs::read_to_string(&p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid sidecar {}: {e}", p.display())))
}

pub fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::EmbedW => "embed_w",
        ParamGroup::EmbedB => "embed_b",
        ParamGroup::Conv1K => "conv1_k",
        ParamGroup::Conv1B => "conv1_b",
        ParamGroup::Conv2K => "conv2_k",
        ParamGroup::Conv2B => "conv2_b",
        ParamGroup::Pos => "pos",
        ParamGroup::Wq => "w_q",
        ParamGroup::Wk => "w_k",
        ParamGroup::Wv => "w_v",
        ParamGroup::Dec1W => "dec1_w",
        ParamGroup::Dec1B => "dec1_b",
        ParamGroup::Dec2W => "dec2_w",
        ParamGroup::Dec2B => "dec2_b",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<T: Serialize>(path: &Path, header: &T, tensors: &[Tensor]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(json.len(), "header")?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for t in tensors {
        if t.data.len() != t.rows * t.cols {
            bail!(
                "tensor {} has {} values for shape {}x{}",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            );
        }
        out.extend_from_slice(&u32_of(t.name.len(), "name")?.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&u32_of(t.rows, "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_of(t.cols, "cols")?.to_le_bytes());
        put_f64s(&mut out, &t.data);
    }
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        what: "checkpoint file",
    };
    if r.take(4).map_err(|_| usage("not a checkpoint file"))? != CHECKPOINT_MAGIC {
        return Err(usage(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(usage(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).context("tensor name is not UTF-8")?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s(rows * cols)?;
        tensors.push(Tensor {
            name,
            rows,
            cols,
            data,
        });
    }
    if !r.buf.is_empty() {
        bail!("checkpoint file has trailing bytes");
    }
    Ok((header, tensors))
}
