//! Versioned binary checkpoint: run config, weights, Adam moments and the
//! density normalization state. All numbers little-endian; reals as raw
//! f64 bits so a reload is exact.

use std::io::Write;
use std::path::Path;

use crate::codec::Codec;
use crate::density::NormalizationState;
use crate::nn::{AdamState, ParamStore, Tensor};

use super::config::RunConfig;
use super::HarnessError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub store: ParamStore,
    pub adam: AdamState,
    pub norm: NormalizationState,
    /// Completed epochs.
    pub epoch: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn reals(&mut self, t: &Tensor) {
        t.data.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.data.len() - self.pos < n {
            return Err(HarnessError::Model(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, HarnessError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| HarnessError::Model(format!("invalid UTF-8 near byte {}", self.pos)))
    }
    fn reals(&mut self, rows: usize, cols: usize) -> Result<Tensor, HarnessError> {
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<_, _>>()?;
        Ok(Tensor::new(rows, cols, data))
    }
}

impl Checkpoint {
    pub fn from_codec(
        run: &RunConfig,
        codec: &Codec,
        adam: &AdamState,
        norm: NormalizationState,
        epoch: u64,
    ) -> Self {
        let mut run = run.clone();
        run.model = codec.cfg.clone();
        Self {
            run,
            store: codec.store.clone(),
            adam: adam.clone(),
            norm,
            epoch,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.epoch);
        let kv = self.run.to_kv();
        w.u32(kv.len() as u32);
        for (k, v) in &kv {
            w.str(k);
            w.str(v);
        }
        w.u32(self.store.len() as u32);
        for p in self.store.iter() {
            w.str(&p.name);
            w.u32(p.value.rows() as u32);
            w.u32(p.value.cols() as u32);
            w.reals(&p.value);
        }
        let a = &self.adam;
        w.u64(a.step);
        for v in [a.beta1, a.beta2, a.eps, a.base_lr] {
            w.f64(v);
        }
        for (m, v) in a.m.iter().zip(&a.v) {
            w.reals(m);
            w.reals(v);
        }
        let n = &self.norm;
        w.f64(n.d_max);
        w.f64(n.m_max);
        w.f64(n.gamma);
        w.u64(n.t);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { data: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(HarnessError::Model("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(HarnessError::Model(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let epoch = r.u64()?;
        let mut kv = std::collections::BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            kv.insert(k, r.str()?);
        }
        let run = RunConfig::from_kv(&kv)?;
        let mut store = ParamStore::new();
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            shapes.push((rows, cols));
            store
                .add(name, r.reals(rows, cols)?)
                .map_err(|e| HarnessError::Model(e.to_string()))?;
        }
        let step = r.u64()?;
        let (beta1, beta2, eps, base_lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for &(rows, cols) in &shapes {
            m.push(r.reals(rows, cols)?);
            v.push(r.reals(rows, cols)?);
        }
        let norm = NormalizationState {
            d_max: r.f64()?,
            m_max: r.f64()?,
            gamma: r.f64()?,
            t: r.u64()?,
        };
        if r.pos != bytes.len() {
            return Err(HarnessError::Model(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            run,
            store,
            adam: AdamState {
                m,
                v,
                step,
                beta1,
                beta2,
                eps,
                base_lr,
            },
            norm,
            epoch,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// reader never observes a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile_in(dir, path)?;
        tmp.1.write_all(&self.to_bytes()).map_err(HarnessError::io(&tmp.0))?;
        tmp.1.sync_all().map_err(HarnessError::io(&tmp.0))?;
        drop(tmp.1);
        std::fs::rename(&tmp.0, path).map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn codec(&self) -> Result<Codec, HarnessError> {
        Codec::from_store(self.run.model.clone(), self.store.clone())
            .map_err(|e| HarnessError::Model(e.to_string()))
    }
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(std::path::PathBuf, std::fs::File), HarnessError> {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let f = std::fs::File::create(&tmp).map_err(HarnessError::io(&tmp))?;
    Ok((tmp, f))
}
