use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{LmrlError, Result};
use crate::tensorcore::{ParamStore, Tensor};

use super::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LMRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter snapshot with the configuration that produced it. The stored
/// configuration has its paths emptied, so identical runs written to
/// different directories produce identical files.
///
/// Layout (little-endian): magic, u32 version, string hash, string config
/// JSON, u64 epoch, u32 metric count then `(string, f64)` pairs, u32 param
/// count then `(string, u32 rank, u32 dims…, f64 values…)`. Strings are a
/// u32 byte length followed by UTF-8. Values are stored as f64 so a reload
/// is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
        store: &ParamStore,
    ) -> Self {
        Checkpoint {
            config: config.without_paths(),
            config_hash: config.hash(),
            epoch,
            metrics,
            params: store
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model's parameter store and fills it from the snapshot.
    pub fn restore(&self) -> Result<ParamStore> {
        let gen = &self.config.gen;
        let mut store =
            self.config
                .model()
                .build(gen.seq_len, gen.embed_dim, self.config.init_seed())?;
        if store.len() != self.params.len() {
            return Err(LmrlError::Data(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            store.set(name, value.clone())?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        put_str(
            &mut out,
            &serde_json::to_string(&self.config).expect("config serializes"),
        );
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (k, v) in &self.metrics {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| LmrlError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| LmrlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LmrlError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| LmrlError::format(path, msg))
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let config_hash = r.string()?;
        let config: RunConfig = serde_json::from_str(&r.string()?).map_err(|e| e.to_string())?;
        if config.hash() != config_hash {
            return Err("stored configuration does not match its hash".into());
        }
        let epoch = r.u64()? as usize;
        let mut metrics = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            metrics.insert(k, r.f64()?);
        }
        let n_params = r.u32()?;
        let mut params = Vec::with_capacity(n_params as usize);
        for _ in 0..n_params {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data).map_err(|e| format!("parameter `{name}`: {e}"))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config,
            config_hash,
            epoch,
            metrics,
            params,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
