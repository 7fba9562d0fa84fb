use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_sequence, CycleAnnotations, GenConfig, LabeledSequence};
use crate::error::{LmrlError, Result};
use crate::seed;
use crate::tensorcore::Tensor;

const EMBED_MAGIC: &[u8; 4] = b"LMRL";

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// `LMRL` magic, `u32` rows, `u32` columns, then row-major `f32` values, all
/// little-endian.
pub fn write_embeddings(path: &Path, x: &Tensor) -> Result<()> {
    let (n, c) = x.dims2()?;
    let mut buf = Vec::with_capacity(12 + 4 * n * c);
    buf.extend_from_slice(EMBED_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| LmrlError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| LmrlError::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != EMBED_MAGIC {
        return Err(LmrlError::format(path, "missing LMRL embedding header"));
    }
    let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap()) as usize;
    let (n, c) = (word(4), word(8));
    if n == 0 || c == 0 || buf.len() != 12 + 4 * n * c {
        return Err(LmrlError::format(
            path,
            format!(
                "header declares {n}x{c} but payload has {} bytes",
                buf.len() - 12
            ),
        ));
    }
    let data = buf[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(n, c, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub id: String,
    pub count: usize,
    pub cycles: Vec<[usize; 2]>,
}

impl AnnotationFile {
    pub fn from_sequence(seq: &LabeledSequence) -> Self {
        AnnotationFile {
            id: seq.id.clone(),
            count: seq.annotations.count(),
            cycles: seq
                .annotations
                .cycles()
                .iter()
                .map(|&(s, e)| [s, e])
                .collect(),
        }
    }
}

pub fn write_annotations(path: &Path, ann: &AnnotationFile) -> Result<()> {
    let text = serde_json::to_string(ann).expect("annotation serializes");
    fs::write(path, text).map_err(|e| LmrlError::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| LmrlError::io(path, e))?;
    let ann: AnnotationFile =
        serde_json::from_str(&text).map_err(|e| LmrlError::format(path, e.to_string()))?;
    if ann.count != ann.cycles.len() {
        return Err(LmrlError::format(
            path,
            format!(
                "count {} disagrees with {} cycles",
                ann.count,
                ann.cycles.len()
            ),
        ));
    }
    Ok(ann)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub embeddings: String,
    pub annotations: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub gen: GenConfig,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
    pub total_count: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every split under `out_dir/<split>/` plus `out_dir/manifest.json`.
pub fn generate_dataset(
    cfg: &GenConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let mut splits = BTreeMap::new();
    let mut total_count = 0;
    for (split, size) in SPLITS.into_iter().zip([n_train, n_val, n_test]) {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| LmrlError::io(&dir, e))?;
        let mut entries = Vec::with_capacity(size);
        for i in 0..size {
            let mut seq = generate_sequence(cfg, seed::derive_seed(cfg.seed, split, i as u64))?;
            seq.id = format!("{split}_{i:04}");
            let emb = format!("{split}/{}.bin", seq.id);
            let ann = format!("{split}/{}.json", seq.id);
            write_embeddings(&out_dir.join(&emb), &seq.embeddings)?;
            write_annotations(&out_dir.join(&ann), &AnnotationFile::from_sequence(&seq))?;
            total_count += seq.annotations.count();
            entries.push(ManifestEntry {
                id: seq.id,
                embeddings: emb,
                annotations: ann,
                count: seq.annotations.count(),
            });
        }
        splits.insert(split.to_string(), entries);
    }
    let manifest = Manifest {
        gen: cfg.clone(),
        splits,
        total_count,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| LmrlError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LmrlError::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| LmrlError::format(&path, e.to_string()))?;
    let listed: usize = manifest.splits.values().flatten().map(|e| e.count).sum();
    if listed != manifest.total_count {
        return Err(LmrlError::format(
            &path,
            format!(
                "total_count {} but entries sum to {listed}",
                manifest.total_count
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_sequence(data_dir: &Path, entry: &ManifestEntry) -> Result<LabeledSequence> {
    let emb_path = data_dir.join(&entry.embeddings);
    let ann_path = data_dir.join(&entry.annotations);
    let embeddings = read_embeddings(&emb_path)?;
    let ann = read_annotations(&ann_path)?;
    if ann.count != entry.count {
        return Err(LmrlError::format(
            &ann_path,
            format!(
                "count {} disagrees with manifest count {}",
                ann.count, entry.count
            ),
        ));
    }
    let n = embeddings.shape()[0];
    let annotations = CycleAnnotations::new(ann.cycles.iter().map(|c| (c[0], c[1])).collect(), n)
        .map_err(|e| LmrlError::format(&ann_path, e.to_string()))?;
    Ok(LabeledSequence {
        id: ann.id,
        embeddings,
        annotations,
    })
}

pub fn load_split(
    data_dir: &Path,
    manifest: &Manifest,
    split: &str,
) -> Result<Vec<LabeledSequence>> {
    let entries = manifest.splits.get(split).ok_or_else(|| {
        LmrlError::Data(format!(
            "split `{split}` not in {}",
            data_dir.join(MANIFEST_FILE).display()
        ))
    })?;
    entries.iter().map(|e| load_sequence(data_dir, e)).collect()
}
