//! Binary checkpoints: magic bytes, format version, a JSON manifest, then
//! every tensor as little-endian `f64` in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::SplitScheme;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, ParamSet};
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"DGMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub seed: u64,
    pub epoch: usize,
    pub split: Option<SplitScheme>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn for_model(model: &Model, epoch: usize, split: Option<SplitScheme>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            dims: model.dims,
            seed: model.config.seed,
            epoch,
            split,
            tensors: model
                .params
                .iter()
                .map(|(name, a)| TensorEntry {
                    name: name.to_string(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for a in model.params.values() {
        for v in a.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save(path: &Path, model: &Model, epoch: usize, split: Option<SplitScheme>) -> Result<()> {
    let manifest = Manifest::for_model(model, epoch, split);
    write_checkpoint(BufWriter::new(File::create(path)?), model, &manifest)
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

/// Reads a checkpoint and rebuilds the model it describes. The manifest's
/// tensor list must match the layout implied by its configuration exactly.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, Manifest)> {
    let magic: [u8; 8] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(read_exact(&mut r, "manifest length")?);
    let mut json = Vec::new();
    (&mut r).take(len).read_to_end(&mut json)?;
    if json.len() as u64 != len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format_version != version {
        return Err(Error::Checkpoint("manifest version differs from header".into()));
    }
    let mut model = Model::new(manifest.config.clone(), manifest.dims, manifest.seed)?;
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(read_exact(&mut r, &entry.name)?));
        }
        loaded.push((entry.name.clone(), Array::new(entry.shape.clone(), data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", rest.len())));
    }
    model.params.assign(&ParamSet::from_entries(loaded))?;
    Ok((model, manifest))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut config = ModelConfig::default();
        config.edge_hidden = 4;
        let dims = ModelDims {
            node_dim: 3,
            graph_dim: 2,
            classes: 2,
        };
        Model::new(config, dims, 5).unwrap()
    }

    fn bytes(m: &Model, manifest: &Manifest) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, m, manifest).unwrap();
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        m.params.by_index_mut(0).data_mut()[0] = 0.123456789;
        let manifest = Manifest::for_model(&m, 7, Some(SplitScheme::Inductive));
        let (back, read_manifest) = read_checkpoint(&bytes(&m, &manifest)[..]).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(read_manifest, manifest);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &m, 7, None).unwrap();
        assert_eq!(load(&path).unwrap().0.params, m.params);
    }

    #[test]
    fn rejects_corrupt_or_mismatched_files() {
        let m = model();
        let manifest = Manifest::for_model(&m, 0, None);
        let good = bytes(&m, &manifest);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_checkpoint(&bad_magic[..]), Err(Error::Checkpoint(_))));

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(matches!(read_checkpoint(&bad_version[..]), Err(Error::Checkpoint(_))));

        assert!(read_checkpoint(&good[..good.len() - 8]).is_err());

        let mut wrong_shape = manifest.clone();
        wrong_shape.dims.classes = 3;
        assert!(read_checkpoint(&bytes(&m, &wrong_shape)[..]).is_err());

        let mut renamed = manifest;
        renamed.tensors[0].name = "other".into();
        assert!(read_checkpoint(&bytes(&m, &renamed)[..]).is_err());
    }
}
