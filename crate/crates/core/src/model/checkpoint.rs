//! Checkpoint container: `"DFQC"`, version byte, little-endian `u32` header
//! length, JSON header, then the tensors listed in the header in the numerics
//! tensor format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerParams, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor, DType};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DFQC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// `"fp"` or `"quantized"`.
    pub kind: String,
    pub spec: ModelSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub tensors: Vec<String>,
    /// Section-specific metadata (quantizer settings for quantized checkpoints).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(w: &mut W, header: &CheckpointHeader, tensors: &[&Tensor]) -> Result<()> {
    if header.tensors.len() != tensors.len() {
        return Err(Error::Format(format!(
            "header lists {} tensors, {} given",
            header.tensors.len(),
            tensors.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut b = [0u8; 5];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if b[0] != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", b[0])));
    }
    let len = u32::from_le_bytes([b[1], b[2], b[3], b[4]]) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.spec.spec_hash() != header.spec_hash {
        return Err(Error::Format("checkpoint spec hash does not match its spec".into()));
    }
    let tensors = header.tensors.iter().map(|_| read_tensor(r)).collect::<Result<Vec<_>>>()?;
    Ok((header, tensors))
}

fn layer_names(n: usize) -> Vec<String> {
    (0..n).flat_map(|i| [format!("block{i}.weight"), format!("block{i}.bias")]).collect()
}

pub fn fp_header(params: &ModelParams, seed: u64) -> CheckpointHeader {
    CheckpointHeader {
        kind: "fp".into(),
        spec: params.spec.clone(),
        spec_hash: params.spec.spec_hash(),
        seed,
        tensors: layer_names(params.layers.len()),
        extra: serde_json::Value::Null,
    }
}

pub fn layer_tensors(params: &ModelParams) -> Vec<&Tensor> {
    params.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

/// Rebuilds model parameters from the leading layer tensors of a checkpoint.
pub fn params_from_tensors(spec: &ModelSpec, tensors: &[Tensor]) -> Result<ModelParams> {
    let mut params = ModelParams::init(spec)?;
    let n = params.layers.len();
    if tensors.len() < 2 * n {
        return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", tensors.len(), 2 * n)));
    }
    for (i, l) in params.layers.iter_mut().enumerate() {
        let (w, b) = (&tensors[2 * i], &tensors[2 * i + 1]);
        if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
            return Err(Error::Format(format!("block {i}: tensor shapes do not match the model spec")));
        }
        *l = LayerParams { weight: w.clone(), bias: b.clone() };
    }
    if !params.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite values".into()));
    }
    params.frozen = true;
    Ok(params)
}

pub fn save_model(path: &Path, params: &ModelParams, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &fp_header(params, seed), &layer_tensors(params))?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, tensors) = read_checkpoint(&mut r)?;
    let params = params_from_tensors(&header.spec, &tensors)?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.ckpt");
        let mut p = ModelParams::init(&ModelSpec::default()).unwrap();
        p.frozen = true;
        save_model(&path, &p, 17).unwrap();
        let (q, header) = load_model(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(header.seed, 17);
        assert_eq!(header.kind, "fp");
    }

    #[test]
    fn tampered_spec_is_rejected() {
        let p = ModelParams::init(&ModelSpec::default()).unwrap();
        let mut header = fp_header(&p, 1);
        header.spec_hash = "00".into();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &header, &layer_tensors(&p)).unwrap();
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
        assert!(read_checkpoint(&mut &b"DFQX"[..]).is_err());
    }
}
