//! Model files: one JSON header line followed by little-endian parameter blobs
//! in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, MiniVgg, MiniVggSpec, NnError, Precision, Scalar};

const FORMAT: &str = "gazelens-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub spec: MiniVggSpec,
    pub epochs_trained: usize,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

fn tensor_entries<S: Scalar>(model: &MiniVgg<S>) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    for (i, layer) in model.net.layers.iter().enumerate() {
        for (j, p) in layer.params().into_iter().enumerate() {
            let kind = if j == 0 { "weight" } else { "bias" };
            out.push(TensorEntry {
                name: format!("layer{i}.{kind}"),
                shape: p.shape().to_vec(),
            });
        }
    }
    out
}

pub fn save_checkpoint<S: Scalar>(model: &MiniVgg<S>, path: &Path) -> Result<(), NnError> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        precision: S::PRECISION,
        spec: model.spec.clone(),
        epochs_trained: model.epochs_trained,
        layers: model.net.specs(),
        tensors: tensor_entries(model),
    };
    let mut buf = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    buf.push(b'\n');
    for p in model.net.params() {
        for &v in p.data() {
            v.write_le(&mut buf);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader, NnError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from<R: BufRead>(r: &mut R) -> Result<CheckpointHeader, NnError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::HeaderMismatch(format!("unreadable header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(NnError::HeaderMismatch(format!(
            "expected {FORMAT} v{VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<MiniVgg<S>, NnError> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let header = read_header_from(&mut r)?;
    if header.precision != S::PRECISION {
        return Err(NnError::HeaderMismatch(format!(
            "checkpoint holds {} parameters, caller requested {}",
            header.precision.as_str(),
            S::PRECISION.as_str()
        )));
    }
    let mut model = MiniVgg::<S>::zeroed(header.spec.clone()).map_err(|e| NnError::HeaderMismatch(e.to_string()))?;
    if header.layers != model.net.specs() {
        return Err(NnError::HeaderMismatch("layer list does not match the architecture".into()));
    }
    let want = tensor_entries(&model);
    if header.tensors != want {
        let bad = header
            .tensors
            .iter()
            .zip(&want)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} has shape {:?}, architecture needs {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| format!("{} tensors listed, architecture has {}", header.tensors.len(), want.len()));
        return Err(NnError::HeaderMismatch(bad));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = want.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if blob.len() != total * S::BYTES {
        return Err(NnError::HeaderMismatch(format!(
            "payload is {} bytes, header implies {}",
            blob.len(),
            total * S::BYTES
        )));
    }
    let mut chunks = blob.chunks_exact(S::BYTES);
    for p in model.net.params_mut() {
        for v in p.data_mut() {
            *v = S::read_le(chunks.next().expect("length checked above"));
        }
    }
    model.epochs_trained = header.epochs_trained;
    Ok(model)
}
