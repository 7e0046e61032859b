//! Named-tensor checkpoints.
//!
//! ```text
//! magic     4 bytes "ITCK"
//! version   u32
//! header    u64 byte length, then canonical JSON text
//! count     u32
//! tensor*   u32 name length, name bytes, u32 rank, rank x u64 dims,
//!           prod(dims) x f32
//! ```
//!
//! Everything little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PredictorConfig, PredictorParams};
use crate::baselines::PcaBasis;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const PCA_PREFIX: &str = "pca.";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Predictor {
        config: PredictorConfig,
        layers: usize,
        dim: usize,
    },
    Pca,
}

pub fn write_named_tensors(path: impl AsRef<Path>, header_json: &str, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(header_json.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.write_all(&buf).map_err(io)?;
    for (name, t) in tensors {
        buf.clear();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_named_tensors(path: impl AsRef<Path>) -> Result<(String, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = ByteReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let magic = input.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = input.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = input.u64()? as usize;
    let header = String::from_utf8(input.bytes(len)?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let count = input.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = input.u32()? as usize;
        let name = String::from_utf8(input.bytes(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = input.u32()? as usize;
        let shape = (0..rank).map(|_| input.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = input.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((header, tensors))
}

struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Corruption {
            offset: self.offset,
            detail: format!("checkpoint: {e}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(&b);
        Ok(u64::from_le_bytes(a))
    }
}

fn pca_tensors(basis: &PcaBasis) -> [(String, &Tensor); 3] {
    [
        (format!("{PCA_PREFIX}components"), &basis.components),
        (format!("{PCA_PREFIX}explained_variance"), &basis.explained_variance),
        (format!("{PCA_PREFIX}mean"), &basis.mean),
    ]
}

fn take_pca(map: &mut BTreeMap<String, Tensor>) -> Result<Option<PcaBasis>> {
    let keys = ["components", "explained_variance", "mean"].map(|k| format!("{PCA_PREFIX}{k}"));
    if !keys.iter().any(|k| map.contains_key(k)) {
        return Ok(None);
    }
    let mut take = |k: &String| {
        map.remove(k)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")))
    };
    Ok(Some(PcaBasis {
        components: take(&keys[0])?,
        explained_variance: take(&keys[1])?,
        mean: take(&keys[2])?,
    }))
}

pub fn save_predictor(path: impl AsRef<Path>, params: &PredictorParams) -> Result<()> {
    let header = serde_json::to_string(&Header::Predictor {
        config: params.config.clone(),
        layers: params.layers,
        dim: params.dim,
    })?;
    let mut list: Vec<(String, &Tensor)> = params.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(basis) = &params.pca {
        list.extend(pca_tensors(basis));
    }
    let refs: Vec<(&str, &Tensor)> = list.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    write_named_tensors(path, &header, &refs)
}

pub fn load_predictor(path: impl AsRef<Path>) -> Result<PredictorParams> {
    let (header, tensors) = read_named_tensors(path)?;
    let Header::Predictor { config, layers, dim } = serde_json::from_str(&header)? else {
        return Err(Error::Format("checkpoint does not hold a predictor".into()));
    };
    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let pca = take_pca(&mut map)?;
    Ok(PredictorParams {
        config,
        layers,
        dim,
        tensors: map,
        pca,
    })
}

pub fn save_pca(path: impl AsRef<Path>, basis: &PcaBasis) -> Result<()> {
    let header = serde_json::to_string(&Header::Pca)?;
    let list = pca_tensors(basis);
    let refs: Vec<(&str, &Tensor)> = list.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    write_named_tensors(path, &header, &refs)
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<PcaBasis> {
    let (header, tensors) = read_named_tensors(path)?;
    if !matches!(serde_json::from_str(&header)?, Header::Pca) {
        return Err(Error::Format("checkpoint does not hold a PCA basis".into()));
    }
    let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    take_pca(&mut map)?.ok_or_else(|| Error::Format("checkpoint lacks PCA tensors".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::fit_pca;
    use crate::predictor::{build_predictor, Architecture, InputSelector};

    #[test]
    fn predictor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let cfg = PredictorConfig::innerthoughts(4).with_seed(9);
        let p = build_predictor(&cfg, 6, 10).unwrap();
        save_predictor(&path, &p).unwrap();
        let q = load_predictor(&path).unwrap();
        assert_eq!(p, q);
        let bytes_a = std::fs::read(&path).unwrap();
        save_predictor(&path, &q).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());
    }

    #[test]
    fn pca_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..60).map(|i| ((i * 7) % 11) as f32).collect();
        let basis = fit_pca(&Tensor::matrix(10, 6, data).unwrap(), 3).unwrap();
        let path = dir.path().join("pca.ckpt");
        save_pca(&path, &basis).unwrap();
        assert_eq!(load_pca(&path).unwrap(), basis);
        assert!(load_predictor(&path).is_err());

        let cfg = PredictorConfig {
            pca_components: Some(3),
            ..PredictorConfig::new(Architecture::Logistic, InputSelector::LastK { k: 2 }, 4)
        };
        let mut p = build_predictor(&cfg, 4, 3).unwrap();
        p.pca = Some(basis);
        let path = dir.path().join("p.ckpt");
        save_predictor(&path, &p).unwrap();
        assert_eq!(load_predictor(&path).unwrap(), p);
    }
}
