//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic "PBN1" | version u32 | config-JSON length u32 + bytes |
//!   tensor count u32 | per tensor: name length u16 + UTF-8 name,
//!   rank u8, each dim u32, then the f32 payload.
//! Tensors are stored in ascending name order, so serialization is a
//! pure function of the weights and a round trip is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{PbanError, Result};
use crate::model::{verify_weights, NamedWeights, PBANConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PBN1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(weights: &NamedWeights<f32>, config: &PBANConfig) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_string(config)
        .map_err(|e| PbanError::Contract(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(cfg_json.len()).unwrap().to_le_bytes());
    out.extend_from_slice(cfg_json.as_bytes());
    out.extend_from_slice(&u32::try_from(weights.len()).unwrap().to_le_bytes());
    for (name, tensor) in weights.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| PbanError::Contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| PbanError::Contract(format!("tensor rank too large: {name}")))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| PbanError::Contract(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in tensor.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    weights: &NamedWeights<f32>,
    config: &PBANConfig,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(weights, config)?;
    fs::write(path, bytes).map_err(|e| PbanError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(PbanError::Decode(format!(
                "checkpoint truncated at byte {} while reading {what}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NamedWeights<f32>, PBANConfig)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(PbanError::Format(
            "not a model checkpoint (bad magic)".into(),
        ));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(PbanError::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = c.u32("config length")? as usize;
    let cfg_bytes = c.take(cfg_len, "config")?;
    let config: PBANConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| PbanError::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let count = c.u32("tensor count")? as usize;
    let mut weights = NamedWeights::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| PbanError::Decode("tensor name is not UTF-8".into()))?
            .to_string();
        if prev_name.as_deref() >= Some(name.as_str()) {
            return Err(PbanError::Format(format!(
                "tensor names out of order at \"{name}\""
            )));
        }
        let rank = c.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 4, "tensor data")?;
        let mut data = Vec::with_capacity(numel);
        for chunk in payload.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(PbanError::Decode(format!(
                    "non-finite value in tensor \"{name}\""
                )));
            }
            data.push(v);
        }
        weights.insert(name.clone(), Tensor::new(shape, data)?);
        prev_name = Some(name);
    }
    if c.pos != bytes.len() {
        return Err(PbanError::Decode(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - c.pos
        )));
    }
    verify_weights(&config, &weights)?;
    Ok((weights, config))
}

pub fn load_checkpoint(path: &Path) -> Result<(NamedWeights<f32>, PBANConfig)> {
    let bytes = fs::read(path).map_err(|e| PbanError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn micro_pair() -> (NamedWeights<f32>, PBANConfig) {
        let cfg = PBANConfig::micro();
        let weights = init_weights(&cfg, 7).unwrap();
        (weights, cfg)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (weights, cfg) = micro_pair();
        let bytes = encode_checkpoint(&weights, &cfg).unwrap();
        let (loaded, loaded_cfg) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let again = encode_checkpoint(&loaded, &loaded_cfg).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn loaded_tensors_match_exactly() {
        let (weights, cfg) = micro_pair();
        let bytes = encode_checkpoint(&weights, &cfg).unwrap();
        let (loaded, _) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded.len(), weights.len());
        for (name, tensor) in weights.iter() {
            assert_eq!(loaded.get(name).unwrap(), tensor, "{name}");
        }
    }

    #[test]
    fn truncation_anywhere_is_a_clean_error() {
        let (weights, cfg) = micro_pair();
        let bytes = encode_checkpoint(&weights, &cfg).unwrap();
        for cut in [0, 3, 4, 7, 8, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, PbanError::Decode(_) | PbanError::Format(_)),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let (weights, cfg) = micro_pair();
        let mut bytes = encode_checkpoint(&weights, &cfg).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PbanError::Format(_))
        ));
        bytes[0] = b'P';
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PbanError::Format(_))
        ));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let (mut weights, cfg) = micro_pair();
        let first = weights.iter().next().unwrap().0.clone();
        let t = weights.get(&first).unwrap();
        let mut data = t.as_slice().to_vec();
        data[0] = f32::NAN;
        let shape = t.shape().to_vec();
        weights.insert(first, Tensor::new(shape, data).unwrap());
        let bytes = encode_checkpoint(&weights, &cfg).unwrap();
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, PbanError::Decode(_)), "{err:?}");
    }

    #[test]
    fn missing_tensor_fails_verification() {
        let (weights, cfg) = micro_pair();
        let mut pruned = NamedWeights::new();
        for (name, t) in weights.iter().skip(1) {
            pruned.insert(name.clone(), t.clone());
        }
        // Rewrite the count so the container itself stays well-formed.
        let bytes = encode_checkpoint(&pruned, &cfg).unwrap();
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, PbanError::Data(_)), "{err:?}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let (weights, cfg) = micro_pair();
        let mut bytes = encode_checkpoint(&weights, &cfg).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PbanError::Decode(_))
        ));
    }

    #[test]
    fn save_and_load_through_the_filesystem() {
        let (weights, cfg) = micro_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pban");
        save_checkpoint(&weights, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.len(), weights.len());
    }
}
