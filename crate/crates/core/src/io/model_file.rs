//! `RSPW` toy-model weight files.
//!
//! ```text
//! "RSPW" | version u8
//! num_layers u32 | embed_dim u32 | hidden_dim u32 | num_heads u32
//! vocab_size u32 | max_seq_len u32 | seed u64
//! f32 tensors, row-major, in ToyModel::tensors() order
//! ```

use std::path::Path;

use super::binary::{dim_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::Result;
use crate::model::{ModelConfig, ToyModel};

pub const MAGIC: &[u8; 4] = b"RSPW";
pub const VERSION: u8 = 1;

pub fn encode_model(model: &ToyModel) -> Result<Vec<u8>> {
    model.validate()?;
    let c = &model.config;
    let mut w = ByteWriter::new();
    w.header(MAGIC, VERSION);
    for (v, what) in [
        (c.num_layers, "num_layers"),
        (c.embed_dim, "embed_dim"),
        (c.hidden_dim, "hidden_dim"),
        (c.num_heads, "num_heads"),
        (c.vocab_size, "vocab_size"),
        (c.max_seq_len, "max_seq_len"),
    ] {
        w.u32(dim_u32(v, what)?);
    }
    w.u64(c.seed);
    for t in model.tensors() {
        w.f32s(t);
    }
    Ok(w.into_bytes())
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<ToyModel> {
    let mut r = ByteReader::new(bytes, path);
    r.header(MAGIC, VERSION)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        num_layers: dims[0],
        embed_dim: dims[1],
        hidden_dim: dims[2],
        num_heads: dims[3],
        vocab_size: dims[4],
        max_seq_len: dims[5],
        seed: r.u64()?,
    };
    config.validate().map_err(|e| r.malformed(e.to_string()))?;
    let mut model = ToyModel::zeros(config);
    for t in model.tensors_mut() {
        let values = r.f32s(t.len())?;
        t.copy_from_slice(&values);
    }
    r.finish()?;
    Ok(model)
}

pub fn write_model(model: &ToyModel, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn read_model(path: &Path) -> Result<ToyModel> {
    decode_model(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            embed_dim: 4,
            hidden_dim: 6,
            num_heads: 2,
            vocab_size: 5,
            max_seq_len: 3,
            seed: 77,
        }
    }

    #[test]
    fn layout_and_size() {
        let m = ToyModel::random(tiny()).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"RSPW");
        let params: usize = m.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(bytes.len(), 5 + 24 + 8 + 4 * params);
        // first tensor is tok_emb row 0
        let first = f32::from_le_bytes(bytes[37..41].try_into().unwrap());
        assert_eq!(first, m.tok_emb.get(0, 0) as f32);
    }

    #[test]
    fn round_trip_after_narrowing() {
        let m = ToyModel::random(tiny()).unwrap();
        let p = Path::new("mem");
        let once = decode_model(&encode_model(&m).unwrap(), p).unwrap();
        let bytes = encode_model(&once).unwrap();
        assert_eq!(decode_model(&bytes, p).unwrap(), once);
        assert_eq!(
            encode_model(&decode_model(&bytes, p).unwrap()).unwrap(),
            bytes
        );
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let mut bytes = encode_model(&ToyModel::random(tiny()).unwrap()).unwrap();
        assert!(decode_model(&bytes[..bytes.len() - 2], p).is_err());
        let mut bad_cfg = bytes.clone();
        bad_cfg[9] = 3; // embed_dim 3 not divisible by 2 heads
        assert!(matches!(
            decode_model(&bad_cfg, p),
            Err(Error::Format { .. })
        ));
        bytes[1] = b'Q';
        assert!(matches!(
            decode_model(&bytes, p),
            Err(Error::BadMagic { .. })
        ));
    }
}
