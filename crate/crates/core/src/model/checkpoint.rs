//! Binary checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "RPGC" | version: u16 | kind: u8 | dim count: u32 | dims: u32 × count
//!        | [c_q: f64, only when kind has SQUASH_FLAG] | params: f64 × n
//! ```

use std::io::{Read, Write};

use super::{LambdaModel, ModelKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPGC";
pub const CHECKPOINT_VERSION: u16 = 1;
const SQUASH_FLAG: u8 = 0x80;

pub fn write_checkpoint<W: Write>(model: &LambdaModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mut tag = model.kind().tag();
    if model.squash().is_some() {
        tag |= SQUASH_FLAG;
    }
    w.write_all(&[tag])?;
    w.write_all(&(model.dims().len() as u32).to_le_bytes())?;
    for &d in model.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    if let Some(c) = model.squash() {
        w.write_all(&c.to_le_bytes())?;
    }
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LambdaModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let [tag] = read_array::<1, _>(&mut r)?;
    let kind = ModelKind::from_tag(tag & !SQUASH_FLAG)
        .ok_or_else(|| Error::Checkpoint(format!("unknown kind tag {tag}")))?;
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if count > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {count}")));
    }
    let dims = (0..count)
        .map(|_| read_array(&mut r).map(|b| u32::from_le_bytes(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let squash = if tag & SQUASH_FLAG != 0 {
        Some(f64::from_le_bytes(read_array(&mut r)?))
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated parameter block".into()));
    }
    let params = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LambdaModel::from_parts(kind, dims, squash, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn header_layout() {
        let mut model = LambdaModel::tabular(1, 2);
        model.params_mut().copy_from_slice(&[1.5, -0.0]);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut expect = b"RPGC".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        expect.extend_from_slice(&(-0.0f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn squashed_mlp_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = LambdaModel::mlp(&[5, 7, 3, 4])
            .unwrap()
            .with_squash(0.37)
            .init_uniform(&mut rng);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.kind(), model.kind());
        assert_eq!(back.dims(), model.dims());
        assert_eq!(back.squash().map(f64::to_bits), Some(0.37f64.to_bits()));
        let bits = |m: &LambdaModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&model));
    }

    #[test]
    fn rejects_corruption() {
        let model = LambdaModel::linear(2, 2);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 8]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        let mut bad = buf;
        bad[4] = 9;
        assert!(read_checkpoint(&bad[..]).is_err());
    }
}
