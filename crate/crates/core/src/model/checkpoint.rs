//! Binary checkpoint: magic, `u32` answer-token offset, then one record per
//! parameter until end of file. A record is a `u32` name length, the UTF-8
//! name, a `u32` rank, `rank` `u32` dimensions and the `f64` payload, all
//! little-endian.

use std::path::Path;

use super::{Model, ModelDims, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VPLCK001";

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(model.dims.answer_token_offset as u32).to_le_bytes());
    for p in ParamId::ALL {
        let t = model.param(p);
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
    }
    let answer_token_offset = c.u32("header")?;
    let mut slots: Vec<Option<Tensor>> = vec![None; ParamId::ALL.len()];
    while c.pos < bytes.len() {
        let start = c.pos as u64;
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::format(path, start, "parameter name is not UTF-8"))?
            .to_string();
        let id = ParamId::from_name(&name)
            .ok_or_else(|| Error::format(path, start, format!("unknown parameter {name:?}")))?;
        if slots[id.index()].is_some() {
            return Err(Error::format(path, start, format!("duplicate parameter {name:?}")));
        }
        let rank = c.u32("rank")?;
        if rank > 2 {
            return Err(Error::format(path, start, format!("{name}: rank {rank} unsupported")));
        }
        let shape = (0..rank).map(|_| c.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload_at = c.pos as u64;
        let raw = c.take(n * 8, "payload")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(path, payload_at + 8 * i as u64, format!("{name}: non-finite value")));
        }
        slots[id.index()] = Some(Tensor::new(shape, data)?);
    }
    let mut params = Vec::with_capacity(slots.len());
    for (p, slot) in ParamId::ALL.iter().zip(slots) {
        params.push(slot.ok_or_else(|| {
            Error::format(path, bytes.len() as u64, format!("missing parameter {:?}", p.name()))
        })?);
    }
    let dim = |p: ParamId, axis: usize| params[p.index()].shape().get(axis).copied().unwrap_or(0);
    let dims = ModelDims {
        d_v: dim(ParamId::VisualWeight, 1),
        d_q: dim(ParamId::Embedding, 0),
        d_h: dim(ParamId::VisualWeight, 0),
        d_a: dim(ParamId::AttendVisual, 0),
        d_m: dim(ParamId::FuseVisual, 0),
        d_z: dim(ParamId::MuWeight, 0),
        vocab: dim(ParamId::Embedding, 1),
        answers: dim(ParamId::ClassifierWeight, 0),
        answer_token_offset,
    };
    Model::from_params(dims, params).map_err(|e| Error::format(path, 8, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> Model {
        let dims = ModelDims {
            d_v: 4,
            d_q: 4,
            d_h: 5,
            d_a: 3,
            d_m: 6,
            d_z: 2,
            vocab: 9,
            answers: 3,
            answer_token_offset: 6,
        };
        Model::init(dims, &mut rng::from_seed(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn corrupt_files_fail_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let mut nan = good.clone();
        let at = good.len() - 8;
        nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, &nan).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, at as u64),
            other => panic!("{other:?}"),
        }
    }
}
