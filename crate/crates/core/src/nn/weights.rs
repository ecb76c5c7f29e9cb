//! `WVNC1` weight container.
//!
//! ```text
//! header:  b"WVNC1" | variant u8 | num_classes u32 | layer_count u32
//! record:  layer u32 | role u8 | rank u8 | dims u32 × rank | values f32 × ∏dims
//! ```
//!
//! Integers and floats are little-endian. `variant` is 0 (with inception)
//! or 1 (without). `layer_count` and `layer` use depth-first layer
//! numbering, where inception sub-layers follow their nucleus. `role` is 0
//! for a weight and 1 for a bias. Records follow [`Model::params`] order and
//! run to end of file. The head kind is recovered from `layer_count`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{HeadKind, Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 5] = b"WVNC1";

pub fn write_weights<W: Write>(model: &Model<f32>, mut w: W) -> Result<()> {
    let variant = model.config().variant.ok_or_else(|| {
        Error::Weights("only the tabulated variants can be serialized".into())
    })?;
    let mut buf = Vec::with_capacity(16 + 4 * model.num_params());
    buf.extend_from_slice(MAGIC);
    buf.push(variant.tag());
    buf.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.config().flat_layer_count() as u32).to_le_bytes());
    for (info, tensor) in model.param_info().iter().zip(model.params()) {
        buf.extend_from_slice(&(info.layer as u32).to_le_bytes());
        buf.push(info.role.tag());
        buf.push(info.shape.len() as u8);
        for &d in &info.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Weights(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Weights(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Model<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Weights(format!("read failed: {e}")))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(5, "magic")? != MAGIC {
        return Err(Error::Weights("bad magic; not a WVNC1 file".into()));
    }
    let tag = c.u8("variant")?;
    let variant =
        Variant::from_tag(tag).ok_or_else(|| Error::Weights(format!("unknown variant tag {tag}")))?;
    let num_classes = c.u32("num_classes")? as usize;
    let layer_count = c.u32("layer count")? as usize;

    let config = [HeadKind::GlobalAverage, HeadKind::Dense]
        .into_iter()
        .filter_map(|head| ModelConfig::table1(variant, num_classes, head).ok())
        .find(|cfg| cfg.flat_layer_count() == layer_count)
        .ok_or_else(|| {
            Error::Weights(format!(
                "no {variant} architecture with {num_classes} classes has {layer_count} layers"
            ))
        })?;
    let mut model = Model::zeroed(config)?;
    let infos = model.param_info();
    let mut params = model.params_mut();
    for (i, (info, param)) in infos.iter().zip(params.iter_mut()).enumerate() {
        let layer = c.u32("record layer")? as usize;
        let role = c.u8("record role")?;
        let rank = c.u8("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("record dims")? as usize);
        }
        if layer != info.layer || role != info.role.tag() || shape != info.shape {
            return Err(Error::Weights(format!(
                "record {i}: found layer {layer} role {role} shape {shape:?}, \
                 expected layer {} role {} shape {:?}",
                info.layer,
                info.role.tag(),
                info.shape
            )));
        }
        let raw = c.take(4 * param.len(), "record values")?;
        for (dst, chunk) in param.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if !c.done() {
        return Err(Error::Weights(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.pos
        )));
    }
    drop(params);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(variant: Variant, classes: usize, head: HeadKind) {
        let model = Model::<f32>::build(variant, classes, head, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut first = Vec::new();
        write_weights(&model, &mut first).unwrap();
        let loaded = read_weights(first.as_slice()).unwrap();
        assert_eq!(loaded.config(), model.config());
        let mut second = Vec::new();
        write_weights(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn bit_exact_roundtrip() {
        roundtrip(Variant::WithInception, 10, HeadKind::GlobalAverage);
        roundtrip(Variant::WithoutInception, 3, HeadKind::GlobalAverage);
        roundtrip(Variant::WithoutInception, 5, HeadKind::Dense);
    }

    #[test]
    fn header_layout() {
        let model = Model::<f32>::build(
            Variant::WithoutInception,
            2,
            HeadKind::GlobalAverage,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_weights(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"WVNC1");
        assert_eq!(bytes[5], 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        let layers = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        assert_eq!(layers, model.config().layers.len());
        // first record: layer 0 weight [32, 1, 9]
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 0);
        assert_eq!(bytes[18], 0);
        assert_eq!(bytes[19], 3);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 32);
        let payload = bytes.len() - 14;
        let records: usize = model.param_info().iter().map(|i| 4 + 1 + 1 + 4 * i.shape.len()).sum();
        assert_eq!(payload, records + 4 * model.num_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Model::<f32>::build(
            Variant::WithoutInception,
            2,
            HeadKind::GlobalAverage,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let mut bytes = Vec::new();
        write_weights(&model, &mut bytes).unwrap();
        assert!(read_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_weights(extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_weights(bad.as_slice()).is_err());
        let mut bad = bytes;
        bad[5] = 7;
        assert!(read_weights(bad.as_slice()).is_err());
    }
}
