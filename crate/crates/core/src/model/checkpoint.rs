//! Binary checkpoints.
//!
//! Layout (little-endian): magic `MSEG`, `u32` version, step, registry
//! length, `K`, feature channels `C`; the registry as `u32` class ids; then
//! every tensor as `u32` name length, name bytes, `u32` rank, `u32` dims and
//! the `f64` payload.

use std::fs;
use std::path::Path;

use super::{Conv2d, ExtractorConfig, Linear, ModelState, Params};
use crate::error::{Error, Result};
use crate::scenario::ClassId;

const MAGIC: &[u8; 4] = b"MSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, state.step);
    put_u32(&mut out, state.registry.len());
    put_u32(&mut out, state.num_unseen);
    put_u32(&mut out, state.config.feature_channels);
    for c in &state.registry {
        put_u32(&mut out, c.0 as usize);
    }
    for ((name, dims), data) in state.params.layout().into_iter().zip(state.params.tensors()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, dims.len());
        for d in dims {
            put_u32(&mut out, d);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn expect_dims(t: &Tensor, rank: usize) -> Result<()> {
    if t.dims.len() != rank {
        return Err(Error::format("checkpoint", format!("{} has rank {}, expected {rank}", t.name, t.dims.len())));
    }
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "missing MSEG header"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let step = r.u32()?;
    let reg_len = r.u32()?;
    let k = r.u32()?;
    let c = r.u32()?;
    let mut registry = Vec::with_capacity(reg_len);
    for _ in 0..reg_len {
        let id = r.u32()?;
        let id = u8::try_from(id).map_err(|_| Error::format("checkpoint", format!("class id {id} out of range")))?;
        registry.push(ClassId(id));
    }

    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let data = r
            .take(len.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }

    let mut extractor = Vec::new();
    let mut heads: [Option<Linear>; 2] = [None, None];
    let mut it = tensors.into_iter().peekable();
    while let Some(t) = it.next() {
        if let Some(rest) = t.name.strip_prefix("extractor.") {
            let layer = extractor.len();
            if rest != format!("{layer}.weight") {
                return Err(Error::format("checkpoint", format!("unexpected tensor {}", t.name)));
            }
            expect_dims(&t, 4)?;
            let bias = it
                .next()
                .filter(|b| b.name == format!("extractor.{layer}.bias"))
                .ok_or_else(|| Error::format("checkpoint", format!("missing extractor.{layer}.bias")))?;
            extractor.push(Conv2d {
                out_channels: t.dims[0],
                in_channels: t.dims[1],
                kernel: t.dims[2],
                weight: t.data,
                bias: bias.data,
            });
        } else {
            let slot = match t.name.as_str() {
                "dense.weight" => 0,
                "proposal.weight" => 1,
                other => return Err(Error::format("checkpoint", format!("unexpected tensor {other}"))),
            };
            expect_dims(&t, 2)?;
            let prefix = if slot == 0 { "dense" } else { "proposal" };
            let bias = it
                .next()
                .filter(|b| b.name == format!("{prefix}.bias"))
                .ok_or_else(|| Error::format("checkpoint", format!("missing {prefix}.bias")))?;
            heads[slot] = Some(Linear {
                out_dim: t.dims[0],
                in_dim: t.dims[1],
                weight: t.data,
                bias: bias.data,
            });
        }
    }
    let [Some(dense_head), Some(proposal_head)] = heads else {
        return Err(Error::format("checkpoint", "missing head tensors"));
    };
    let first = extractor
        .first()
        .ok_or_else(|| Error::format("checkpoint", "no extractor layers"))?;
    let config = ExtractorConfig {
        in_channels: first.in_channels,
        feature_channels: c,
        depth: extractor.len(),
        kernel_size: first.kernel,
    };
    for h in [&dense_head, &proposal_head] {
        if h.out_dim != reg_len + k || h.in_dim != c || h.bias.len() != h.out_dim {
            return Err(Error::format("checkpoint", "head shape disagrees with header"));
        }
    }
    if extractor.last().map(|l| l.out_channels) != Some(c) {
        return Err(Error::format("checkpoint", "extractor output differs from C"));
    }
    Ok(ModelState::from_parts(
        config,
        Params {
            extractor,
            dense_head,
            proposal_head,
        },
        registry,
        k,
        step >= 2,
        step,
    ))
}

pub fn write_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelState> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expand_head;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(step: usize) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(step as u64);
        let cfg = ExtractorConfig {
            in_channels: 3,
            feature_channels: 5,
            depth: 3,
            kernel_size: 3,
        };
        let s = ModelState::new(cfg, 3, 0.4, &mut rng).unwrap();
        let mut s = expand_head(&s, &[ClassId(4), ClassId(2)], 0.4, &mut rng).unwrap();
        s.step = step;
        s.frozen_extractor = step >= 2;
        s.params.dense_head.bias[1] = -0.0;
        s.params.proposal_head.bias[0] = f64::MIN_POSITIVE / 3.0;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for step in [1, 3] {
            let s = state(step);
            let bytes = checkpoint_bytes(&s);
            let back = parse_checkpoint(&bytes).unwrap();
            assert_eq!(checkpoint_bytes(&back), bytes);
            assert_eq!(back.registry(), s.registry());
            assert_eq!(back.frozen_extractor, s.frozen_extractor);
            assert_eq!(back.config, s.config);
            assert!(back.params.dense_head.bias[1].is_sign_negative());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint_bytes(&state(2));
        assert_eq!(&bytes[..4], b"MSEG");
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!([word(4), word(8), word(12), word(16), word(20)], [1, 2, 2, 3, 5]);
        assert_eq!([word(24), word(28)], [4, 2]);
    }

    #[test]
    fn rejects_truncation_and_garbage() {
        let bytes = checkpoint_bytes(&state(1));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse_checkpoint(b"XXXX").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(parse_checkpoint(&wrong_version).is_err());
    }
}
