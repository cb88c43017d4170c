//! `DFW1` weight files: the magic `DFW1`, then one record per parameter:
//! `u32` name length, UTF-8 name, `u8` dtype tag (0 = f32), `u32` rank,
//! `rank × u32` dims, raw data. All integers and floats little-endian.

use crate::error::{Result, TensorError};
use crate::layers::Param;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFW1";
const DTYPE_F32: u8 = 0;

pub fn save_weights(params: &[Param]) -> Vec<u8> {
    let mut out = Vec::from(&MAGIC[..]);
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F32);
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                TensorError::CorruptWeights(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes every record of a `DFW1` buffer. Parameters come back frozen.
pub fn parse_weights(bytes: &[u8]) -> Result<Vec<Param>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TensorError::CorruptWeights("missing DFW1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| TensorError::CorruptWeights("parameter name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(TensorError::CorruptWeights(format!(
                "{name}: unknown dtype tag {dtype}"
            )));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(TensorError::CorruptWeights(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| TensorError::CorruptWeights(format!("{name}: bad shape")))?;
        params.push(Param { name, tensor });
    }
    Ok(params)
}

/// Loads a `DFW1` buffer into an existing parameter list, checking that names
/// and shapes match one-to-one. `requires_grad` flags of the targets are kept.
pub fn load_weights(bytes: &[u8], into: &mut [Param]) -> Result<()> {
    let loaded = parse_weights(bytes)?;
    if loaded.len() != into.len() {
        return Err(TensorError::CorruptWeights(format!(
            "expected {} parameters, file has {}",
            into.len(),
            loaded.len()
        )));
    }
    for (src, dst) in loaded.iter().zip(into.iter()) {
        if src.name != dst.name || src.tensor.shape() != dst.tensor.shape() {
            return Err(TensorError::CorruptWeights(format!(
                "parameter {} {:?} does not match file record {} {:?}",
                dst.name,
                dst.tensor.shape(),
                src.name,
                src.tensor.shape()
            )));
        }
    }
    for (src, dst) in loaded.into_iter().zip(into.iter_mut()) {
        dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        dst.tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Activation, LayerSpec, Sequential};
    use rand::SeedableRng;

    fn net(seed: u64, hidden: usize) -> Sequential {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        Sequential::new(
            "net",
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    filters: 2,
                    kernel: 3,
                },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 32,
                    outputs: hidden,
                },
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_identical() {
        let a = net(1, 5);
        let bytes = save_weights(a.params());
        assert_eq!(&bytes[..4], b"DFW1");
        let mut b = net(2, 5);
        load_weights(&bytes, b.params_mut()).unwrap();
        assert_eq!(save_weights(b.params()), bytes);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = save_weights(net(1, 5).params());
        for cut in [0, 3, 7, bytes.len() - 1] {
            let mut b = net(2, 5);
            assert!(matches!(
                load_weights(&bytes[..cut], b.params_mut()),
                Err(TensorError::CorruptWeights(_))
            ));
        }
    }

    #[test]
    fn mismatched_architecture_names_parameter() {
        let bytes = save_weights(net(1, 5).params());
        let mut other = net(1, 6);
        match load_weights(&bytes, other.params_mut()) {
            Err(TensorError::CorruptWeights(msg)) => assert!(msg.contains("net.3.weight"), "{msg}"),
            r => panic!("expected CorruptWeights, got {r:?}"),
        }
    }
}
