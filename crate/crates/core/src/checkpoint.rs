//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CNNF"  u32 version (= 1)
//! u32 len, architecture string (UTF-8)
//! u32 rank, rank × u32 input dims
//! u64 seed, u64 epochs completed
//! u32 layer count, then per layer:
//!     u32 tensor count, tensors (parameters, then running mean / variance)
//!     u64 batches folded into running statistics (0 without batch norm)
//! tensor = u32 rank, rank × u32 dims, numel × f64
//! ```

use std::path::Path;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::network::Network;
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CNNF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u32(t.dims().len(), "rank")?;
        for &d in t.dims() {
            self.u32(d, "dimension")?;
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated checkpoint: {what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn shape(&mut self, what: &str) -> Result<Shape> {
        let at = self.pos;
        let rank = self.u32(what)?;
        if rank > 4 {
            return Err(Error::Format(format!(
                "{what} at offset {at}: rank {rank} exceeds 4"
            )));
        }
        let dims = (0..rank)
            .map(|_| self.u32(what))
            .collect::<Result<Vec<_>>>()?;
        Shape::new(&dims).map_err(|e| Error::Format(format!("{what} at offset {at}: {e}")))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let shape = self.shape(what)?;
        let bytes = self.take(shape.numel().saturating_mul(8), what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_shape_vec(shape, data).unwrap_or_else(|_| unreachable!()))
    }
}

fn layer_tensors(layer: &Layer) -> Vec<&Tensor> {
    let mut out = layer.params();
    out.extend(layer.state());
    out
}

fn layer_tensors_mut(layer: &mut Layer) -> Vec<&mut Tensor> {
    match layer {
        Layer::BatchNorm(bn) => vec![
            &mut bn.gamma,
            &mut bn.beta,
            &mut bn.running_mean,
            &mut bn.running_var,
        ],
        other => other.params_mut(),
    }
}

pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize, "version")?;
    let arch = net.spec().to_string();
    w.u32(arch.len(), "architecture length")?;
    w.0.extend_from_slice(arch.as_bytes());
    let dims = net.input_shape().dims();
    w.u32(dims.len(), "rank")?;
    for &d in dims {
        w.u32(d, "dimension")?;
    }
    w.u64(meta.seed);
    w.u64(meta.epochs);
    w.u32(net.layers.len(), "layer count")?;
    for layer in &net.layers {
        let tensors = layer_tensors(layer);
        w.u32(tensors.len(), "tensor count")?;
        for t in tensors {
            w.tensor(t)?;
        }
        w.u64(match layer {
            Layer::BatchNorm(bn) => bn.batches_seen,
            _ => 0,
        });
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format(
            "not a checkpoint: bad magic at offset 0".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} at offset 4"
        )));
    }
    let len = r.u32("architecture length")?;
    let at = r.pos;
    let arch_text = std::str::from_utf8(r.take(len, "architecture")?)
        .map_err(|e| Error::Format(format!("architecture at offset {at}: {e}")))?;
    let arch: ArchSpec = arch_text
        .parse()
        .map_err(|e| Error::Format(format!("architecture at offset {at}: {e}")))?;
    let input = r.shape("input shape")?;
    let meta = CheckpointMeta {
        seed: r.u64("seed")?,
        epochs: r.u64("epochs")?,
    };
    let mut net = Network::build(&arch, &input, &mut SeededRng::new(0))
        .map_err(|e| Error::Format(format!("architecture does not fit input {input}: {e}")))?;
    let layers = r.u32("layer count")?;
    if layers != net.layers.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {layers} layers but the architecture has {}",
            net.layers.len()
        )));
    }
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let at = r.pos;
        let count = r.u32("tensor count")?;
        let mut slots = layer_tensors_mut(layer);
        if count != slots.len() {
            return Err(Error::Format(format!(
                "layer {i} at offset {at}: {count} tensors, expected {}",
                slots.len()
            )));
        }
        for (j, slot) in slots.iter_mut().enumerate() {
            let at = r.pos;
            let t = r.tensor("tensor")?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "layer {i} tensor {j} at offset {at}: shape {}, expected {}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        let seen = r.u64("batch counter")?;
        if let Layer::BatchNorm(bn) = layer {
            bn.batches_seen = seen;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok((net, meta))
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::from(e).context(path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::from(e).context(path.display()))?;
    decode_checkpoint(&bytes).map_err(|e| e.context(path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;

    fn trained_bn_net() -> Network {
        let arch: ArchSpec = "conv(f=3,k=2,p=1) relu bn pool(f=2,s=2) flatten dense(3)"
            .parse()
            .unwrap();
        let shape = Shape::new(&[6, 6, 1]).unwrap();
        let mut rng = SeededRng::new(4);
        let mut net = Network::build(&arch, &shape, &mut rng).unwrap();
        let batch: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&shape, 1.0, &mut rng))
            .collect();
        net.forward_batch(&batch, Mode::Train).unwrap();
        net.forward_batch(&batch[..2], Mode::Train).unwrap();
        net.clear_caches();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = trained_bn_net();
        let meta = CheckpointMeta { seed: 7, epochs: 3 };
        let bytes = encode_checkpoint(&net, &meta).unwrap();
        assert_eq!(&bytes[..4], b"CNNF");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        let (mut loaded, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(encode_checkpoint(&loaded, &m).unwrap(), bytes);

        let mut original = net.clone();
        let x = Tensor::randn(net.input_shape(), 1.0, &mut SeededRng::new(9));
        let a = original.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
        let Layer::BatchNorm(bn) = &loaded.layers[2] else {
            panic!()
        };
        assert_eq!(bn.batches_seen, 2);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode_checkpoint(&trained_bn_net(), &CheckpointMeta::default()).unwrap();
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = trained_bn_net();
        save_checkpoint(&net, &CheckpointMeta { seed: 1, epochs: 1 }, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec(), net.spec());
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }
}
