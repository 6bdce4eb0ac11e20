//! Checkpoint serialization.
//!
//! Layout (all little-endian):
//! - magic bytes `FCKP`
//! - format version, u16
//! - number of network parameter arrays, u8
//! - each parameter array as: rank u8, dims u32 each, values f64 each
//!   (arrays come in weight/bias pairs per layer, in forward order)
//! - Adam state with the same array scheme: a rank-1 scalar block
//!   `[step_count, beta1, beta2, epsilon, learning_rate]`, then the first
//!   moments, then the second moments (shapes mirror the parameters).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::net::{DenseLayer, VelocityNet};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) => Err(Error::Checkpoint {
                offset: self.offset,
                message: format!("truncated while reading {what}: {e}"),
            }),
        }
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b, what)?;
        Ok(b[0])
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_array(&mut self, what: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.read_u8(what)?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(self.read_u32(what)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(self.read_f64(what)?);
        }
        Ok((dims, values))
    }
}

fn write_array<W: Write>(w: &mut W, dims: &[usize], values: &[f64]) -> Result<()> {
    w.write_all(&[dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Atomically write net parameters and optimizer state to `path`.
pub fn save_checkpoint(path: &Path, net: &VelocityNet, adam: &AdamState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let arrays = net.param_arrays();
        let shapes = net.param_shapes();
        w.write_all(&[arrays.len() as u8])?;
        for (shape, values) in shapes.iter().zip(&arrays) {
            write_array(&mut w, shape, values)?;
        }
        let scalars = [
            adam.step_count as f64,
            adam.beta1,
            adam.beta2,
            adam.epsilon,
            adam.learning_rate,
        ];
        write_array(&mut w, &[scalars.len()], &scalars)?;
        for (shape, values) in shapes.iter().zip(&adam.first_moment) {
            write_array(&mut w, shape, values)?;
        }
        for (shape, values) in shapes.iter().zip(&adam.second_moment) {
            write_array(&mut w, shape, values)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(VelocityNet, AdamState)> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: format!("bad magic bytes {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = r.read_u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let n_arrays = r.read_u8("array count")? as usize;
    if n_arrays == 0 || n_arrays % 2 != 0 {
        return Err(Error::Checkpoint {
            offset: 6,
            message: format!("parameter array count {n_arrays} must be a positive even number"),
        });
    }
    let mut layers = Vec::with_capacity(n_arrays / 2);
    let mut shapes = Vec::with_capacity(n_arrays);
    for l in 0..n_arrays / 2 {
        let start = r.offset;
        let (wdims, weight) = r.read_array("weight array")?;
        if wdims.len() != 2 {
            return Err(Error::Checkpoint {
                offset: start,
                message: format!("weight array of layer {l} has rank {}, expected 2", wdims.len()),
            });
        }
        let start = r.offset;
        let (bdims, bias) = r.read_array("bias array")?;
        if bdims.len() != 1 || bdims[0] != wdims[0] {
            return Err(Error::Checkpoint {
                offset: start,
                message: format!("bias array of layer {l} has shape {bdims:?}, expected [{}]", wdims[0]),
            });
        }
        shapes.push(wdims.clone());
        shapes.push(bdims);
        layers.push(DenseLayer {
            in_dim: wdims[1],
            out_dim: wdims[0],
            weight,
            bias,
        });
    }
    let net = VelocityNet::from_layers(layers).map_err(|e| Error::Checkpoint {
        offset: r.offset,
        message: format!("inconsistent layer shapes: {e}"),
    })?;

    let start = r.offset;
    let (sdims, scalars) = r.read_array("optimizer scalars")?;
    if sdims != [5] {
        return Err(Error::Checkpoint {
            offset: start,
            message: format!("optimizer scalar block has shape {sdims:?}, expected [5]"),
        });
    }
    let mut read_moments = |what: &str| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n_arrays);
        for expected in &shapes {
            let start = r.offset;
            let (dims, values) = r.read_array(what)?;
            if &dims != expected {
                return Err(Error::Checkpoint {
                    offset: start,
                    message: format!("{what} has shape {dims:?}, expected {expected:?}"),
                });
            }
            out.push(values);
        }
        Ok(out)
    };
    let first_moment = read_moments("first moment")?;
    let second_moment = read_moments("second moment")?;
    let adam = AdamState {
        first_moment,
        second_moment,
        step_count: scalars[0] as u64,
        beta1: scalars[1],
        beta2: scalars[2],
        epsilon: scalars[3],
        learning_rate: scalars[4],
    };
    Ok((net, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn sample_pair() -> (VelocityNet, AdamState) {
        let mut rng = rng_for(77, "ckpt", 0);
        let net = VelocityNet::new(3, 2, 4, 2, &mut rng);
        let mut adam = AdamState::new(&net, 0.01);
        adam.step_count = 42;
        adam.first_moment[0][1] = 0.5;
        adam.second_moment[2][0] = 0.25;
        (net, adam)
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        let (net, adam) = sample_pair();
        save_checkpoint(&path, &net, &adam).unwrap();
        let (net2, adam2) = load_checkpoint(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(adam, adam2);
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        let (net, adam) = sample_pair();
        save_checkpoint(&path, &net, &adam).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::Checkpoint { offset, message } => {
                assert!(offset <= cut as u64, "offset {offset} beyond cut {cut}");
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        let (net, adam) = sample_pair();
        save_checkpoint(&path, &net, &adam).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version low byte
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::Checkpoint { message, .. } => assert!(message.contains("version"), "{message}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fckp");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { offset: 0, .. }));
    }
}
