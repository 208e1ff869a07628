//! Binary model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SVEIL"  u32 version  u32 layer_count
//! per layer: u32 in_dim  u32 out_dim  u8 activation_tag
//!            f64 weights[out_dim * in_dim] (row-major)  f64 biases[out_dim]
//! ```
//!
//! Bundles that hold several networks plus JSON metadata use the `"SVEILPKG"`
//! magic followed by a version, the metadata, and each network as a full
//! container.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::activation::Activation;
use super::net::{DenseNet, Layer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SVEIL";
pub const BUNDLE_MAGIC: &[u8; 8] = b"SVEILPKG";
pub const FORMAT_VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_net<W: Write>(net: &DenseNet, w: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + net.param_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        buf.push(l.activation.tag());
        for v in l.weights.iter().chain(l.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_net<R: Read>(r: &mut R) -> Result<DenseNet> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io_err)?;
        let activation = Activation::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("unknown activation tag {}", tag[0])))?;
        let w = read_f64s(r, in_dim * out_dim)?;
        let b = read_f64s(r, out_dim)?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((out_dim, in_dim), w).map_err(|e| Error::Format(e.to_string()))?,
            bias: Array1::from(b),
            activation,
        });
    }
    DenseNet::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn net_to_bytes(net: &DenseNet) -> Vec<u8> {
    let mut out = Vec::new();
    write_net(net, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Writes a bundle of networks with a JSON metadata blob.
pub fn write_bundle<W: Write>(meta: &serde_json::Value, nets: &[&DenseNet], w: &mut W) -> Result<()> {
    let meta = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        write_net(net, &mut buf)?;
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_bundle<R: Read>(r: &mut R) -> Result<(serde_json::Value, Vec<DenseNet>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != BUNDLE_MAGIC {
        return Err(Error::Format("not a model bundle (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta).map_err(io_err)?;
    let meta = serde_json::from_slice(&meta)?;
    let count = read_u32(r)? as usize;
    let nets = (0..count).map(|_| read_net(r)).collect::<Result<Vec<_>>>()?;
    Ok((meta, nets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::LayerSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseNet::new(
            5,
            &[
                LayerSpec::new(4, Activation::Selu),
                LayerSpec::new(3, Activation::Tanh),
                LayerSpec::new(2, Activation::Softmax),
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = net_to_bytes(&sample(1));
        assert_eq!(&bytes[..5], b"SVEIL");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 4);
        assert_eq!(bytes[21], Activation::Selu.tag());
        let expected = 13 + (9 + 8 * (5 * 4 + 4)) + (9 + 8 * (4 * 3 + 3)) + (9 + 8 * (3 * 2 + 2));
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = net_to_bytes(&sample(2));
        bytes[5..9].copy_from_slice(&2u32.to_le_bytes());
        let err = read_net(&mut bytes.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let mut bytes = net_to_bytes(&sample(3));
        assert!(read_net(&mut &bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(read_net(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let a = sample(4);
        let b = sample(5);
        let meta = serde_json::json!({"kind": "test", "w": [1.0, 2.5]});
        let mut buf = Vec::new();
        write_bundle(&meta, &[&a, &b], &mut buf).unwrap();
        let (m, nets) = read_bundle(&mut buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(nets, vec![a, b]);
    }

    proptest! {
        #[test]
        fn container_round_trips_bit_exact(seed in any::<u64>()) {
            let net = sample(seed);
            let bytes = net_to_bytes(&net);
            let back = read_net(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(net_to_bytes(&back), bytes);
        }
    }
}
