//! Binary checkpoint container: a small JSON header (format version,
//! spec echo, init seed) followed by named little-endian `f64` tensors.
//! Round trips are bit-exact; loading rebuilds the network from the spec
//! echo and then overwrites every parameter and buffer by name.

use super::{AnyNetwork, NetworkError, NetworkSpec};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"WNC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("malformed header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("checkpoint entry {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint is missing entry {0}")]
    MissingEntry(String),
    #[error("checkpoint has unknown entry {0}")]
    UnknownEntry(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: NetworkSpec,
    seed: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_entry(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u32(w, d as u32)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_entry(r: &mut impl Read) -> std::io::Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((name, shape, data))
}

pub fn save_checkpoint(net: &AnyNetwork, path: &Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        spec: net.spec(),
        seed: net.init_seed(),
    })?;
    write_u32(&mut w, header.len() as u32)?;
    w.write_all(&header)?;

    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    net.for_each_param(&mut |name, t| {
        entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    net.for_each_buffer(&mut |name, b| {
        entries.push((name.to_string(), vec![b.len()], b.to_vec()));
    });
    write_u32(&mut w, entries.len() as u32)?;
    for (name, shape, data) in &entries {
        write_entry(&mut w, name, shape, data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyNetwork, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(header.format_version));
    }

    let n_entries = read_u32(&mut r)? as usize;
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_entries {
        let (name, shape, data) = read_entry(&mut r)?;
        entries.insert(name, (shape, data));
    }

    let mut net = AnyNetwork::init_from_spec(header.spec, header.seed)?;
    let mut fill_err: Option<CheckpointError> = None;
    net.for_each_param_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        match entries.remove(name) {
            Some((shape, data)) => {
                if shape != t.shape() {
                    fill_err = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        got: shape,
                    });
                    return;
                }
                *t = Tensor::new(shape, data);
            }
            None => fill_err = Some(CheckpointError::MissingEntry(name.to_string())),
        }
    });
    net.for_each_buffer_mut(&mut |name, b| {
        if fill_err.is_some() {
            return;
        }
        match entries.remove(name) {
            Some((shape, data)) => {
                if shape != [b.len()] {
                    fill_err = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: vec![b.len()],
                        got: shape,
                    });
                    return;
                }
                *b = data;
            }
            None => fill_err = Some(CheckpointError::MissingEntry(name.to_string())),
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if let Some(name) = entries.into_keys().next() {
        return Err(CheckpointError::UnknownEntry(name));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Mode, N1Network, N1Spec, N2Network, N2Spec, Scale};
    use crate::tensor::{Tape, Tensor};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_n1() -> N1Network {
        let spec = N1Spec {
            block_filters: [2, 2, 2, 2],
            f1_filters: 4,
            f2_filters: 4,
            f1_kernel_w: 1,
            num_classes: 3,
            embed_dim: 16,
            width_scale: Scale::ONE,
        };
        N1Network::init(spec, 99).unwrap()
    }

    #[test]
    fn n1_roundtrip_reproduces_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n1.wnck");
        let mut net = tiny_n1();
        // Nudge running stats away from init so buffers are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(
            vec![4, 16],
            (0..64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let fwd = net.forward(&mut tape, &bound, &x, Mode::Train).unwrap();
        net.apply_bn_updates(&fwd.bn_observed);

        let net = AnyNetwork::N1(net);
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let (orig, reload) = match (&net, &loaded) {
            (AnyNetwork::N1(a), AnyNetwork::N1(b)) => (a, b),
            _ => panic!("family changed across roundtrip"),
        };
        let mut t1 = Tape::new();
        let b1 = orig.bind(&mut t1);
        let o1 = orig.forward(&mut t1, &b1, &x, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let b2 = reload.bind(&mut t2);
        let o2 = reload.forward(&mut t2, &b2, &x, Mode::Eval).unwrap();
        assert_eq!(t1.data(o1.recording_out), t2.data(o2.recording_out));
        assert_eq!(t1.data(o1.segment_out), t2.data(o2.segment_out));
    }

    #[test]
    fn n2_roundtrip_preserves_params_and_salt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n2.wnck");
        let net = N2Network::init(N2Spec::new(4, 6), 1234).unwrap();
        let salt = net.dropout_salt();
        save_checkpoint(&AnyNetwork::N2(net.clone()), &path).unwrap();
        let loaded = match load_checkpoint(&path).unwrap() {
            AnyNetwork::N2(n) => n,
            _ => panic!("family changed"),
        };
        assert_eq!(loaded.dropout_salt(), salt);
        let mut orig_params = Vec::new();
        net.for_each_param(&mut |n, t| orig_params.push((n.to_string(), t.data().to_vec())));
        let mut loaded_params = Vec::new();
        loaded.for_each_param(&mut |n, t| loaded_params.push((n.to_string(), t.data().to_vec())));
        assert_eq!(orig_params, loaded_params);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.wnck");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
