//! Parameter checkpoints in a simple versioned binary format.
//!
//! Layout: 8-byte magic `NNPARAM1`, u32 layer count, then per layer a u8
//! kind tag and u32 parameter count followed by each parameter's u32 row
//! and column counts and raw little-endian f64 values. Loading writes into
//! an existing network and verifies the layout matches.

use super::{Layer, Network};
use std::io::{Read, Write};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"NNPARAM1";

#[derive(Debug, Error)]
pub enum NetIoError {
    #[error("bad magic at offset 0: expected {expected:?}, got {got:?}")]
    BadMagic { expected: String, got: String },
    #[error("layer {layer}: kind tag {got} does not match network ({want})")]
    KindMismatch { layer: usize, got: u8, want: u8 },
    #[error("layer count {got} does not match network ({want})")]
    LayerCount { got: u32, want: u32 },
    #[error("layer {layer} param {param}: shape {got:?} does not match {want:?}")]
    ShapeMismatch {
        layer: usize,
        param: usize,
        got: (u32, u32),
        want: (u32, u32),
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn layer_params(layer: &Layer) -> Vec<&crate::linalg::Tensor> {
    match layer {
        Layer::Dense(l) => vec![&l.w, &l.b],
        Layer::Conv2d(l) => vec![&l.w, &l.b],
        _ => vec![],
    }
}

pub fn save_params(net: &Network, w: &mut impl Write) -> Result<(), NetIoError> {
    w.write_all(MAGIC)?;
    write_u32(w, net.layers.len() as u32)?;
    for layer in &net.layers {
        w.write_all(&[layer.kind_tag()])?;
        let params = layer_params(layer);
        write_u32(w, params.len() as u32)?;
        for p in params {
            write_u32(w, p.rows() as u32)?;
            write_u32(w, p.cols() as u32)?;
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_params_into(net: &mut Network, r: &mut impl Read) -> Result<(), NetIoError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetIoError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            got: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let count = read_u32(r)?;
    if count as usize != net.layers.len() {
        return Err(NetIoError::LayerCount {
            got: count,
            want: net.layers.len() as u32,
        });
    }
    for (li, layer) in net.layers.iter_mut().enumerate() {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        if tag[0] != layer.kind_tag() {
            return Err(NetIoError::KindMismatch {
                layer: li,
                got: tag[0],
                want: layer.kind_tag(),
            });
        }
        let n_params = read_u32(r)? as usize;
        let mut incoming = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let rows = read_u32(r)?;
            let cols = read_u32(r)?;
            let mut data = vec![0.0; rows as usize * cols as usize];
            for v in &mut data {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            incoming.push((rows, cols, data));
        }
        let mut pi = 0usize;
        let mut err = None;
        layer.visit_params(&mut |p, _| {
            if err.is_some() {
                return;
            }
            let (rows, cols, data) = &incoming[pi];
            if (p.rows() as u32, p.cols() as u32) != (*rows, *cols) {
                err = Some(NetIoError::ShapeMismatch {
                    layer: li,
                    param: pi,
                    got: (*rows, *cols),
                    want: (p.rows() as u32, p.cols() as u32),
                });
            } else {
                p.data_mut().copy_from_slice(data);
            }
            pi += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Conv2d, Dense, Relu};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn sample_net(seed: u64) -> Network {
        let mut rng = StdRng::seed_from_u64(seed);
        Network::new(vec![
            Layer::Conv2d(Conv2d::new(1, 2, 3, 5, 5, &mut rng)),
            Layer::Relu(Relu::default()),
            Layer::Dense(Dense::new(2 * 3 * 3, 4, &mut rng)),
        ])
    }

    #[test]
    fn save_load_round_trip() {
        let net = sample_net(1);
        let mut buf = Vec::new();
        save_params(&net, &mut buf).unwrap();
        let mut other = sample_net(2);
        load_params_into(&mut other, &mut buf.as_slice()).unwrap();
        assert_eq!(net.param_snapshot(), other.param_snapshot());
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut buf = Vec::new();
        save_params(&sample_net(1), &mut buf).unwrap();
        buf[0] = b'X';
        let mut net = sample_net(1);
        assert!(matches!(
            load_params_into(&mut net, &mut buf.as_slice()),
            Err(NetIoError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_stream_is_reported() {
        let mut buf = Vec::new();
        save_params(&sample_net(1), &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let mut net = sample_net(1);
        assert!(matches!(
            load_params_into(&mut net, &mut buf.as_slice()),
            Err(NetIoError::Io(_))
        ));
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let mut rng = StdRng::seed_from_u64(3);
        let small = Network::new(vec![Layer::Dense(Dense::new(3, 2, &mut rng))]);
        let mut buf = Vec::new();
        save_params(&small, &mut buf).unwrap();
        let mut other = sample_net(1);
        assert!(load_params_into(&mut other, &mut buf.as_slice()).is_err());
    }
}
