//! Binary checkpoints.
//!
//! ```text
//! "LATSE1"                 6 bytes
//! kind          u32        0 = network, 1 = class centers
//! n_dims        u32
//! dims          n_dims × u32
//! (network only) hidden activation u32, output activation u32, leaky slope f64
//! config tag    8 bytes    leading bytes of the run's config hash
//! values        f64 …      networks: per layer weights row-major then biases;
//!                          centers: K × d row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Activation, ClassifierWeights, NetParams, Topology};
use crate::error::{LatseError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LATSE1";

const KIND_NETWORK: u32 = 0;
const KIND_CENTERS: u32 = 1;

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Network(NetParams),
    Centers(ClassifierWeights),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn network_bytes(net: &NetParams, tag: [u8; 8]) -> Vec<u8> {
    let topo = &net.topology;
    let mut out = Vec::with_capacity(64 + 8 * topo.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, KIND_NETWORK);
    put_u32(&mut out, topo.dims.len() as u32);
    for &d in &topo.dims {
        put_u32(&mut out, d as u32);
    }
    put_u32(&mut out, topo.hidden.code());
    put_u32(&mut out, topo.output.code());
    put_f64(&mut out, topo.leaky_slope);
    out.extend_from_slice(&tag);
    for v in net.to_flat() {
        put_f64(&mut out, v);
    }
    out
}

pub fn centers_bytes(weights: &ClassifierWeights, tag: [u8; 8]) -> Vec<u8> {
    let (k, d) = weights.centers.dim();
    let mut out = Vec::with_capacity(40 + 8 * k * d);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, KIND_CENTERS);
    put_u32(&mut out, 2);
    put_u32(&mut out, k as u32);
    put_u32(&mut out, d as u32);
    out.extend_from_slice(&tag);
    for &v in weights.centers.iter() {
        put_f64(&mut out, v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes checkpoint bytes; returns the contents and the config tag.
pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<(Checkpoint, [u8; 8]), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(6)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let kind = r.u32()?;
    let n_dims = r.u32()? as usize;
    if n_dims > 64 {
        return Err(format!("implausible dim count {n_dims}"));
    }
    let dims = (0..n_dims)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let contents = match kind {
        KIND_NETWORK => {
            let hidden = Activation::from_code(r.u32()?).ok_or("unknown hidden activation")?;
            let output = Activation::from_code(r.u32()?).ok_or("unknown output activation")?;
            let leaky_slope = r.f64()?;
            let tag: [u8; 8] = r.take(8)?.try_into().unwrap();
            let topology = Topology {
                dims,
                hidden,
                output,
                leaky_slope,
            };
            let mut net = NetParams::zeros(topology).map_err(|e| e.to_string())?;
            let flat = (0..net.topology.num_params())
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            net.set_flat(&flat).map_err(|e| e.to_string())?;
            (Checkpoint::Network(net), tag)
        }
        KIND_CENTERS => {
            if dims.len() != 2 {
                return Err("centers need exactly two dims".into());
            }
            let tag: [u8; 8] = r.take(8)?.try_into().unwrap();
            let values = (0..dims[0] * dims[1])
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let centers = Array2::from_shape_vec((dims[0], dims[1]), values)
                .map_err(|e| e.to_string())?;
            (Checkpoint::Centers(ClassifierWeights { centers }), tag)
        }
        other => return Err(format!("unknown checkpoint kind {other}")),
    };
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(contents)
}

pub fn write_checkpoint(path: &Path, contents: &Checkpoint, tag: [u8; 8]) -> Result<()> {
    let bytes = match contents {
        Checkpoint::Network(net) => network_bytes(net, tag),
        Checkpoint::Centers(w) => centers_bytes(w, tag),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, [u8; 8])> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes).map_err(|reason| LatseError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn network_round_trip_is_bitwise(seed in any::<u64>(), hidden in 1usize..6, out in 1usize..4) {
            let net = NetParams::init(Topology::decoder(3, &[hidden], out), seed).unwrap();
            let bytes = network_bytes(&net, *b"abcdefgh");
            let (back, tag) = parse_checkpoint(&bytes).unwrap();
            prop_assert_eq!(tag, *b"abcdefgh");
            match back {
                Checkpoint::Network(n) => {
                    prop_assert_eq!(&n.topology, &net.topology);
                    let a: Vec<u64> = n.to_flat().iter().map(|v| v.to_bits()).collect();
                    let b: Vec<u64> = net.to_flat().iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(a, b);
                    prop_assert_eq!(network_bytes(&n, tag), bytes);
                }
                Checkpoint::Centers(_) => prop_assert!(false, "wrong kind"),
            }
        }
    }

    #[test]
    fn header_layout() {
        let net = NetParams::zeros(Topology::encoder(4, &[3], 2)).unwrap();
        let bytes = network_bytes(&net, [0; 8]);
        assert_eq!(&bytes[..6], b"LATSE1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 4);
        let header = 6 + 4 + 4 + 3 * 4 + 4 + 4 + 8 + 8;
        assert_eq!(bytes.len(), header + 8 * net.topology.num_params());
    }

    #[test]
    fn centers_round_trip() {
        let w = ClassifierWeights::init(5, 3, 1);
        let (back, _) = parse_checkpoint(&centers_bytes(&w, [1; 8])).unwrap();
        assert_eq!(back, Checkpoint::Centers(w));
    }

    #[test]
    fn corrupt_input() {
        let net = NetParams::zeros(Topology::encoder(2, &[], 2)).unwrap();
        let mut bytes = network_bytes(&net, [0; 8]);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(parse_checkpoint(&bytes).is_err());
    }
}
