//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "EPICKPT\0"
//! version   u32 LE
//! n_nets    u32 LE
//! per net:  name_len u32, name (utf-8), n_widths u32, widths u32 * n_widths,
//!           activation codes u8 * (n_widths - 1), n_params u64
//! payload   f64 LE parameters, nets in header order
//! checksum  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Activation, DenseNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EPICKPT\0";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// A network with the name it is stored under.
pub type NamedNet = (String, DenseNet);

pub fn encode_checkpoint(nets: &[(&str, &DenseNet)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for (name, net) in nets {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(net.widths().len() as u32).to_le_bytes());
        for &w in net.widths() {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend(net.activations().iter().map(|a| a.code()));
        out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    }
    for (_, net) in nets {
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedNet>> {
    if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body)[..] != *checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_nets = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("network name is not utf-8".into()))?
            .to_string();
        let n_widths = r.u32()? as usize;
        if n_widths < 2 {
            return Err(Error::Checkpoint(format!("network {name} has {n_widths} widths")));
        }
        let widths = (0..n_widths)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let activations = r
            .take(n_widths - 1)?
            .iter()
            .map(|&c| Activation::from_code(c).ok_or_else(|| Error::Checkpoint(format!("bad activation code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        let n_params = r.u64()? as usize;
        if n_params != DenseNet::param_count_for(&widths) {
            return Err(Error::Checkpoint(format!("network {name}: parameter count does not match shape")));
        }
        shapes.push((name, widths, activations));
    }
    let mut nets = Vec::with_capacity(n_nets);
    for (name, widths, activations) in shapes {
        let mut net = DenseNet::with_activations(&widths, &activations)?;
        for p in net.params_mut() {
            *p = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
        nets.push((name, net));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok(nets)
}

pub fn save_checkpoint(path: &Path, nets: &[(&str, &DenseNet)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(nets))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedNet>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::EpiRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(widths in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let mut a = DenseNet::new(&widths, Activation::Tanh).unwrap();
            a.init_uniform(&mut EpiRng::seed_from_u64(seed));
            let mut b = DenseNet::new(&[2, 3], Activation::Relu).unwrap();
            b.params_mut()[0] = f64::MIN_POSITIVE;
            let bytes = encode_checkpoint(&[("a", &a), ("policy0", &b)]);
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "a");
            prop_assert_eq!(&back[0].1, &a);
            prop_assert_eq!(&back[1].1, &b);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let net = DenseNet::new(&[2, 2], Activation::Linear).unwrap();
        let mut bytes = encode_checkpoint(&[("n", &net)]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode_checkpoint(b"garbage").is_err());
    }
}
