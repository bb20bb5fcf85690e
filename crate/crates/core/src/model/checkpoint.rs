//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CTCMIXCK" | u32 version | [u8; 32] SHA-256 of the config text
//! u64 config length | config text (UTF-8)
//! u64 tensor count
//! per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{ModelError, ModelParams, Network, NetworkConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTCMIXCK";
const VERSION: u32 = 1;

pub fn write_checkpoint(net: &Network) -> Vec<u8> {
    let text = net.config.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.config.digest());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(net.params.len() as u64).to_le_bytes());
    for (name, t) in net.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, ModelError> {
        usize::try_from(self.u64()?).map_err(|_| ModelError::Checkpoint("length overflow".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| bad("config is not UTF-8".into()))?;
    let config = NetworkConfig::from_text(text)?;
    if config.digest() != digest || config.to_text() != text {
        return Err(bad("config digest mismatch".into()));
    }
    let count = r.len()?;
    let mut named = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad(format!("{name}: shape overflow")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_named(&config, named)?;
    Network::new(config, params)
}

/// Writes to a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(path: &Path, net: &Network) -> std::io::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, write_checkpoint(net))?;
    fs::rename(&tmp, path)
}

pub fn load_checkpoint(path: &Path) -> Result<Network, ModelError> {
    let bytes = fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network {
        Network::init(NetworkConfig::tiny("abc"), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = write_checkpoint(&n);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, n);
        for (a, b) in back.params.tensors().iter().zip(n.params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = write_checkpoint(&net());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(read_checkpoint(&wrong_magic).is_err());
        let mut wrong_digest = bytes.clone();
        wrong_digest[12] ^= 1;
        assert!(read_checkpoint(&wrong_digest).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let n = net();
        save_checkpoint(&path, &n).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), n);
        let missing = dir.path().join("nope.ckpt");
        let err = load_checkpoint(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.ckpt"));
    }
}
