//! Binary checkpoints:
//!
//! ```text
//! "BKNET1\0"
//! parameter count                          u64 LE
//! per parameter: name length, name (UTF-8), rank, dims   u64 LE
//! values, row-major                        f64 LE
//! FNV-1a-64 of the value bytes             u64 LE
//! ```
//!
//! The network configuration is recovered from the parameter shapes. A
//! feature scale, when present, follows the parameters as two vector
//! entries named `feature_scale.dx_tilde` and `feature_scale.dx_hat`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use nalgebra::DVector;

use super::network::{FeatureScale, GainNetwork, GainShape, NetworkConfig};
use crate::datagen::fnv1a;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"BKNET1\0";
const MAGIC_STEM: &[u8; 5] = b"BKNET";
const SCALE_TILDE: &str = "feature_scale.dx_tilde";
const SCALE_HAT: &str = "feature_scale.dx_hat";

pub fn encode_checkpoint(net: &GainNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let word = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
    let scale = net.feature_scale();
    let extra: Vec<(&str, &DVector<f64>)> = scale
        .map(|s| vec![(SCALE_TILDE, &s.dx_tilde), (SCALE_HAT, &s.dx_hat)])
        .unwrap_or_default();
    word(&mut out, (net.params.len() + extra.len()) as u64);
    let header = |out: &mut Vec<u8>, name: &str, dims: Vec<usize>| {
        word(out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        word(out, dims.len() as u64);
        for d in dims {
            word(out, d as u64);
        }
    };
    for p in &net.params.items {
        header(&mut out, &p.name, p.dims());
    }
    for (name, v) in &extra {
        header(&mut out, name, vec![v.len()]);
    }
    let start = out.len();
    for p in &net.params.items {
        for r in 0..p.value.nrows() {
            for c in 0..p.value.ncols() {
                out.extend_from_slice(&p.value[(r, c)].to_le_bytes());
            }
        }
    }
    for (_, v) in &extra {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = fnv1a(&out[start..]);
    word(&mut out, sum);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checksum("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn word(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dims: Vec<usize>,
}

fn dims_of(entries: &[Entry], name: &str) -> Result<Vec<usize>> {
    entries
        .iter()
        .find(|e| e.name == name)
        .map(|e| e.dims.clone())
        .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))
}

fn infer_config(entries: &[Entry]) -> Result<NetworkConfig> {
    let bad = || Error::Format("checkpoint parameter shapes are inconsistent".into());
    let eq = dims_of(entries, "embed_q.weight")?;
    let er = dims_of(entries, "embed_res.weight")?;
    let gp = dims_of(entries, "gru_p.w_z")?;
    let gh = dims_of(entries, "gain_hidden.weight")?;
    let (m, k) = match (eq.as_slice(), er.as_slice()) {
        ([_, m], [_, two_k]) if two_k % 2 == 0 => (*m, two_k / 2),
        _ => return Err(bad()),
    };
    let pd = *gp.first().ok_or_else(bad)?;
    let (gain_shape, full) = if pd == k * k {
        (GainShape::ReducedSquare, k)
    } else if k > 0 && pd % k == 0 {
        (GainShape::FullByReduced, pd / k)
    } else {
        return Err(bad());
    };
    let hidden = *gh.first().ok_or_else(bad)?;
    if m == 0 || k == 0 || hidden % (m * k) != 0 {
        return Err(bad());
    }
    Ok(NetworkConfig {
        state_dim: m,
        obs_dim: k,
        full_obs_dim: full,
        gain_shape,
        gain_hidden_factor: hidden / (m * k),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GainNetwork> {
    if bytes.len() < MAGIC_STEM.len() || &bytes[..MAGIC_STEM.len()] != MAGIC_STEM {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Version(format!(
            "checkpoint magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..bytes.len().min(7)]),
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    let mut rd = Reader {
        bytes,
        at: CHECKPOINT_MAGIC.len(),
    };
    let count = rd.word()? as usize;
    if count > bytes.len() {
        return Err(Error::Format("implausible parameter count".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rd.word()? as usize;
        let name = String::from_utf8(rd.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = rd.word()? as usize;
        if !(1..=2).contains(&rank) {
            return Err(Error::Format(format!("{name}: unsupported rank {rank}")));
        }
        let dims = (0..rank).map(|_| rd.word().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        entries.push(Entry { name, dims });
    }
    let values: usize = entries.iter().map(|e| e.dims.iter().product::<usize>()).sum();
    let start = rd.at;
    let body_len = values.checked_mul(8).ok_or_else(|| Error::Format("checkpoint too large".into()))?;
    rd.take(body_len)?;
    let body = &bytes[start..start + body_len];
    let stored = rd.word()?;
    if rd.at != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if fnv1a(body) != stored {
        return Err(Error::Checksum("checkpoint value checksum mismatch".into()));
    }

    let scale_entries = entries.iter().filter(|e| e.name.starts_with("feature_scale.")).count();
    let weights = entries.len() - scale_entries;
    let mut net = GainNetwork::zeros(infer_config(&entries)?)?;
    if net.params.len() != weights || !(scale_entries == 0 || scale_entries == 2) {
        return Err(Error::Format("checkpoint parameter list does not match the architecture".into()));
    }
    let mut vals = bytes[start..start + values * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (p, e) in net.params.items.iter_mut().zip(&entries) {
        if p.name != e.name || p.dims() != e.dims {
            return Err(Error::Format(format!("unexpected parameter {} {:?}", e.name, e.dims)));
        }
        let (r, c) = p.value.shape();
        let row_major: Vec<f64> = (&mut vals).take(r * c).collect();
        p.value = DMatrix::from_row_slice(r, c, &row_major);
    }
    if scale_entries == 2 {
        let m = net.config.state_dim;
        let mut read = |e: &Entry, name: &str| -> Result<DVector<f64>> {
            if e.name != name || e.dims != [m] {
                return Err(Error::Format(format!("unexpected entry {} {:?}", e.name, e.dims)));
            }
            Ok(DVector::from_iterator(m, (&mut vals).take(m)))
        };
        let dx_tilde = read(&entries[weights], SCALE_TILDE)?;
        let dx_hat = read(&entries[weights + 1], SCALE_HAT)?;
        net.set_feature_scale(Some(FeatureScale { dx_tilde, dx_hat }))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(net)
}

pub fn save_checkpoint(path: &Path, net: &GainNetwork) -> Result<()> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<GainNetwork> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> GainNetwork {
        GainNetwork::new(
            NetworkConfig {
                full_obs_dim: 6,
                gain_shape: GainShape::FullByReduced,
                ..NetworkConfig::new(3, 3)
            },
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let bytes = encode_checkpoint(&n);
        assert_eq!(&bytes[..7], b"BKNET1\0");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, n.params);
        assert_eq!(back.config, n.config);
        assert_eq!(encode_checkpoint(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_checkpoint(&path, &n).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().params, n.params);
    }

    #[test]
    fn feature_scale_round_trips() {
        let mut n = net();
        let scale = FeatureScale {
            dx_tilde: DVector::from_vec(vec![0.5, 2.0, 3.0]),
            dx_hat: DVector::from_vec(vec![1.0, 0.25, 8.0]),
        };
        n.set_feature_scale(Some(scale.clone())).unwrap();
        let bytes = encode_checkpoint(&n);
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), n.params.len() as u64 + 2);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.feature_scale(), Some(&scale));
        assert_eq!(back.params, n.params);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&encode_checkpoint(&net())).unwrap().feature_scale().is_none());
    }

    #[test]
    fn manifest_layout() {
        let n = GainNetwork::zeros(NetworkConfig::new(1, 1)).unwrap();
        let bytes = encode_checkpoint(&n);
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), n.params.len() as u64);
        let name = "embed_q.weight";
        assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), name.len() as u64);
        assert_eq!(&bytes[23..23 + name.len()], name.as_bytes());
        let at = 23 + name.len();
        assert_eq!(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()), 2);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&net());
        let mut flipped = bytes.clone();
        let i = bytes.len() - 20;
        flipped[i] ^= 0x10;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checksum(_))));
        let mut v2 = bytes.clone();
        v2[5] = b'2';
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Version(_))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Format(_))));
    }
}
