//! Network weights files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"AAPW" | u32 version | u64 config hash | u32 config length | config TOML
//! | u32 record count | records...
//! record: u32 name length | name (UTF-8) | tensor (AAPT encoding)
//! ```
//!
//! Records hold every trainable tensor followed by the batch-norm running
//! statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::network::{build_network, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AAPW";
const VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("weights file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("{what} length {len} is implausible")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_weights<W: Write>(net: &Network, w: &mut W) -> Result<()> {
    let toml = net.config.to_toml();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&net.config.hash().to_le_bytes())?;
    write_string(w, &toml)?;
    let params = net.params();
    let buffers = net.buffers();
    w.write_all(&((params.len() + buffers.len()) as u32).to_le_bytes())?;
    for (name, t) in params {
        write_string(w, &name)?;
        t.write_to(w)?;
    }
    for (name, t) in &buffers {
        write_string(w, name)?;
        t.write_to(w)?;
    }
    Ok(())
}

pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(net, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a weights file, rebuilding the network from the embedded config.
pub fn read_weights<R: Read>(r: &mut R) -> Result<Network> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected AAPW")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let hash = read_u64(r)?;
    let cfg = NetworkConfig::from_toml_str(&read_string(r, "config")?)?;
    if cfg.hash() != hash {
        return Err(Error::ConfigHashMismatch {
            expected: hash,
            found: cfg.hash(),
        });
    }
    let mut net = build_network(&cfg, 0)?;
    let count = read_u32(r)? as usize;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    let buffer_names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
    if count != names.len() + buffer_names.len() {
        return Err(Error::Format(format!(
            "{count} records, network has {} tensors",
            names.len() + buffer_names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(names.len());
    for want in &names {
        let name = read_string(r, "record name")?;
        if &name != want {
            return Err(Error::Format(format!("record `{name}` where `{want}` was expected")));
        }
        loaded.push(Tensor::read_from(r)?);
    }
    for (slot, (t, name)) in net.params_mut().into_iter().zip(loaded.into_iter().zip(&names)) {
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "`{name}` has shape {}, expected {}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    for want in &buffer_names {
        let name = read_string(r, "record name")?;
        if &name != want {
            return Err(Error::Format(format!("record `{name}` where `{want}` was expected")));
        }
        net.set_buffer(&name, &Tensor::read_from(r)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(net)
}

pub fn load_weights(path: &Path) -> Result<Network> {
    read_weights(&mut BufReader::new(File::open(path)?))
}

/// Loads `path` and checks that it was written for `cfg`.
pub fn load_weights_for(path: &Path, cfg: &NetworkConfig) -> Result<Network> {
    let net = load_weights(path)?;
    if net.config.hash() != cfg.hash() {
        return Err(Error::ConfigHashMismatch {
            expected: cfg.hash(),
            found: net.config.hash(),
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> NetworkConfig {
        NetworkConfig {
            input_height: 8,
            input_width: 8,
            blocks: vec![1, 1],
            transitions: vec![6],
            growth: 4,
            expansion: 2,
            heads: 2,
            ..NetworkConfig::default()
        }
    }

    fn bytes(net: &Network) -> Vec<u8> {
        let mut b = Vec::new();
        write_weights(net, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = build_network(&micro(), 9).unwrap();
        net.stages[0].transition.as_mut().unwrap().bn.running.var[0] = 3.25;
        let b = bytes(&net);
        let back = read_weights(&mut b.as_slice()).unwrap();
        assert_eq!(bytes(&back), b);
        let x = Tensor::full(net.input_shape(1).unwrap(), 0.1);
        assert_eq!(net.infer(&x).unwrap(), back.infer(&x).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let net = build_network(&micro(), 9).unwrap();
        let mut b = bytes(&net);
        assert!(read_weights(&mut &b[..b.len() - 3]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(read_weights(&mut extra.as_slice()).is_err());
        b[0] = b'X';
        assert!(matches!(read_weights(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let net = build_network(&micro(), 1).unwrap();
        save_weights(&net, &p).unwrap();
        assert!(load_weights_for(&p, &micro()).is_ok());
        let other = NetworkConfig { growth: 5, ..micro() };
        assert!(matches!(load_weights_for(&p, &other), Err(Error::ConfigHashMismatch { .. })));

        // A tampered embedded config no longer matches the stored hash.
        let mut b = bytes(&net);
        let pos = b.windows(8).position(|w| w == b"growth =").unwrap();
        let digit = pos + 9;
        b[digit] = b'5';
        assert!(matches!(read_weights(&mut b.as_slice()), Err(Error::ConfigHashMismatch { .. })));
    }
}
