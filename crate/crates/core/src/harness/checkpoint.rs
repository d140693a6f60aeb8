//! Versioned binary container shared by every trained module.
//!
//! ```text
//! "MTCK" | u32 version | u32 header_len | header JSON | u32 n_tensors
//! per tensor: u16 name_len | name | u8 rank | u32 dims… | f32 data… (LE)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"MTCK";
pub const FORMAT_VERSION: u32 = 1;

pub type NamedTensor = (String, Vec<usize>, Vec<f32>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub module: String,
    pub step: usize,
    pub config_hash: String,
    pub palette_hash: String,
    pub classes: usize,
    pub t_v: usize,
    /// Free-form scalars worth keeping next to the weights (accuracy, PSNR, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl CheckpointHeader {
    pub fn new(module: &str, step: usize, config_hash: &str, palette_hash: &str, classes: usize, t_v: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            module: module.to_string(),
            step,
            config_hash: config_hash.to_string(),
            palette_hash: palette_hash.to_string(),
            classes,
            t_v,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
    /// Optimiser moments etc.; stored after the weights under an `opt/` prefix.
    pub optimizer: Vec<NamedTensor>,
}

/// What a loader expects to find; any mismatch is a hard error.
#[derive(Debug, Clone, Copy)]
pub struct Expect<'a> {
    pub module: &'a str,
    pub config_hash: &'a str,
    pub palette_hash: &'a str,
}

impl Checkpoint {
    pub fn from_store(header: CheckpointHeader, store: &ParamStore) -> Result<Self> {
        Ok(Self { header, tensors: store.export()?, optimizer: Vec::new() })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let all: Vec<(String, &Vec<usize>, &Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, d, v)| (n.clone(), d, v))
            .chain(self.optimizer.iter().map(|(n, d, v)| (format!("opt/{n}"), d, v)))
            .collect();
        w.write_all(&(all.len() as u32).to_le_bytes())?;
        for (name, dims, data) in all {
            if dims.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` data does not match its shape {dims:?}")));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dims.len() as u8])?;
            for &d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * data.len());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut header = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let count = read_u32(r)? as usize;
        let (mut tensors, mut optimizer) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let dims = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; 4 * n];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            match name.strip_prefix("opt/") {
                Some(rest) => optimizer.push((rest.to_string(), dims, data)),
                None => tensors.push((name, dims, data)),
            }
        }
        Ok(Self { header, tensors, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // Write-then-rename so a crash never leaves a truncated checkpoint behind.
        let tmp = path.with_extension("partial");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        self.write_to(&mut f)?;
        f.flush()?;
        drop(f);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Loads and checks module name and hashes.
    pub fn load_verified(path: impl AsRef<Path>, expect: Expect<'_>) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.verify(expect)?;
        Ok(ck)
    }

    pub fn verify(&self, expect: Expect<'_>) -> Result<()> {
        let h = &self.header;
        if h.module != expect.module {
            return Err(Error::Checkpoint(format!("checkpoint holds `{}`, expected `{}`", h.module, expect.module)));
        }
        if h.config_hash != expect.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint config hash {} does not match the current config {}",
                h.module, h.config_hash, expect.config_hash
            )));
        }
        if h.palette_hash != expect.palette_hash {
            return Err(Error::Checkpoint(format!(
                "{} checkpoint palette hash {} does not match {}",
                h.module, h.palette_hash, expect.palette_hash
            )));
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut header = CheckpointHeader::new("tsg", 42, "abcd", "ef01", 12, 5);
        header.metadata.insert("accuracy".into(), "0.8".into());
        Checkpoint {
            header,
            tensors: vec![("w".into(), vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()), ("b".into(), vec![], vec![7.0])],
            optimizer: vec![("m/w".into(), vec![1], vec![-1.0])],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x/tsg.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn hash_mismatch_is_an_error() {
        let ck = sample();
        let ok = Expect { module: "tsg", config_hash: "abcd", palette_hash: "ef01" };
        ck.verify(ok).unwrap();
        assert!(ck.verify(Expect { config_hash: "zzzz", ..ok }).is_err());
        assert!(ck.verify(Expect { palette_hash: "zzzz", ..ok }).is_err());
        assert!(ck.verify(Expect { module: "sgi", ..ok }).is_err());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut &buf[..]), Err(Error::Checkpoint(_))));
    }
}
