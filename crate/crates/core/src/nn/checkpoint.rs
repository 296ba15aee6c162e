//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `b"CFCKPT\0\0"`, `u32` version, `u64` seed, string manifest digest,
//! `u32` section count, then per section: string tag, string layer
//! schedule, `u32` tensor count, per tensor (string name, `u32` rank,
//! `u64` dims), then `u64` value count and raw `f32` values.
//! Strings are a `u32` byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use super::net::Sequential;
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: String,
    pub schedule: String,
    pub names: Vec<(String, Vec<usize>)>,
    pub values: Vec<f32>,
}

impl Section {
    pub fn from_net(tag: impl Into<String>, net: &Sequential) -> Self {
        Self::from_params(tag, net.schedule(), net.params())
    }

    pub fn from_params(tag: impl Into<String>, schedule: impl Into<String>, params: &ModelParams) -> Self {
        Section {
            tag: tag.into(),
            schedule: schedule.into(),
            names: params.specs().iter().map(|s| (s.name.clone(), s.shape.clone())).collect(),
            values: params.data().to_vec(),
        }
    }

    /// Copy the stored values into `params` after checking that schedule
    /// and tensor layout agree.
    pub fn restore(&self, schedule: &str, params: &mut ModelParams) -> Result<()> {
        let bad = |message: String| Error::Format {
            what: "checkpoint",
            message,
        };
        if self.schedule != schedule {
            return Err(bad(format!(
                "section {}: schedule {:?} does not match model {:?}",
                self.tag, self.schedule, schedule
            )));
        }
        let layout: Vec<(String, Vec<usize>)> =
            params.specs().iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
        if layout != self.names {
            return Err(bad(format!("section {}: tensor layout differs from model", self.tag)));
        }
        if !params.load_flat(&self.values) {
            return Err(bad(format!("section {}: value count mismatch", self.tag)));
        }
        Ok(())
    }

    pub fn restore_net(&self, net: &mut Sequential) -> Result<()> {
        let schedule = net.schedule();
        self.restore(&schedule, net.params_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub manifest_digest: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(seed: u64, manifest_digest: impl Into<String>) -> Self {
        Checkpoint {
            seed,
            manifest_digest: manifest_digest.into(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, tag: &str) -> Result<&Section> {
        self.sections.iter().find(|s| s.tag == tag).ok_or_else(|| Error::Format {
            what: "checkpoint",
            message: format!("missing section {tag:?}"),
        })
    }

    /// Fail with [`Error::StaleCheckpoint`] unless the checkpoint was
    /// produced against the manifest with digest `expected`.
    pub fn check_manifest(&self, expected: &str) -> Result<()> {
        if self.manifest_digest != expected {
            return Err(Error::StaleCheckpoint {
                expected: expected.to_string(),
                found: self.manifest_digest.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.manifest_digest);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.tag);
            put_str(&mut out, &s.schedule);
            out.extend_from_slice(&(s.names.len() as u32).to_le_bytes());
            for (name, dims) in &s.names {
                put_str(&mut out, name);
                out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for &d in dims {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
            out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
            for v in &s.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let manifest_digest = r.string()?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let tag = r.string()?;
            let schedule = r.string()?;
            let n_tensors = r.u32()?;
            let mut names = Vec::new();
            let mut expected = 0usize;
            for _ in 0..n_tensors {
                let name = r.string()?;
                let rank = r.u32()?;
                let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                expected += dims.iter().product::<usize>();
                names.push((name, dims));
            }
            let count = r.u64()? as usize;
            if count != expected {
                return Err(r.err(&format!("section {tag}: {count} values for {expected} declared")));
            }
            let raw = r.take(count.checked_mul(4).ok_or_else(|| r.err("overflow"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            sections.push(Section {
                tag,
                schedule,
                names,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            seed,
            manifest_digest,
            sections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            message: format!("{message} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SequentialBuilder;
    use crate::rng;

    fn net(seed: u64) -> Sequential {
        let mut r = rng::rng(seed);
        SequentialBuilder::new("g", 1, &mut r).conv(4, 4, 2, 1).lrelu(0.2).deconv(1, 4, 2, 1).build()
    }

    #[test]
    fn round_trip_restores_parameters_bitwise() {
        let a = net(1);
        let mut ck = Checkpoint::new(42, "abc");
        ck.push(Section::from_net("inpainter", &a));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut b = net(2);
        assert_ne!(a, b);
        back.section("inpainter").unwrap().restore_net(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_truncation_and_mismatch() {
        let a = net(1);
        let mut ck = Checkpoint::new(1, "d1");
        ck.push(Section::from_net("inpainter", &a));
        let bytes = ck.to_bytes();
        for cut in [0, 7, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        assert!(matches!(ck.check_manifest("d2"), Err(Error::StaleCheckpoint { .. })));
        assert!(ck.check_manifest("d1").is_ok());
        assert!(ck.section("encoder-raw").is_err());

        let mut r = rng::rng(0);
        let mut other = SequentialBuilder::new("g", 1, &mut r).conv(8, 4, 2, 1).build();
        assert!(ck.section("inpainter").unwrap().restore_net(&mut other).is_err());
    }
}
