//! Checksummed single-file container shared by dataset splits and
//! checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes
//! version          u32
//! header_len       u64
//! header           header_len bytes of UTF-8 JSON
//! header_sha256    32 bytes
//! section_count    u64
//! section*         name_len u32 | name | payload_len u64 | payload | sha256(payload)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"AVCDATA\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVCCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub payload: Vec<u8>,
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn encode(magic: &[u8; 8], version: u32, header: &[u8], sections: &[Section]) -> Vec<u8> {
    let payload: usize = sections.iter().map(|s| s.payload.len() + s.name.len() + 44).sum();
    let mut out = Vec::with_capacity(60 + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&sha(header));
    out.extend_from_slice(&(sections.len() as u64).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
        out.extend_from_slice(&sha(&s.payload));
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checksum {
            section: section.to_string(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn len(&mut self, section: &str) -> Result<usize> {
        usize::try_from(self.u64(section)?).map_err(|_| Error::Corrupt(format!("length overflow in {section}")))
    }

    fn verified(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let body = self.take(n, section)?;
        let digest = self.take(32, section)?;
        if sha(body)[..] != digest[..] {
            return Err(Error::Checksum {
                section: section.to_string(),
            });
        }
        Ok(body)
    }
}

/// Parses and verifies a container. Truncation anywhere is reported as a
/// checksum failure of the section being read; nothing partial is returned.
pub fn decode(bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<(Vec<u8>, Vec<Section>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != magic {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let found = r.u32("version")?;
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let hlen = r.len("header")?;
    let header = r.verified(hlen, "header")?.to_vec();
    let count = r.len("sections")?;
    let mut sections = Vec::new();
    for i in 0..count {
        let label = format!("section #{i}");
        let nlen = r.u32(&label)? as usize;
        let name = String::from_utf8(r.take(nlen, &label)?.to_vec())
            .map_err(|_| Error::Corrupt(format!("{label} has a non-UTF-8 name")))?;
        let plen = r.len(&name)?;
        let payload = r.verified(plen, &name)?.to_vec();
        sections.push(Section { name, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after last section".into()));
    }
    Ok((header, sections))
}

pub fn write(path: &Path, magic: &[u8; 8], version: u32, header: &[u8], sections: &[Section]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(magic, version, header, sections))?;
    Ok(())
}

pub fn read(path: &Path, magic: &[u8; 8], version: u32) -> Result<(Vec<u8>, Vec<Section>)> {
    decode(&std::fs::read(path)?, magic, version)
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt("f32 payload length".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn bytes_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Corrupt("f64 payload length".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
