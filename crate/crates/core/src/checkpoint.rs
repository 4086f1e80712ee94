//! `CSVT1` checkpoint files.
//!
//! Layout: the ASCII line `CSVT1`, one manifest line per tensor
//! (`<name> f32 <d0>x<d1>... <offset> <length>`), an empty line, then the
//! little-endian `f32` payloads in manifest order. Offsets and lengths are in
//! bytes, relative to the first payload byte. A rank-0 shape is written as `-`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &str = "CSVT1";

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            let len = t.numel() * 4;
            header.push_str(&format!("{name} f32 {shape} {offset} {len}\n"));
            offset += len;
        }
        header.push('\n');
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.entries {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| bad("header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line(bytes)? != MAGIC {
            return Err(bad("missing CSVT1 magic".into()));
        }
        let mut records = Vec::new();
        loop {
            let line = next_line(bytes)?;
            if line.is_empty() {
                break;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            let [name, dtype, shape, offset, len] = fields[..] else {
                return Err(bad(format!("malformed manifest line {line:?}")));
            };
            if dtype != "f32" {
                return Err(bad(format!("unsupported dtype {dtype}")));
            }
            let shape: Vec<usize> = if shape == "-" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in {line:?}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
            let len: usize = len.parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
            records.push((name.to_string(), shape, offset, len));
        }
        let payload = &bytes[pos..];
        let mut ckpt = Checkpoint::new();
        let mut expected_offset = 0;
        for (name, shape, offset, len) in records {
            let numel: usize = shape.iter().product();
            if len != numel * 4 || offset != expected_offset || offset + len > payload.len() {
                return Err(bad(format!("record {name} has inconsistent offset/length")));
            }
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ckpt.push(name, Tensor::new(shape, data)?)?;
            expected_offset += len;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after last payload".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let mut c = Checkpoint::new();
        c.push("a", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        c.push("block0.wq", Tensor::new(vec![1, 1], vec![0.5f32]).unwrap()).unwrap();
        let bytes = c.to_bytes();
        let header = b"CSVT1\na f32 2 0 8\nblock0.wq f32 1x1 8 4\n\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 12);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap()).unwrap();
        let mut bytes = c.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"CSVT2\n\n").is_err());
        assert!(c.clone().push("w", Tensor::scalar(0.0)).is_err());
        assert!(c.clone().push("has space", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let c = Checkpoint::new();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}
