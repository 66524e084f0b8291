//! Binary container used for datasets and checkpoints.
//!
//! Layout: a magic line, `key = value` metadata lines, `array <name> <dims>`
//! declarations, an `end` line, then the declared arrays as little-endian
//! `f64` values in declaration order. Dimensions are written as `4x99`.
//! Writing is canonical, so decode followed by encode reproduces the bytes.

use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Upper bound on the text header, to reject garbage early.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    magic: String,
    meta: Vec<(String, String)>,
    arrays: Vec<(String, Tensor)>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_graphic() && c != '=')
}

impl Container {
    pub fn new(magic: &str) -> Self {
        assert!(valid_token(magic), "invalid magic {magic:?}");
        Container {
            magic: magic.to_string(),
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn magic(&self) -> &str {
        &self.magic
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn arrays(&self) -> &[(String, Tensor)] {
        &self.arrays
    }

    /// Adds or replaces a metadata entry. Keys are single tokens; values are
    /// one line with no leading or trailing whitespace.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if !valid_token(key) || key == "array" || value.contains('\n') || value.trim() != value {
            return Err(Error::Format(format!("invalid metadata entry {key:?} = {value:?}")));
        }
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing metadata key {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("cannot parse {key} = {raw:?}")))
    }

    /// Comma-separated list of numbers.
    pub fn parse_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("cannot parse {key} = {raw:?}")))
            })
            .collect()
    }

    pub fn push_array(&mut self, name: &str, value: Tensor) -> Result<()> {
        if !valid_token(name) || self.arrays.iter().any(|(n, _)| n == name) {
            return Err(Error::Format(format!("invalid or duplicate array name {name:?}")));
        }
        if value.shape().is_empty() {
            return Err(Error::Format(format!("array {name:?} needs at least one dimension")));
        }
        self.arrays.push((name.to_string(), value));
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&self.magic);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (name, t) in &self.arrays {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("array {name} {}\n", dims.join("x")));
        }
        header.push_str("end\n");
        let data_len: usize = self.arrays.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(header.len() + data_len);
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a container, optionally insisting on a magic line.
    pub fn from_bytes(bytes: &[u8], expected_magic: Option<&str>) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .take(MAX_HEADER_BYTES.saturating_sub(pos))
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("unterminated or oversized header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Format("header is not UTF-8".into()))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        let magic = next_line(bytes)?;
        if !valid_token(&magic) {
            return Err(Error::Format("missing magic line".into()));
        }
        if let Some(want) = expected_magic {
            if magic != want {
                return Err(Error::Format(format!("expected {want:?}, found {magic:?}")));
            }
        }
        let mut c = Container::new(&magic);
        let mut decls: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line(bytes)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("array ") {
                let mut parts = rest.split(' ');
                let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next()) else {
                    return Err(Error::Format(format!("bad array line {line:?}")));
                };
                let dims: Vec<usize> = dims
                    .split('x')
                    .map(|d| {
                        // canonical decimal only
                        if d.is_empty() || (d.len() > 1 && d.starts_with('0')) || !d.bytes().all(|b| b.is_ascii_digit()) {
                            return Err(Error::Format(format!("bad dimension {d:?}")));
                        }
                        d.parse().map_err(|_| Error::Format(format!("bad dimension {d:?}")))
                    })
                    .collect::<Result<_>>()?;
                if !valid_token(name) || decls.iter().any(|(n, _)| n == name) {
                    return Err(Error::Format(format!("invalid or duplicate array name {name:?}")));
                }
                decls.push((name.to_string(), dims));
            } else if !decls.is_empty() {
                return Err(Error::Format("metadata after array declarations".into()));
            } else {
                let (k, v) = line
                    .split_once(" = ")
                    .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
                if c.get(k).is_some() {
                    return Err(Error::Format(format!("duplicate key {k:?}")));
                }
                c.set(k, v)?;
            }
        }
        let mut expected = 0usize;
        for (_, dims) in &decls {
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::Format("array size overflows".into()))?;
            expected = expected
                .checked_add(n)
                .ok_or_else(|| Error::Format("array size overflows".into()))?;
        }
        let data = &bytes[pos..];
        if data.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, header declares {expected}",
                data.len()
            )));
        }
        let mut off = 0;
        for (name, dims) in decls {
            let n: usize = dims.iter().product();
            let values = data[off..off + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect();
            off += 8 * n;
            c.arrays.push((name, Tensor::new(dims, values)?));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_magic: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, Some(expected_magic))
    }
}

/// Formats a list of numbers so that parsing returns the same values.
pub fn format_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}
