//! Parameter checkpoint files.
//!
//! Layout: one line of JSON (terminated by `\n`) describing every tensor,
//! followed by the tensors' values as little-endian `f64`, concatenated in
//! header order.
//!
//! ```text
//! {"format":"fedmeta-checkpoint","version":1,"kind":"classifier","config_hash":"..",
//!  "tensors":[{"name":"head.weight","shape":[64,10]},...],"extra":{...}}\n
//! <f64 LE> ...
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "fedmeta-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor)>,
    /// Kind-specific metadata (architecture, labels, ...).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config_hash: String,
    tensors: Vec<Entry>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::format(e.to_string()))?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::format(format!("checkpoint truncated in {}", entry.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config_hash: header.config_hash,
            tensors,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
