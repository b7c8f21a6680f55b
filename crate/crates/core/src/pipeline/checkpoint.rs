//! `DCAX` checkpoints.
//!
//! Layout: the magic `DCAX`, a little-endian `u32` format version, a
//! little-endian `u32` header length, the UTF-8 header and the packed
//! little-endian `f32` payload. The header echoes the run config and lists
//! one `name dims offset` line per tensor, offsets counted in elements:
//!
//! ```text
//! [config]
//! image = 16,16,16
//! ...
//! [tensors]
//! dec.head.b 3 0
//! dec.head.w 3x8x3x3x3 3
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::error::{config_err, Error, Result};
use crate::network::{init_params, ModelConfig};
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DCAX";
pub const VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParameterStore,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(config: RunConfig, store: ParameterStore) -> Self {
        Self { config, store }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("[config]\n");
        header.push_str(&self.config.to_text());
        header.push_str("[tensors]\n");
        let mut offset = 0;
        for (name, t) in self.store.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(header, "{name} {} {offset}", dims.join("x"));
            offset += t.len();
        }
        let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in self.store.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(format_err("not a DCAX checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if !SUPPORTED_VERSIONS.contains(&version) {
            return Err(format_err(format!(
                "unsupported checkpoint version {version}; supported versions: {SUPPORTED_VERSIONS:?}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = bytes.get(12..12 + hlen).ok_or_else(|| format_err("truncated header"))?;
        let header = std::str::from_utf8(header).map_err(|_| format_err("header is not UTF-8"))?;
        let (config_text, tensors) = header
            .strip_prefix("[config]\n")
            .and_then(|h| h.split_once("[tensors]\n"))
            .ok_or_else(|| format_err("header lacks [config] and [tensors] sections"))?;
        let config = RunConfig::parse(config_text).map_err(|e| format_err(format!("config echo: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let mut store = ParameterStore::new();
        let mut expected = 0;
        for line in tensors.lines() {
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, dims, offset] = parts[..] else {
                return Err(format_err(format!("malformed tensor entry `{line}`")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format_err(format!("bad shape in `{line}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| format_err(format!("bad offset in `{line}`")))?;
            if offset != expected {
                return Err(format_err(format!(
                    "tensor `{name}` at offset {offset}, expected {expected}"
                )));
            }
            let n: usize = shape.iter().product();
            let raw = payload
                .get(4 * offset..4 * (offset + n))
                .ok_or_else(|| format_err(format!("payload truncated inside tensor `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store
                .insert(name, Tensor::new(&shape, data)?)
                .map_err(|_| format_err(format!("duplicate tensor `{name}`")))?;
            expected += n;
        }
        if payload.len() != 4 * expected {
            return Err(format_err(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                4 * expected
            )));
        }
        Ok(Self { config, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Parameters checked against the tensors `cfg` expects; every missing,
    /// unexpected or reshaped tensor is listed in the error.
    pub fn restore(&self, cfg: &ModelConfig) -> Result<ParameterStore> {
        let want = init_params(cfg, 0)?;
        let mut problems = Vec::new();
        for (name, t) in want.iter() {
            match self.store.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(h) if h.shape() != t.shape() => {
                    problems.push(format!("{name} (shape {:?}, expected {:?})", h.shape(), t.shape()))
                }
                Some(_) => {}
            }
        }
        for name in self.store.names().filter(|n| !want.contains(n)) {
            problems.push(format!("{name} (unexpected)"));
        }
        if !problems.is_empty() {
            return Err(config_err!(
                "checkpoint does not fit the model config: {}",
                problems.join(", ")
            ));
        }
        Ok(self.store.clone())
    }
}
