//! Raw little-endian volume files with a text sidecar.
//!
//! `name.raw` holds the packed values; `name.hdr` holds
//!
//! ```text
//! shape = 1 16 16 16
//! dtype = float32
//! byte_order = little
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::registration::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32,
    Uint32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::Float32 => "float32",
            Dtype::Uint32 => "uint32",
        }
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("hdr"))
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn write_header(path: &Path, shape: &[usize], dtype: Dtype) -> Result<()> {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let text = format!(
        "shape = {}\ndtype = {}\nbyte_order = little\n",
        dims.join(" "),
        dtype.name()
    );
    fs::write(path, text)?;
    Ok(())
}

fn read_header(path: &Path) -> Result<(Vec<usize>, Dtype)> {
    let text = fs::read_to_string(path)?;
    let (mut shape, mut dtype) = (None, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(path, format!("malformed line `{line}`")))?;
        match (k.trim(), v.trim()) {
            ("shape", v) => {
                let dims = v
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| format_err(path, format!("bad shape `{v}`")))?;
                shape = Some(dims);
            }
            ("dtype", "float32") => dtype = Some(Dtype::Float32),
            ("dtype", "uint32") => dtype = Some(Dtype::Uint32),
            ("byte_order", "little") => {}
            (k, v) => return Err(format_err(path, format!("unsupported `{k} = {v}`"))),
        }
    }
    match (shape, dtype) {
        (Some(s), Some(d)) => Ok((s, d)),
        _ => Err(format_err(path, "header needs shape and dtype")),
    }
}

fn read_payload(path: &Path, n: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * n {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| c.try_into().unwrap()).collect())
}

/// Writes `t` as 32-bit floats.
pub fn write_volume(stem: &Path, t: &Tensor) -> Result<()> {
    let (raw, hdr) = paths(stem);
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(raw, bytes)?;
    write_header(&hdr, t.shape(), Dtype::Float32)
}

pub fn read_volume(stem: &Path) -> Result<Tensor> {
    let (raw, hdr) = paths(stem);
    let (shape, dtype) = read_header(&hdr)?;
    if dtype != Dtype::Float32 {
        return Err(format_err(&hdr, "expected float32 data"));
    }
    let n = shape.iter().product();
    let data = read_payload(&raw, n)?
        .into_iter()
        .map(|b| f32::from_le_bytes(b) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_labels(stem: &Path, m: &LabelMap) -> Result<()> {
    let (raw, hdr) = paths(stem);
    let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(raw, bytes)?;
    write_header(&hdr, &m.extents(), Dtype::Uint32)
}

pub fn read_labels(stem: &Path) -> Result<LabelMap> {
    let (raw, hdr) = paths(stem);
    let (shape, dtype) = read_header(&hdr)?;
    if dtype != Dtype::Uint32 || shape.len() != 3 {
        return Err(format_err(&hdr, "expected a rank-3 uint32 label map"));
    }
    let data = read_payload(&raw, shape.iter().product())?
        .into_iter()
        .map(u32::from_le_bytes)
        .collect();
    LabelMap::new([shape[0], shape[1], shape[2]], data)
}
