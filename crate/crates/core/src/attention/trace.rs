//! Recording of deformed query sampling positions.

use std::io::Write;
use std::path::{Path, PathBuf};

use super::WindowLayout;
use crate::error::Result;

/// Sampling coordinates of one deformable block call.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRecord {
    pub label: String,
    pub layout: WindowLayout,
    pub heads: usize,
    /// `[n_windows, N_b, heads, 3]` positions in the shifted frame.
    pub coords: Vec<f64>,
}

impl SamplingRecord {
    /// Sampling position of (window, slot, head) in token-grid coordinates,
    /// with the cyclic shift undone.
    pub fn grid_coord(&self, window: usize, slot: usize, head: usize) -> [f64; 3] {
        let nb = self.layout.window_len();
        let off = ((window * nb + slot) * self.heads + head) * 3;
        let q = [self.coords[off], self.coords[off + 1], self.coords[off + 2]];
        let u = self.layout.unshift_coord(q);
        let padded = self.layout.padded();
        std::array::from_fn(|a| u[a].rem_euclid(padded[a] as f64))
    }

    /// CSV with columns `window_id,slot_id,head,x,y,z`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "window_id,slot_id,head,x,y,z")?;
        for win in 0..self.layout.n_windows() {
            for slot in 0..self.layout.window_len() {
                for h in 0..self.heads {
                    let [x, y, z] = self.grid_coord(win, slot, h);
                    writeln!(w, "{win},{slot},{h},{x},{y},{z}")?;
                }
            }
        }
        Ok(())
    }
}

/// Collects [`SamplingRecord`]s; the caller sets the label before each block.
#[derive(Debug, Clone, Default)]
pub struct SamplingTrace {
    label: String,
    records: Vec<SamplingRecord>,
}

impl SamplingTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub(crate) fn record(&mut self, layout: &WindowLayout, heads: usize, coords: &[f64]) {
        self.records.push(SamplingRecord {
            label: self.label.clone(),
            layout: layout.clone(),
            heads,
            coords: coords.to_vec(),
        });
    }

    pub fn records(&self) -> &[SamplingRecord] {
        &self.records
    }

    /// Writes one `<label>.csv` per record into `dir`, returning the paths.
    pub fn dump(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            let name = if r.label.is_empty() {
                format!("sampling_{i}.csv")
            } else {
                format!("{}.csv", r.label)
            };
            let path = dir.join(name);
            let f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            r.write_csv(f)?;
            out.push(path);
        }
        Ok(out)
    }
}
