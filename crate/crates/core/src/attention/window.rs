//! Window partitioning, its inverse, and cyclic shifts on token grids.

use std::rc::Rc;

use super::TokenField;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var, ZERO_SLOT};

/// Geometry of a (possibly shifted) window tiling over a token grid.
///
/// Windows are ordered lexicographically by their position in the padded
/// grid, and slots lexicographically within each window. All index maps work
/// in the *shifted* frame: slot coordinate `q` holds grid token
/// `(q + shift) mod padded`, or padding when that lies outside the grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    grid: [usize; 3],
    window: [usize; 3],
    shift: [usize; 3],
    padded: [usize; 3],
    counts: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    Forward,
    Inverse,
}

impl WindowLayout {
    pub fn new(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if grid[a] == 0 || window[a] == 0 {
                return Err(config_err!("grid {grid:?} and window {window:?} must be positive"));
            }
            if shift[a] >= window[a] {
                return Err(config_err!("shift {shift:?} must be below window {window:?}"));
            }
        }
        let padded = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        if (0..3).any(|a| window[a] > padded[a]) {
            return Err(config_err!("window {window:?} exceeds padded grid {padded:?}"));
        }
        let counts = std::array::from_fn(|a| padded[a] / window[a]);
        Ok(Self {
            grid,
            window,
            shift,
            padded,
            counts,
        })
    }

    /// Layout used inside transformer blocks: the window is clipped to the
    /// grid, and no shift is applied along axes the window already covers.
    pub fn fitted(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Result<Self> {
        let w: [usize; 3] = std::array::from_fn(|a| window[a].min(grid[a]));
        let s = std::array::from_fn(|a| if shifted && grid[a] > window[a] { w[a] / 2 } else { 0 });
        Self::new(grid, w, s)
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn window(&self) -> [usize; 3] {
        self.window
    }

    pub fn shift(&self) -> [usize; 3] {
        self.shift
    }

    pub fn padded(&self) -> [usize; 3] {
        self.padded
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    pub fn n_windows(&self) -> usize {
        self.counts.iter().product()
    }

    /// Tokens per window, `N_b`.
    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    fn grid_len(&self) -> usize {
        self.grid.iter().product()
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    /// Shifted-frame coordinate of `slot` in window `win`.
    pub fn slot_coord(&self, win: usize, slot: usize) -> [usize; 3] {
        let [_, c1, c2] = self.counts;
        let [_, w1, w2] = self.window;
        let wi = [win / (c1 * c2), (win / c2) % c1, win % c2];
        let si = [slot / (w1 * w2), (slot / w2) % w1, slot % w2];
        std::array::from_fn(|a| wi[a] * self.window[a] + si[a])
    }

    /// Grid coordinate held by a shifted-frame position, or `None` for padding.
    pub fn unshift(&self, q: [usize; 3]) -> Option<[usize; 3]> {
        let g: [usize; 3] = std::array::from_fn(|a| (q[a] + self.shift[a]) % self.padded[a]);
        (0..3).all(|a| g[a] < self.grid[a]).then_some(g)
    }

    /// Unwrapped (pre-shift) position of a shifted-frame coordinate.
    pub fn unshift_coord(&self, q: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| q[a] + self.shift[a] as f64)
    }

    fn grid_flat(&self, g: [usize; 3]) -> usize {
        (g[0] * self.grid[1] + g[1]) * self.grid[2] + g[2]
    }

    fn padded_flat(&self, q: [usize; 3]) -> usize {
        (q[0] * self.padded[1] + q[1]) * self.padded[2] + q[2]
    }

    /// For every (window, slot), the grid token it holds or [`ZERO_SLOT`].
    pub(crate) fn partition_map(&self) -> Vec<usize> {
        let nb = self.window_len();
        let mut out = Vec::with_capacity(self.n_windows() * nb);
        for w in 0..self.n_windows() {
            for s in 0..nb {
                out.push(
                    self.unshift(self.slot_coord(w, s))
                        .map_or(ZERO_SLOT, |g| self.grid_flat(g)),
                );
            }
        }
        out
    }

    /// For every (window, slot), its shifted padded-frame flat index.
    pub(crate) fn padded_partition_map(&self) -> Vec<usize> {
        let nb = self.window_len();
        (0..self.n_windows())
            .flat_map(|w| (0..nb).map(move |s| (w, s)))
            .map(|(w, s)| self.padded_flat(self.slot_coord(w, s)))
            .collect()
    }

    /// For every shifted padded-frame position, the grid token it holds.
    pub(crate) fn padded_frame_map(&self) -> Vec<usize> {
        let [p0, p1, p2] = self.padded;
        let mut out = Vec::with_capacity(self.padded_len());
        for a in 0..p0 {
            for b in 0..p1 {
                for c in 0..p2 {
                    out.push(self.unshift([a, b, c]).map_or(ZERO_SLOT, |g| self.grid_flat(g)));
                }
            }
        }
        out
    }

    /// For every grid token, its flat (window, slot) position.
    pub(crate) fn reverse_map(&self) -> Vec<usize> {
        let mut out = vec![0; self.grid_len()];
        let nb = self.window_len();
        for w in 0..self.n_windows() {
            for s in 0..nb {
                if let Some(g) = self.unshift(self.slot_coord(w, s)) {
                    out[self.grid_flat(g)] = w * nb + s;
                }
            }
        }
        out
    }

    /// Whether each (window, slot) is padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.partition_map().into_iter().map(|i| i == ZERO_SLOT).collect()
    }

    /// Reference points `p`: shifted-frame coordinates of every (window, slot).
    pub fn base_coords(&self) -> Vec<[f64; 3]> {
        let nb = self.window_len();
        (0..self.n_windows())
            .flat_map(|w| (0..nb).map(move |s| (w, s)))
            .map(|(w, s)| self.slot_coord(w, s).map(|v| v as f64))
            .collect()
    }

    /// Region label of every (window, slot) for shifted-window masking.
    /// Padding slots get a label of their own.
    pub fn region_labels(&self) -> Vec<usize> {
        let nb = self.window_len();
        let region = |a: usize, q: usize| -> usize {
            if self.shift[a] == 0 || q < self.padded[a] - self.window[a] {
                0
            } else if q < self.padded[a] - self.shift[a] {
                1
            } else {
                2
            }
        };
        let mut out = Vec::with_capacity(self.n_windows() * nb);
        for w in 0..self.n_windows() {
            for s in 0..nb {
                let q = self.slot_coord(w, s);
                if self.unshift(q).is_none() {
                    out.push(usize::MAX);
                } else {
                    out.push(region(0, q[0]) * 9 + region(1, q[1]) * 3 + region(2, q[2]));
                }
            }
        }
        out
    }

    /// Whether any window mixes regions or holds padding, so attention needs a mask.
    pub fn needs_mask(&self) -> bool {
        self.is_shifted() || self.is_padded()
    }

    /// Partitions a `[H,W,D,C]` variable into `[n_windows, N_b, C]`.
    pub fn partition_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.check_field(tape.shape(x))?;
        let map = expand_channels(&self.partition_map(), c);
        tape.gather(x, vec![self.n_windows(), self.window_len(), c], map)
    }

    /// Re-lays a `[H,W,D,C]` variable on the shifted, padded frame.
    pub fn shifted_frame_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.check_field(tape.shape(x))?;
        let map = expand_channels(&self.padded_frame_map(), c);
        let [p0, p1, p2] = self.padded;
        tape.gather(x, vec![p0, p1, p2, c], map)
    }

    /// Partitions a shifted-frame `[P0,P1,P2,C]` variable.
    pub fn partition_shifted_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[..3] != self.padded {
            return Err(shape_err!("expected padded frame {:?}, got {s:?}", self.padded));
        }
        let map = expand_channels(&self.padded_partition_map(), s[3]);
        tape.gather(x, vec![self.n_windows(), self.window_len(), s[3]], map)
    }

    /// Inverse of [`WindowLayout::partition_var`]: drops padding and undoes the shift.
    pub fn reverse_var(&self, tape: &mut Tape, windows: Var) -> Result<Var> {
        let s = tape.shape(windows).to_vec();
        if s.len() != 3 || s[0] != self.n_windows() || s[1] != self.window_len() {
            return Err(shape_err!(
                "windows {s:?} do not match layout ({} windows of {})",
                self.n_windows(),
                self.window_len()
            ));
        }
        let map = expand_channels(&self.reverse_map(), s[2]);
        let [g0, g1, g2] = self.grid;
        tape.gather(windows, vec![g0, g1, g2, s[2]], map)
    }

    fn check_field(&self, s: &[usize]) -> Result<usize> {
        if s.len() != 4 || s[..3] != self.grid {
            return Err(shape_err!("field {s:?} does not match layout grid {:?}", self.grid));
        }
        Ok(s[3])
    }
}

/// Turns a token-level map into an element-level map over `c` channels.
pub(crate) fn expand_channels(map: &[usize], c: usize) -> Rc<[usize]> {
    map.iter()
        .flat_map(|&t| (0..c).map(move |j| if t == ZERO_SLOT { ZERO_SLOT } else { t * c + j }))
        .collect()
}

/// Circular roll of a `[H,W,D,C]` variable. `Forward` moves content towards
/// lower indices (`out[q] = x[q + s]`), `Inverse` undoes it.
pub fn cyclic_shift_var(tape: &mut Tape, x: Var, shifts: [usize; 3], dir: ShiftDirection) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("cyclic_shift expects [H,W,D,C], got {s:?}"));
    }
    let ext = [s[0], s[1], s[2]];
    let mut map = Vec::with_capacity(ext.iter().product());
    for a in 0..ext[0] {
        for b in 0..ext[1] {
            for c in 0..ext[2] {
                let q = [a, b, c];
                let src: [usize; 3] = std::array::from_fn(|i| {
                    let sh = shifts[i] % ext[i];
                    match dir {
                        ShiftDirection::Forward => (q[i] + sh) % ext[i],
                        ShiftDirection::Inverse => (q[i] + ext[i] - sh) % ext[i],
                    }
                });
                map.push((src[0] * ext[1] + src[1]) * ext[2] + src[2]);
            }
        }
    }
    let map = expand_channels(&map, s[3]);
    tape.gather(x, s, map)
}

/// `WP(x)`: `[n_windows, N_b, C]`, padding slots zero.
pub fn window_partition(x: &TokenField, layout: &WindowLayout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.tensor().clone());
    let w = layout.partition_var(&mut tape, v)?;
    Ok(tape.tensor(w))
}

pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<TokenField> {
    let mut tape = Tape::new();
    let v = tape.constant(windows.clone());
    let f = layout.reverse_var(&mut tape, v)?;
    TokenField::from_tensor(tape.tensor(f))
}

pub fn cyclic_shift(x: &TokenField, shifts: [usize; 3], dir: ShiftDirection) -> Result<TokenField> {
    let mut tape = Tape::new();
    let v = tape.constant(x.tensor().clone());
    let y = cyclic_shift_var(&mut tape, v, shifts, dir)?;
    TokenField::from_tensor(tape.tensor(y))
}
