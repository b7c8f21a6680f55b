//! Windowed cross-attention between a base and a reference token field.
//!
//! Keys and values are taken from rectangular windows of the base field.
//! Queries are sampled from the reference field at the window positions
//! displaced by a learned per-head offset field.

mod block;
mod expanded;
mod trace;
mod window;

use std::cell::Cell;

use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use block::{
    cross_attention, deformable_window_sample, deformable_window_sample_var, dw_mca_block, fixed_window_ca_block,
    offset_network_forward, offset_network_var, transformer_block, AttentionParams, Mechanism,
};
pub use expanded::{expanded_window_ca, global_cross_attention};
pub use trace::{SamplingRecord, SamplingTrace};
pub use window::{cyclic_shift, cyclic_shift_var, window_partition, window_reverse, ShiftDirection, WindowLayout};

/// Channel-last tokens on a 3D grid, `[H, W, D, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    grid: [usize; 3],
    channels: usize,
    data: Tensor,
}

impl TokenField {
    pub fn new(grid: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(&[grid[0], grid[1], grid[2], channels], data)?;
        Ok(Self {
            grid,
            channels,
            data: t,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(shape_err!("token field must be [H,W,D,C], got {s:?}"));
        }
        Ok(Self {
            grid: [s[0], s[1], s[2]],
            channels: s[3],
            data: t,
        })
    }

    /// Same value in every channel of every token.
    pub fn constant(grid: [usize; 3], channels: usize, value: f64) -> Self {
        Self {
            grid,
            channels,
            data: Tensor::full(&[grid[0], grid[1], grid[2], channels], value),
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// Channels of the token at grid coordinate `g`.
    pub fn token(&self, g: [usize; 3]) -> &[f64] {
        let i = (g[0] * self.grid[1] + g[1]) * self.grid[2] + g[2];
        &self.data.data()[i * self.channels..(i + 1) * self.channels]
    }
}

/// Per-token, per-head sampling displacements, `[H, W, D, 3·heads]`, in
/// token-grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    heads: usize,
    field: TokenField,
}

impl OffsetField {
    pub fn new(field: TokenField, heads: usize) -> Result<Self> {
        if heads == 0 || field.channels() != 3 * heads {
            return Err(shape_err!(
                "offset field needs 3·{heads} channels, got {}",
                field.channels()
            ));
        }
        Ok(Self { heads, field })
    }

    pub fn zeros(grid: [usize; 3], heads: usize) -> Self {
        Self {
            heads,
            field: TokenField::constant(grid, 3 * heads, 0.0),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn grid(&self) -> [usize; 3] {
        self.field.grid()
    }

    pub fn field(&self) -> &TokenField {
        &self.field
    }

    pub fn tensor(&self) -> &Tensor {
        self.field.tensor()
    }

    /// Displacement of `head` at grid coordinate `g`.
    pub fn at(&self, g: [usize; 3], head: usize) -> [f64; 3] {
        let t = self.field.token(g);
        [t[3 * head], t[3 * head + 1], t[3 * head + 2]]
    }
}

thread_local! {
    static SCORE_MACS: Cell<u64> = const { Cell::new(0) };
    static VALUE_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply counts spent inside attention on this thread since the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionMacs {
    /// `Q·Kᵀ` multiplies.
    pub scores: u64,
    /// `A·V` multiplies.
    pub values: u64,
}

pub fn attention_macs() -> AttentionMacs {
    AttentionMacs {
        scores: SCORE_MACS.with(Cell::get),
        values: VALUE_MACS.with(Cell::get),
    }
}

pub fn reset_attention_macs() {
    SCORE_MACS.with(|c| c.set(0));
    VALUE_MACS.with(|c| c.set(0));
}

pub(crate) fn count_attention(scores: u64, values: u64) {
    SCORE_MACS.with(|c| c.set(c.get() + scores));
    VALUE_MACS.with(|c| c.set(c.get() + values));
}

/// Large negative score for masked key positions.
pub(crate) const MASK_NEG: f64 = -1e9;

/// `softmax(Q·Kᵀ/√D_k + mask)·V` over batched `[n, N, D]` operands.
///
/// `mask`, when given, is added to the `[n, N_q, N_k]` scores.
pub fn scaled_dot_product_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(shape_err!("attention operands must be rank 3: {qs:?} {ks:?} {vs:?}"));
    }
    if qs[2] != ks[2] || qs[0] != ks[0] || ks[..2] != vs[..2] {
        return Err(shape_err!("attention operands disagree: Q {qs:?}, K {ks:?}, V {vs:?}"));
    }
    let kt = tape.permute(k, &[0, 2, 1])?;
    let raw = tape.matmul(q, kt)?;
    let mut scores = tape.scale(raw, 1.0 / (qs[2] as f64).sqrt())?;
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let attn = tape.softmax(scores, 2)?;
    let out = tape.matmul(attn, v)?;
    count_attention(
        (qs[0] * qs[1] * ks[1] * qs[2]) as u64,
        (qs[0] * qs[1] * ks[1] * vs[2]) as u64,
    );
    Ok(out)
}

/// Value-level wrapper of [`scaled_dot_product_attention_var`].
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let out = scaled_dot_product_attention_var(&mut tape, q, k, v, None)?;
    Ok(tape.tensor(out))
}
