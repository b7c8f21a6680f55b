//! Small layer helpers shared by the attention blocks and the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Bindings, ParameterStore, Tape, Tensor, Var};

pub type Rng64 = ChaCha8Rng;

/// `x[.., Cin] · w[Cin, Cout] (+ b[Cout])`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let cin = *shape.last().unwrap();
    let cout = tape.shape(w)[1];
    let rows = tape.value(x).len() / cin;
    let flat = tape.reshape(x, &[rows, cin])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.bias_last(y, b)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = cout;
    tape.reshape(y, &out_shape)
}

/// Looks up `{prefix}.w` / `{prefix}.b` and applies [`linear`].
pub fn linear_named(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"));
    linear(tape, x, w, bias)
}

pub fn layernorm_named(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{prefix}.gamma"))?;
    let beta = b.var(&format!("{prefix}.beta"))?;
    tape.layernorm(x, g, beta, 1e-5)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is positive");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Inserts a Xavier-normal `[cin, cout]` weight and, optionally, a zero bias.
pub fn insert_linear(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    bias: bool,
) -> Result<()> {
    let std = (2.0 / (cin + cout) as f64).sqrt();
    store.insert(format!("{prefix}.w"), normal(rng, &[cin, cout], std))?;
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

pub fn insert_layernorm(store: &mut ParameterStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]))
}

/// He-normal conv kernel `[cout, cin_per_group, k, k, k]` plus zero bias.
pub fn insert_conv(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    prefix: &str,
    cout: usize,
    cin_per_group: usize,
    k: usize,
    gain: f64,
) -> Result<()> {
    let fan_in = cin_per_group * k * k * k;
    let std = gain * (2.0 / fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), normal(rng, &[cout, cin_per_group, k, k, k], std))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]))
}

/// Conv with `{prefix}.w` / `{prefix}.b` from the bindings.
pub fn conv_named(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let y = tape.conv3d(x, w, stride, pad, groups)?;
    match b.get(&format!("{prefix}.b")) {
        Some(bias) => tape.bias_channel(y, bias),
        None => Ok(y),
    }
}

/// Linear-interpolation matrix `[e, 2e]` for doubling one axis with
/// half-voxel alignment and edge clamping.
fn upsample_matrix(e: usize) -> Tensor {
    let mut m = vec![0.0; e * 2 * e];
    for j in 0..2 * e {
        let src = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (e - 1) as f64);
        let i0 = (src.floor() as usize).min(e.saturating_sub(2));
        let f = src - i0 as f64;
        m[i0 * 2 * e + j] += 1.0 - f;
        if e > 1 {
            m[(i0 + 1) * 2 * e + j] += f;
        }
    }
    Tensor::new(&[e, 2 * e], m).expect("matrix shape")
}

/// Trilinear ×2 upsampling of a channel-first `[C,H,W,D]` variable, done as
/// one interpolation matrix product per axis.
pub fn upsample2(tape: &mut Tape, x: Var) -> Result<Var> {
    let mut h = x;
    for _ in 0..3 {
        let s = tape.shape(h).to_vec();
        let e = s[3];
        let rows = s[0] * s[1] * s[2];
        let m = tape.constant(upsample_matrix(e));
        let flat = tape.reshape(h, &[rows, e])?;
        let up = tape.matmul(flat, m)?;
        let up = tape.reshape(up, &[s[0], s[1], s[2], 2 * e])?;
        // Rotate the spatial axes so the next one ends up last.
        h = tape.permute(up, &[0, 3, 1, 2])?;
    }
    Ok(h)
}
