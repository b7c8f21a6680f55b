//! Cross-attention transformer blocks over windowed token fields.

use rand::Rng;

use super::trace::SamplingTrace;
use super::{scaled_dot_product_attention_var, OffsetField, TokenField, WindowLayout, MASK_NEG};
use crate::error::{config_err, shape_err, Result};
use crate::nn;
use crate::tensor::{Bindings, ParameterStore, Tape, Tensor, Var};

/// How queries are taken from the reference stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    /// Queries are sampled at the window positions moved by learned offsets.
    Deformable,
    /// Queries come from the same rectangular window as keys and values.
    FixedWindow,
}

/// Shape hyper-parameters and parameter naming of one attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    prefix: String,
    channels: usize,
    heads: usize,
    offset_kernel: usize,
    mlp_ratio: usize,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, channels: usize, heads: usize, offset_kernel: usize) -> Result<Self> {
        if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
            return Err(config_err!("{channels} channels cannot be split into {heads} heads"));
        }
        if offset_kernel.is_multiple_of(2) {
            return Err(config_err!("offset kernel size must be odd, got {offset_kernel}"));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            heads,
            offset_kernel,
            mlp_ratio: 4,
        })
    }

    pub fn with_mlp_ratio(mut self, ratio: usize) -> Self {
        self.mlp_ratio = ratio.max(1);
        self
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn offset_kernel(&self) -> usize {
        self.offset_kernel
    }

    pub fn mlp_ratio(&self) -> usize {
        self.mlp_ratio
    }

    /// Full name of a parameter of this block, e.g. `name("q.w")`.
    pub fn name(&self, local: &str) -> String {
        format!("{}.{local}", self.prefix)
    }

    /// Names of the offset-network parameters.
    pub fn offset_param_names(&self) -> Vec<String> {
        ["offset.dw.w", "offset.dw.b", "offset.pw.w", "offset.pw.b"]
            .iter()
            .map(|s| self.name(s))
            .collect()
    }

    /// Adds freshly initialized weights to `store`. The pointwise offset
    /// layer starts at zero.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        let m = self.offset_kernel;
        for ln in ["norm_b", "norm_r", "norm_mlp"] {
            nn::insert_layernorm(store, &self.name(ln), c)?;
        }
        for lin in ["q", "k", "v", "proj"] {
            nn::insert_linear(store, rng, &self.name(lin), c, c, true)?;
        }
        nn::insert_conv(store, rng, &self.name("offset.dw"), c, 1, m, 1.0)?;
        store.insert(self.name("offset.pw.w"), Tensor::zeros(&[3 * self.heads, c, 1, 1, 1]))?;
        store.insert(self.name("offset.pw.b"), Tensor::zeros(&[3 * self.heads]))?;
        let hidden = c * self.mlp_ratio;
        nn::insert_linear(store, rng, &self.name("mlp.fc1"), c, hidden, true)?;
        nn::insert_linear(store, rng, &self.name("mlp.fc2"), hidden, c, true)
    }
}

fn check_pair(tape: &Tape, params: &AttentionParams, x_b: Var, x_r: Var) -> Result<()> {
    let (sb, sr) = (tape.shape(x_b), tape.shape(x_r));
    if sb != sr {
        return Err(shape_err!("base {sb:?} and reference {sr:?} differ"));
    }
    if sb.len() != 4 {
        return Err(shape_err!("token fields must be [H,W,D,C], got {sb:?}"));
    }
    if sb[3] != params.channels {
        return Err(config_err!(
            "block expects {} channels, field has {}",
            params.channels,
            sb[3]
        ));
    }
    Ok(())
}

/// Offsets from already-normalized streams: depthwise conv, GELU, pointwise
/// conv, applied to their sum. Returns `[H,W,D,3·heads]`.
pub fn offset_network_var(
    tape: &mut Tape,
    b: &Bindings,
    params: &AttentionParams,
    xb_n: Var,
    xr_n: Var,
) -> Result<Var> {
    let sum = tape.add(xb_n, xr_n)?;
    let cf = tape.permute(sum, &[3, 0, 1, 2])?;
    let m = params.offset_kernel;
    let h = nn::conv_named(tape, b, &params.name("offset.dw"), cf, 1, m / 2, params.channels)?;
    let h = tape.gelu(h)?;
    let o = nn::conv_named(tape, b, &params.name("offset.pw"), h, 1, 0, 1)?;
    tape.permute(o, &[1, 2, 3, 0])
}

/// Offset field predicted from a base and a reference field.
pub fn offset_network_forward(
    store: &ParameterStore,
    params: &AttentionParams,
    x_b: &TokenField,
    x_r: &TokenField,
) -> Result<OffsetField> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let xb = tape.constant(x_b.tensor().clone());
    let xr = tape.constant(x_r.tensor().clone());
    check_pair(&tape, params, xb, xr)?;
    let xb_n = nn::layernorm_named(&mut tape, &b, &params.name("norm_b"), xb)?;
    let xr_n = nn::layernorm_named(&mut tape, &b, &params.name("norm_r"), xr)?;
    let o = offset_network_var(&mut tape, &b, params, xb_n, xr_n)?;
    OffsetField::new(TokenField::from_tensor(tape.tensor(o))?, params.heads)
}

/// Samples windows of `x[H,W,D,C]` at `p + Δp_w`, channel block `h` at the
/// displacement of head `h`. Returns the `[n_windows, N_b, C]` samples and the
/// `[n_windows, N_b, 3·heads]` shifted-frame sampling coordinates.
pub fn deformable_window_sample_var(
    tape: &mut Tape,
    x: Var,
    offsets: Var,
    layout: &WindowLayout,
    heads: usize,
) -> Result<(Var, Var)> {
    let os = tape.shape(offsets).to_vec();
    if os.len() != 4 || os[..3] != layout.grid() || os[3] != 3 * heads {
        return Err(shape_err!(
            "offsets {os:?} do not match grid {:?} with {heads} heads",
            layout.grid()
        ));
    }
    let frame = layout.shifted_frame_var(tape, x)?;
    let dp = layout.partition_var(tape, offsets)?;
    let base: Vec<f64> = layout
        .base_coords()
        .into_iter()
        .flat_map(|p| (0..heads).flat_map(move |_| p))
        .collect();
    let base = tape.constant(Tensor::new(
        &[layout.n_windows(), layout.window_len(), 3 * heads],
        base,
    )?);
    let coords = tape.add(base, dp)?;
    let out = tape.grid_sample(frame, coords, heads)?;
    Ok((out, coords))
}

/// Windows of `x_r` sampled at the displaced positions, restricted to the
/// channels of `head`: `[n_windows, N_b, C/heads]`.
pub fn deformable_window_sample(
    x_r: &TokenField,
    offsets: &OffsetField,
    layout: &WindowLayout,
    head: usize,
) -> Result<Tensor> {
    let heads = offsets.heads();
    if head >= heads || !x_r.channels().is_multiple_of(heads) {
        return Err(shape_err!(
            "head {head} invalid for {heads} heads over {} channels",
            x_r.channels()
        ));
    }
    if x_r.grid() != offsets.grid() {
        return Err(shape_err!(
            "reference grid {:?} and offset grid {:?} differ",
            x_r.grid(),
            offsets.grid()
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_r.tensor().clone());
    let o = tape.constant(offsets.tensor().clone());
    let (s, _) = deformable_window_sample_var(&mut tape, x, o, layout, heads)?;
    let dk = x_r.channels() / heads;
    let h = tape.slice_axis(s, 2, head * dk, dk)?;
    Ok(tape.tensor(h))
}

/// Additive mask `[n_windows·heads, N_b, N_b]` that blocks attention between
/// tokens of different shift regions and onto padding.
fn attention_mask(layout: &WindowLayout, heads: usize) -> Result<Tensor> {
    let labels = layout.region_labels();
    let nb = layout.window_len();
    let nw = layout.n_windows();
    let mut data = Vec::with_capacity(nw * heads * nb * nb);
    for w in 0..nw {
        let lab = &labels[w * nb..(w + 1) * nb];
        for _ in 0..heads {
            for &li in lab {
                for &lj in lab {
                    data.push(if li == lj { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(&[nw * heads, nb, nb], data)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let dk = s[2] / heads;
    let r = tape.reshape(x, &[s[0], s[1], heads, dk])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0] * heads, s[1], dk])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let nw = s[0] / heads;
    let r = tape.reshape(x, &[nw, heads, s[1], s[2]])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[nw, s[1], heads * s[2]])
}

/// Multi-head windowed cross-attention before the output projection.
///
/// Keys and values come from windows of `LN(x_b)`; queries from `LN(x_r)`,
/// either from the same windows or sampled at offset positions. The result is
/// merged back onto the `[H,W,D,C]` grid.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    tape: &mut Tape,
    b: &Bindings,
    params: &AttentionParams,
    x_b: Var,
    x_r: Var,
    layout: &WindowLayout,
    mechanism: Mechanism,
    trace: Option<&mut SamplingTrace>,
) -> Result<Var> {
    check_pair(tape, params, x_b, x_r)?;
    let heads = params.heads;
    let xb_n = nn::layernorm_named(tape, b, &params.name("norm_b"), x_b)?;
    let xr_n = nn::layernorm_named(tape, b, &params.name("norm_r"), x_r)?;
    let k = nn::linear_named(tape, b, &params.name("k"), xb_n)?;
    let v = nn::linear_named(tape, b, &params.name("v"), xb_n)?;
    let q = nn::linear_named(tape, b, &params.name("q"), xr_n)?;
    let kw = layout.partition_var(tape, k)?;
    let vw = layout.partition_var(tape, v)?;
    let qw = match mechanism {
        Mechanism::FixedWindow => layout.partition_var(tape, q)?,
        Mechanism::Deformable => {
            let dp = offset_network_var(tape, b, params, xb_n, xr_n)?;
            let (qs, coords) = deformable_window_sample_var(tape, q, dp, layout, heads)?;
            if let Some(tr) = trace {
                tr.record(layout, heads, tape.value(coords));
            }
            qs
        }
    };
    let mask = if layout.needs_mask() {
        Some(tape.constant(attention_mask(layout, heads)?))
    } else {
        None
    };
    let qh = split_heads(tape, qw, heads)?;
    let kh = split_heads(tape, kw, heads)?;
    let vh = split_heads(tape, vw, heads)?;
    let oh = scaled_dot_product_attention_var(tape, qh, kh, vh, mask)?;
    let ow = merge_heads(tape, oh, heads)?;
    layout.reverse_var(tape, ow)
}

/// Full block: cross-attention, output projection and residual onto `x_b`,
/// then a pre-normalized GELU MLP with its own residual.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    b: &Bindings,
    params: &AttentionParams,
    x_b: Var,
    x_r: Var,
    layout: &WindowLayout,
    mechanism: Mechanism,
    trace: Option<&mut SamplingTrace>,
) -> Result<Var> {
    let a = cross_attention(tape, b, params, x_b, x_r, layout, mechanism, trace)?;
    let proj = nn::linear_named(tape, b, &params.name("proj"), a)?;
    let x = tape.add(x_b, proj)?;
    let h = nn::layernorm_named(tape, b, &params.name("norm_mlp"), x)?;
    let h = nn::linear_named(tape, b, &params.name("mlp.fc1"), h)?;
    let h = tape.gelu(h)?;
    let h = nn::linear_named(tape, b, &params.name("mlp.fc2"), h)?;
    tape.add(x, h)
}

/// Deformable window-based multi-head cross-attention block.
pub fn dw_mca_block(
    tape: &mut Tape,
    b: &Bindings,
    params: &AttentionParams,
    x_b: Var,
    x_r: Var,
    layout: &WindowLayout,
    trace: Option<&mut SamplingTrace>,
) -> Result<Var> {
    transformer_block(tape, b, params, x_b, x_r, layout, Mechanism::Deformable, trace)
}

/// The same block with queries taken from the rectangular window itself.
pub fn fixed_window_ca_block(
    tape: &mut Tape,
    b: &Bindings,
    params: &AttentionParams,
    x_b: Var,
    x_r: Var,
    layout: &WindowLayout,
) -> Result<Var> {
    transformer_block(tape, b, params, x_b, x_r, layout, Mechanism::FixedWindow, None)
}
