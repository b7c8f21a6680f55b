//! Forward-only cross-attention over enlarged search windows and over the
//! whole grid, used as cost and accuracy references.

use super::{count_attention, AttentionParams, TokenField, WindowLayout};
use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{kernels, ParameterStore};

struct Weights<'a> {
    store: &'a ParameterStore,
    params: &'a AttentionParams,
}

impl Weights<'_> {
    fn get(&self, local: &str) -> Result<&[f64]> {
        let name = self.params.name(local);
        self.store
            .get(&name)
            .map(|t| t.data())
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    fn layernorm(&self, local: &str, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.params.channels();
        let g = self.get(&format!("{local}.gamma"))?;
        let b = self.get(&format!("{local}.beta"))?;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            for j in 0..c {
                o[j] = (row[j] - mean) * is * g[j] + b[j];
            }
        }
        Ok(out)
    }

    fn linear(&self, local: &str, x: &[f64], cin: usize, cout: usize) -> Result<Vec<f64>> {
        let w = self.get(&format!("{local}.w"))?;
        let b = self.get(&format!("{local}.b"))?;
        let rows = x.len() / cin;
        let mut out = vec![0.0; rows * cout];
        for r in 0..rows {
            let o = &mut out[r * cout..(r + 1) * cout];
            o.copy_from_slice(b);
            for i in 0..cin {
                let xv = x[r * cin + i];
                for (oj, wv) in o.iter_mut().zip(&w[i * cout..(i + 1) * cout]) {
                    *oj += xv * wv;
                }
            }
        }
        Ok(out)
    }
}

/// Multi-head attention of `queries` over `keys` (flat token indices),
/// writing into `out[query]`.
fn attend(
    params: &AttentionParams,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    queries: &[usize],
    keys: &[usize],
    out: &mut [f64],
) {
    let c = params.channels();
    let dk = params.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = vec![0.0; keys.len()];
    for h in 0..params.heads() {
        let hs = h * dk;
        for &qi in queries {
            let qrow = &q[qi * c + hs..qi * c + hs + dk];
            for (s, &kj) in scores.iter_mut().zip(keys) {
                let krow = &k[kj * c + hs..kj * c + hs + dk];
                *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum += *s;
            }
            let orow = &mut out[qi * c + hs..qi * c + hs + dk];
            orow.iter_mut().for_each(|o| *o = 0.0);
            for (s, &kj) in scores.iter().zip(keys) {
                let a = s / sum;
                for (o, vv) in orow.iter_mut().zip(&v[kj * c + hs..kj * c + hs + dk]) {
                    *o += a * vv;
                }
            }
        }
    }
    let macs = (queries.len() * keys.len() * c) as u64;
    count_attention(macs, macs);
}

/// Runs a full block where `groups` pairs query tokens with their key tokens.
fn plain_block(
    store: &ParameterStore,
    params: &AttentionParams,
    x_b: &TokenField,
    x_r: &TokenField,
    groups: &[(Vec<usize>, Vec<usize>)],
) -> Result<TokenField> {
    if x_b.grid() != x_r.grid() || x_b.channels() != x_r.channels() {
        return Err(shape_err!(
            "base {:?}x{} and reference {:?}x{} differ",
            x_b.grid(),
            x_b.channels(),
            x_r.grid(),
            x_r.channels()
        ));
    }
    let c = params.channels();
    if x_b.channels() != c {
        return Err(config_err!("block expects {c} channels, field has {}", x_b.channels()));
    }
    let w = Weights { store, params };
    let xb_n = w.layernorm("norm_b", x_b.data())?;
    let xr_n = w.layernorm("norm_r", x_r.data())?;
    let k = w.linear("k", &xb_n, c, c)?;
    let v = w.linear("v", &xb_n, c, c)?;
    let q = w.linear("q", &xr_n, c, c)?;
    let mut a = vec![0.0; x_b.data().len()];
    for (queries, keys) in groups {
        attend(params, &q, &k, &v, queries, keys, &mut a);
    }
    let proj = w.linear("proj", &a, c, c)?;
    let x: Vec<f64> = x_b.data().iter().zip(&proj).map(|(a, b)| a + b).collect();
    let hdim = c * params.mlp_ratio();
    let h = w.layernorm("norm_mlp", &x)?;
    let mut h = w.linear("mlp.fc1", &h, c, hdim)?;
    h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    let h = w.linear("mlp.fc2", &h, hdim, c)?;
    let out = x.iter().zip(&h).map(|(a, b)| a + b).collect();
    TokenField::new(x_b.grid(), c, out)
}

/// Cross-attention where each base window's queries attend to a search
/// window `factors` times larger per axis, centred on it and kept inside the
/// grid.
pub fn expanded_window_ca(
    store: &ParameterStore,
    params: &AttentionParams,
    x_b: &TokenField,
    x_r: &TokenField,
    layout: &WindowLayout,
    factors: [usize; 3],
) -> Result<TokenField> {
    if factors.iter().any(|&f| f < 1) {
        return Err(config_err!("search window factors must be >= 1, got {factors:?}"));
    }
    if layout.is_shifted() {
        return Err(config_err!("expanded windows are defined on unshifted layouts"));
    }
    if layout.grid() != x_b.grid() {
        return Err(shape_err!(
            "field grid {:?} does not match layout {:?}",
            x_b.grid(),
            layout.grid()
        ));
    }
    let grid = layout.grid();
    let win = layout.window();
    let padded = layout.padded();
    let flat = |g: [usize; 3]| (g[0] * grid[1] + g[1]) * grid[2] + g[2];
    let mut groups = Vec::with_capacity(layout.n_windows());
    for wi in 0..layout.n_windows() {
        let origin = layout.slot_coord(wi, 0);
        let queries: Vec<usize> = (0..layout.window_len())
            .filter_map(|s| layout.unshift(layout.slot_coord(wi, s)))
            .map(flat)
            .collect();
        let range: [(usize, usize); 3] = std::array::from_fn(|a| {
            let len = (factors[a] * win[a]).min(padded[a]);
            let lo = (factors[a] - 1) * win[a] / 2;
            let start = origin[a].saturating_sub(lo).min(padded[a] - len);
            (start, (start + len).min(grid[a]))
        });
        let mut keys = Vec::new();
        for x in range[0].0..range[0].1 {
            for y in range[1].0..range[1].1 {
                for z in range[2].0..range[2].1 {
                    keys.push(flat([x, y, z]));
                }
            }
        }
        groups.push((queries, keys));
    }
    plain_block(store, params, x_b, x_r, &groups)
}

/// Cross-attention in which every reference token attends to every base token.
pub fn global_cross_attention(
    store: &ParameterStore,
    params: &AttentionParams,
    x_b: &TokenField,
    x_r: &TokenField,
) -> Result<TokenField> {
    let all: Vec<usize> = (0..x_b.n_tokens()).collect();
    plain_block(store, params, x_b, x_r, &[(all.clone(), all)])
}
