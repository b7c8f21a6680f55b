//! Registration network: patch embedding, two cross-attention encoder paths
//! with swapped base/reference roles, additive skip fusion and a
//! convolutional decoder that predicts a dense displacement field.

use std::rc::Rc;

use rand::SeedableRng;

use crate::attention::{transformer_block, AttentionParams, Mechanism, SamplingTrace, TokenField, WindowLayout};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{self, Rng64};
use crate::registration::DisplacementField;
use crate::tensor::{Bindings, ParameterStore, Tape, Tensor, Var, ZERO_SLOT};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub windows: Vec<[usize; 3]>,
    /// One width per decoder level, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub offset_kernel: usize,
    pub mlp_ratio: usize,
    /// Use one set of encoder weights for both paths.
    pub share_paths: bool,
    pub mechanism: Mechanism,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration for 16³ volumes.
    pub fn desk() -> Self {
        Self {
            image: [16, 16, 16],
            patch_size: 4,
            embed_dim: 8,
            depths: vec![2, 2],
            heads: vec![2, 2],
            windows: vec![[2, 2, 2]; 2],
            decoder_widths: vec![16, 8, 8],
            offset_kernel: 3,
            mlp_ratio: 2,
            share_paths: false,
            mechanism: Mechanism::Deformable,
        }
    }

    /// Full-size configuration for 160×192×224 brain volumes.
    pub fn full() -> Self {
        Self {
            image: [160, 192, 224],
            patch_size: 4,
            embed_dim: 96,
            depths: vec![4, 4, 5],
            heads: vec![4, 8, 16],
            windows: vec![[5, 6, 7]; 3],
            decoder_widths: vec![48, 32, 32, 16],
            offset_kernel: 5,
            mlp_ratio: 4,
            share_paths: false,
            mechanism: Mechanism::Deformable,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    /// Number of ×2 upsamplings from the finest token grid to voxels.
    pub fn n_upsamples(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn n_decoder_levels(&self) -> usize {
        self.n_stages() - 1 + self.n_upsamples()
    }

    pub fn stage_grid(&self, s: usize) -> [usize; 3] {
        self.image.map(|e| e / (self.patch_size << s))
    }

    pub fn stage_channels(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_stages();
        if s == 0 {
            return Err(config_err!("at least one encoder stage is required"));
        }
        if self.heads.len() != s || self.windows.len() != s {
            return Err(config_err!(
                "depths ({s}), heads ({}) and windows ({}) must have equal length",
                self.heads.len(),
                self.windows.len()
            ));
        }
        if self.patch_size < 2 || !self.patch_size.is_power_of_two() {
            return Err(config_err!(
                "patch size must be a power of two >= 2, got {}",
                self.patch_size
            ));
        }
        let unit = self.patch_size << (s - 1);
        if self.image.iter().any(|&e| e == 0 || e % unit != 0) {
            return Err(config_err!(
                "image extents {:?} must be multiples of {unit} (patch × 2^(stages−1))",
                self.image
            ));
        }
        for st in 0..s {
            let c = self.stage_channels(st);
            if self.heads[st] == 0 || !c.is_multiple_of(self.heads[st]) {
                return Err(config_err!(
                    "stage {st}: {c} channels not divisible by {} heads",
                    self.heads[st]
                ));
            }
            if self.windows[st].contains(&0) {
                return Err(config_err!("stage {st}: window extents must be positive"));
            }
        }
        if self.decoder_widths.len() != self.n_decoder_levels() {
            return Err(config_err!(
                "expected {} decoder widths, got {}",
                self.n_decoder_levels(),
                self.decoder_widths.len()
            ));
        }
        if self.decoder_widths.contains(&0) || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(config_err!("widths, embedding size and MLP ratio must be positive"));
        }
        if self.offset_kernel.is_multiple_of(2) {
            return Err(config_err!("offset kernel must be odd, got {}", self.offset_kernel));
        }
        Ok(())
    }

    /// Number of scalar weights [`init_params`] creates, as
    /// `(embedding + encoder, decoder)`.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let paths = if self.share_paths { 1 } else { 2 };
        let p3 = self.patch_size.pow(3);
        let m3 = self.offset_kernel.pow(3);
        let mut enc = self.embed_dim * p3 + 3 * self.embed_dim;
        for s in 0..self.n_stages() {
            let c = self.stage_channels(s);
            let h = self.heads[s];
            let hid = c * self.mlp_ratio;
            let block = 6 * c + 4 * (c * c + c) + (c * m3 + c) + (3 * h * c + 3 * h) + (c * hid + hid) + (hid * c + c);
            enc += self.depths[s] * block;
            if s + 1 < self.n_stages() {
                enc += 16 * c + 8 * c * 2 * c;
            }
        }
        let mut dec = 0;
        for (ci, co) in self.decoder_inputs().into_iter().zip(&self.decoder_widths) {
            dec += co * ci * 27 + co + co * co * 27 + co;
        }
        dec += 3 * self.decoder_widths.last().unwrap() * 27 + 3;
        (paths * enc, dec)
    }

    fn path_name(&self, path: Path) -> &'static str {
        match (self.share_paths, path) {
            (true, _) => "ab",
            (false, Path::A) => "a",
            (false, Path::B) => "b",
        }
    }

    /// Parameters of block `j` of stage `s` on one encoder path.
    pub fn block_params(&self, s: usize, path: Path, j: usize) -> Result<AttentionParams> {
        let prefix = format!("enc.s{s}.{}.b{j}", self.path_name(path));
        Ok(
            AttentionParams::new(prefix, self.stage_channels(s), self.heads[s], self.offset_kernel)?
                .with_mlp_ratio(self.mlp_ratio),
        )
    }

    fn embed_prefix(&self, path: Path) -> String {
        format!("embed.{}", self.path_name(path))
    }

    fn merge_prefix(&self, s: usize, path: Path) -> String {
        format!("enc.s{s}.{}.merge", self.path_name(path))
    }

    fn decoder_inputs(&self) -> Vec<usize> {
        let s = self.n_stages();
        let mut cin = Vec::new();
        let mut cur = self.stage_channels(s - 1);
        let mut level = 0;
        for st in (0..s - 1).rev() {
            cin.push(cur + self.stage_channels(st));
            cur = self.decoder_widths[level];
            level += 1;
        }
        for u in 0..self.n_upsamples() {
            let extra = if u + 1 == self.n_upsamples() { 2 } else { 0 };
            cin.push(cur + extra);
            cur = self.decoder_widths[level];
            level += 1;
        }
        cin
    }
}

/// Encoder path: `A` uses the moving stream as base, `B` the fixed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    A,
    B,
}

/// Freshly initialized weights for `cfg`, fully determined by `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = Rng64::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let paths: &[Path] = if cfg.share_paths {
        &[Path::A]
    } else {
        &[Path::A, Path::B]
    };
    let p = cfg.patch_size;
    for &path in paths {
        let e = cfg.embed_prefix(path);
        nn::insert_conv(&mut store, &mut rng, &format!("{e}.conv"), cfg.embed_dim, 1, p, 1.0)?;
        nn::insert_layernorm(&mut store, &format!("{e}.norm"), cfg.embed_dim)?;
        for s in 0..cfg.n_stages() {
            for j in 0..cfg.depths[s] {
                cfg.block_params(s, path, j)?.init(&mut store, &mut rng)?;
            }
            if s + 1 < cfg.n_stages() {
                let m = cfg.merge_prefix(s, path);
                let c = cfg.stage_channels(s);
                nn::insert_layernorm(&mut store, &format!("{m}.norm"), 8 * c)?;
                nn::insert_linear(&mut store, &mut rng, &format!("{m}.lin"), 8 * c, 2 * c, false)?;
            }
        }
    }
    let cin = cfg.decoder_inputs();
    for (l, (&ci, &co)) in cin.iter().zip(&cfg.decoder_widths).enumerate() {
        nn::insert_conv(&mut store, &mut rng, &format!("dec.l{l}.c1"), co, ci, 3, 1.0)?;
        nn::insert_conv(&mut store, &mut rng, &format!("dec.l{l}.c2"), co, co, 3, 1.0)?;
    }
    let last = *cfg.decoder_widths.last().unwrap();
    store.insert("dec.head.w", Tensor::zeros(&[3, last, 3, 3, 3]))?;
    store.insert("dec.head.b", Tensor::zeros(&[3]))?;
    Ok(store)
}

fn check_volume(tape: &Tape, cfg: &ModelConfig, v: Var) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 4 || s[0] != 1 || s[1..] != cfg.image {
        return Err(shape_err!("expected a [1,{:?}] volume, got {s:?}", cfg.image));
    }
    Ok(())
}

/// Strided-conv tokenization of a `[1,H,W,D]` volume followed by LayerNorm;
/// returns channel-last tokens.
pub fn patch_embed_var(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, path: Path, vol: Var) -> Result<Var> {
    let p = cfg.patch_size;
    let s = tape.shape(vol).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err!("patch embedding needs a [1,H,W,D] volume, got {s:?}"));
    }
    if s[1..].iter().any(|&e| e % p != 0) {
        return Err(config_err!("extents {:?} not divisible by patch size {p}", &s[1..]));
    }
    let e = cfg.embed_prefix(path);
    let y = nn::conv_named(tape, b, &format!("{e}.conv"), vol, p, 0, 1)?;
    let t = tape.permute(y, &[1, 2, 3, 0])?;
    nn::layernorm_named(tape, b, &format!("{e}.norm"), t)
}

/// Value-level patch embedding.
pub fn patch_embed(store: &ParameterStore, cfg: &ModelConfig, path: Path, vol: &Tensor) -> Result<TokenField> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let v = tape.constant(vol.clone());
    let t = patch_embed_var(&mut tape, &b, cfg, path, v)?;
    TokenField::from_tensor(tape.tensor(t))
}

/// Concatenates each 2×2×2 neighbourhood (zero-padding odd extents) into
/// `8C` channels, normalizes, and projects to `2C`.
pub fn patch_merging_var(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("patch merging needs [H,W,D,C], got {s:?}"));
    }
    let c = s[3];
    let g = [s[0], s[1], s[2]];
    let o = g.map(|e| e.div_ceil(2));
    let mut map = Vec::with_capacity(o.iter().product::<usize>() * 8 * c);
    for a in 0..o[0] {
        for bb in 0..o[1] {
            for d in 0..o[2] {
                for n in 0..8 {
                    let src = [2 * a + (n >> 2), 2 * bb + ((n >> 1) & 1), 2 * d + (n & 1)];
                    let inside = (0..3).all(|k| src[k] < g[k]);
                    let tok = (src[0] * g[1] + src[1]) * g[2] + src[2];
                    map.extend((0..c).map(|j| if inside { tok * c + j } else { ZERO_SLOT }));
                }
            }
        }
    }
    let cat = tape.gather(x, vec![o[0], o[1], o[2], 8 * c], Rc::from(map))?;
    let n = nn::layernorm_named(tape, b, &format!("{prefix}.norm"), cat)?;
    nn::linear_named(tape, b, &format!("{prefix}.lin"), n)
}

/// Fused per-stage encoder features (`[h,w,d,C]`), finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipPyramid {
    pub levels: Vec<TokenField>,
}

/// Runs both encoder paths and returns the fused skip variables.
pub fn dual_encoder_var(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    moving: Var,
    fixed: Var,
    mut trace: Option<&mut SamplingTrace>,
) -> Result<Vec<Var>> {
    check_volume(tape, cfg, moving)?;
    check_volume(tape, cfg, fixed)?;
    let mut xm = patch_embed_var(tape, b, cfg, Path::A, moving)?;
    let mut xf = patch_embed_var(tape, b, cfg, Path::B, fixed)?;
    let mut skips = Vec::with_capacity(cfg.n_stages());
    for s in 0..cfg.n_stages() {
        let grid = cfg.stage_grid(s);
        for j in 0..cfg.depths[s] {
            let layout = WindowLayout::fitted(grid, cfg.windows[s], j % 2 == 1)?;
            let pa = cfg.block_params(s, Path::A, j)?;
            let pb = cfg.block_params(s, Path::B, j)?;
            if let Some(t) = trace.as_deref_mut() {
                t.set_label(format!("stage{s}_block{j}_pathA"));
            }
            let na = transformer_block(tape, b, &pa, xm, xf, &layout, cfg.mechanism, trace.as_deref_mut())?;
            if let Some(t) = trace.as_deref_mut() {
                t.set_label(format!("stage{s}_block{j}_pathB"));
            }
            let nb = transformer_block(tape, b, &pb, xf, xm, &layout, cfg.mechanism, trace.as_deref_mut())?;
            xm = na;
            xf = nb;
        }
        skips.push(tape.add(xm, xf)?);
        if s + 1 < cfg.n_stages() {
            xm = patch_merging_var(tape, b, &cfg.merge_prefix(s, Path::A), xm)?;
            xf = patch_merging_var(tape, b, &cfg.merge_prefix(s, Path::B), xf)?;
        }
    }
    Ok(skips)
}

pub fn dual_encoder_forward(
    store: &ParameterStore,
    cfg: &ModelConfig,
    moving: &Tensor,
    fixed: &Tensor,
) -> Result<SkipPyramid> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let skips = dual_encoder_var(&mut tape, &b, cfg, m, f, None)?;
    let levels = skips
        .into_iter()
        .map(|v| TokenField::from_tensor(tape.tensor(v)))
        .collect::<Result<_>>()?;
    Ok(SkipPyramid { levels })
}

fn conv_block(tape: &mut Tape, b: &Bindings, level: usize, x: Var) -> Result<Var> {
    let h = nn::conv_named(tape, b, &format!("dec.l{level}.c1"), x, 1, 1, 1)?;
    let h = tape.leaky_relu(h, 0.2)?;
    let h = nn::conv_named(tape, b, &format!("dec.l{level}.c2"), h, 1, 1, 1)?;
    tape.leaky_relu(h, 0.2)
}

/// Upsample, concatenate and refine decoder ending in a 3-channel head.
pub fn conv_decoder_var(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    skips: &[Var],
    moving: Var,
    fixed: Var,
) -> Result<Var> {
    let s = cfg.n_stages();
    if skips.len() != s {
        return Err(shape_err!("expected {s} skip levels, got {}", skips.len()));
    }
    for (st, &v) in skips.iter().enumerate() {
        let g = cfg.stage_grid(st);
        let want = [g[0], g[1], g[2], cfg.stage_channels(st)];
        if tape.shape(v) != want {
            return Err(shape_err!("skip {st} is {:?}, expected {want:?}", tape.shape(v)));
        }
    }
    let mut h = tape.permute(skips[s - 1], &[3, 0, 1, 2])?;
    let mut level = 0;
    for st in (0..s - 1).rev() {
        let up = nn::upsample2(tape, h)?;
        let skip = tape.permute(skips[st], &[3, 0, 1, 2])?;
        let cat = tape.concat(&[up, skip], 0)?;
        h = conv_block(tape, b, level, cat)?;
        level += 1;
    }
    for u in 0..cfg.n_upsamples() {
        let mut x = nn::upsample2(tape, h)?;
        if u + 1 == cfg.n_upsamples() {
            x = tape.concat(&[x, moving, fixed], 0)?;
        }
        h = conv_block(tape, b, level, x)?;
        level += 1;
    }
    nn::conv_named(tape, b, "dec.head", h, 1, 1, 1)
}

/// Displacement field `[3,H,W,D]` for a moving/fixed pair.
pub fn model_forward_var(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    moving: Var,
    fixed: Var,
    trace: Option<&mut SamplingTrace>,
) -> Result<Var> {
    let skips = dual_encoder_var(tape, b, cfg, moving, fixed, trace)?;
    conv_decoder_var(tape, b, cfg, &skips, moving, fixed)
}

pub fn model_forward(
    store: &ParameterStore,
    cfg: &ModelConfig,
    moving: &Tensor,
    fixed: &Tensor,
) -> Result<DisplacementField> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let m = tape.constant(moving.clone());
    let f = tape.constant(fixed.clone());
    let u = model_forward_var(&mut tape, &b, cfg, m, f, None)?;
    DisplacementField::new(tape.tensor(u))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        let mut c = ModelConfig::desk();
        c.image = [16, 16, 12];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.heads = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.decoder_widths.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_shapes() {
        let c = ModelConfig::desk();
        assert_eq!(c.stage_grid(0), [4, 4, 4]);
        assert_eq!(c.stage_grid(1), [2, 2, 2]);
        assert_eq!(c.stage_channels(1), 16);
        let p = ModelConfig::full();
        assert_eq!(p.stage_grid(0), [40, 48, 56]);
    }
}
