//! End-to-end gradient checks: the full model, the NCC loss and the
//! deformable block with respect to its offset-network weights.

use rand::{Rng, SeedableRng};

use super::config::RunConfig;
use crate::attention::{dw_mca_block, AttentionParams, WindowLayout};
use crate::error::Result;
use crate::network::{init_params, model_forward_var};
use crate::nn::{self, Rng64};
use crate::registration::{ncc_loss, warp_var};
use crate::tensor::gradcheck::{gradcheck_entries, GradcheckReport};
use crate::tensor::{ParameterStore, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut Rng64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn jitter(store: &mut ParameterStore, rng: &mut Rng64, filter: impl Fn(&str) -> bool, scale: f64) {
    let names: Vec<String> = store.names().filter(|n| filter(n)).map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-1.0..1.0) * scale;
        }
    }
}

/// Up to `per_param` evenly spread entries of every parameter accepted by
/// `filter`.
fn spread(store: &ParameterStore, filter: impl Fn(&str) -> bool, per_param: usize) -> Vec<(String, usize)> {
    store
        .iter()
        .filter(|(n, _)| filter(n))
        .flat_map(|(n, t)| {
            let step = t.len().div_ceil(per_param).max(1);
            (0..t.len()).step_by(step).map(move |i| (n.to_string(), i))
        })
        .collect()
}

/// Model on an 8³ pair, loss = NCC of the warped moving image, checked on
/// entries of every parameter. The head and offset layers are jittered so
/// that the displacement and the offsets are non-zero.
pub fn check_model(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut cfg = RunConfig::desk().model;
    cfg.image = [8, 8, 8];
    let mut store = init_params(&cfg, seed)?;
    jitter(
        &mut store,
        &mut rng,
        |n| n.starts_with("dec.head") || n.contains("offset.pw"),
        0.05,
    );
    let m = uniform(&mut rng, &[1, 8, 8, 8]);
    let f = uniform(&mut rng, &[1, 8, 8, 8]);
    let entries = spread(&store, |_| true, 2);
    gradcheck_entries(
        |t, b| {
            let mv = t.constant(m.clone());
            let fv = t.constant(f.clone());
            let u = model_forward_var(t, b, &cfg, mv, fv, None)?;
            let w = warp_var(t, mv, u)?;
            ncc_loss(t, w, fv, 5)
        },
        &store,
        &entries,
        STEP,
        TOLERANCE,
    )
}

/// NCC loss on an 8³ random pair with respect to every voxel of one image.
pub fn check_ncc(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.insert("image", uniform(&mut rng, &[1, 8, 8, 8]))?;
    let fixed = uniform(&mut rng, &[1, 8, 8, 8]);
    let entries = spread(&store, |_| true, 512);
    gradcheck_entries(
        |t, b| {
            let i = b.var("image")?;
            let f = t.constant(fixed.clone());
            ncc_loss(t, i, f, 5)
        },
        &store,
        &entries,
        STEP,
        TOLERANCE,
    )
}

/// Deformable block on a 4³ grid with jittered offsets, checked on every
/// offset-network weight.
pub fn check_offsets(seed: u64) -> Result<GradcheckReport> {
    let mut rng = Rng64::seed_from_u64(seed);
    let p = AttentionParams::new("blk", 8, 2, 3)?;
    let mut store = ParameterStore::new();
    p.init(&mut store, &mut rng)?;
    jitter(&mut store, &mut rng, |n| n.contains("offset.pw"), 0.3);
    let xb = nn::normal(&mut rng, &[4, 4, 4, 8], 1.0);
    let xr = nn::normal(&mut rng, &[4, 4, 4, 8], 1.0);
    let probe = nn::normal(&mut rng, &[4, 4, 4, 8], 1.0);
    let layout = WindowLayout::new([4, 4, 4], [2, 2, 2], [1, 1, 1])?;
    let entries = spread(&store, |n| n.contains("offset"), 24);
    gradcheck_entries(
        |t, b| {
            let vb = t.constant(xb.clone());
            let vr = t.constant(xr.clone());
            let out = dw_mca_block(t, b, &p, vb, vr, &layout, None)?;
            let r = t.constant(probe.clone());
            let prod = t.mul(out, r)?;
            t.sum(prod)
        },
        &store,
        &entries,
        STEP,
        TOLERANCE,
    )
}

/// All three checks, labeled.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    Ok(vec![
        ("model_forward", check_model(seed)?),
        ("ncc_loss", check_ncc(seed)?),
        ("dw_mca_offsets", check_offsets(seed)?),
    ])
}
