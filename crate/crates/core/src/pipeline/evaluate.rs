//! Checkpoint evaluation: per-pair metrics, warped-image dumps and
//! deformable sampling-grid dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::synth::{load_dataset, Pair};
use super::train::label_ids;
use super::volume::write_volume;
use crate::attention::SamplingTrace;
use crate::error::{config_err, Result};
use crate::network::model_forward_var;
use crate::registration::{
    dice_metric, invertibility_metrics, mean_hd95, warp_trilinear, write_metrics_csv, DisplacementField, MetricsRow,
};
use crate::tensor::{ParameterStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    /// Post-registration metrics, the row of `metrics.csv`.
    pub metrics: MetricsRow,
    pub dice_pre: f64,
    pub dice_post: f64,
    /// Root-mean-square difference to the ground-truth field, in voxels.
    pub field_rmse: f64,
    pub mse_pre: f64,
    pub mse_post: f64,
}

/// Result of registering one pair.
pub struct Registered {
    pub field: DisplacementField,
    pub warped: Tensor,
    pub trace: SamplingTrace,
}

pub fn register(store: &ParameterStore, cfg: &RunConfig, pair: &Pair) -> Result<Registered> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let m = tape.constant(pair.moving.clone());
    let f = tape.constant(pair.fixed.clone());
    let mut trace = SamplingTrace::new();
    let u = model_forward_var(&mut tape, &b, &cfg.model, m, f, Some(&mut trace))?;
    let field = DisplacementField::new(tape.tensor(u))?;
    let warped = warp_trilinear(&pair.moving, &field)?;
    Ok(Registered { field, warped, trace })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

pub fn evaluate_pair(pair_id: &str, cfg: &RunConfig, pair: &Pair, reg: &Registered) -> Result<PairEval> {
    let labels = label_ids(cfg.data.n_labels);
    let warped_labels = pair.labels_moving.warp_nearest(&reg.field)?;
    let pre = dice_metric(&pair.labels_moving, &pair.labels_fixed, &labels)?;
    let post = dice_metric(&warped_labels, &pair.labels_fixed, &labels)?;
    let metrics = MetricsRow {
        pair_id: pair_id.to_string(),
        hd95: mean_hd95(&warped_labels, &pair.labels_fixed, &labels)?,
        inv: invertibility_metrics(&reg.field)?,
        dice: post.clone(),
    };
    Ok(PairEval {
        metrics,
        dice_pre: pre.mean,
        dice_post: post.mean,
        field_rmse: mse(reg.field.tensor(), pair.gt_field.tensor()).sqrt(),
        mse_pre: mse(&pair.moving, &pair.fixed),
        mse_post: mse(&reg.warped, &pair.fixed),
    })
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const REGISTRATION_CSV: &str = "registration.csv";
pub const REGISTRATION_CSV_HEADER: &str = "pair_id,dice_pre,dice_post,field_rmse,mse_pre,mse_post";

pub fn write_registration_csv(rows: &[PairEval], mut w: impl Write) -> Result<()> {
    writeln!(w, "{REGISTRATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.metrics.pair_id, r.dice_pre, r.dice_post, r.field_rmse, r.mse_pre, r.mse_post
        )?;
    }
    Ok(())
}

/// Writes one CSV per encoder block into `dir`; returns the file count.
pub fn dump_grids(trace: &SamplingTrace, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    trace.dump(dir)?;
    Ok(trace.records().len())
}

/// Evaluates every pair of the dataset at `data_dir` with the checkpoint and
/// writes `metrics.csv`, `registration.csv`, `warped/` dumps (warped image,
/// difference to the fixed image, field) and `grids/pair_000/`.
pub fn evaluate(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Vec<PairEval>> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.clone();
    let store = ck.restore(&cfg.model)?;
    let ds = load_dataset(data_dir)?;
    if ds.params.extents != cfg.model.image {
        return Err(config_err!(
            "dataset extents {:?} do not match the checkpoint's image size {:?}",
            ds.params.extents,
            cfg.model.image
        ));
    }
    let warp_dir = out.join("warped");
    fs::create_dir_all(&warp_dir)?;
    let mut rows = Vec::with_capacity(ds.pairs.len());
    for (i, pair) in ds.pairs.iter().enumerate() {
        let id = format!("pair_{i:03}");
        let reg = register(&store, &cfg, pair)?;
        rows.push(evaluate_pair(&id, &cfg, pair, &reg)?);
        write_volume(&warp_dir.join(format!("{id}_warped")), &reg.warped)?;
        let diff: Vec<f64> = reg
            .warped
            .data()
            .iter()
            .zip(pair.fixed.data())
            .map(|(a, b)| a - b)
            .collect();
        write_volume(
            &warp_dir.join(format!("{id}_diff")),
            &Tensor::new(pair.fixed.shape(), diff)?,
        )?;
        write_volume(&warp_dir.join(format!("{id}_field")), reg.field.tensor())?;
        if i == 0 {
            dump_grids(&reg.trace, &out.join("grids").join(&id))?;
        }
    }
    let metrics: Vec<MetricsRow> = rows.iter().map(|r| r.metrics.clone()).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&metrics, &mut buf)?;
    fs::write(out.join(METRICS_CSV), buf)?;
    let mut buf = Vec::new();
    write_registration_csv(&rows, &mut buf)?;
    fs::write(out.join(REGISTRATION_CSV), buf)?;
    Ok(rows)
}
