//! Unsupervised training: weighted NCC + soft Dice + diffusion, optimized
//! with Adam one pair at a time.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::synth::{load_dataset, Dataset, Pair};
use crate::error::{config_err, Error, Result};
use crate::network::{init_params, model_forward, model_forward_var};
use crate::nn::Rng64;
use crate::registration::{dice_metric, diffusion_regularizer, ncc_loss, soft_dice_loss, warp_var};
use crate::tensor::{Bindings, ParameterStore, Tape, Var};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Applies one update from the gradients held in `store`, then clears
    /// them. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in store.iter_mut() {
            let Some(g) = p.grad.take() else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss values of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub ncc: f64,
    pub dice: f64,
    pub diffusion: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.ncc += o.ncc;
        self.dice += o.dice;
        self.diffusion += o.diffusion;
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            total: self.total * s,
            ncc: self.ncc * s,
            dice: self.dice * s,
            diffusion: self.diffusion * s,
        }
    }
}

/// Records the weighted registration loss of one pair; returns the total and
/// the three unweighted terms.
pub fn pair_loss_var(tape: &mut Tape, b: &Bindings, cfg: &RunConfig, pair: &Pair) -> Result<(Var, [Var; 3])> {
    let n_labels = cfg.data.n_labels;
    let m = tape.constant(pair.moving.clone());
    let f = tape.constant(pair.fixed.clone());
    let u = model_forward_var(tape, b, &cfg.model, m, f, None)?;
    let warped = warp_var(tape, m, u)?;
    let ncc = ncc_loss(tape, warped, f, cfg.ncc_window)?;
    let lm = tape.constant(pair.labels_moving.one_hot(n_labels));
    let lf = tape.constant(pair.labels_fixed.one_hot(n_labels));
    let wl = warp_var(tape, lm, u)?;
    let dice = soft_dice_loss(tape, wl, lf)?;
    let diff = diffusion_regularizer(tape, u)?;
    let [a, c, d] = cfg.loss_weights;
    let t0 = tape.scale(ncc, a)?;
    let t1 = tape.scale(dice, c)?;
    let t2 = tape.scale(diff, d)?;
    let s = tape.add(t0, t1)?;
    let total = tape.add(s, t2)?;
    Ok((total, [ncc, dice, diff]))
}

fn terms(tape: &Tape, total: Var, parts: [Var; 3]) -> LossTerms {
    LossTerms {
        total: tape.scalar(total),
        ncc: tape.scalar(parts[0]),
        dice: tape.scalar(parts[1]),
        diffusion: tape.scalar(parts[2]),
    }
}

/// Loss of one pair without a backward pass.
pub fn pair_loss(store: &ParameterStore, cfg: &RunConfig, pair: &Pair) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let b = tape.bind(store);
    let (total, parts) = pair_loss_var(&mut tape, &b, cfg, pair)?;
    Ok(terms(&tape, total, parts))
}

/// Foreground label ids `1..=n`.
pub fn label_ids(n_labels: usize) -> Vec<u32> {
    (1..=n_labels as u32).collect()
}

/// Mean hard-label Dice after registering each pair; pairs whose labels are
/// all absent are skipped.
pub fn mean_dice(store: &ParameterStore, cfg: &RunConfig, pairs: &[Pair]) -> Result<f64> {
    let labels = label_ids(cfg.data.n_labels);
    let (mut sum, mut n) = (0.0, 0);
    for p in pairs {
        let u = model_forward(store, &cfg.model, &p.moving, &p.fixed)?;
        let warped = p.labels_moving.warp_nearest(&u)?;
        let d = dice_metric(&warped, &p.labels_fixed, &labels)?.mean;
        if d.is_finite() {
            sum += d;
            n += 1;
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// Mean Dice of the unregistered pairs.
pub fn baseline_dice(cfg: &RunConfig, pairs: &[Pair]) -> Result<f64> {
    let labels = label_ids(cfg.data.n_labels);
    let (mut sum, mut n) = (0.0, 0);
    for p in pairs {
        let d = dice_metric(&p.labels_moving, &p.labels_fixed, &labels)?.mean;
        if d.is_finite() {
            sum += d;
            n += 1;
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// One row of the loss curve. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub iterations: usize,
    pub loss: LossTerms,
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Weights with the highest validation Dice (earliest on ties).
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub last: ParameterStore,
    pub baseline_val_dice: f64,
}

/// Splits the dataset into training and validation pairs. Without
/// validation pairs the training pairs double as validation set.
pub fn split<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<(&'a [Pair], &'a [Pair])> {
    let (nt, nv) = (cfg.data.n_train, cfg.data.n_val);
    if nt == 0 {
        return Err(config_err!("n_train must be positive"));
    }
    if ds.pairs.len() < nt + nv {
        return Err(config_err!(
            "dataset has {} pairs, config needs {} training and {} validation pairs",
            ds.pairs.len(),
            nt,
            nv
        ));
    }
    if ds.params.extents != cfg.model.image {
        return Err(config_err!(
            "dataset extents {:?} differ from model image {:?}",
            ds.params.extents,
            cfg.model.image
        ));
    }
    let train = &ds.pairs[..nt];
    let val = if nv == 0 { train } else { &ds.pairs[nt..nt + nv] };
    Ok((train, val))
}

fn check_finite(store: &ParameterStore, step: usize) -> Result<()> {
    for (name, t) in store.iter() {
        if t.first_non_finite().is_some() {
            return Err(Error::NonFiniteParam {
                name: name.to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Trains from a fresh initialization; `on_epoch` sees every log row as it
/// is produced.
pub fn train(cfg: &RunConfig, ds: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
    cfg.validate()?;
    let (train_pairs, val_pairs) = split(cfg, ds)?;
    let mut store = init_params(&cfg.model, cfg.seed)?;
    let mut adam = Adam::from_config(cfg);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut rng = Rng64::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    let mut baseline = LossTerms::default();
    for p in train_pairs {
        baseline.add(&pair_loss(&store, cfg, p)?);
    }
    let first = EpochLog {
        epoch: 0,
        iterations: 0,
        loss: baseline.scaled(1.0 / train_pairs.len() as f64),
        val_dice: mean_dice(&store, cfg, val_pairs)?,
    };
    on_epoch(&first);
    let mut log = vec![first];
    let mut best = (first.val_dice, 0, store.clone());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossTerms::default();
        for &i in &order {
            let mut tape = Tape::new().with_nan_guard(true);
            let b = tape.bind(&store);
            let (total, parts) = pair_loss_var(&mut tape, &b, cfg, &train_pairs[i])?;
            acc.add(&terms(&tape, total, parts));
            let grads = tape.backward(total)?;
            store.absorb_grads(&b, &grads);
            adam.step(&mut store);
            step += 1;
            check_finite(&store, step)?;
        }
        let row = EpochLog {
            epoch,
            iterations: step,
            loss: acc.scaled(1.0 / order.len() as f64),
            val_dice: mean_dice(&store, cfg, val_pairs)?,
        };
        on_epoch(&row);
        if row.val_dice > best.0 {
            best = (row.val_dice, epoch, store.clone());
        }
        log.push(row);
    }
    Ok(TrainReport {
        log,
        best: best.2,
        best_epoch: best.1,
        last: store,
        baseline_val_dice: baseline_dice(cfg, val_pairs)?,
    })
}

pub const LOSS_CSV_HEADER: &str = "epoch,iterations,loss,ncc,dice,diffusion,val_dice";

pub fn write_loss_csv(log: &[EpochLog], mut w: impl Write) -> Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.iterations, r.loss.total, r.loss.ncc, r.loss.dice, r.loss.diffusion, r.val_dice
        )?;
    }
    Ok(())
}

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.dcax";

/// Loads `cfg.data_dir`, trains, and writes `loss.csv` and the best
/// checkpoint into `cfg.out`.
pub fn run_training(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
    let ds = load_dataset(&cfg.data_dir)?;
    let report = train(cfg, &ds, on_epoch)?;
    write_outputs(cfg, &report, &cfg.out)?;
    Ok(report)
}

pub fn write_outputs(cfg: &RunConfig, report: &TrainReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    write_loss_csv(&report.log, &mut csv)?;
    std::fs::write(out.join(LOSS_CSV), csv)?;
    Checkpoint::new(cfg.clone(), report.best.clone()).save(&out.join(CHECKPOINT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        s.get_mut("w").unwrap().grad = Some(vec![0.5, -3.0]);
        let mut a = Adam::new(0.1, 0.9, 0.999, 1e-8);
        a.step(&mut s);
        let w = s.get("w").unwrap().data();
        // The bias-corrected first step is lr · g / (|g| + eps).
        assert_eq!(w[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8));
        assert_eq!(w[1], -1.0 + 0.1 * 3.0 / (3.0 + 1e-8));
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let mut a = Adam::new(0.05, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let w = s.get("w").unwrap().data()[0];
            s.get_mut("w").unwrap().grad = Some(vec![2.0 * (w - 1.0)]);
            a.step(&mut s);
        }
        assert!((s.get("w").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}
