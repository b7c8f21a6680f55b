//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated;
//! window extents are written `HxWxD`. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::Mechanism;
use crate::error::{config_err, Error, Result};
use crate::network::ModelConfig;

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_labels: usize,
    /// Largest displacement magnitude of the ground-truth field, in voxels.
    pub max_warp: f64,
    /// Gaussian smoothing width of the ground-truth field, in voxels.
    pub smoothing: f64,
    pub n_blobs: usize,
    pub multimodal: bool,
}

/// Everything a `synth` / `train` / `eval` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weights of the NCC, soft Dice and diffusion terms.
    pub loss_weights: [f64; 3],
    pub ncc_window: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "image",
    "patch_size",
    "embed_dim",
    "depths",
    "heads",
    "windows",
    "decoder_widths",
    "offset_kernel",
    "mlp_ratio",
    "share_paths",
    "mechanism",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_ncc",
    "weight_dice",
    "weight_diff",
    "ncc_window",
    "epochs",
    "seed",
    "n_train",
    "n_val",
    "n_labels",
    "max_warp",
    "smoothing",
    "n_blobs",
    "multimodal",
    "data_dir",
    "out",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("`{key}`: cannot parse `{v}`"))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_extent(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(['x', ','])
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| config_err!("`{key}`: expected three extents, got `{v}`"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn extent(e: &[usize; 3]) -> String {
    join(e, "x")
}

impl RunConfig {
    /// 16³ volumes, patch 2, two stages of width 8 and 16, windows 2³.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                image: [16, 16, 16],
                patch_size: 2,
                embed_dim: 8,
                depths: vec![2, 2],
                heads: vec![2, 2],
                windows: vec![[2, 2, 2]; 2],
                decoder_widths: vec![16, 8],
                offset_kernel: 3,
                mlp_ratio: 2,
                share_paths: false,
                mechanism: Mechanism::Deformable,
            },
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_weights: [1.0, 1.0, 1.0],
            ncc_window: 5,
            epochs: 60,
            seed: 0,
            data: DataConfig {
                n_train: 8,
                n_val: 4,
                n_labels: 4,
                max_warp: 2.5,
                smoothing: 3.0,
                n_blobs: 8,
                multimodal: false,
            },
            data_dir: PathBuf::from("data"),
            out: PathBuf::from("run"),
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let d = &mut self.data;
        match key.trim() {
            "image" => m.image = parse_extent(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "embed_dim" => m.embed_dim = parse(key, v)?,
            "depths" => m.depths = parse_list(key, v)?,
            "heads" => m.heads = parse_list(key, v)?,
            "windows" => m.windows = v.split(',').map(|w| parse_extent(key, w)).collect::<Result<_>>()?,
            "decoder_widths" => m.decoder_widths = parse_list(key, v)?,
            "offset_kernel" => m.offset_kernel = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "share_paths" => m.share_paths = parse_bool(key, v)?,
            "mechanism" => {
                m.mechanism = match v {
                    "deformable" => Mechanism::Deformable,
                    "fixed_window" => Mechanism::FixedWindow,
                    _ => {
                        return Err(config_err!(
                            "`mechanism`: expected deformable or fixed_window, got `{v}`"
                        ))
                    }
                }
            }
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_ncc" => self.loss_weights[0] = parse(key, v)?,
            "weight_dice" => self.loss_weights[1] = parse(key, v)?,
            "weight_diff" => self.loss_weights[2] = parse(key, v)?,
            "ncc_window" => self.ncc_window = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "n_train" => d.n_train = parse(key, v)?,
            "n_val" => d.n_val = parse(key, v)?,
            "n_labels" => d.n_labels = parse(key, v)?,
            "max_warp" => d.max_warp = parse(key, v)?,
            "smoothing" => d.smoothing = parse(key, v)?,
            "n_blobs" => d.n_blobs = parse(key, v)?,
            "multimodal" => d.multimodal = parse_bool(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            other => return Err(config_err!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses a whole file on top of the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`", n + 1))?;
            cfg.set(k, v).map_err(|e| config_err!("line {}: {}", n + 1, strip(e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image", join(&m.image, ","));
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depths", join(&m.depths, ","));
        kv("heads", join(&m.heads, ","));
        kv("windows", m.windows.iter().map(extent).collect::<Vec<_>>().join(","));
        kv("decoder_widths", join(&m.decoder_widths, ","));
        kv("offset_kernel", m.offset_kernel.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("share_paths", m.share_paths.to_string());
        let mech = match m.mechanism {
            Mechanism::Deformable => "deformable",
            Mechanism::FixedWindow => "fixed_window",
        };
        kv("mechanism", mech.into());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("weight_ncc", self.loss_weights[0].to_string());
        kv("weight_dice", self.loss_weights[1].to_string());
        kv("weight_diff", self.loss_weights[2].to_string());
        kv("ncc_window", self.ncc_window.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("n_train", d.n_train.to_string());
        kv("n_val", d.n_val.to_string());
        kv("n_labels", d.n_labels.to_string());
        kv("max_warp", d.max_warp.to_string());
        kv("smoothing", d.smoothing.to_string());
        kv("n_blobs", d.n_blobs.to_string());
        kv("multimodal", d.multimodal.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out", self.out.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(config_err!("need lr > 0 and betas in [0, 1)"));
        }
        if self.loss_weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(config_err!("loss weights must be non-negative"));
        }
        if self.ncc_window.is_multiple_of(2) {
            return Err(config_err!("NCC window must be odd, got {}", self.ncc_window));
        }
        let d = &self.data;
        if d.n_labels == 0 || d.n_blobs == 0 {
            return Err(config_err!("n_labels and n_blobs must be positive"));
        }
        if d.max_warp.is_nan() || d.max_warp < 0.0 || d.smoothing.is_nan() || d.smoothing <= 0.0 {
            return Err(config_err!("need max_warp >= 0 and smoothing > 0"));
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
