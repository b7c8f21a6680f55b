//! Synthetic registration pairs: Gaussian-blob volumes with blob-ownership
//! labels, warped by a smooth random field whose Jacobian is kept positive.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::config::RunConfig;
use super::parallel_map;
use super::volume::{read_labels, read_volume, write_labels, write_volume};
use crate::error::{config_err, Error, Result};
use crate::nn::Rng64;
use crate::registration::{invertibility_metrics, voxels, warp_trilinear, DisplacementField, LabelMap};
use crate::tensor::Tensor;

/// Attempts per pair before giving up on a fold-free field.
pub const MAX_TRIES: usize = 100;

/// Blob response below which a voxel stays background.
const OWNERSHIP_LEVEL: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_pairs: usize,
    pub extents: [usize; 3],
    pub n_labels: usize,
    pub max_warp: f64,
    pub smoothing: f64,
    pub n_blobs: usize,
    pub multimodal: bool,
}

impl SynthParams {
    /// Training plus validation pairs at the model's image size.
    pub fn from_run(cfg: &RunConfig) -> Self {
        let d = &cfg.data;
        Self {
            seed: cfg.seed,
            n_pairs: d.n_train + d.n_val,
            extents: cfg.model.image,
            n_labels: d.n_labels,
            max_warp: d.max_warp,
            smoothing: d.smoothing,
            n_blobs: d.n_blobs,
            multimodal: d.multimodal,
        }
    }

    fn to_text(&self) -> String {
        let e = self.extents;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_pairs = {}", self.n_pairs);
        let _ = writeln!(s, "extents = {},{},{}", e[0], e[1], e[2]);
        let _ = writeln!(s, "n_labels = {}", self.n_labels);
        let _ = writeln!(s, "max_warp = {}", self.max_warp);
        let _ = writeln!(s, "smoothing = {}", self.smoothing);
        let _ = writeln!(s, "n_blobs = {}", self.n_blobs);
        let _ = writeln!(s, "multimodal = {}", self.multimodal);
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut p = Self {
            seed: 0,
            n_pairs: 0,
            extents: [0; 3],
            n_labels: 0,
            max_warp: 0.0,
            smoothing: 1.0,
            n_blobs: 0,
            multimodal: false,
        };
        let bad = |k: &str| Error::Format(format!("dataset manifest: bad value for `{k}`"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("dataset manifest: malformed line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => p.seed = v.parse().map_err(|_| bad(k))?,
                "n_pairs" => p.n_pairs = v.parse().map_err(|_| bad(k))?,
                "extents" => {
                    let e: Vec<usize> = v
                        .split(',')
                        .map(|x| x.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(k))?;
                    p.extents = e.try_into().map_err(|_| bad(k))?;
                }
                "n_labels" => p.n_labels = v.parse().map_err(|_| bad(k))?,
                "max_warp" => p.max_warp = v.parse().map_err(|_| bad(k))?,
                "smoothing" => p.smoothing = v.parse().map_err(|_| bad(k))?,
                "n_blobs" => p.n_blobs = v.parse().map_err(|_| bad(k))?,
                "multimodal" => p.multimodal = v.parse().map_err(|_| bad(k))?,
                _ => return Err(Error::Format(format!("dataset manifest: unknown key `{k}`"))),
            }
        }
        Ok(p)
    }
}

/// One moving/fixed pair with labels and the field that relates them:
/// `fixed(x) = moving(x + gt_field(x))` up to intensity remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub moving: Tensor,
    pub fixed: Tensor,
    pub labels_moving: LabelMap,
    pub labels_fixed: LabelMap,
    pub gt_field: DisplacementField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: SynthParams,
    pub pairs: Vec<Pair>,
}

/// Rounds to the stored 32-bit precision so that in-memory and reloaded
/// datasets agree exactly.
fn quantize(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v as f32 as f64).collect();
    Tensor::new(&shape, data).unwrap()
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
    label: u32,
}

fn blob_volume(rng: &mut Rng64, p: &SynthParams) -> (Tensor, LabelMap) {
    let ext = p.extents;
    let blobs: Vec<Blob> = (0..p.n_blobs)
        .map(|i| {
            let center = std::array::from_fn(|a| {
                let e = ext[a] as f64;
                rng.gen_range(0.15 * e..0.85 * e)
            });
            let scale = ext.iter().copied().min().unwrap() as f64;
            Blob {
                center,
                sigma: rng.gen_range(0.1 * scale..0.2 * scale),
                amplitude: rng.gen_range(0.5..1.0),
                label: (i % p.n_labels) as u32 + 1,
            }
        })
        .collect();
    let mut intensity = Vec::with_capacity(ext.iter().product());
    let mut labels = Vec::with_capacity(intensity.capacity());
    for g in voxels(ext) {
        let (mut sum, mut best, mut owner) = (0.0, 0.0, 0);
        for b in &blobs {
            let r2: f64 = (0..3).map(|a| (g[a] as f64 - b.center[a]).powi(2)).sum();
            let resp = (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            sum += b.amplitude * resp;
            if resp > best {
                best = resp;
                owner = b.label;
            }
        }
        intensity.push(sum);
        labels.push(if best > OWNERSHIP_LEVEL { owner } else { 0 });
    }
    let max = intensity.iter().copied().fold(0.0, f64::max).max(1e-12);
    intensity.iter_mut().for_each(|v| *v /= max);
    let [h, w, d] = ext;
    (
        Tensor::new(&[1, h, w, d], intensity).unwrap(),
        LabelMap::new(ext, labels).unwrap(),
    )
}

/// Valid-mode separable Gaussian filter along one axis of a row-major
/// array with extents `ext`; that axis shrinks by `kernel.len() - 1`.
fn smooth_axis(data: &[f64], ext: [usize; 3], axis: usize, kernel: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_ext = ext;
    out_ext[axis] = ext[axis] + 1 - kernel.len();
    let strides = [ext[1] * ext[2], ext[2], 1];
    let out = voxels(out_ext)
        .map(|g| {
            let base: usize = (0..3).map(|a| g[a] * strides[a]).sum();
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * data[base + k * strides[axis]])
                .sum()
        })
        .collect();
    (out, out_ext)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn random_field(rng: &mut Rng64, p: &SynthParams) -> DisplacementField {
    let ext = p.extents;
    let n: usize = ext.iter().product();
    if p.max_warp == 0.0 {
        return DisplacementField::zeros(ext);
    }
    let kernel = gaussian_kernel(p.smoothing);
    // Noise on a padded domain keeps the smoothed field stationary up to the
    // volume border.
    let padded = ext.map(|e| e + kernel.len() - 1);
    let mut comps = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let mut c: Vec<f64> = (0..padded.iter().product())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut e = padded;
        for axis in 0..3 {
            (c, e) = smooth_axis(&c, e, axis, &kernel);
        }
        comps.extend(c);
    }
    let peak = (0..n)
        .map(|i| (0..3).map(|a| comps[a * n + i].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        .max(1e-12);
    comps.iter_mut().for_each(|v| *v *= p.max_warp / peak);
    let t = quantize(Tensor::new(&[3, ext[0], ext[1], ext[2]], comps).unwrap());
    DisplacementField::new(t).unwrap()
}

/// Monotone compression followed by an inversion, a crude stand-in for a
/// change of imaging contrast.
fn remap_contrast(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| 1.0 - v.max(0.0).sqrt()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// Generates pair `index` of the dataset; each pair has its own random
/// stream, so pairs can be generated independently.
pub fn synth_pair(p: &SynthParams, index: usize) -> Result<Pair> {
    let mut rng = Rng64::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let (base, labels) = blob_volume(&mut rng, p);
    let base = quantize(base);
    for _ in 0..MAX_TRIES {
        let field = random_field(&mut rng, p);
        if invertibility_metrics(&field)?.pct_nonpositive > 0.0 {
            continue;
        }
        let mut fixed = warp_trilinear(&base, &field)?;
        if p.multimodal {
            fixed = remap_contrast(&fixed);
        }
        let labels_fixed = labels.warp_nearest(&field)?;
        return Ok(Pair {
            moving: base,
            fixed: quantize(fixed),
            labels_moving: labels,
            labels_fixed,
            gt_field: field,
        });
    }
    Err(Error::Generation(format!(
        "pair {index}: no fold-free field with max_warp {} after {MAX_TRIES} tries",
        p.max_warp
    )))
}

pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    if p.extents.iter().any(|&e| e < 3) || p.n_labels == 0 {
        return Err(config_err!("dataset needs extents >= 3 and at least one label"));
    }
    let pairs = parallel_map(p.n_pairs, |i| synth_pair(p, i))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(Dataset {
        params: p.clone(),
        pairs,
    })
}

fn pair_dir(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("pair_{i:03}"))
}

pub const MANIFEST: &str = "dataset.txt";

/// Writes `dataset.txt` plus one directory of raw volumes per pair.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), ds.params.to_text())?;
    for (i, pair) in ds.pairs.iter().enumerate() {
        let d = pair_dir(dir, i);
        fs::create_dir_all(&d)?;
        write_volume(&d.join("moving"), &pair.moving)?;
        write_volume(&d.join("fixed"), &pair.fixed)?;
        write_labels(&d.join("labels_moving"), &pair.labels_moving)?;
        write_labels(&d.join("labels_fixed"), &pair.labels_fixed)?;
        write_volume(&d.join("gt_field"), pair.gt_field.tensor())?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let params = SynthParams::parse(&text)?;
    let pairs = (0..params.n_pairs)
        .map(|i| {
            let d = pair_dir(dir, i);
            Ok(Pair {
                moving: read_volume(&d.join("moving"))?,
                fixed: read_volume(&d.join("fixed"))?,
                labels_moving: read_labels(&d.join("labels_moving"))?,
                labels_fixed: read_labels(&d.join("labels_fixed"))?,
                gt_field: DisplacementField::new(read_volume(&d.join("gt_field"))?)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { params, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(max_warp: f64) -> SynthParams {
        SynthParams {
            seed: 3,
            n_pairs: 2,
            extents: [12, 12, 12],
            n_labels: 3,
            max_warp,
            smoothing: 3.0,
            n_blobs: 6,
            multimodal: false,
        }
    }

    #[test]
    fn zero_warp_gives_identical_images() {
        let ds = synth_dataset(&params(0.0)).unwrap();
        for p in &ds.pairs {
            assert_eq!(p.moving, p.fixed);
            assert_eq!(p.labels_moving, p.labels_fixed);
            assert!(p.gt_field.tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fields_are_fold_free_and_bounded() {
        let ds = synth_dataset(&params(2.0)).unwrap();
        for p in &ds.pairs {
            assert_eq!(invertibility_metrics(&p.gt_field).unwrap().pct_nonpositive, 0.0);
            let ext = p.gt_field.extents();
            let peak = voxels(ext)
                .map(|g| p.gt_field.at(g).iter().map(|v| v * v).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            assert!((peak - 2.0).abs() < 1e-5, "{peak}");
        }
        assert_ne!(ds.pairs[0].moving, ds.pairs[1].moving);
    }

    #[test]
    fn impossible_warp_is_a_generation_error() {
        let mut p = params(40.0);
        p.smoothing = 0.5;
        assert!(matches!(synth_pair(&p, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let p = params(1.5);
        assert_eq!(SynthParams::parse(&p.to_text()).unwrap(), p);
    }
}
