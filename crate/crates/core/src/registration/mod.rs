//! Spatial warping, unsupervised registration losses and deformation metrics.

mod losses;
mod metrics;

use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use losses::{diffusion_regularizer, ncc_loss, soft_dice_loss};
pub use metrics::{
    dice_metric, hd95_metric, invertibility_metrics, jacobian_map, mean_hd95, write_metrics_csv, DiceReport,
    InvertibilityMetrics, JacobianMap, MetricsRow,
};

/// Per-voxel displacement `u`, `[3, H, W, D]`, in voxels. The deformation is
/// `φ(x) = x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    data: Tensor,
}

impl DisplacementField {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(shape_err!("displacement field must be [3,H,W,D], got {s:?}"));
        }
        Ok(Self { data })
    }

    pub fn zeros(ext: [usize; 3]) -> Self {
        Self {
            data: Tensor::zeros(&[3, ext[0], ext[1], ext[2]]),
        }
    }

    /// Field whose component `i` at voxel `x` is `f(x)[i]`.
    pub fn from_fn(ext: [usize; 3], f: impl Fn([usize; 3]) -> [f64; 3]) -> Self {
        let n = ext.iter().product::<usize>();
        let mut d = vec![0.0; 3 * n];
        for (i, g) in voxels(ext).enumerate() {
            let u = f(g);
            for c in 0..3 {
                d[c * n + i] = u[c];
            }
        }
        Self {
            data: Tensor::new(&[3, ext[0], ext[1], ext[2]], d).unwrap(),
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Displacement at voxel `g`.
    pub fn at(&self, g: [usize; 3]) -> [f64; 3] {
        let e = self.extents();
        let n = e.iter().product::<usize>();
        let i = (g[0] * e[1] + g[1]) * e[2] + g[2];
        let d = self.data.data();
        [d[i], d[n + i], d[2 * n + i]]
    }
}

/// Integer label volume; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    ext: [usize; 3],
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(ext: [usize; 3], data: Vec<u32>) -> Result<Self> {
        if ext.iter().product::<usize>() != data.len() || ext.contains(&0) {
            return Err(shape_err!("label map {ext:?} cannot hold {} voxels", data.len()));
        }
        Ok(Self { ext, data })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.ext
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, g: [usize; 3]) -> u32 {
        self.data[(g[0] * self.ext[1] + g[1]) * self.ext[2] + g[2]]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// One-hot encoding of labels `1..=n_labels`, `[n_labels, H, W, D]`.
    pub fn one_hot(&self, n_labels: usize) -> Tensor {
        let n = self.data.len();
        let mut d = vec![0.0; n_labels.max(1) * n];
        for (i, &l) in self.data.iter().enumerate() {
            if l >= 1 && (l as usize) <= n_labels {
                d[(l as usize - 1) * n + i] = 1.0;
            }
        }
        let [a, b, c] = self.ext;
        Tensor::new(&[n_labels.max(1), a, b, c], d).unwrap()
    }

    /// `out(x) = self(round(x + u(x)))`, clamped to the volume.
    pub fn warp_nearest(&self, field: &DisplacementField) -> Result<LabelMap> {
        if field.extents() != self.ext {
            return Err(shape_err!(
                "label map {:?} and field {:?} differ",
                self.ext,
                field.extents()
            ));
        }
        let out = voxels(self.ext)
            .map(|g| {
                let u = field.at(g);
                let s: [usize; 3] =
                    std::array::from_fn(|a| (g[a] as f64 + u[a]).round().clamp(0.0, (self.ext[a] - 1) as f64) as usize);
                self.get(s)
            })
            .collect();
        LabelMap::new(self.ext, out)
    }
}

/// Voxel coordinates in row-major order.
pub fn voxels(ext: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..ext[0]).flat_map(move |a| (0..ext[1]).flat_map(move |b| (0..ext[2]).map(move |c| [a, b, c])))
}

fn identity_grid(ext: [usize; 3]) -> Tensor {
    let d: Vec<f64> = voxels(ext).flat_map(|g| g.map(|v| v as f64)).collect();
    Tensor::new(&[ext[0], ext[1], ext[2], 3], d).unwrap()
}

/// Trilinear warp of a channel-first `[C,H,W,D]` volume by a `[3,H,W,D]`
/// field: `out(x) = image(x + u(x))`, border-clamped.
pub fn warp_var(tape: &mut Tape, image: Var, field: Var) -> Result<Var> {
    let is = tape.shape(image).to_vec();
    let fs = tape.shape(field).to_vec();
    if is.len() != 4 || fs.len() != 4 || fs[0] != 3 || is[1..] != fs[1..] {
        return Err(shape_err!("cannot warp image {is:?} with field {fs:?}"));
    }
    let ext = [is[1], is[2], is[3]];
    let u = tape.permute(field, &[1, 2, 3, 0])?;
    let grid = tape.constant(identity_grid(ext));
    let coords = tape.add(grid, u)?;
    let img = if is[0] == 1 {
        tape.reshape(image, &[ext[0], ext[1], ext[2], 1])?
    } else {
        tape.permute(image, &[1, 2, 3, 0])?
    };
    let out = tape.grid_sample(img, coords, 1)?;
    if is[0] == 1 {
        tape.reshape(out, &is)
    } else {
        tape.permute(out, &[3, 0, 1, 2])
    }
}

/// Value-level trilinear warp.
pub fn warp_trilinear(image: &Tensor, field: &DisplacementField) -> Result<Tensor> {
    let mut tape = Tape::new();
    let i = tape.constant(image.clone());
    let f = tape.constant(field.tensor().clone());
    let w = warp_var(&mut tape, i, f)?;
    Ok(tape.tensor(w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let img = Tensor::new(&[1, 3, 4, 2], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let w = warp_trilinear(&img, &DisplacementField::zeros([3, 4, 2])).unwrap();
        assert_eq!(w, img);
    }

    #[test]
    fn unit_shift_on_ramp() {
        let ext = [5, 3, 3];
        let img = Tensor::new(&[1, 5, 3, 3], voxels(ext).map(|g| g[0] as f64).collect()).unwrap();
        let f = DisplacementField::from_fn(ext, |_| [1.0, 0.0, 0.0]);
        let w = warp_trilinear(&img, &f).unwrap();
        for (g, v) in voxels(ext).zip(w.data()) {
            assert_eq!(*v, (g[0] + 1).min(4) as f64);
        }
    }

    #[test]
    fn nearest_keeps_labels_under_small_shift() {
        let ext = [4, 4, 4];
        let l = LabelMap::new(ext, (0..64).map(|i| (i % 5) as u32).collect()).unwrap();
        let f = DisplacementField::from_fn(ext, |_| [0.4, 0.0, 0.0]);
        assert_eq!(l.warp_nearest(&f).unwrap(), l);
    }

    #[test]
    fn warp_extent_mismatch() {
        let img = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(warp_trilinear(&img, &DisplacementField::zeros([3, 3, 4])).is_err());
    }

    #[test]
    fn multichannel_warp_matches_per_channel() {
        let ext = [3, 3, 3];
        let data: Vec<f64> = (0..54).map(|i| (i as f64 * 0.3).cos()).collect();
        let img = Tensor::new(&[2, 3, 3, 3], data.clone()).unwrap();
        let f = DisplacementField::from_fn(ext, |g| [0.3 * g[1] as f64, -0.2, 0.7]);
        let w = warp_trilinear(&img, &f).unwrap();
        for c in 0..2 {
            let single = Tensor::new(&[1, 3, 3, 3], data[c * 27..(c + 1) * 27].to_vec()).unwrap();
            let ws = warp_trilinear(&single, &f).unwrap();
            assert_eq!(&w.data()[c * 27..(c + 1) * 27], ws.data());
        }
    }
}
