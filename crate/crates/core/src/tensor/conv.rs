//! Direct 3D cross-correlation with zero padding and channel groups.

use crate::error::{config_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub ext: [usize; 3],
    pub out: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(shape_err!("conv3d input must be [C,H,W,D], got {x_shape:?}"));
        }
        if k_shape.len() != 5 || k_shape[2] != k_shape[3] || k_shape[3] != k_shape[4] {
            return Err(shape_err!("conv3d kernel must be [Cout,Cin/g,k,k,k], got {k_shape:?}"));
        }
        if groups == 0 || stride == 0 {
            return Err(config_err!("conv3d needs groups >= 1 and stride >= 1"));
        }
        let cin = x_shape[0];
        let cout = k_shape[0];
        if !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(config_err!(
                "conv3d channels (in {cin}, out {cout}) not divisible by groups {groups}"
            ));
        }
        if k_shape[1] != cin / groups {
            return Err(shape_err!(
                "kernel expects {} input channels per group, input gives {}",
                k_shape[1],
                cin / groups
            ));
        }
        let k = k_shape[2];
        let mut out = [0; 3];
        for a in 0..3 {
            let e = x_shape[a + 1] + 2 * pad;
            if e < k {
                return Err(shape_err!("kernel {k} larger than padded extent {e} on axis {a}"));
            }
            out[a] = (e - k) / stride + 1;
        }
        Ok(Self {
            cin,
            cout,
            ext: [x_shape[1], x_shape[2], x_shape[3]],
            out,
            k,
            stride,
            pad,
            groups,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.cout, self.out[0], self.out[1], self.out[2]]
    }

    /// Output index range along one axis for kernel tap `kk` such that the
    /// input index stays inside `[0, ext)`.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (e, o, s) = (self.ext[axis] as isize, self.out[axis] as isize, self.stride as isize);
        let off = kk as isize - self.pad as isize;
        // need 0 <= o*s + off < e
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if e - off <= 0 {
            0
        } else {
            ((e - off - 1) / s + 1).min(o)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    /// Visits every (output row, input row) pair for every weight tap.
    ///
    /// The callback receives `(co, ci, kernel_flat_index, out_offset,
    /// in_offset, len)`; consecutive row elements are 1 apart in the output
    /// and `stride` apart in the input.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let cout_g = self.cout / self.groups;
        let cin_g = self.cin / self.groups;
        let [eh, ew, ed] = self.ext;
        let [oh, ow, od] = self.out;
        let k = self.k;
        let s = self.stride;
        let p = self.pad as isize;
        for co in 0..self.cout {
            let g = co / cout_g;
            for cl in 0..cin_g {
                let ci = g * cin_g + cl;
                for kx in 0..k {
                    let (x0, x1) = self.valid(0, kx);
                    for ky in 0..k {
                        let (y0, y1) = self.valid(1, ky);
                        for kz in 0..k {
                            let (z0, z1) = self.valid(2, kz);
                            if z1 <= z0 {
                                continue;
                            }
                            let kidx = (((co * cin_g + cl) * k + kx) * k + ky) * k + kz;
                            let len = z1 - z0;
                            for ox in x0..x1 {
                                let ix = (ox * s) as isize + kx as isize - p;
                                for oy in y0..y1 {
                                    let iy = (oy * s) as isize + ky as isize - p;
                                    let iz = (z0 * s) as isize + kz as isize - p;
                                    let out_off = ((co * oh + ox) * ow + oy) * od + z0;
                                    let in_off = ((ci * eh + ix as usize) * ew + iy as usize) * ed + iz as usize;
                                    f(co, ci, kidx, out_off, in_off, len);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let [c, a, b, d] = self.out_shape();
        let mut out = vec![0.0; c * a * b * d];
        let s = self.stride;
        self.for_each_row(|_, _, kidx, oo, io, len| {
            let wv = kernel[kidx];
            if wv == 0.0 {
                return;
            }
            let orow = &mut out[oo..oo + len];
            if s == 1 {
                for (o, xv) in orow.iter_mut().zip(&x[io..io + len]) {
                    *o += wv * xv;
                }
            } else {
                for (t, o) in orow.iter_mut().enumerate() {
                    *o += wv * x[io + t * s];
                }
            }
        });
        out
    }

    pub fn backward_input(&self, g: &[f64], kernel: &[f64], gx: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|_, _, kidx, oo, io, len| {
            let wv = kernel[kidx];
            if wv == 0.0 {
                return;
            }
            let grow = &g[oo..oo + len];
            if s == 1 {
                for (o, gv) in gx[io..io + len].iter_mut().zip(grow) {
                    *o += wv * gv;
                }
            } else {
                for (t, gv) in grow.iter().enumerate() {
                    gx[io + t * s] += wv * gv;
                }
            }
        });
    }

    pub fn backward_kernel(&self, g: &[f64], x: &[f64], gk: &mut [f64]) {
        let s = self.stride;
        self.for_each_row(|_, _, kidx, oo, io, len| {
            let grow = &g[oo..oo + len];
            let acc: f64 = if s == 1 {
                grow.iter().zip(&x[io..io + len]).map(|(a, b)| a * b).sum()
            } else {
                grow.iter().enumerate().map(|(t, gv)| gv * x[io + t * s]).sum()
            };
            gk[kidx] += acc;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar-loop oracle, independent of the row decomposition.
    fn naive(x: &[f64], xs: [usize; 4], w: &[f64], ks: [usize; 5], s: usize, p: usize, groups: usize) -> Vec<f64> {
        let [_, h, wd, d] = xs;
        let [cout, cing, k, _, _] = ks;
        let o = |e: usize| (e + 2 * p - k) / s + 1;
        let (oh, ow, od) = (o(h), o(wd), o(d));
        let coutg = cout / groups;
        let mut out = vec![0.0; cout * oh * ow * od];
        for co in 0..cout {
            for a in 0..oh {
                for b in 0..ow {
                    for c in 0..od {
                        let mut acc = 0.0;
                        for cl in 0..cing {
                            let ci = (co / coutg) * cing + cl;
                            for kx in 0..k {
                                for ky in 0..k {
                                    for kz in 0..k {
                                        let ix = (a * s + kx) as isize - p as isize;
                                        let iy = (b * s + ky) as isize - p as isize;
                                        let iz = (c * s + kz) as isize - p as isize;
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix >= h as isize
                                            || iy >= wd as isize
                                            || iz >= d as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[((ci * h + ix as usize) * wd + iy as usize) * d + iz as usize];
                                        let wv = w[(((co * cing + cl) * k + kx) * k + ky) * k + kz];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((co * oh + a) * ow + b) * od + c] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_naive_loops() {
        for &(s, p, groups, k) in &[(1, 1, 1, 3), (2, 0, 1, 2), (1, 2, 4, 5), (2, 1, 2, 3), (3, 0, 1, 1)] {
            let xs = [4, 5, 6, 7];
            let ks = [4, 4 / groups, k, k, k];
            let x = pseudo(xs.iter().product(), 1);
            let w = pseudo(ks.iter().product(), 2);
            let g = ConvGeom::new(&xs, &ks, s, p, groups).unwrap();
            let got = g.forward(&x, &w);
            let want = naive(&x, xs, &w, ks, s, p, groups);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p} g={groups}");
            }
        }
    }

    #[test]
    fn group_divisibility() {
        assert!(matches!(
            ConvGeom::new(&[4, 3, 3, 3], &[3, 1, 1, 1, 1], 1, 0, 3),
            Err(crate::Error::Config(_))
        ));
    }
}
