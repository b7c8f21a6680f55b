//! Trilinear sampling with border clamping.

/// The 8 lattice neighbours of a continuous point with their blend weights
/// and the weights' partial derivatives with respect to the point.
pub(crate) struct Corners {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 3]; 8],
}

fn axis_weights(e: usize, p: f64) -> (usize, usize, [f64; 2], [f64; 2]) {
    if e == 1 {
        return (0, 0, [1.0, 0.0], [0.0, 0.0]);
    }
    let hi = (e - 1) as f64;
    let inside = (0.0..=hi).contains(&p);
    let c = p.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(e - 2);
    let f = c - i0 as f64;
    let d = if inside { 1.0 } else { 0.0 };
    (i0, i0 + 1, [1.0 - f, f], [-d, d])
}

pub(crate) fn corners(ext: [usize; 3], p: [f64; 3]) -> Corners {
    let (x0, x1, wx, dx) = axis_weights(ext[0], p[0]);
    let (y0, y1, wy, dy) = axis_weights(ext[1], p[1]);
    let (z0, z1, wz, dz) = axis_weights(ext[2], p[2]);
    let xs = [x0, x1];
    let ys = [y0, y1];
    let zs = [z0, z1];
    let mut out = Corners {
        idx: [0; 8],
        w: [0.0; 8],
        dw: [[0.0; 3]; 8],
    };
    let mut n = 0;
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                out.idx[n] = (xs[a] * ext[1] + ys[b]) * ext[2] + zs[c];
                out.w[n] = wx[a] * wy[b] * wz[c];
                out.dw[n] = [dx[a] * wy[b] * wz[c], wx[a] * dy[b] * wz[c], wx[a] * wy[b] * dz[c]];
                n += 1;
            }
        }
    }
    out
}

/// Samples a channel-last `[H,W,D,C]` field at a continuous point.
///
/// Coordinates are in lattice units; anything outside the grid is clamped to
/// the border.
pub fn sample_trilinear(values: &[f64], ext: [usize; 3], channels: usize, p: [f64; 3]) -> Vec<f64> {
    let cs = corners(ext, p);
    let mut out = vec![0.0; channels];
    for n in 0..8 {
        let w = cs.w[n];
        let base = cs.idx[n] * channels;
        for (o, v) in out.iter_mut().zip(&values[base..base + channels]) {
            *o += w * v;
        }
    }
    out
}

pub(crate) fn grid_sample_forward(
    x: &[f64],
    ext: [usize; 3],
    channels: usize,
    coords: &[f64],
    groups: usize,
) -> Vec<f64> {
    let npos = coords.len() / (3 * groups);
    let cg = channels / groups;
    let mut out = vec![0.0; npos * channels];
    for pos in 0..npos {
        for g in 0..groups {
            let off = (pos * groups + g) * 3;
            let cs = corners(ext, [coords[off], coords[off + 1], coords[off + 2]]);
            let orow = &mut out[pos * channels + g * cg..pos * channels + (g + 1) * cg];
            for n in 0..8 {
                let w = cs.w[n];
                let base = cs.idx[n] * channels + g * cg;
                for (o, v) in orow.iter_mut().zip(&x[base..base + cg]) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward(
    x: &[f64],
    ext: [usize; 3],
    channels: usize,
    coords: &[f64],
    groups: usize,
    g_out: &[f64],
    gx: Option<&mut [f64]>,
    gc: Option<&mut [f64]>,
) {
    let npos = coords.len() / (3 * groups);
    let cg = channels / groups;
    let mut gx = gx;
    let mut gc = gc;
    for pos in 0..npos {
        for g in 0..groups {
            let off = (pos * groups + g) * 3;
            let cs = corners(ext, [coords[off], coords[off + 1], coords[off + 2]]);
            let grow = &g_out[pos * channels + g * cg..pos * channels + (g + 1) * cg];
            if let Some(gx) = gx.as_deref_mut() {
                for n in 0..8 {
                    let w = cs.w[n];
                    if w == 0.0 {
                        continue;
                    }
                    let base = cs.idx[n] * channels + g * cg;
                    for (o, gv) in gx[base..base + cg].iter_mut().zip(grow) {
                        *o += w * gv;
                    }
                }
            }
            if let Some(gc) = gc.as_deref_mut() {
                let mut acc = [0.0; 3];
                for n in 0..8 {
                    let base = cs.idx[n] * channels + g * cg;
                    let dot: f64 = grow.iter().zip(&x[base..base + cg]).map(|(a, b)| a * b).sum();
                    for (a, w) in acc.iter_mut().zip(&cs.dw[n]) {
                        *a += w * dot;
                    }
                }
                for a in 0..3 {
                    gc[off + a] += acc[a];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_points_are_exact() {
        let ext = [3, 2, 4];
        let vals: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    let v = sample_trilinear(&vals, ext, 1, [i as f64, j as f64, k as f64]);
                    assert_eq!(v[0], vals[(i * 2 + j) * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn midpoint_blend() {
        let vals = vec![0.0, 2.0];
        let v = sample_trilinear(&vals, [2, 1, 1], 1, [0.5, 0.0, 0.0]);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn far_outside_clamps_to_origin() {
        let vals: Vec<f64> = (0..8).map(|i| i as f64 + 1.0).collect();
        let v = sample_trilinear(&vals, [2, 2, 2], 1, [-5.0, -5.0, -5.0]);
        assert_eq!(v[0], 1.0);
    }
}
