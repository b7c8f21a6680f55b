//! Voxel-loop reference implementations of the registration losses and
//! metrics. Deliberately naive: explicit index arithmetic, no shared helpers
//! with the library.
#![allow(clippy::needless_range_loop)]

/// Dense `[3][H][W][D]` displacement accessor over a flat channel-first slice.
pub struct Field<'a> {
    pub u: &'a [f64],
    pub ext: [usize; 3],
}

impl Field<'_> {
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        let [_, w, d] = self.ext;
        let h = self.ext[0];
        self.u[((c * h + x) * w + y) * d + z]
    }

    fn at(&self, c: usize, p: [usize; 3]) -> f64 {
        self.get(c, p[0], p[1], p[2])
    }

    fn n(&self) -> usize {
        self.ext[0] * self.ext[1] * self.ext[2]
    }
}

/// Sarrus' rule.
fn det(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
        - m[0][2] * m[1][1] * m[2][0]
        - m[0][0] * m[1][2] * m[2][1]
        - m[0][1] * m[1][0] * m[2][2]
}

fn all_voxels(ext: [usize; 3]) -> Vec<[usize; 3]> {
    let mut v = Vec::new();
    for x in 0..ext[0] {
        for y in 0..ext[1] {
            for z in 0..ext[2] {
                v.push([x, y, z]);
            }
        }
    }
    v
}

/// Central differences inside, one-sided on the faces.
pub fn jacobian_dets(f: &Field) -> Vec<f64> {
    all_voxels(f.ext)
        .into_iter()
        .map(|p| {
            let mut m = [[0.0; 3]; 3];
            for c in 0..3 {
                for a in 0..3 {
                    let mut lo = p;
                    let mut hi = p;
                    let d = if p[a] == 0 {
                        hi[a] += 1;
                        f.at(c, hi) - f.at(c, lo)
                    } else if p[a] == f.ext[a] - 1 {
                        lo[a] -= 1;
                        f.at(c, hi) - f.at(c, lo)
                    } else {
                        lo[a] -= 1;
                        hi[a] += 1;
                        (f.at(c, hi) - f.at(c, lo)) / 2.0
                    };
                    m[c][a] = d + if c == a { 1.0 } else { 0.0 };
                }
            }
            det(m)
        })
        .collect()
}

pub fn sdlogj(f: &Field) -> f64 {
    let logs: Vec<f64> = jacobian_dets(f)
        .iter()
        .map(|&d| if d > 1e-9 { d.ln() } else { 1e-9f64.ln() })
        .collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn pct_nonpositive(f: &Field) -> f64 {
    let dets = jacobian_dets(f);
    100.0 * dets.iter().filter(|&&d| d <= 0.0).count() as f64 / dets.len() as f64
}

/// Eight one-sided corner determinants per voxel; bit `a` of the corner picks
/// a backward difference along axis `a`, falling back to the other side at
/// the faces. Negative parts are averaged over corners and voxels.
pub fn pct_ndv(f: &Field) -> f64 {
    let mut total = 0.0;
    for p in all_voxels(f.ext) {
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut m = [[0.0; 3]; 3];
            for a in 0..3 {
                let want_back = corner & (1 << a) != 0;
                let back = if want_back { p[a] > 0 } else { p[a] + 1 == f.ext[a] };
                let mut q = p;
                for c in 0..3 {
                    let d = if back {
                        q[a] = p[a] - 1;
                        f.at(c, p) - f.at(c, q)
                    } else {
                        q[a] = p[a] + 1;
                        f.at(c, q) - f.at(c, p)
                    };
                    m[c][a] = d + if c == a { 1.0 } else { 0.0 };
                }
            }
            let d = det(m);
            if d < 0.0 {
                acc -= d;
            }
        }
        total += acc / 8.0;
    }
    100.0 * total / f.n() as f64
}

/// Dice of one label; `None` when absent from both maps.
pub fn dice(a: &[u32], b: &[u32], label: u32) -> Option<f64> {
    let mut inter = 0.0;
    let mut size = 0.0;
    for i in 0..a.len() {
        if a[i] == label {
            size += 1.0;
        }
        if b[i] == label {
            size += 1.0;
        }
        if a[i] == label && b[i] == label {
            inter += 1.0;
        }
    }
    if size == 0.0 {
        None
    } else {
        Some(2.0 * inter / size)
    }
}

fn label_at(m: &[u32], ext: [usize; 3], x: i64, y: i64, z: i64) -> Option<u32> {
    if x < 0 || y < 0 || z < 0 || x >= ext[0] as i64 || y >= ext[1] as i64 || z >= ext[2] as i64 {
        return None;
    }
    Some(m[((x as usize) * ext[1] + y as usize) * ext[2] + z as usize])
}

fn surface(m: &[u32], ext: [usize; 3], label: u32) -> Vec<[f64; 3]> {
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    let mut out = Vec::new();
    for p in all_voxels(ext) {
        let (x, y, z) = (p[0] as i64, p[1] as i64, p[2] as i64);
        if label_at(m, ext, x, y, z) != Some(label) {
            continue;
        }
        if steps
            .iter()
            .any(|s| label_at(m, ext, x + s[0], y + s[1], z + s[2]) != Some(label))
        {
            out.push([x as f64, y as f64, z as f64]);
        }
    }
    out
}

fn p95(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|p| {
            let mut best = f64::MAX;
            for q in to {
                let s = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if s < best {
                    best = s;
                }
            }
            best.sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 < d.len() {
        d[i] * (1.0 - (pos - i as f64)) + d[i + 1] * (pos - i as f64)
    } else {
        d[i]
    }
}

/// Larger of the two directed 95th-percentile boundary distances.
pub fn hd95(a: &[u32], b: &[u32], ext: [usize; 3], label: u32) -> f64 {
    let (sa, sb) = (surface(a, ext, label), surface(b, ext, label));
    p95(&sa, &sb).max(p95(&sb, &sa))
}

/// Border-clamped trilinear interpolation of a scalar volume.
pub fn trilinear(img: &[f64], ext: [usize; 3], p: [f64; 3]) -> f64 {
    let c: Vec<f64> = (0..3).map(|a| p[a].max(0.0).min((ext[a] - 1) as f64)).collect();
    let mut v = 0.0;
    for dx in 0..2 {
        for dy in 0..2 {
            for dz in 0..2 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for (a, d) in [dx, dy, dz].into_iter().enumerate() {
                    let lo = c[a].floor();
                    let t = c[a] - lo;
                    w *= if d == 0 { 1.0 - t } else { t };
                    idx[a] = ((lo as usize) + d).min(ext[a] - 1);
                }
                v += w * img[(idx[0] * ext[1] + idx[1]) * ext[2] + idx[2]];
            }
        }
    }
    v
}

pub fn warp(img: &[f64], f: &Field) -> Vec<f64> {
    all_voxels(f.ext)
        .into_iter()
        .map(|p| {
            let q = [0, 1, 2].map(|c| p[c] as f64 + f.at(c, p));
            trilinear(img, f.ext, q)
        })
        .collect()
}

/// Negative mean squared local NCC over zero-padded cubic windows.
pub fn ncc_loss(i: &[f64], j: &[f64], ext: [usize; 3], window: usize) -> f64 {
    let r = (window / 2) as i64;
    let n = (window * window * window) as f64;
    let val = |v: &[f64], x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= ext[0] as i64 || y >= ext[1] as i64 || z >= ext[2] as i64 {
            0.0
        } else {
            v[((x as usize) * ext[1] + y as usize) * ext[2] + z as usize]
        }
    };
    let mut total = 0.0;
    for p in all_voxels(ext) {
        let (mut si, mut sj, mut sii, mut sjj, mut sij) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let (x, y, z) = (p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz);
                    let (a, b) = (val(i, x, y, z), val(j, x, y, z));
                    si += a;
                    sj += b;
                    sii += a * a;
                    sjj += b * b;
                    sij += a * b;
                }
            }
        }
        let cross = sij - si * sj / n;
        let vi = sii - si * si / n;
        let vj = sjj - sj * sj / n;
        total += cross * cross / (vi * vj + 1e-5);
    }
    -total / (ext[0] * ext[1] * ext[2]) as f64
}

/// `1 − mean_l (2Σpq + ε)/(Σp + Σq + ε)` with masks stored label-major.
pub fn soft_dice_loss(p: &[f64], q: &[f64], labels: usize) -> f64 {
    let n = p.len() / labels;
    let mut acc = 0.0;
    for l in 0..labels {
        let (mut inter, mut sp, mut sq) = (0.0, 0.0, 0.0);
        for v in 0..n {
            inter += p[l * n + v] * q[l * n + v];
            sp += p[l * n + v];
            sq += q[l * n + v];
        }
        acc += (2.0 * inter + 1e-5) / (sp + sq + 1e-5);
    }
    1.0 - acc / labels as f64
}

/// Mean squared forward difference per axis, averaged over the three axes.
pub fn diffusion(f: &Field) -> f64 {
    let mut total = 0.0;
    for a in 0..3 {
        let (mut s, mut cnt) = (0.0, 0.0);
        for c in 0..3 {
            for p in all_voxels(f.ext) {
                if p[a] + 1 < f.ext[a] {
                    let mut q = p;
                    q[a] += 1;
                    s += (f.at(c, q) - f.at(c, p)).powi(2);
                    cnt += 1.0;
                }
            }
        }
        total += s / cnt;
    }
    total / 3.0
}
