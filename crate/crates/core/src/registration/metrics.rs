//! Overlap and deformation-regularity metrics.

use std::io::Write;

use super::{voxels, DisplacementField, LabelMap};
use crate::error::{shape_err, Error, Result};

/// Jacobian determinants of `φ = x + u` per voxel, `[H, W, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    pub ext: [usize; 3],
    pub det: Vec<f64>,
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn flat(ext: [usize; 3], g: [usize; 3]) -> usize {
    (g[0] * ext[1] + g[1]) * ext[2] + g[2]
}

/// Axis derivative of component `c` at `g`: central in the interior,
/// one-sided on the faces.
fn central(u: &[f64], ext: [usize; 3], c: usize, g: [usize; 3], axis: usize) -> f64 {
    let n = ext.iter().product::<usize>();
    let at = |h: [usize; 3]| u[c * n + flat(ext, h)];
    let mut lo = g;
    let mut hi = g;
    if g[axis] > 0 {
        lo[axis] -= 1;
    }
    if g[axis] + 1 < ext[axis] {
        hi[axis] += 1;
    }
    (at(hi) - at(lo)) / (hi[axis] - lo[axis]) as f64
}

/// Determinant of `∇φ` with central differences (one-sided on the faces).
pub fn jacobian_map(field: &DisplacementField) -> Result<JacobianMap> {
    let ext = field.extents();
    if ext.iter().any(|&e| e < 3) {
        return Err(shape_err!("Jacobian needs extents >= 3, got {ext:?}"));
    }
    let u = field.tensor().data();
    let det = voxels(ext)
        .map(|g| {
            let m = std::array::from_fn(|i| {
                std::array::from_fn(|j| central(u, ext, i, g, j) + if i == j { 1.0 } else { 0.0 })
            });
            det3(m)
        })
        .collect();
    Ok(JacobianMap { ext, det })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvertibilityMetrics {
    /// Standard deviation of `log(max(det, 1e-9))`.
    pub sdlogj: f64,
    /// Percentage of voxels with `det <= 0`.
    pub pct_nonpositive: f64,
    /// Percentage of non-diffeomorphic volume from the eight one-sided
    /// corner determinants of each voxel.
    pub pct_ndv: f64,
}

/// Corner determinant of `∇φ` with one-sided differences; bit `a` of
/// `corner` selects a backward difference along axis `a`. Where the chosen
/// side leaves the volume the other side is used.
fn corner_det(u: &[f64], ext: [usize; 3], g: [usize; 3], corner: usize) -> f64 {
    let n = ext.iter().product::<usize>();
    let m = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let backward = (corner >> j) & 1 == 1;
            let use_back = if backward { g[j] > 0 } else { g[j] + 1 >= ext[j] };
            let mut o = g;
            let d = if use_back {
                o[j] -= 1;
                u[i * n + flat(ext, g)] - u[i * n + flat(ext, o)]
            } else {
                o[j] += 1;
                u[i * n + flat(ext, o)] - u[i * n + flat(ext, g)]
            };
            d + if i == j { 1.0 } else { 0.0 }
        })
    });
    det3(m)
}

pub fn invertibility_metrics(field: &DisplacementField) -> Result<InvertibilityMetrics> {
    let jac = jacobian_map(field)?;
    let n = jac.det.len() as f64;
    let logs: Vec<f64> = jac.det.iter().map(|d| d.max(1e-9).ln()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let nonpos = jac.det.iter().filter(|&&d| d <= 0.0).count() as f64;
    let ext = jac.ext;
    let u = field.tensor().data();
    let ndv: f64 = voxels(ext)
        .map(|g| (0..8).map(|c| (-corner_det(u, ext, g, c)).max(0.0)).sum::<f64>() / 8.0)
        .sum();
    Ok(InvertibilityMetrics {
        sdlogj: var.sqrt(),
        pct_nonpositive: 100.0 * nonpos / n,
        pct_ndv: 100.0 * ndv / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    /// `(label, dice)`; `None` when the label is absent from both maps.
    pub per_label: Vec<(u32, Option<f64>)>,
    pub mean: f64,
}

fn check_pair(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(shape_err!("label maps {:?} and {:?} differ", a.extents(), b.extents()));
    }
    Ok(())
}

/// Per-label Dice overlap; the mean skips labels absent from both maps.
pub fn dice_metric(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<DiceReport> {
    check_pair(a, b)?;
    let mut per_label = Vec::with_capacity(labels.len());
    let (mut sum, mut count) = (0.0, 0usize);
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            na += (x == l) as usize;
            nb += (y == l) as usize;
            both += (x == l && y == l) as usize;
        }
        let d = (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64);
        if let Some(v) = d {
            sum += v;
            count += 1;
        }
        per_label.push((l, d));
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::NAN };
    Ok(DiceReport { per_label, mean })
}

/// Voxels of `label` with at least one 6-neighbour outside the label (the
/// volume exterior counts as outside).
fn boundary(m: &LabelMap, label: u32) -> Vec<[f64; 3]> {
    let ext = m.extents();
    voxels(ext)
        .filter(|&g| m.get(g) == label)
        .filter(|&g| {
            (0..3).any(|a| {
                let mut lo = g;
                let mut hi = g;
                let lo_out = g[a] == 0 || {
                    lo[a] -= 1;
                    m.get(lo) != label
                };
                let hi_out = g[a] + 1 == ext[a] || {
                    hi[a] += 1;
                    m.get(hi) != label
                };
                lo_out || hi_out
            })
        })
        .map(|g| g.map(|v| v as f64))
        .collect()
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric 95th-percentile surface distance of one label, in voxels: the
/// larger of the two directed 95th percentiles (linear interpolation).
pub fn hd95_metric(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    check_pair(a, b)?;
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::Metric(format!("label {label} is empty in one of the maps")));
    }
    Ok(percentile(directed(&ba, &bb), 95.0).max(percentile(directed(&bb, &ba), 95.0)))
}

/// Mean HD95 over labels present in both maps; `NaN` when there are none.
pub fn mean_hd95(a: &LabelMap, b: &LabelMap, labels: &[u32]) -> Result<f64> {
    let mut vals = Vec::new();
    for &l in labels {
        match hd95_metric(a, b, l) {
            Ok(v) => vals.push(v),
            Err(Error::Metric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    })
}

/// One line of the per-pair metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub pair_id: String,
    pub dice: DiceReport,
    pub hd95: f64,
    pub inv: InvertibilityMetrics,
}

/// Writes `pair_id,dice_mean,dice_l<k>...,hd95,sdlogj,pct_nonpositive,pct_ndv`.
/// Per-label columns follow the labels of the first row.
pub fn write_metrics_csv(rows: &[MetricsRow], mut w: impl Write) -> Result<()> {
    let labels: Vec<u32> = rows
        .first()
        .map(|r| r.dice.per_label.iter().map(|(l, _)| *l).collect())
        .unwrap_or_default();
    write!(w, "pair_id,dice_mean")?;
    for l in &labels {
        write!(w, ",dice_l{l}")?;
    }
    writeln!(w, ",hd95,sdlogj,pct_nonpositive,pct_ndv")?;
    for r in rows {
        write!(w, "{},{}", r.pair_id, r.dice.mean)?;
        for (_, d) in &r.dice.per_label {
            match d {
                Some(v) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(
            w,
            ",{},{},{},{}",
            r.hd95, r.inv.sdlogj, r.inv.pct_nonpositive, r.inv.pct_ndv
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_field_metrics() {
        let f = DisplacementField::zeros([4, 4, 4]);
        assert!(jacobian_map(&f).unwrap().det.iter().all(|&d| d == 1.0));
        let m = invertibility_metrics(&f).unwrap();
        assert_eq!((m.sdlogj, m.pct_nonpositive, m.pct_ndv), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dilation_and_fold() {
        let ext = [5, 5, 5];
        let dil = DisplacementField::from_fn(ext, |g| g.map(|v| 0.1 * v as f64));
        for d in jacobian_map(&dil).unwrap().det {
            assert!((d - 1.331).abs() < 1e-12);
        }
        let m = invertibility_metrics(&dil).unwrap();
        assert!(m.sdlogj < 1e-12 && m.pct_nonpositive == 0.0 && m.pct_ndv == 0.0);
        let fold = DisplacementField::from_fn(ext, |g| [-2.0 * g[0] as f64, 0.0, 0.0]);
        for d in jacobian_map(&fold).unwrap().det {
            assert!((d + 1.0).abs() < 1e-12);
        }
        let m = invertibility_metrics(&fold).unwrap();
        assert_eq!(m.pct_nonpositive, 100.0);
        assert!(m.pct_ndv > 0.0);
    }

    #[test]
    fn small_extent_rejected() {
        assert!(jacobian_map(&DisplacementField::zeros([2, 4, 4])).is_err());
    }

    #[test]
    fn dice_counts() {
        let ext = [10, 10, 2];
        let a = LabelMap::new(ext, (0..200).map(|i| (i < 100) as u32).collect()).unwrap();
        let b = LabelMap::new(ext, (0..200).map(|i| (50..150).contains(&i) as u32).collect()).unwrap();
        let r = dice_metric(&a, &b, &[1, 2]).unwrap();
        assert_eq!(r.per_label, vec![(1, Some(0.5)), (2, None)]);
        assert_eq!(r.mean, 0.5);
        assert_eq!(dice_metric(&a, &a, &[1]).unwrap().mean, 1.0);
    }

    #[test]
    fn hd95_offset_cubes() {
        let ext = [10, 6, 6];
        let cube = |x0: usize| {
            LabelMap::new(
                ext,
                voxels(ext)
                    .map(|g| (g[0] >= x0 && g[0] < x0 + 2 && (2..4).contains(&g[1]) && (2..4).contains(&g[2])) as u32)
                    .collect(),
            )
            .unwrap()
        };
        assert_eq!(hd95_metric(&cube(1), &cube(1), 1).unwrap(), 0.0);
        assert_eq!(hd95_metric(&cube(1), &cube(4), 1).unwrap(), 3.0);
        let empty = LabelMap::new(ext, vec![0; 360]).unwrap();
        assert!(matches!(hd95_metric(&cube(1), &empty, 1), Err(Error::Metric(_))));
    }
}
