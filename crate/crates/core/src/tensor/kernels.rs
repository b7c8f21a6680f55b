//! Raw loops shared by forward and backward rules.

/// `c[b] += a[b] (m×k) · b[b] (k×n)` for every batch entry.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let c = &mut c[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `ga += g (m×n) · bᵀ` where b is k×n.
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                ga[i * k + p] += dot;
            }
        }
    }
}

/// `gb += aᵀ · g` where a is m×k and g is m×n.
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let g = &g[bi * m * n..(bi + 1) * m * n];
        let gb = &mut gb[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let gbrow = &mut gb[p * n..(p + 1) * n];
                for (o, gv) in gbrow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(split_axis(&[2, 3, 4], 1), (2, 3, 4));
    }
}
