//! Central-difference gradient verification.

use super::{Bindings, ParameterStore, Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Denominator floor for the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, params: &ParameterStore) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = tape.bind(params);
    let out = f(&mut tape, &b)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(shape_err!(
            "gradcheck needs a scalar function, got {:?}",
            tape.shape(out)
        ));
    }
    Ok(tape.scalar(out))
}

/// Checks every entry of every parameter.
pub fn gradcheck<F>(f: F, params: &ParameterStore, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.to_string(), i)))
        .collect();
    gradcheck_entries(f, params, &entries, h, tol)
}

/// Checks only the listed `(parameter, flat index)` entries.
pub fn gradcheck_entries<F>(
    f: F,
    params: &ParameterStore,
    entries: &[(String, usize)],
    h: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = tape.bind(params);
    let out = f(&mut tape, &bindings)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(shape_err!(
            "gradcheck needs a scalar function, got {:?}",
            tape.shape(out)
        ));
    }
    // A constant function has an all-zero gradient rather than a graph error.
    let grads = if tape.requires_grad(out) {
        Some(tape.backward(out)?)
    } else {
        None
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(entries.len());
    let mut max_rel = 0.0f64;
    for (name, idx) in entries {
        let var = bindings
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let analytic = grads.as_ref().and_then(|g| g.get(var)).map_or(0.0, |g| g[*idx]);
        let orig = params.get(name).unwrap().data()[*idx];
        work.get_mut(name).unwrap().data_mut()[*idx] = orig + h;
        let fp = eval(&f, &work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig - h;
        let fm = eval(&f, &work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        max_rel = max_rel.max(e);
        report.push(GradcheckEntry {
            name: name.clone(),
            index: *idx,
            analytic,
            numeric,
            rel_err: e,
        });
    }
    Ok(GradcheckReport {
        entries: report,
        max_rel_err: max_rel,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(name: &str, shape: &[usize], data: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        s
    }

    #[test]
    fn sum_of_squares() {
        let s = store("x", &[4], vec![0.3, -1.2, 2.0, 0.7]);
        let r = gradcheck(
            |t, b| {
                let x = b.var("x")?;
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &s,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        for e in &r.entries {
            assert!((e.analytic - 2.0 * s.get("x").unwrap().data()[e.index]).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_function() {
        let s = store("x", &[2], vec![1.0, 2.0]);
        let r = gradcheck(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &s, 1e-5, 1e-8).unwrap();
        assert!(r.passed());
        assert!(r.entries.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0));
    }

    #[test]
    fn softmax_sum_is_flat() {
        let s = store("x", &[5], vec![0.1, -2.0, 3.0, 0.0, 1.5]);
        let r = gradcheck(
            |t, b| {
                let y = t.softmax(b.var("x")?, 0)?;
                t.sum(y)
            },
            &s,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
        assert!(r
            .entries
            .iter()
            .all(|e| e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-9));
    }

    #[test]
    fn non_scalar_rejected() {
        let s = store("x", &[2], vec![1.0, 2.0]);
        let r = gradcheck(|_, b| b.var("x"), &s, 1e-5, 1e-8);
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
