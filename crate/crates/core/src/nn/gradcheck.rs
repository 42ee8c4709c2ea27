//! Central-difference verification of reverse-mode gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-4;

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn from_entries(entries: Vec<GradCheckEntry>, coordinates: usize) -> Self {
        let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
        Self {
            entries,
            max_rel_error,
            coordinates,
        }
    }

    /// Names of the checked tensors whose error reaches `tol`.
    pub fn failures(&self, tol: f64) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_error < tol))
            .map(|e| e.name.as_str())
            .collect()
    }
}

struct Tracker {
    entry: GradCheckEntry,
}

impl Tracker {
    fn new(name: String) -> Self {
        Self {
            entry: GradCheckEntry {
                name,
                max_rel_error: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            },
        }
    }

    fn observe(&mut self, i: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        // NaN compares false, so force it to be recorded
        if e > self.entry.max_rel_error || e.is_nan() {
            self.entry.max_rel_error = e;
            self.entry.worst_index = i;
            self.entry.analytic = analytic;
            self.entry.numeric = numeric;
        }
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Checks the gradient of `f` with respect to each input tensor.
///
/// Non-scalar outputs are contracted with a fixed random cotangent, so the
/// check covers the full vector-Jacobian product.
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], delta: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| tape.leaf(shape.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (tape, vars, out) = eval(&vals)?;
    let n_out = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a61_6d00);
    let cot: Vec<f64> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let project = |tape: &Tape<f64>, out: Var| -> Result<f64> {
        let s = tape.value(out).iter().zip(&cot).map(|(y, u)| y * u).sum();
        finite(s, "grad_check objective")
    };
    project(&tape, out)?;
    let grads = tape.backward(&[(out, cot.clone())])?;

    let mut entries = Vec::new();
    let mut coordinates = 0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; vals[k].len()]);
        let mut tracker = Tracker::new(format!("input{k}"));
        for i in 0..vals[k].len() {
            let orig = vals[k][i];
            vals[k][i] = orig + delta;
            let (tp, _, op) = eval(&vals)?;
            let fp = project(&tp, op)?;
            vals[k][i] = orig - delta;
            let (tm, _, om) = eval(&vals)?;
            let fm = project(&tm, om)?;
            vals[k][i] = orig;
            tracker.observe(i, analytic[i], (fp - fm) / (2.0 * delta));
            coordinates += 1;
        }
        entries.push(tracker.entry);
    }
    Ok(GradCheckReport::from_entries(entries, coordinates))
}

/// Compares the gradients stored in `params` against central differences of
/// `loss`, one entry per parameter tensor.
pub fn finite_difference_check<F>(params: &ParamStore<f64>, delta: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<f64>,
{
    finite(loss(params)?, "loss")?;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut entries = Vec::new();
    let mut coordinates = 0;
    for name in names {
        let analytic = params.get(&name)?.grad.clone();
        let mut tracker = Tracker::new(name.clone());
        for (i, g) in analytic.iter().enumerate() {
            let orig = work.get(&name)?.values[i];
            work.get_mut(&name)?.values[i] = orig + delta;
            let fp = finite(loss(&work)?, &name)?;
            work.get_mut(&name)?.values[i] = orig - delta;
            let fm = finite(loss(&work)?, &name)?;
            work.get_mut(&name)?.values[i] = orig;
            tracker.observe(i, *g, (fp - fm) / (2.0 * delta));
            coordinates += 1;
        }
        entries.push(tracker.entry);
    }
    Ok(GradCheckReport::from_entries(entries, coordinates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::numel;

    fn random(seed: u64, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (shape.to_vec(), (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let input = random(1, &[3, 4]);
        let x0 = input.1.clone();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3, 4], x0.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(&[(s, vec![1.0])]).unwrap();
        for (gi, xi) in g.get(x).unwrap().iter().zip(&x0) {
            assert_eq!(*gi, 2.0 * xi);
        }
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[input],
            DEFAULT_DELTA,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn corrupted_backward_is_named() {
        let report = grad_check(
            |t, v| {
                let x = v[0];
                let value: Vec<f64> = t.value(x).iter().map(|a| a * a * a).collect();
                let shape = t.shape(x).to_vec();
                // true derivative is 3x²; report 2x² instead
                t.custom(&[x], shape, value, |ins, _, g| {
                    vec![ins[0].iter().zip(g).map(|(a, gi)| 2.0 * a * a * gi).collect()]
                })
            },
            &[random(2, &[5])],
            DEFAULT_DELTA,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.failures(1e-5), vec!["input0"]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], f64::INFINITY);
                Ok(t.sum_all(s))
            },
            &[random(3, &[2])],
            DEFAULT_DELTA,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
