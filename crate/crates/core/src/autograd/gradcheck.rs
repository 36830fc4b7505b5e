//! Central finite-difference oracle for the backward pass.

use std::fmt;

use indexmap::IndexMap;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the element with the largest error (or the first NaN).
    pub worst_index: Option<usize>,
    /// Backward and finite-difference values at `worst_index`.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Elements whose finite-difference stencil crossed a kink.
    pub skipped: usize,
    pub saw_nan: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// One line per parameter: `name max_rel_err pass|fail`.
impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let verdict = if e.pass { "pass" } else { "fail" };
            if e.saw_nan {
                writeln!(f, "{} NaN {} (at element {})", e.name, verdict, e.worst_index.unwrap_or(0))?;
            } else {
                writeln!(f, "{} {:.3e} {}", e.name, e.max_rel_err, verdict)?;
            }
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, params: &IndexMap<String, Tensor<f64>>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = params.iter().map(|(n, t)| g.param(n.clone(), t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let shape = g.shape(loss);
    if !shape.is_scalar() {
        return Err(Error::NonScalarLoss(shape));
    }
    Ok((g.value(loss).item(), g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p+h) - f(p-h)) / 2h`, element by element.
///
/// `f` receives the graph and one [`Var`] per entry of `params`, in order.
/// Relative error is `|a - b| / max(|a|, |b|, 1e-8)`. Elements where the
/// piecewise pattern (ReLU signs, pooling winners, clip regions) changes
/// anywhere within `10 * step` are skipped, since neither derivative is
/// meaningful across a kink.
pub fn grad_check<F>(
    f: F,
    params: &IndexMap<String, Tensor<f64>>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::with_kink_tracking();
        let vars: Vec<Var> = params.iter().map(|(n, t)| g.param(n.clone(), t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?
    };
    let (_, base_sig) = evaluate(&f, params)?;

    let mut entries = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (name, value) in params {
        let grad = &analytic[name];
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: None,
            worst_pair: (0.0, 0.0),
            checked: 0,
            skipped: 0,
            saw_nan: false,
            pass: true,
        };
        for i in 0..value.data().len() {
            let at = |work: &mut IndexMap<String, Tensor<f64>>, delta: f64| -> Result<(f64, u64)> {
                work[name].data_mut()[i] = value.data()[i] + delta;
                let r = evaluate(&f, work);
                work[name].data_mut()[i] = value.data()[i];
                r
            };
            let (plus, s1) = at(&mut work, step)?;
            let (minus, s2) = at(&mut work, -step)?;
            let (_, s3) = at(&mut work, 10.0 * step)?;
            let (_, s4) = at(&mut work, -10.0 * step)?;
            if [s1, s2, s3, s4].iter().any(|&s| s != base_sig) {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            if a.is_nan() || numeric.is_nan() {
                entry.saw_nan = true;
                entry.pass = false;
                entry.worst_index.get_or_insert(i);
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            entry.checked += 1;
            if rel > entry.max_rel_err || entry.worst_index.is_none() {
                entry.max_rel_err = rel;
                entry.worst_index = Some(i);
                entry.worst_pair = (a, numeric);
            }
        }
        if entry.max_rel_err > tolerance {
            entry.pass = false;
        }
        entries.push(entry);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        entries,
    })
}
