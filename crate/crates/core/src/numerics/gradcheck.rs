//! Central-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Seed for the tape handed to every evaluation, so noise draws repeat.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Worst entry of one parameter group.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub worst_index: usize,
    pub worst_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)], cfg: &GradCheckConfig) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(cfg.seed);
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every entry of every parameter.
///
/// `f` receives a fresh tape seeded with `cfg.seed` and one leaf per
/// parameter, in the order given.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, params, cfg)?;
    let grads = tape.backward(out);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        let name = params[p].0.clone();
        let mut rep = ParamReport {
            name: name.clone(),
            entries: analytic.len(),
            worst_index: 0,
            worst_rel_err: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for j in 0..analytic.len() {
            let orig = work[p].1.data()[j];
            let mut probe = |x: f64| -> Result<f64> {
                work[p].1.data_mut()[j] = x;
                let (t, _, o) = evaluate(&f, &work, cfg)?;
                let v = t.value(o).data()[0];
                if !v.is_finite() {
                    return Err(Error::NonFinite(name.clone()));
                }
                Ok(v)
            };
            let plus = probe(orig + cfg.step)?;
            let minus = probe(orig - cfg.step)?;
            work[p].1.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, cfg.abs_floor);
            if err > rep.worst_rel_err || j == 0 {
                rep.worst_index = j;
                rep.worst_rel_err = err;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        rep.passed = rep.worst_rel_err <= cfg.rel_tol;
        reports.push(rep);
    }
    Ok(GradCheckReport { params: reports })
}
