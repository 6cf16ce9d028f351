//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::params::{Ctx, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst elementwise disagreement between analytic and numeric gradients.
///
/// The error at each coordinate is `|a − n| / max(1, |a|, |n|)`: relative for
/// large gradients, absolute near zero.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tol
    }

    fn empty(tol: f64) -> Self {
        Self {
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            tol,
            checked: 0,
        }
    }

    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        self.checked += 1;
        if self.checked == 1 || err > self.max_relative_error {
            self.max_relative_error = err;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Folds another report in, keeping the worst coordinate.
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_relative_error > self.max_relative_error || self.checked == 0 {
            self.max_relative_error = other.max_relative_error;
            self.worst_index = other.worst_index;
            self.analytic = other.analytic;
            self.numeric = other.numeric;
        }
        self.checked += other.checked;
    }
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::invalid(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("forward value {s}")));
    }
    Ok(s)
}

/// Checks the gradient of a scalar function of one tensor at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(xv)?;
    scalar_of(y)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.var(t);
        scalar_of(f(v)?)
    };
    let mut report = GradReport::empty(tol);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        report.observe(i, analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Checks gradients with respect to stored parameters. At most
/// `max_coords` coordinates per parameter are sampled with `rng`.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    tol: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
{
    let analytic: Vec<(ParamId, Tensor)> = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, 0);
        for &id in ids {
            ctx.p(id);
        }
        let y = f(&ctx)?;
        scalar_of(y)?;
        ctx.param_grads(y)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, 0);
        scalar_of(f(&ctx)?)
    };
    let mut report = GradReport::empty(tol);
    let mut offset = 0;
    for &id in ids {
        let n = store.value(id).numel();
        let Some((_, g)) = analytic.iter().find(|(pid, _)| *pid == id) else {
            offset += n;
            continue;
        };
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            report.observe(offset + i, g.data()[i], (fp - fm) / (2.0 * eps));
        }
        offset += n;
    }
    Ok(report)
}
