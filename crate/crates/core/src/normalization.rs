//! Reversible instance normalization and RMS normalization.
//!
//! Instance statistics are taken per (instance, channel) over the time axis
//! of a `[batch, time, channel]` input, with population variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Ctx, ParamId, ParamStore, Tape, Tensor, Var};

pub use crate::layers::{rms_norm, RmsNorm};

/// Spacing of the dyadic lattice normalized values are snapped to, 2⁻³⁶.
///
/// Sums and differences of lattice values below 2¹⁶ in magnitude are exact
/// in f64, so additive decompositions built on a snapped input recompose to
/// it bit for bit.
pub const LATTICE_STEP: f64 = 1.0 / 68_719_476_736.0;

/// How the affine map is undone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    /// `σ ⊙ (Ŷ − β) / (γ + ε) + μ`.
    #[default]
    Strict,
    /// `(σ + ε) ⊙ (Ŷ − β) / γ + μ`, the algebraic inverse of the forward map.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevinConfig {
    pub eps: f64,
    pub inverse: InverseMode,
    /// Snap normalized values to [`LATTICE_STEP`].
    pub snap: bool,
}

impl Default for RevinConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            inverse: InverseMode::Strict,
            snap: true,
        }
    }
}

/// Plain-value instance statistics, shaped `[batch, 1, channel]` for `mu`
/// and `sigma` and `[channel]` for the affine terms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RevinStats {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

/// Instance statistics living on a tape.
#[derive(Clone, Copy)]
pub struct RevinState<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

/// Learnable affine ReVIN layer; `gamma` starts at 1 and `beta` at 0.
#[derive(Clone, Debug)]
pub struct Revin {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub config: RevinConfig,
}

impl Revin {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, config: RevinConfig) -> Result<Self> {
        let gamma = store.full(&format!("{name}.gamma"), &[channels], 1.0, false)?;
        let beta = store.zeros(&format!("{name}.beta"), &[channels], false)?;
        Ok(Self { gamma, beta, config })
    }

    pub fn normalize<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, RevinState<'t>)> {
        normalize_with(x, ctx.p(self.gamma), ctx.p(self.beta), &self.config)
    }

    pub fn denormalize<'t>(&self, ctx: &Ctx<'t>, y: Var<'t>, state: &RevinState<'t>) -> Result<Var<'t>> {
        denormalize_with(y, state, ctx.p(self.gamma), ctx.p(self.beta), &self.config)
    }

    pub fn stats(&self, ctx: &Ctx<'_>, state: &RevinState<'_>) -> RevinStats {
        RevinStats {
            mu: (*state.mu.value()).clone(),
            sigma: (*state.sigma.value()).clone(),
            gamma: ctx.store().value(self.gamma).clone(),
            beta: ctx.store().value(self.beta).clone(),
            eps: self.config.eps,
        }
    }
}

fn check_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 {
        return Err(Error::invalid(format!("expected [batch, time, channel], got {shape:?}")));
    }
    if shape[1] == 0 {
        return Err(Error::invalid("instance normalization needs at least one time step"));
    }
    Ok(())
}

/// Forward map on tape values. Fails if some `σ + ε` is exactly zero.
pub fn normalize_with<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    config: &RevinConfig,
) -> Result<(Var<'t>, RevinState<'t>)> {
    check_input(&x.shape())?;
    let mu = x.mean_axis(1)?;
    let sigma = x.var_axis(1)?.sqrt()?;
    let denom = sigma.add_scalar(config.eps);
    let out = x.sub(mu)?.div(denom)?.mul(gamma)?.add(beta)?;
    let out = if config.snap { out.snap(LATTICE_STEP) } else { out };
    Ok((out, RevinState { mu, sigma }))
}

fn guard_small(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|v| v.abs() < 1e-12) {
        return Err(Error::DivisionByZero(if what == "gamma" {
            "revin denormalize: |gamma| below 1e-12"
        } else {
            "revin denormalize: |gamma + eps| below 1e-12"
        }));
    }
    Ok(())
}

/// Inverse map on tape values; `y` is `[batch, horizon, channel]`.
pub fn denormalize_with<'t>(
    y: Var<'t>,
    state: &RevinState<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    config: &RevinConfig,
) -> Result<Var<'t>> {
    check_input(&y.shape())?;
    let centered = y.sub(beta)?;
    match config.inverse {
        InverseMode::Strict => {
            let g = gamma.add_scalar(config.eps);
            guard_small(&g.value(), "gamma + eps")?;
            centered.mul(state.sigma)?.div(g)?.add(state.mu)
        }
        InverseMode::Exact => {
            guard_small(&gamma.value(), "gamma")?;
            centered.mul(state.sigma.add_scalar(config.eps))?.div(gamma)?.add(state.mu)
        }
    }
}

/// Normalizes plain values with the given affine terms.
pub fn revin_normalize(x: &Tensor, gamma: &Tensor, beta: &Tensor, config: &RevinConfig) -> Result<(Tensor, RevinStats)> {
    let tape = Tape::new();
    let (out, st) = normalize_with(tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()), config)?;
    let stats = RevinStats {
        mu: (*st.mu.value()).clone(),
        sigma: (*st.sigma.value()).clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        eps: config.eps,
    };
    Ok(((*out.value()).clone(), stats))
}

/// Undoes [`revin_normalize`] on a forecast using stored statistics.
pub fn revin_denormalize(y: &Tensor, stats: &RevinStats, inverse: InverseMode) -> Result<Tensor> {
    let tape = Tape::new();
    let state = RevinState {
        mu: tape.constant(stats.mu.clone()),
        sigma: tape.constant(stats.sigma.clone()),
    };
    let config = RevinConfig {
        eps: stats.eps,
        inverse,
        snap: false,
    };
    let out = denormalize_with(
        tape.constant(y.clone()),
        &state,
        tape.constant(stats.gamma.clone()),
        tape.constant(stats.beta.clone()),
        &config,
    )?;
    Ok((*out.value()).clone())
}
