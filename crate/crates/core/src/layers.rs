//! Small parameterized building blocks shared by the model modules.

use crate::error::Result;
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, frozen: bool) -> Result<Self> {
        let w = store.linear_init(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, frozen)?;
        let b = if bias {
            Some(store.linear_init(&format!("{name}.bias"), &[out_dim], in_dim, frozen)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.p(self.w))?;
        match self.b {
            Some(b) => y.add(ctx.p(b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.b.into_iter().chain([self.w]).collect()
    }
}

/// Root-mean-square normalization over the last axis with a learned gain.
#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gain = store.full(&format!("{name}.gain"), &[dim], 1.0, false)?;
        Ok(Self { gain, eps })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        rms_norm(h, ctx.p(self.gain), self.eps)
    }
}

/// `h / sqrt(mean(h²) + eps) ⊙ g` along the last axis.
pub fn rms_norm<'t>(h: Var<'t>, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let last = h.shape().len() - 1;
    let rms = h.square().mean_axis(last)?.add_scalar(eps).sqrt()?;
    h.div(rms)?.mul(gain)
}

/// A frozen base projection plus a trainable low-rank update,
/// `y = x W0 + (α/r)·dropout(x) A B`, with `B` zero at initialization.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub lora_a: Option<ParamId>,
    pub lora_b: Option<ParamId>,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rank: usize,
        alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        let base = Linear::new(store, name, in_dim, out_dim, bias, true)?;
        let (lora_a, lora_b) = if rank > 0 {
            let a = store.linear_init(&format!("{name}.lora_a"), &[in_dim, rank], in_dim, false)?;
            let b = store.zeros(&format!("{name}.lora_b"), &[rank, out_dim], false)?;
            (Some(a), Some(b))
        } else {
            (None, None)
        };
        Ok(Self {
            base,
            lora_a,
            lora_b,
            rank,
            scale: if rank > 0 { alpha / rank as f64 } else { 0.0 },
            dropout,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.base.forward(ctx, x)?;
        match (self.lora_a, self.lora_b) {
            (Some(a), Some(b)) => {
                let xd = ctx.dropout(x, self.dropout)?;
                let delta = xd.matmul(ctx.p(a))?.matmul(ctx.p(b))?.scale(self.scale);
                y.add(delta)
            }
            _ => Ok(y),
        }
    }

    /// Trainable adapter parameters.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.lora_a.into_iter().chain(self.lora_b).collect()
    }

    /// Number of adapter scalars, `r·(in + out)`.
    pub fn adapter_size(&self) -> usize {
        self.rank * (self.base.in_dim + self.base.out_dim)
    }
}

/// Either a plain trainable linear map or a frozen base with a LoRA adapter.
#[derive(Clone, Debug)]
pub enum Projection {
    Dense(Linear),
    Adapted(LoraLinear),
}

impl Projection {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        lora_rank: usize,
        lora_alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        Ok(if lora_rank == 0 {
            Projection::Dense(Linear::new(store, name, in_dim, out_dim, bias, false)?)
        } else {
            Projection::Adapted(LoraLinear::new(store, name, in_dim, out_dim, bias, lora_rank, lora_alpha, dropout)?)
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Projection::Dense(l) => l.forward(ctx, x),
            Projection::Adapted(l) => l.forward(ctx, x),
        }
    }

    pub fn linear(&self) -> &Linear {
        match self {
            Projection::Dense(l) => l,
            Projection::Adapted(l) => &l.base,
        }
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), in_dim, hidden, true, false)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, out_dim, true, false)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.second.forward(ctx, self.first.forward(ctx, x)?.gelu())
    }
}

/// Broadcasts `x` to `shape` (gradient sums back).
pub fn broadcast_to<'t>(ctx: &Ctx<'t>, x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    x.add(ctx.constant(Tensor::zeros(shape)))
}
