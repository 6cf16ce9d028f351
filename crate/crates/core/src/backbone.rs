//! Decoder-only pre-norm transformer with a frozen base and low-rank
//! adapters on the query and value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{Layout, SegmentKind};
use crate::error::{Error, Result};
use crate::layers::{Linear, LoraLinear, RmsNorm};
use crate::neural_stl::ComponentKind;
use crate::numerics::{stream_rng, Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub rope_base: f64,
    /// Seed for the frozen base weights; `None` uses the run seed.
    pub frozen_seed: Option<u64>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.1,
            rope_base: 10_000.0,
            frozen_seed: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d_model, self.heads
            )));
        }
        if (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head width".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!("adapter dropout {} not in [0, 1)", self.lora_dropout)));
        }
        Ok(())
    }
}

/// Rotary position embedding on `[N, heads, L, dh]`, rotating the two
/// halves of each head.
pub fn apply_rope<'t>(ctx: &Ctx<'t>, x: Var<'t>, base: f64) -> Result<Var<'t>> {
    let s = x.shape();
    let (l, dh) = (s[2], s[3]);
    let half = dh / 2;
    let angle = |pos: usize, j: usize| pos as f64 * base.powf(-2.0 * (j % half) as f64 / dh as f64);
    let cos = Tensor::from_fn(&[l, dh], |i| angle(i / dh, i % dh).cos());
    let sin = Tensor::from_fn(&[l, dh], |i| angle(i / dh, i % dh).sin());
    let x1 = x.slice(3, 0, half)?;
    let x2 = x.slice(3, half, half)?;
    let rotated = Var::concat(&[x2.neg(), x1], 3)?;
    x.mul(ctx.constant(cos))?.add(rotated.mul(ctx.constant(sin))?)
}

/// `[L, L]` additive mask: 0 on and below the diagonal, −inf above.
pub fn causal_mask(l: usize) -> Tensor {
    Tensor::from_fn(&[l, l], |i| if i % l > i / l { f64::NEG_INFINITY } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: LoraLinear,
    pub k: Linear,
    pub v: LoraLinear,
    pub o: Linear,
    pub heads: usize,
    pub rope_base: f64,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.d_model;
        let lora = |store: &mut ParamStore, p: &str| {
            LoraLinear::new(store, &format!("{name}.{p}"), d, d, false, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)
        };
        Ok(Self {
            q: lora(store, "q")?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, true)?,
            v: lora(store, "v")?,
            o: Linear::new(store, &format!("{name}.o"), d, d, false, true)?,
            heads: cfg.heads,
            rope_base: cfg.rope_base,
        })
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, s[2] / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// Attention weights `[N, heads, L, L]`.
    pub fn weights<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let dh = s[2] / self.heads;
        let q = apply_rope(ctx, self.split_heads(self.q.forward(ctx, x)?)?, self.rope_base)?;
        let k = apply_rope(ctx, self.split_heads(self.k.forward(ctx, x)?)?, self.rope_base)?;
        q.matmul_t(k)?
            .scale(1.0 / (dh as f64).sqrt())
            .add(ctx.constant(causal_mask(s[1])))?
            .softmax(3)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let w = self.weights(ctx, x)?;
        let v = self.split_heads(self.v.forward(ctx, x)?)?;
        let h = w.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&s)?;
        self.o.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attn_norm: RmsNorm,
    pub attn: SelfAttention,
    pub ffn_norm: RmsNorm,
    pub up: Linear,
    pub down: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), cfg.d_model, 1e-6)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg)?,
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), cfg.d_model, 1e-6)?,
            up: Linear::new(store, &format!("{name}.ffn.up"), cfg.d_model, cfg.d_ff, false, true)?,
            down: Linear::new(store, &format!("{name}.ffn.down"), cfg.d_ff, cfg.d_model, false, true)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.add(self.attn.forward(ctx, self.attn_norm.forward(ctx, x)?)?)?;
        let f = self.up.forward(ctx, self.ffn_norm.forward(ctx, h)?)?.gelu();
        h.add(self.down.forward(ctx, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub layers: Vec<DecoderLayer>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), &config))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seed) = config.frozen_seed {
            let prefix = format!("{name}.");
            for id in store.ids_with_prefix(&prefix) {
                let p = store.get(id);
                if !p.frozen {
                    continue;
                }
                let bound = 1.0 / (p.value.shape()[0] as f64).sqrt();
                let mut rng = stream_rng(seed, &p.name);
                let t = Tensor::from_fn(p.value.shape(), |_| rng.gen_range(-bound..bound));
                store.set_value(id, t)?;
            }
        }
        Ok(Self { layers, config })
    }

    /// Runs every layer over `[N, L, D]`.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: s,
                rhs: vec![0, 0, self.config.d_model],
            });
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(ctx, h))
    }

    /// Encodes the assembled stream and keeps only each component's patch
    /// positions, dropping every prompt token.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, layout: &Layout) -> Result<[Var<'t>; 3]> {
        if x.shape().get(1) != Some(&layout.total) {
            return Err(Error::invalid(format!(
                "sequence length {:?} does not match layout length {}",
                x.shape().get(1),
                layout.total
            )));
        }
        let h = self.encode(ctx, x)?;
        let [t, s, r] = ComponentKind::ALL.map(|k| layout.extract(h, SegmentKind::Patches(k)));
        Ok([t?, s?, r?])
    }

    /// Adapter matrices and normalization gains; the base stays frozen.
    pub fn trainable(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.attn_norm.gain);
            ids.extend(l.attn.q.adapter_params());
            ids.extend(l.attn.v.adapter_params());
            ids.push(l.ffn_norm.gain);
        }
        ids
    }

    pub fn frozen(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend(l.attn.q.base.params());
            ids.extend(l.attn.k.params());
            ids.extend(l.attn.v.base.params());
            ids.extend(l.attn.o.params());
            ids.extend(l.up.params());
            ids.extend(l.down.params());
        }
        ids
    }
}
