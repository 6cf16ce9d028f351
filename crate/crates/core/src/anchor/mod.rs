//! Behavioral signatures rendered as text, embedded by a frozen encoder and
//! distilled into prompt tokens that are prepended to the patch embeddings.

mod attention;
mod signature;
mod text;

pub use attention::{CrossAttention, KeyLayout};
pub use signature::{
    extract_signature, lagged_correlation, max_lag, top_lags, BehavioralSignature, LagCorrelation, TrendCategory,
    LAG_TIE_TOL, SLIGHT_SLOPE, STRONG_SLOPE,
};
pub use text::{format_sig4, render_csp_text, render_fbp_text, tokenize, CorpusMeta, FrozenTextEncoder, BYTE_TOKENS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::broadcast_to;
use crate::neural_stl::ComponentKind;
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Lags described per component.
    pub top_lags: usize,
    /// Prompt tokens per component; `None` uses the patch count.
    pub fbp_len: Option<usize>,
    /// Corpus prompt tokens.
    pub csp_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            top_lags: 3,
            fbp_len: None,
            csp_len: 10,
            lora_rank: 32,
            lora_alpha: 32.0,
            vocab_size: 4096,
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "segment", content = "component", rename_all = "snake_case")]
pub enum SegmentKind {
    Corpus,
    Prompt(ComponentKind),
    Patches(ComponentKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

/// Where each piece sits in the assembled token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl Layout {
    pub fn plan(csp_len: Option<usize>, fbp_len: Option<usize>, patches: usize) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |kind, len| {
            segments.push(Segment { kind, offset, len });
            offset += len;
        };
        if let Some(g) = csp_len {
            push(SegmentKind::Corpus, g);
        }
        for k in ComponentKind::ALL {
            if let Some(g) = fbp_len {
                push(SegmentKind::Prompt(k), g);
            }
            push(SegmentKind::Patches(k), patches);
        }
        Layout { segments, total: offset }
    }

    pub fn find(&self, kind: SegmentKind) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.kind == kind)
    }

    /// Cuts `kind` out of an assembled `[N, total, ..]` tensor.
    pub fn extract<'t>(&self, x: Var<'t>, kind: SegmentKind) -> Result<Var<'t>> {
        let s = self
            .find(kind)
            .ok_or_else(|| Error::invalid(format!("layout has no {kind:?} segment")))?;
        x.slice(1, s.offset, s.len)
    }
}

/// Concatenates `[corpus; prompt_T; patches_T; prompt_S; patches_S;
/// prompt_R; patches_R]` along the token axis. Every part is `[N, len, D]`.
pub fn assemble<'t>(csp: Option<Var<'t>>, fbp: Option<[Var<'t>; 3]>, patches: [Var<'t>; 3]) -> Result<(Var<'t>, Layout)> {
    let ps = patches[0].shape();
    if ps.len() != 3 {
        return Err(Error::invalid(format!("patch embeddings must be [N, P, D], got {ps:?}")));
    }
    let check = |v: &Var<'t>| -> Result<usize> {
        let s = v.shape();
        if s.len() != 3 || s[0] != ps[0] || s[2] != ps[2] {
            return Err(Error::ShapeMismatch {
                op: "assemble",
                lhs: s,
                rhs: ps.clone(),
            });
        }
        Ok(s[1])
    };
    for p in &patches {
        if check(p)? != ps[1] {
            return Err(Error::invalid("components have different patch counts"));
        }
    }
    let csp_len = csp.as_ref().map(check).transpose()?;
    let fbp_len = match &fbp {
        Some(f) => {
            let g = check(&f[0])?;
            for v in &f[1..] {
                if check(v)? != g {
                    return Err(Error::invalid("prompt lengths differ across components"));
                }
            }
            Some(g)
        }
        None => None,
    };
    let mut parts = Vec::with_capacity(7);
    parts.extend(csp);
    for k in 0..3 {
        if let Some(f) = &fbp {
            parts.push(f[k]);
        }
        parts.push(patches[k]);
    }
    let x = Var::concat(&parts, 1)?;
    Ok((x, Layout::plan(csp_len, fbp_len, ps[1])))
}

/// Per-row signatures of a `[B, S, C]` component, row `b·C + c`.
pub fn window_signatures(comp: &Tensor, top_lags: usize) -> Result<Vec<BehavioralSignature>> {
    let s = comp.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("component must be [B, S, C], got {s:?}")));
    }
    let (b, len, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * c);
    let mut z = vec![0.0; len];
    for bi in 0..b {
        for ci in 0..c {
            for (t, zt) in z.iter_mut().enumerate() {
                *zt = comp.data()[(bi * len + t) * c + ci];
            }
            out.push(extract_signature(&z, top_lags)?);
        }
    }
    Ok(out)
}

/// Learned prompt queries, the frozen text encoder and the two
/// cross-attention blocks.
#[derive(Clone, Debug)]
pub struct SemanticAnchor {
    pub encoder: FrozenTextEncoder,
    pub fbp_attn: CrossAttention,
    pub csp_attn: CrossAttention,
    pub fbp_queries: [ParamId; 3],
    pub csp_queries: ParamId,
    pub fbp_len: usize,
    pub config: AnchorConfig,
}

impl SemanticAnchor {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, patches: usize, config: AnchorConfig) -> Result<Self> {
        let fbp_len = config.fbp_len.unwrap_or(patches);
        if fbp_len == 0 || config.csp_len == 0 || config.top_lags == 0 {
            return Err(Error::Config("prompt lengths and lag count must be positive".into()));
        }
        let encoder = FrozenTextEncoder::new(store, &format!("{name}.text"), config.vocab_size, d_model)?;
        let attn = |store: &mut ParamStore, p: &str| {
            CrossAttention::new(store, &format!("{name}.{p}"), d_model, config.lora_rank, config.lora_alpha, config.dropout)
        };
        let fbp_attn = attn(store, "fbp_attn")?;
        let csp_attn = attn(store, "csp_attn")?;
        let mut q = |p: String, g| store.linear_init(&p, &[g, d_model], d_model, false);
        let fbp_queries = [
            q(format!("{name}.fbp_queries.trend"), fbp_len)?,
            q(format!("{name}.fbp_queries.seasonal"), fbp_len)?,
            q(format!("{name}.fbp_queries.residual"), fbp_len)?,
        ];
        let csp_queries = q(format!("{name}.csp_queries"), config.csp_len)?;
        Ok(Self {
            encoder,
            fbp_attn,
            csp_attn,
            fbp_queries,
            csp_queries,
            fbp_len,
            config,
        })
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        let mut ids = self.fbp_attn.adapter_params();
        ids.extend(self.csp_attn.adapter_params());
        ids.extend(self.fbp_queries);
        ids.push(self.csp_queries);
        ids
    }

    /// Texts for each row `b·C + c`, one per component.
    pub fn component_texts(&self, comps: [&Tensor; 3]) -> Result<Vec<[String; 3]>> {
        let sigs: Vec<Vec<BehavioralSignature>> = comps
            .iter()
            .map(|c| window_signatures(c, self.config.top_lags))
            .collect::<Result<_>>()?;
        Ok((0..sigs[0].len())
            .map(|r| {
                [
                    render_fbp_text(&sigs[0][r], ComponentKind::Trend),
                    render_fbp_text(&sigs[1][r], ComponentKind::Seasonal),
                    render_fbp_text(&sigs[2][r], ComponentKind::Residual),
                ]
            })
            .collect())
    }

    /// One `[N, G, D]` prompt per component. The key mask is block-diagonal:
    /// component `k`'s queries see only text `k`. Each block is evaluated on
    /// its own key span, so the reductions never include another
    /// component's positions and the isolation holds bit for bit.
    pub fn distill_fbp<'t>(&self, ctx: &Ctx<'t>, texts: &[[String; 3]]) -> Result<[Var<'t>; 3]> {
        let block = |k: usize| -> Result<Var<'t>> {
            let seqs: Vec<Vec<usize>> = texts.iter().map(|row| self.encoder.tokenize(&row[k])).collect::<Result<_>>()?;
            let layout = KeyLayout::new(&seqs)?;
            let emb = self.encoder.rows(ctx.store(), &layout.unique)?;
            let (out, _) = self.fbp_attn.attend(ctx, ctx.p(self.fbp_queries[k]), emb, &layout, None)?;
            Ok(out)
        };
        Ok([block(0)?, block(1)?, block(2)?])
    }

    /// Corpus prompt `[rows, G_csp, D]`, identical for every row.
    pub fn distill_csp<'t>(&self, ctx: &Ctx<'t>, text: &str, rows: usize) -> Result<Var<'t>> {
        let layout = KeyLayout::new(&[self.encoder.tokenize(text)?])?;
        let emb = self.encoder.rows(ctx.store(), &layout.unique)?;
        let (out, _) = self.csp_attn.attend(ctx, ctx.p(self.csp_queries), emb, &layout, None)?;
        let d = self.encoder.d_model;
        broadcast_to(ctx, out, &[rows, self.config.csp_len, d])
    }
}
