//! The full forecaster: instance normalization, decomposition, patch
//! encoding, semantic prompts, backbone, component heads and gated fusion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::{assemble, render_csp_text, AnchorConfig, CorpusMeta, Layout, SemanticAnchor};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{DecodeHead, GatedFusion, HeadConfig};
use crate::neural_stl::{passthrough, ComponentKind, ComponentTriple, NeuralStl, StlConfig};
use crate::normalization::{Revin, RevinConfig, RevinState};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::tc_patch::{patch_count, PatchConfig, PatchEncoder};

/// Modules switched off for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub no_nstl: bool,
    pub no_tcp: bool,
    pub no_fbp: bool,
    pub no_csp: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoNstl,
    NoTcp,
    NoFbp,
    NoCsp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoNstl, Variant::NoTcp, Variant::NoFbp, Variant::NoCsp];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoNstl => "no_nstl",
            Variant::NoTcp => "no_tcp",
            Variant::NoFbp => "no_fbp",
            Variant::NoCsp => "no_csp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of full, no_nstl, no_tcp, no_fbp, no_csp")))
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::NoNstl => a.no_nstl = true,
            Variant::NoTcp => a.no_tcp = true,
            Variant::NoFbp => a.no_fbp = true,
            Variant::NoCsp => a.no_csp = true,
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub revin: RevinConfig,
    pub stl: StlConfig,
    pub patch: PatchConfig,
    pub anchor: AnchorConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub ablation: Ablation,
    pub corpus: CorpusMeta,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 96,
            pred_len: 96,
            channels: 7,
            revin: RevinConfig::default(),
            stl: StlConfig::default(),
            patch: PatchConfig::default(),
            anchor: AnchorConfig::default(),
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            ablation: Ablation::default(),
            corpus: CorpusMeta::default(),
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> Result<usize> {
        patch_count(self.seq_len, self.patch.patch_len, self.patch.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.pred_len == 0 || self.channels == 0 {
            return Err(Error::Config("sequence length, horizon and channel count must be positive".into()));
        }
        self.patches()?;
        self.backbone.validate()
    }
}

/// Everything one forward pass produces.
pub struct Forecast<'t> {
    /// Fused forecast on the input scale, `[B, H, C]`.
    pub output: Var<'t>,
    /// Fused forecast in normalized space.
    pub normalized: Var<'t>,
    /// Component forecasts in normalized space.
    pub parts: [Var<'t>; 3],
    /// `[B, H, C, 3]`
    pub gates: Var<'t>,
    pub normalized_input: Var<'t>,
    pub components: ComponentTriple<'t>,
    pub embeddings: [Var<'t>; 3],
    pub backbone_out: [Var<'t>; 3],
    pub csp: Option<Var<'t>>,
    pub fbp: Option<[Var<'t>; 3]>,
    pub layout: Layout,
    pub revin: RevinState<'t>,
    pub texts: Vec<[String; 3]>,
}

#[derive(Clone, Debug)]
pub struct Stella {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub revin: Revin,
    pub stl: NeuralStl,
    pub encoders: [PatchEncoder; 3],
    pub anchor: SemanticAnchor,
    pub backbone: Backbone,
    pub heads: [DecodeHead; 3],
    pub gate: GatedFusion,
    pub patches: usize,
}

impl Stella {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let s = &mut store;
        let pn = config.patches()?;
        let d = config.backbone.d_model;
        let revin = Revin::new(s, "revin", config.channels, config.revin)?;
        let stl = NeuralStl::new(s, "stl", config.channels, config.stl)?;
        let conv = !config.ablation.no_tcp;
        let enc = |s: &mut ParamStore, k: ComponentKind| {
            PatchEncoder::new(s, &format!("patch.{}", k.name()), config.seq_len, d, &config.patch, conv)
        };
        let encoders = [enc(s, ComponentKind::Trend)?, enc(s, ComponentKind::Seasonal)?, enc(s, ComponentKind::Residual)?];
        let anchor = SemanticAnchor::new(s, "anchor", d, pn, config.anchor.clone())?;
        let backbone = Backbone::new(s, "backbone", config.backbone.clone())?;
        let head = |s: &mut ParamStore, k: ComponentKind| {
            DecodeHead::new(s, &format!("head.{}", k.name()), pn, d, config.pred_len, &config.head)
        };
        let heads = [head(s, ComponentKind::Trend)?, head(s, ComponentKind::Seasonal)?, head(s, ComponentKind::Residual)?];
        let gate = GatedFusion::new(s, "gate", config.pred_len, &config.head)?;
        Ok(Self {
            config,
            store,
            revin,
            stl,
            encoders,
            anchor,
            backbone,
            heads,
            gate,
            patches: pn,
        })
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    /// Parameters that never change: the backbone base, adapter bases and
    /// the text embedding table.
    pub fn frozen(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect()
    }

    pub fn corpus_text(&self) -> String {
        render_csp_text(&self.config.corpus)
    }

    /// Runs the whole pipeline on a `[B, S, C]` window batch.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Forecast<'t>> {
        let s = x.shape();
        let cfg = &self.config;
        if s.len() != 3 || s[1] != cfg.seq_len || s[2] != cfg.channels {
            return Err(Error::ShapeMismatch {
                op: "forecast input",
                lhs: s,
                rhs: vec![0, cfg.seq_len, cfg.channels],
            });
        }
        let (b, c) = (s[0], s[2]);
        let (xn, revin) = self.revin.normalize(ctx, x)?;
        let components = if cfg.ablation.no_nstl {
            passthrough(ctx, xn)
        } else {
            self.stl.forward(ctx, xn)?
        };
        let comps = components.as_array();
        let embeddings = [
            self.encoders[0].forward(ctx, comps[0])?,
            self.encoders[1].forward(ctx, comps[1])?,
            self.encoders[2].forward(ctx, comps[2])?,
        ];
        let texts = if cfg.ablation.no_fbp {
            Vec::new()
        } else {
            let vals = comps.map(|v| v.value());
            self.anchor.component_texts([&vals[0], &vals[1], &vals[2]])?
        };
        let fbp = if cfg.ablation.no_fbp {
            None
        } else {
            Some(self.anchor.distill_fbp(ctx, &texts)?)
        };
        let csp = if cfg.ablation.no_csp {
            None
        } else {
            Some(self.anchor.distill_csp(ctx, &self.corpus_text(), b * c)?)
        };
        let (stream, layout) = assemble(csp, fbp, embeddings)?;
        let backbone_out = self.backbone.forward(ctx, stream, &layout)?;
        let parts = [
            self.heads[0].forward(ctx, backbone_out[0], b, c)?,
            self.heads[1].forward(ctx, backbone_out[1], b, c)?,
            self.heads[2].forward(ctx, backbone_out[2], b, c)?,
        ];
        let fused = self.gate.forward(ctx, parts)?;
        let output = self.revin.denormalize(ctx, fused.forecast, &revin)?;
        Ok(Forecast {
            output,
            normalized: fused.forecast,
            parts,
            gates: fused.gates,
            normalized_input: xn,
            components,
            embeddings,
            backbone_out,
            csp,
            fbp,
            layout,
            revin,
            texts,
        })
    }

    /// Convenience forward in evaluation mode returning plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = crate::numerics::Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, 0);
        let f = self.forward(&ctx, ctx.constant(x.clone()))?;
        let out = (*f.output.value()).clone();
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        let mut params = ck.params;
        params.rebuild_index();
        let mut model = Stella::new(ck.config, params.seed())?;
        if model.store.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, the configured model {}",
                params.len(),
                model.store.len()
            )));
        }
        for ((_, want), (_, got)) in model.store.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.frozen != got.frozen {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        model.store = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.checkpoint())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "stella-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing parameter manifest: config plus every named parameter
/// with shape, frozen flag and raw values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
}
