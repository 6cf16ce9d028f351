//! Patch encoder: cut each component into patches, run a dilated causal TCN
//! inside every patch, and lift the result to the model width.
//!
//! Axes inside the TCN: `B·C` is the batch, the patch index is the channel
//! axis, and intra-patch position is the sequence axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{rms_norm, Linear, RmsNorm};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    /// Residual TCN layers.
    pub layers: usize,
    /// Dilated sub-blocks per layer; sub-block `m` uses dilation `2^(m-1)`.
    pub sub_blocks: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 16,
            layers: 2,
            sub_blocks: 3,
            kernel: 3,
            dropout: 0.1,
        }
    }
}

impl PatchConfig {
    /// Receptive field of one residual layer, `1 + (K−1)(2^M − 1)`.
    pub fn layer_receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * ((1 << self.sub_blocks) - 1)
    }
}

/// `floor((S − P)/stride) + 1`.
pub fn patch_count(seq_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    if patch_len == 0 || stride == 0 {
        return Err(Error::Config("patch length and stride must be positive".into()));
    }
    if seq_len < patch_len {
        return Err(Error::Config(format!("input length {seq_len} is shorter than the patch length {patch_len}")));
    }
    Ok((seq_len - patch_len) / stride + 1)
}

/// `[B, S, C]` to raw patches `[B·C, P_n, P_ell]`.
pub fn extract_patches<'t>(z: Var<'t>, patch_len: usize, stride: usize) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("expected [batch, time, channel], got {shape:?}")));
    }
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    let n = patch_count(s, patch_len, stride)?;
    let zt = z.permute(&[0, 2, 1])?;
    let patches = if stride == patch_len {
        zt.slice(2, 0, n * patch_len)?
    } else {
        let parts = (0..n)
            .map(|j| zt.slice(2, j * stride, patch_len))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts, 2)?
    };
    patches.reshape(&[b * c, n, patch_len])
}

/// Causal convolution whose kernel is `g · v / ‖v‖` per output channel.
#[derive(Clone, Debug)]
pub struct WeightNormConv {
    /// `[C_out, C_in, K]`.
    pub direction: ParamId,
    /// `[C_out]`.
    pub magnitude: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl WeightNormConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let fan_in = channels * kernel;
        let direction = store.kaiming(&format!("{name}.v"), &[channels, channels, kernel], fan_in, false)?;
        let v = store.value(direction).clone();
        let norms = Tensor::from_fn(&[channels], |o| {
            v.data()[o * fan_in..(o + 1) * fan_in].iter().map(|x| x * x).sum::<f64>().sqrt()
        });
        let magnitude = store.add(&format!("{name}.g"), norms, false)?;
        let bias = store.linear_init(&format!("{name}.bias"), &[channels], fan_in, false)?;
        Ok(Self {
            direction,
            magnitude,
            bias,
            dilation,
        })
    }

    pub fn kernel<'t>(&self, ctx: &Ctx<'t>) -> Result<Var<'t>> {
        let v = ctx.p(self.direction);
        let shape = v.shape();
        let norm = v.square().sum_axis(2)?.sum_axis(1)?.sqrt()?;
        let g = ctx.p(self.magnitude).reshape(&[shape[0], 1, 1])?;
        v.div(norm)?.mul(g)
    }

    /// The kernel recomputed from stored values, outside any tape.
    pub fn effective_kernel(&self, store: &ParamStore) -> Tensor {
        let v = store.value(self.direction);
        let g = store.value(self.magnitude);
        let per = v.numel() / g.numel();
        let mut out = v.clone();
        for (o, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
            chunk.iter_mut().for_each(|x| *x = g.data()[o] * *x / n);
        }
        out
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.causal_conv1d(self.kernel(ctx)?, Some(ctx.p(self.bias)), self.dilation)
    }
}

#[derive(Clone, Debug)]
pub struct SubBlock {
    pub conv: WeightNormConv,
    /// Normalizes across patches at each intra-patch position.
    pub norm: RmsNorm,
}

/// Residual layers of dilated causal sub-blocks.
#[derive(Clone, Debug)]
pub struct Tcn {
    pub layers: Vec<Vec<SubBlock>>,
    pub dropout: f64,
}

impl Tcn {
    pub fn new(store: &mut ParamStore, name: &str, patches: usize, cfg: &PatchConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut blocks = Vec::with_capacity(cfg.sub_blocks);
            for m in 0..cfg.sub_blocks {
                let n = format!("{name}.layer{l}.block{m}");
                blocks.push(SubBlock {
                    conv: WeightNormConv::new(store, &format!("{n}.conv"), patches, cfg.kernel, 1 << m)?,
                    norm: RmsNorm::new(store, &format!("{n}.norm"), patches, 1e-5)?,
                });
            }
            layers.push(blocks);
        }
        Ok(Self {
            layers,
            dropout: cfg.dropout,
        })
    }

    /// `[N, P_n, P_ell]` in, same shape out.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut z = x;
        for blocks in &self.layers {
            for b in blocks {
                let u = b.conv.forward(ctx, z)?;
                let u = rms_norm(u.permute(&[0, 2, 1])?, ctx.p(b.norm.gain), b.norm.eps)?.permute(&[0, 2, 1])?;
                let u = ctx.dropout(u.gelu(), self.dropout)?;
                z = z.add(u)?;
            }
        }
        Ok(z)
    }
}

/// Lifts intra-patch features to the model width and recalibrates each
/// patch on its own.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub linear: Linear,
    /// `[P_ell, D, 1]` transposed-convolution kernel.
    pub upsample: ParamId,
    /// Depthwise 1×1 weights and biases over the patch axis, `[P_n]` each.
    pub depth_w: ParamId,
    pub depth_b: ParamId,
    pub d_model: usize,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, patches: usize, patch_len: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), patch_len, d_model, true, false)?,
            upsample: store.linear_init(&format!("{name}.upsample"), &[patch_len, d_model, 1], patch_len, false)?,
            depth_w: store.full(&format!("{name}.depthwise.weight"), &[patches], 1.0, false)?,
            depth_b: store.zeros(&format!("{name}.depthwise.bias"), &[patches], false)?,
            d_model,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let shape = h.shape();
        let (n, pn, pl) = (shape[0], shape[1], shape[2]);
        let flat = h.reshape(&[n * pn, pl])?;
        let lifted = self.linear.forward(ctx, flat.gelu())?;
        let up = flat
            .reshape(&[n * pn, pl, 1])?
            .conv_transpose1d(ctx.p(self.upsample), None, 1)?
            .reshape(&[n * pn, self.d_model])?;
        lifted
            .add(up)?
            .reshape(&[n, pn, self.d_model])?
            .depthwise_conv1x1(ctx.p(self.depth_w), ctx.p(self.depth_b))
    }
}

#[derive(Clone, Debug)]
pub enum PatchEncoder {
    Convolutional {
        token_norm: RmsNorm,
        tcn: Tcn,
        head: ProjectionHead,
        patch_len: usize,
        stride: usize,
    },
    /// One linear map per patch, no TCN.
    Linear {
        proj: Linear,
        patch_len: usize,
        stride: usize,
    },
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, seq_len: usize, d_model: usize, cfg: &PatchConfig, convolutional: bool) -> Result<Self> {
        let pn = patch_count(seq_len, cfg.patch_len, cfg.stride)?;
        if !convolutional {
            return Ok(PatchEncoder::Linear {
                proj: Linear::new(store, &format!("{name}.proj"), cfg.patch_len, d_model, true, false)?,
                patch_len: cfg.patch_len,
                stride: cfg.stride,
            });
        }
        if cfg.kernel == 0 {
            return Err(Error::Config("TCN kernel size must be positive".into()));
        }
        Ok(PatchEncoder::Convolutional {
            token_norm: RmsNorm::new(store, &format!("{name}.token_norm"), cfg.patch_len, 1e-5)?,
            tcn: Tcn::new(store, &format!("{name}.tcn"), pn, cfg)?,
            head: ProjectionHead::new(store, &format!("{name}.head"), pn, cfg.patch_len, d_model)?,
            patch_len: cfg.patch_len,
            stride: cfg.stride,
        })
    }

    /// Normalized patch tokens `[B·C, P_n, P_ell]`.
    pub fn tokens<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>) -> Result<Var<'t>> {
        match self {
            PatchEncoder::Convolutional {
                token_norm,
                patch_len,
                stride,
                ..
            } => token_norm.forward(ctx, extract_patches(z, *patch_len, *stride)?),
            PatchEncoder::Linear { patch_len, stride, .. } => extract_patches(z, *patch_len, *stride),
        }
    }

    /// Component `[B, S, C]` to embeddings `[B·C, P_n, D]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let tokens = self.tokens(ctx, z)?;
        match self {
            PatchEncoder::Convolutional { tcn, head, .. } => head.forward(ctx, tcn.forward(ctx, tokens)?),
            PatchEncoder::Linear { proj, .. } => proj.forward(ctx, tokens),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch_count(96, 16, 16).unwrap(), 6);
        assert_eq!(patch_count(16, 16, 16).unwrap(), 1);
        assert_eq!(patch_count(97, 16, 16).unwrap(), 6);
        assert_eq!(patch_count(20, 4, 2).unwrap(), 9);
        assert!(patch_count(15, 16, 16).is_err());
    }

    #[test]
    fn patches_follow_layout() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_fn(&[1, 8, 2], |i| i as f64));
        let p = extract_patches(z, 4, 2).unwrap().value();
        assert_eq!(p.shape(), &[2, 3, 4]);
        // channel 1, patch 1 covers times 2..6
        let got: Vec<f64> = (0..4).map(|k| p.at(&[1, 1, k])).collect();
        assert_eq!(got, vec![5.0, 7.0, 9.0, 11.0]);
    }

    #[test]
    fn tcn_preserves_shape_and_causality() {
        let mut store = ParamStore::new(1);
        let cfg = PatchConfig::default();
        let tcn = Tcn::new(&mut store, "tcn", 6, &cfg).unwrap();
        let x = rand_tensor(2, &[3, 6, 16]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let base = tcn.forward(&ctx, ctx.constant(x.clone())).unwrap().value();
        assert_eq!(base.shape(), x.shape());
        for tp in 1..16 {
            let mut y = x.clone();
            y.set(&[1, 3, tp], y.at(&[1, 3, tp]) + 1.0);
            let out = tcn.forward(&ctx, ctx.constant(y)).unwrap().value();
            for t in 0..tp {
                for ch in 0..6 {
                    assert_eq!(base.at(&[1, ch, t]), out.at(&[1, ch, t]));
                }
            }
        }
    }

    #[test]
    fn single_layer_receptive_field() {
        let mut store = ParamStore::new(3);
        let cfg = PatchConfig { layers: 1, ..Default::default() };
        assert_eq!(cfg.layer_receptive_field(), 15);
        let tcn = Tcn::new(&mut store, "tcn", 2, &cfg).unwrap();
        let x = rand_tensor(4, &[1, 2, 16]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let base = tcn.forward(&ctx, ctx.constant(x.clone())).unwrap().value();
        let reach = |src: usize| {
            let mut y = x.clone();
            y.set(&[0, 0, src], y.at(&[0, 0, src]) + 1.0);
            let out = tcn.forward(&ctx, ctx.constant(y)).unwrap().value();
            (0..2).any(|ch| out.at(&[0, ch, 15]) != base.at(&[0, ch, 15]))
        };
        assert!(reach(15 - 14));
        assert!(!reach(0));
    }

    #[test]
    fn weight_norm_kernel_matches_recomputation() {
        let mut store = ParamStore::new(5);
        let conv = WeightNormConv::new(&mut store, "c", 4, 3, 2).unwrap();
        let id = conv.magnitude;
        store.set_value(id, Tensor::new(&[4], vec![0.5, 2.0, 1.0, 3.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let k = conv.kernel(&ctx).unwrap().value();
        assert!(k.max_abs_diff(&conv.effective_kernel(&store)) < 1e-12);
    }

    #[test]
    fn depthwise_keeps_patches_apart() {
        let mut store = ParamStore::new(6);
        let head = ProjectionHead::new(&mut store, "h", 4, 8, 5).unwrap();
        let x = rand_tensor(7, &[2, 4, 8]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let base = head.forward(&ctx, ctx.constant(x.clone())).unwrap().value();
        for j in 0..4 {
            let mut y = x.clone();
            y.set(&[1, j, 3], y.at(&[1, j, 3]) + 1.0);
            let out = head.forward(&ctx, ctx.constant(y)).unwrap().value();
            for row in 0..4 {
                let changed = (0..5).any(|d| out.at(&[1, row, d]) != base.at(&[1, row, d]));
                assert_eq!(changed, row == j);
            }
        }
    }

    #[test]
    fn identity_head_is_gelu() {
        let mut store = ParamStore::new(8);
        let head = ProjectionHead::new(&mut store, "h", 3, 4, 4).unwrap();
        store.set_value(head.linear.w, Tensor::eye(4)).unwrap();
        store.set_value(head.linear.b.unwrap(), Tensor::zeros(&[4])).unwrap();
        store.set_value(head.upsample, Tensor::zeros(&[4, 4, 1])).unwrap();
        let x = rand_tensor(9, &[2, 3, 4]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let e = head.forward(&ctx, ctx.constant(x.clone())).unwrap().value();
        let g = ctx.constant(x).gelu().value();
        assert!(e.max_abs_diff(&g) == 0.0);
    }

    #[test]
    fn minimal_instance_shape() {
        let mut store = ParamStore::new(10);
        let enc = PatchEncoder::new(&mut store, "enc", 16, 8, &PatchConfig::default(), true).unwrap();
        let lin = PatchEncoder::new(&mut store, "lin", 96, 8, &PatchConfig::default(), false).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let e = enc.forward(&ctx, ctx.constant(rand_tensor(11, &[1, 16, 1]))).unwrap();
        assert_eq!(e.shape(), vec![1, 1, 8]);
        let e = lin.forward(&ctx, ctx.constant(rand_tensor(12, &[2, 96, 3]))).unwrap();
        assert_eq!(e.shape(), vec![6, 6, 8]);
    }

    #[test]
    fn encoder_gradients() {
        let mut store = ParamStore::new(13);
        let cfg = PatchConfig {
            patch_len: 4,
            stride: 4,
            layers: 1,
            sub_blocks: 2,
            kernel: 2,
            dropout: 0.0,
        };
        let enc = PatchEncoder::new(&mut store, "enc", 12, 3, &cfg, true).unwrap();
        let x = rand_tensor(14, &[1, 12, 2]);
        let w = rand_tensor(15, &[2, 3, 3]);
        let ids = store.trainable_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = grad_check_params(
            &mut store,
            &ids,
            |ctx| Ok(enc.forward(ctx, ctx.constant(x.clone()))?.mul(ctx.constant(w.clone()))?.sum()),
            1e-5,
            1e-4,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
