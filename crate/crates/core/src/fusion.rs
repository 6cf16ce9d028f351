//! Per-component forecast heads and the channel-shared gate that recombines
//! them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Mlp, Projection};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Adapter rank of the horizon projection; 0 trains it densely.
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Smallest hidden width of the gate network.
    pub gate_floor: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
            gate_floor: 16,
        }
    }
}

/// `Proj_H(flatten(Z + MLP(Z)))` for one component.
#[derive(Clone, Debug)]
pub struct DecodeHead {
    pub mlp: Mlp,
    pub proj: Projection,
    pub patches: usize,
    pub d_model: usize,
    pub horizon: usize,
}

impl DecodeHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patches: usize,
        d_model: usize,
        horizon: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), d_model, d_model, d_model)?,
            proj: Projection::new(
                store,
                &format!("{name}.proj"),
                patches * d_model,
                horizon,
                true,
                cfg.rank,
                cfg.alpha,
                cfg.dropout,
            )?,
            patches,
            d_model,
            horizon,
        })
    }

    /// `[B·C, P_n, D]` to `[B, H, C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>, batch: usize, channels: usize) -> Result<Var<'t>> {
        let s = z.shape();
        if s != [batch * channels, self.patches, self.d_model] {
            return Err(Error::ShapeMismatch {
                op: "decode_head",
                lhs: s,
                rhs: vec![batch * channels, self.patches, self.d_model],
            });
        }
        let h = z.add(self.mlp.forward(ctx, z)?)?;
        let flat = h.reshape(&[batch * channels, self.patches * self.d_model])?;
        self.proj
            .forward(ctx, flat)?
            .reshape(&[batch, channels, self.horizon])?
            .permute(&[0, 2, 1])
    }

    pub fn trainable(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut ids = self.mlp.first.params();
        ids.extend(self.mlp.second.params());
        match &self.proj {
            Projection::Dense(l) => ids.extend(l.params()),
            Projection::Adapted(l) => ids.extend(l.adapter_params()),
        }
        ids.retain(|id| !store.get(*id).frozen);
        ids
    }
}

/// Gate output alongside the fused forecast.
pub struct Fused<'t> {
    /// `[B, H, C]`
    pub forecast: Var<'t>,
    /// `[B, H, C, 3]`
    pub gates: Var<'t>,
}

/// `G_c = W_base + MLP(F_c)` with `F_c` the summed component forecasts of
/// channel `c`; the same network serves every channel.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub base: ParamId,
    pub mlp: Mlp,
    pub horizon: usize,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, name: &str, horizon: usize, cfg: &HeadConfig) -> Result<Self> {
        let hidden = (horizon / 4).max(cfg.gate_floor);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), horizon, hidden, 3 * horizon)?;
        for id in mlp.second.params() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape))?;
        }
        Ok(Self {
            base: store.full(&format!("{name}.base"), &[3], 1.0, false)?,
            mlp,
            horizon,
        })
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        let mut ids = vec![self.base];
        ids.extend(self.mlp.first.params());
        ids.extend(self.mlp.second.params());
        ids
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, parts: [Var<'t>; 3]) -> Result<Fused<'t>> {
        let s = parts[0].shape();
        if s.len() != 3 || s[1] != self.horizon || parts.iter().any(|p| p.shape() != s) {
            return Err(Error::ShapeMismatch {
                op: "gated_fusion",
                lhs: s,
                rhs: parts[1].shape(),
            });
        }
        let (b, h, c) = (s[0], s[1], s[2]);
        let total = parts[0].add(parts[1])?.add(parts[2])?;
        let per_channel = total.permute(&[0, 2, 1])?;
        let delta = self
            .mlp
            .forward(ctx, per_channel)?
            .reshape(&[b, c, h, 3])?
            .permute(&[0, 2, 1, 3])?;
        let gates = delta.add(ctx.p(self.base))?;
        let stacked = Var::concat(&parts.map(|p| p.reshape(&[b, h, c, 1]).expect("same numel")), 3)?;
        let forecast = gates.mul(stacked)?.sum_axis(3)?.reshape(&[b, h, c])?;
        Ok(Fused { forecast, gates })
    }
}

/// Offline recomposition `Σ_k G_k ⊙ Ŷ_k` from exported gates.
pub fn recompose(gates: &Tensor, parts: [&Tensor; 3]) -> Result<Tensor> {
    let s = parts[0].shape();
    if gates.shape() != [s[0], s[1], s[2], 3] {
        return Err(Error::ShapeMismatch {
            op: "recompose",
            lhs: gates.shape().to_vec(),
            rhs: s.to_vec(),
        });
    }
    Ok(Tensor::from_fn(s, |i| {
        (0..3).map(|k| gates.data()[i * 3 + k] * parts[k].data()[i]).sum()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn head_output_shapes() {
        for h in [96, 192, 336, 720] {
            let mut s = ParamStore::new(0);
            let head = DecodeHead::new(&mut s, "head", 2, 4, h, &HeadConfig::default()).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &s, false, 0);
            let y = head.forward(&ctx, ctx.constant(rand(&[6, 2, 4], 1)), 2, 3).unwrap();
            assert_eq!(y.shape(), vec![2, h, 3]);
        }
    }

    #[test]
    fn zero_residual_is_linear_readout() {
        let mut s = ParamStore::new(0);
        let cfg = HeadConfig {
            rank: 0,
            ..HeadConfig::default()
        };
        let head = DecodeHead::new(&mut s, "head", 2, 3, 4, &cfg).unwrap();
        for id in head.mlp.second.params() {
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let z = rand(&[2, 2, 3], 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let y = head.forward(&ctx, ctx.constant(z.clone()), 1, 2).unwrap().value();
        let lin = head.proj.linear();
        let (w, b) = (s.value(lin.w), s.value(lin.b.unwrap()));
        for c in 0..2 {
            for t in 0..4 {
                let mut want = b.data()[t];
                for j in 0..6 {
                    want += z.data()[c * 6 + j] * w.at(&[j, t]);
                }
                assert!((y.at(&[0, t, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_base_with_zero_gate_is_plain_sum() {
        let mut s = ParamStore::new(0);
        let g = GatedFusion::new(&mut s, "gate", 5, &HeadConfig::default()).unwrap();
        let parts = [rand(&[2, 5, 3], 1), rand(&[2, 5, 3], 2), rand(&[2, 5, 3], 3)];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let vars = parts.clone().map(|p| ctx.constant(p));
        let out = g.forward(&ctx, vars).unwrap();
        let sum = vars[0].add(vars[1]).unwrap().add(vars[2]).unwrap().value();
        assert!(out.forecast.value().bit_eq(&sum));
    }

    #[test]
    fn trend_only_base() {
        let mut s = ParamStore::new(0);
        let g = GatedFusion::new(&mut s, "gate", 5, &HeadConfig::default()).unwrap();
        s.set_value(g.base, Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let parts = [rand(&[2, 5, 3], 1), rand(&[2, 5, 3], 2), rand(&[2, 5, 3], 3)];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let out = g.forward(&ctx, parts.clone().map(|p| ctx.constant(p))).unwrap();
        assert!(out.forecast.value().bit_eq(&parts[0]));
    }

    fn trained_gate() -> (ParamStore, GatedFusion) {
        let mut s = ParamStore::new(4);
        let g = GatedFusion::new(&mut s, "gate", 6, &HeadConfig::default()).unwrap();
        for id in g.mlp.second.params() {
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, rand(&shape, id.0 as u64)).unwrap();
        }
        (s, g)
    }

    #[test]
    fn channel_permutation_commutes() {
        let (s, g) = trained_gate();
        let parts = [rand(&[2, 6, 3], 1), rand(&[2, 6, 3], 2), rand(&[2, 6, 3], 3)];
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| Tensor::from_fn(t.shape(), |i| t.data()[i - i % 3 + perm[i % 3]]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let y = g.forward(&ctx, parts.clone().map(|p| ctx.constant(p))).unwrap().forecast.value();
        let yp = g
            .forward(&ctx, parts.each_ref().map(|p| ctx.constant(permute(p))))
            .unwrap()
            .forecast
            .value();
        assert!(yp.bit_eq(&permute(&y)));
    }

    #[test]
    fn exported_gates_recompose() {
        let (s, g) = trained_gate();
        let parts = [rand(&[2, 6, 3], 5), rand(&[2, 6, 3], 6), rand(&[2, 6, 3], 7)];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let out = g.forward(&ctx, parts.clone().map(|p| ctx.constant(p))).unwrap();
        let again = recompose(&out.gates.value(), parts.each_ref()).unwrap();
        assert!(again.max_abs_diff(&out.forecast.value()) <= 1e-12);
    }

    #[test]
    fn head_and_gate_gradients() {
        let mut s = ParamStore::new(2);
        let cfg = HeadConfig::default();
        let head = DecodeHead::new(&mut s, "head", 2, 4, 6, &cfg).unwrap();
        let g = GatedFusion::new(&mut s, "gate", 6, &cfg).unwrap();
        if let Projection::Adapted(l) = &head.proj {
            let id = l.lora_b.unwrap();
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, rand(&shape, 9).map(|v| 0.1 * v)).unwrap();
        }
        for id in g.mlp.second.params() {
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, rand(&shape, 10).map(|v| 0.1 * v)).unwrap();
        }
        let mut ids = head.trainable(&s);
        ids.extend(g.trainable());
        let z = [rand(&[4, 2, 4], 1), rand(&[4, 2, 4], 2), rand(&[4, 2, 4], 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = grad_check_params(
            &mut s,
            &ids,
            |ctx| {
                let parts = [0, 1, 2].map(|k| head.forward(ctx, ctx.constant(z[k].clone()), 2, 2));
                let [a, b, c] = parts;
                let f = g.forward(ctx, [a?, b?, c?])?;
                Ok(f.forecast.square().sum())
            },
            1e-6,
            1e-4,
            10,
            &mut rng,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
