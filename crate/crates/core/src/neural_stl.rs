//! Learnable trend/seasonal/residual decomposition.
//!
//! A separate LSTM per channel reads that channel alone and a shared
//! contraction turns its hidden states into a proto-trend. Two time-shared
//! channel mixers then produce the trend and, from the detrended input, the
//! seasonal part. The residual is whatever is left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mlp;
use crate::normalization::LATTICE_STEP;
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StlConfig {
    /// LSTM hidden size per channel.
    pub hidden: usize,
    /// Minimum hidden width of the channel mixers.
    pub mixer_width_floor: usize,
}

impl Default for StlConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            mixer_width_floor: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Trend,
    Seasonal,
    Residual,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [ComponentKind::Trend, ComponentKind::Seasonal, ComponentKind::Residual];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Trend => "trend",
            ComponentKind::Seasonal => "seasonal",
            ComponentKind::Residual => "residual",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Three components of the same `[B, S, C]` shape.
#[derive(Clone, Copy)]
pub struct ComponentTriple<'t> {
    pub trend: Var<'t>,
    pub seasonal: Var<'t>,
    pub residual: Var<'t>,
}

impl<'t> ComponentTriple<'t> {
    pub fn as_array(&self) -> [Var<'t>; 3] {
        [self.trend, self.seasonal, self.residual]
    }
}

/// C independent LSTM cells, stored stacked along a leading channel axis.
#[derive(Clone, Debug)]
pub struct ChannelLstm {
    /// `[C, 1, 4h]`, gate order input, forget, cell, output.
    pub w_in: ParamId,
    /// `[C, h, 4h]`.
    pub w_rec: ParamId,
    /// `[C, 1, 4h]`, forget slice starts at 1.
    pub bias: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl ChannelLstm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        let g = 4 * hidden;
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_in = store.uniform(&format!("{name}.w_in"), &[channels, 1, g], bound, false)?;
        let w_rec = store.uniform(&format!("{name}.w_rec"), &[channels, hidden, g], bound, false)?;
        let b = Tensor::from_fn(&[channels, 1, g], |i| {
            let k = i % g;
            if (hidden..2 * hidden).contains(&k) {
                1.0
            } else {
                0.0
            }
        });
        let bias = store.add(&format!("{name}.bias"), b, false)?;
        Ok(Self {
            w_in,
            w_rec,
            bias,
            channels,
            hidden,
        })
    }

    /// Hidden states `[C, B, S, h]` for input `[B, S, C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, s, c) = (shape[0], shape[1], shape[2]);
        let h = self.hidden;
        if c != self.channels {
            return Err(Error::invalid(format!("LSTM built for {} channels, input has {c}", self.channels)));
        }
        let per_channel = x.permute(&[2, 1, 0])?.reshape(&[c, s * b, 1])?;
        let projected = per_channel
            .matmul(ctx.p(self.w_in))?
            .add(ctx.p(self.bias))?
            .reshape(&[c, s, b, 4 * h])?;
        let w_rec = ctx.p(self.w_rec);
        let mut hs = ctx.constant(Tensor::zeros(&[c, b, h]));
        let mut cs = ctx.constant(Tensor::zeros(&[c, b, h]));
        let mut outs = Vec::with_capacity(s);
        for t in 0..s {
            let gates = projected
                .slice(1, t, 1)?
                .reshape(&[c, b, 4 * h])?
                .add(hs.matmul(w_rec)?)?;
            let i = gates.slice(2, 0, h)?.sigmoid();
            let f = gates.slice(2, h, h)?.sigmoid();
            let g = gates.slice(2, 2 * h, h)?.tanh();
            let o = gates.slice(2, 3 * h, h)?.sigmoid();
            cs = f.mul(cs)?.add(i.mul(g)?)?;
            hs = o.mul(cs.tanh())?;
            outs.push(hs.reshape(&[c, b, 1, h])?);
        }
        Var::concat(&outs, 2)
    }
}

#[derive(Clone, Debug)]
pub struct NeuralStl {
    pub lstm: ChannelLstm,
    /// Shared `[h, 1]` contraction and its scalar bias.
    pub contract_w: ParamId,
    pub contract_b: ParamId,
    pub trend_mixer: Mlp,
    pub seasonal_mixer: Mlp,
    pub config: StlConfig,
}

impl NeuralStl {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, config: StlConfig) -> Result<Self> {
        if channels == 0 || config.hidden == 0 {
            return Err(Error::Config("decomposition needs at least one channel and hidden unit".into()));
        }
        let width = channels.max(config.mixer_width_floor);
        Ok(Self {
            lstm: ChannelLstm::new(store, &format!("{name}.lstm"), channels, config.hidden)?,
            contract_w: store.linear_init(&format!("{name}.contract.weight"), &[config.hidden, 1], config.hidden, false)?,
            contract_b: store.linear_init(&format!("{name}.contract.bias"), &[1], config.hidden, false)?,
            trend_mixer: Mlp::new(store, &format!("{name}.trend_mixer"), channels, width, channels)?,
            seasonal_mixer: Mlp::new(store, &format!("{name}.seasonal_mixer"), channels, width, channels)?,
            config,
        })
    }

    /// Channel-independent proto-trend `[B, S, C]`.
    pub fn proto_trend<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, s, c) = (shape[0], shape[1], shape[2]);
        let hidden = self.lstm.forward(ctx, x)?;
        hidden
            .matmul(ctx.p(self.contract_w))?
            .add(ctx.p(self.contract_b))?
            .gelu()
            .reshape(&[c, b, s])?
            .permute(&[1, 2, 0])
    }

    /// Trend and seasonal parts from the mixers, residual by subtraction.
    ///
    /// Trend and seasonal values are snapped to the normalization lattice, so
    /// for a snapped input every sum below is exact and the components add
    /// back to `x` bit for bit.
    pub fn synthesize<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, proto: Var<'t>) -> Result<ComponentTriple<'t>> {
        let trend = self.trend_mixer.forward(ctx, proto)?.snap(LATTICE_STEP);
        let detrended = x.sub(trend)?;
        let seasonal = self.seasonal_mixer.forward(ctx, detrended)?.snap(LATTICE_STEP);
        let residual = detrended.sub(seasonal)?;
        Ok(ComponentTriple {
            trend,
            seasonal,
            residual,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<ComponentTriple<'t>> {
        let proto = self.proto_trend(ctx, x)?;
        self.synthesize(ctx, x, proto)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.lstm.w_in, self.lstm.w_rec, self.lstm.bias, self.contract_w, self.contract_b];
        for m in [&self.trend_mixer, &self.seasonal_mixer] {
            v.extend(m.first.params());
            v.extend(m.second.params());
        }
        v
    }
}

/// The decomposition-free variant: everything is trend.
pub fn passthrough<'t>(ctx: &Ctx<'t>, x: Var<'t>) -> ComponentTriple<'t> {
    let zeros = ctx.constant(Tensor::zeros(&x.shape()));
    ComponentTriple {
        trend: x,
        seasonal: zeros,
        residual: zeros,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check_params, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64, b: usize, s: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, s, c], |_| (rng.gen_range(-2.0..2.0) / LATTICE_STEP).round() * LATTICE_STEP)
    }

    #[test]
    fn closure_is_exact() {
        let mut store = ParamStore::new(5);
        let stl = NeuralStl::new(&mut store, "stl", 3, StlConfig::default()).unwrap();
        let x = input(1, 2, 10, 3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let xv = ctx.constant(x.clone());
        let c = stl.forward(&ctx, xv).unwrap();
        let sum = c.trend.add(c.seasonal).unwrap().add(c.residual).unwrap().value();
        assert!(sum.bit_eq(&x));
    }

    #[test]
    fn channels_are_independent_in_proto_trend() {
        let mut store = ParamStore::new(6);
        let stl = NeuralStl::new(&mut store, "stl", 4, StlConfig::default()).unwrap();
        let x = input(2, 2, 12, 4);
        let mut y = x.clone();
        for t in 0..12 {
            for b in 0..2 {
                y.set(&[b, t, 2], x.at(&[b, t, 2]) + 0.5);
            }
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let za = stl.proto_trend(&ctx, ctx.constant(x)).unwrap().value();
        let zb = stl.proto_trend(&ctx, ctx.constant(y)).unwrap().value();
        for b in 0..2 {
            for t in 0..12 {
                for c in [0, 1, 3] {
                    assert_eq!(za.at(&[b, t, c]).to_bits(), zb.at(&[b, t, c]).to_bits());
                }
                assert_ne!(za.at(&[b, t, 2]), zb.at(&[b, t, 2]));
            }
        }
    }

    #[test]
    fn proto_trend_is_causal() {
        let mut store = ParamStore::new(7);
        let stl = NeuralStl::new(&mut store, "stl", 2, StlConfig::default()).unwrap();
        let x = input(3, 1, 9, 2);
        let mut y = x.clone();
        y.set(&[0, 6, 1], 3.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let za = stl.proto_trend(&ctx, ctx.constant(x)).unwrap().value();
        let zb = stl.proto_trend(&ctx, ctx.constant(y)).unwrap().value();
        for t in 0..6 {
            for c in 0..2 {
                assert_eq!(za.at(&[0, t, c]), zb.at(&[0, t, c]));
            }
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_constant() {
        let mut store = ParamStore::new(8);
        let stl = NeuralStl::new(&mut store, "stl", 2, StlConfig::default()).unwrap();
        store.set_value(stl.lstm.bias, Tensor::zeros(&[2, 1, 64])).unwrap();
        let bl = store.value(stl.contract_b).data()[0];
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let z = stl.proto_trend(&ctx, ctx.constant(Tensor::zeros(&[2, 5, 2]))).unwrap().value();
        let expect = 0.5 * bl * (1.0 + libm::erf(bl / std::f64::consts::SQRT_2));
        assert!(z.data().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn single_step_single_channel() {
        let mut store = ParamStore::new(9);
        let stl = NeuralStl::new(&mut store, "stl", 1, StlConfig::default()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, 0);
        let c = stl.forward(&ctx, ctx.constant(Tensor::full(&[1, 1, 1], 0.5))).unwrap();
        assert_eq!(c.residual.shape(), vec![1, 1, 1]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new(10);
        let stl = NeuralStl::new(&mut store, "stl", 2, StlConfig { hidden: 4, mixer_width_floor: 3 }).unwrap();
        let x = input(4, 2, 5, 2);
        let w = Tensor::from_fn(&[2, 5, 2], |i| ((i * 5 % 7) as f64 - 3.0) / 3.0);
        let ids = stl.param_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = grad_check_params(
            &mut store,
            &ids,
            |ctx| {
                let c = stl.forward(ctx, ctx.constant(x.clone()))?;
                let wv = ctx.constant(w.clone());
                let l = c.trend.mul(wv)?.sum().add(c.seasonal.square().sum())?.add(c.residual.mul(c.residual)?.mul(wv)?.sum())?;
                Ok(l)
            },
            1e-5,
            1e-4,
            12,
            &mut rng,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.checked >= 10);
    }
}
