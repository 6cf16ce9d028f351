use crate::error::{Error, Result};
use crate::layers::LoraLinear;
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

/// Single-head cross-attention from learned queries onto frozen text
/// embeddings; every projection is a frozen base with a low-rank adapter.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub d_model: usize,
}

/// Padded key layout for a batch of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyLayout {
    /// Embedding rows actually used, in first-seen order.
    pub unique: Vec<usize>,
    /// `rows · max_len` indices into `unique` (padding repeats index 0).
    pub index: Vec<usize>,
    /// Real length of each row.
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl KeyLayout {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("cross-attention needs at least one key per row"));
        }
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut unique = Vec::new();
        let mut slot = std::collections::HashMap::new();
        let mut index = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            for &id in s {
                let k = *slot.entry(id).or_insert_with(|| {
                    unique.push(id);
                    unique.len() - 1
                });
                index.push(k);
            }
            index.extend(std::iter::repeat(0).take(max_len - s.len()));
        }
        Ok(Self {
            unique,
            index,
            lens: seqs.iter().map(Vec::len).collect(),
            max_len,
        })
    }
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rank: usize, alpha: f64, dropout: f64) -> Result<Self> {
        let proj = |store: &mut ParamStore, p: &str| {
            LoraLinear::new(store, &format!("{name}.{p}"), d_model, d_model, false, rank, alpha, dropout)
        };
        Ok(Self {
            q: proj(store, "q")?,
            k: proj(store, "k")?,
            v: proj(store, "v")?,
            d_model,
        })
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v].iter().flat_map(|p| p.adapter_params()).collect()
    }

    /// `queries` is `[M, D]`; `embeddings` holds the rows named by
    /// `layout.unique`. `mask` is `[N, M, L]` of 0 / −inf and is combined
    /// with padding. Returns the outputs `[N, M, D]` and attention weights
    /// `[N, M, L]`.
    pub fn attend<'t>(
        &self,
        ctx: &Ctx<'t>,
        queries: Var<'t>,
        embeddings: Tensor,
        layout: &KeyLayout,
        mask: Option<&Tensor>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let d = self.d_model;
        let qs = queries.shape();
        if qs.len() != 2 || qs[1] != d || embeddings.shape() != [layout.unique.len(), d] {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: qs,
                rhs: embeddings.shape().to_vec(),
            });
        }
        let (n, m, l) = (layout.lens.len(), qs[0], layout.max_len);
        let mut bias = match mask {
            Some(t) if t.shape() == [n, m, l] => t.clone(),
            Some(t) => {
                return Err(Error::ShapeMismatch {
                    op: "cross_attention mask",
                    lhs: t.shape().to_vec(),
                    rhs: vec![n, m, l],
                })
            }
            None => Tensor::zeros(&[n, m, l]),
        };
        for (r, &len) in layout.lens.iter().enumerate() {
            for j in 0..m {
                for p in len..l {
                    bias.set(&[r, j, p], f64::NEG_INFINITY);
                }
            }
        }
        let e = ctx.constant(embeddings);
        let keys = self.k.forward(ctx, e)?.gather_rows(&layout.index)?.reshape(&[n, l, d])?;
        let values = self.v.forward(ctx, e)?.gather_rows(&layout.index)?.reshape(&[n, l, d])?;
        let q = self.q.forward(ctx, queries)?;
        let scores = keys
            .matmul_t(q)?
            .transpose_last()?
            .scale(1.0 / (d as f64).sqrt())
            .add(ctx.constant(bias))?;
        let weights = scores.softmax(2)?;
        Ok((weights.matmul(values)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn setup(d: usize) -> (ParamStore, CrossAttention, ParamId) {
        let mut s = ParamStore::new(9);
        let a = CrossAttention::new(&mut s, "ca", d, 2, 2.0, 0.0).unwrap();
        let q = s.linear_init("queries", &[3, d], d, false).unwrap();
        (s, a, q)
    }

    #[test]
    fn key_layout_dedups_and_pads() {
        let k = KeyLayout::new(&[vec![5, 7, 5], vec![7]]).unwrap();
        assert_eq!(k.unique, vec![5, 7]);
        assert_eq!(k.index, vec![0, 1, 0, 1, 0, 0]);
        assert_eq!(k.lens, vec![3, 1]);
        assert!(KeyLayout::new(&[vec![]]).is_err());
    }

    #[test]
    fn weights_sum_to_one_and_skip_padding() {
        let (s, a, qid) = setup(4);
        let layout = KeyLayout::new(&[vec![0, 1, 2], vec![3]]).unwrap();
        let emb = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.9).cos());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let (out, w) = a.attend(&ctx, ctx.p(qid), emb, &layout, None).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 4]);
        let w = w.value();
        for r in 0..2 {
            for j in 0..3 {
                let tot: f64 = (0..3).map(|p| w.at(&[r, j, p])).sum();
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(w.at(&[1, 0, 1]), 0.0);
        assert_eq!(w.at(&[1, 2, 2]), 0.0);
    }

    #[test]
    fn single_token_returns_value_projection() {
        let (s, a, qid) = setup(4);
        let layout = KeyLayout::new(&[vec![0]]).unwrap();
        let emb = Tensor::from_fn(&[1, 4], |i| i as f64 - 1.5);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        let (out, _) = a.attend(&ctx, ctx.p(qid), emb.clone(), &layout, None).unwrap();
        let v = a.v.forward(&ctx, ctx.constant(emb)).unwrap().value();
        let out = out.value();
        for j in 0..3 {
            for c in 0..4 {
                assert!((out.at(&[0, j, c]) - v.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_row_fails() {
        let (s, a, qid) = setup(4);
        let layout = KeyLayout::new(&[vec![0, 1]]).unwrap();
        let emb = Tensor::from_fn(&[2, 4], |i| i as f64);
        let mask = Tensor::full(&[1, 3, 2], f64::NEG_INFINITY);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, false, 0);
        assert!(a.attend(&ctx, ctx.p(qid), emb, &layout, Some(&mask)).is_err());
    }
}
