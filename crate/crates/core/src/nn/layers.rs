//! Layer zoo: linear, norm, embedding, attention, transformer blocks.
//!
//! Attention operates on `[B, L, D]`; single sequences pass `B = 1`. All
//! constructors take an RNG so initialization is owned by the caller's seeded
//! stream, and register their parameters into the supplied [`ParamSet`].

use super::params::{ParamSet, Var};
use super::tensor::Tensor;
use crate::rng::randn_vec;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

fn init_linear(rng: &mut ChaCha12Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = 1.0 / (fan_in as f64).sqrt();
    randn_vec(rng, n).into_iter().map(|x| x * std).collect()
}

pub struct Linear {
    pub w: Arc<Var>,
    pub b: Option<Arc<Var>>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Linear {
        let w = ps.add(Var::new(
            format!("{name}.w"),
            init_linear(rng, d_in, d_in * d_out),
            &[d_in, d_out],
        ));
        let b = if bias {
            Some(ps.add(Var::new(format!("{name}.b"), vec![0.0; d_out], &[d_out])))
        } else {
            None
        };
        Linear { w, b }
    }

    /// x: [..., d_in] -> [..., d_out]
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape().to_vec();
        let d_in = *shape.last().expect("linear input rank");
        let rows = x.numel() / d_in;
        let w = self.w.value();
        let d_out = w.shape()[1];
        let mut y = x.reshape(&[rows, d_in]).matmul(&w);
        if let Some(b) = &self.b {
            y = y.add(&b.value());
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(&out_shape)
    }
}

pub struct LayerNorm {
    pub gamma: Arc<Var>,
    pub beta: Arc<Var>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gamma: ps.add(Var::new(format!("{name}.gamma"), vec![1.0; d], &[d])),
            beta: ps.add(Var::new(format!("{name}.beta"), vec![0.0; d], &[d])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma.value(), &self.beta.value(), self.eps)
    }
}

pub struct Embedding {
    pub table: Arc<Var>,
}

impl Embedding {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        vocab: usize,
        d: usize,
    ) -> Embedding {
        let data = randn_vec(rng, vocab * d).into_iter().map(|x| 0.02 * x).collect();
        Embedding {
            table: ps.add(Var::new(format!("{name}.table"), data, &[vocab, d])),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Tensor {
        self.table.value().index_select0(ids)
    }

    /// Single row as [1, d].
    pub fn row(&self, id: usize) -> Tensor {
        self.forward(&[id])
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Mlp {
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), d_in, d_hidden, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), d_hidden, d_out, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).silu())
    }
}

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert_eq!(d_model % heads, 0, "d_model must divide heads");
        MultiHeadAttention {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), d_model, d_model, false),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), d_kv, d_model, false),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), d_kv, d_model, false),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), d_model, d_model, false),
            heads,
            d_model,
        }
    }

    fn split_heads(&self, x: &Tensor) -> Tensor {
        // [B, L, D] -> [B*h, L, dh]
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / self.heads;
        x.reshape(&[b, l, self.heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * self.heads, l, dh])
    }

    /// q_in: [B, Lq, d_model], kv_in: [B, Lk, d_kv], mask: optional [Lq, Lk]
    /// additive bias (use large negatives to block).
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let (b, lq, _) = (q_in.shape()[0], q_in.shape()[1], q_in.shape()[2]);
        let lk = kv_in.shape()[1];
        let dh = self.d_model / self.heads;
        let q = self.split_heads(&self.wq.forward(q_in));
        let k = self.split_heads(&self.wk.forward(kv_in));
        let v = self.split_heads(&self.wv.forward(kv_in));
        let mut att = q.bmatmul(&k.permute(&[0, 2, 1])).scale(1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            debug_assert_eq!(m.shape(), &[lq, lk]);
            att = att.add(m);
        }
        let ctx = att.softmax_last().bmatmul(&v); // [B*h, Lq, dh]
        let merged = ctx
            .reshape(&[b, self.heads, lq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, lq, self.d_model]);
        self.wo.forward(&merged)
    }
}

/// Pre-norm self-attention block: x + attn(ln(x)) then x + mlp(ln(x)).
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> TransformerBlock {
        TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d_model, d_model, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), d_model, 4 * d_model, d_model),
        }
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let h = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&h, &h, mask));
        let h = self.ln2.forward(&x);
        x.add(&self.mlp.forward(&h))
    }
}

/// Pre-norm cross-attention block: x + attn(ln(x), cond) then x + mlp(ln(x)).
pub struct CrossAttentionBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        d_cond: usize,
        heads: usize,
    ) -> CrossAttentionBlock {
        CrossAttentionBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), d_model, d_cond, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            mlp: Mlp::new(ps, rng, &format!("{name}.mlp"), d_model, 4 * d_model, d_model),
        }
    }

    /// x: [B, L, d_model], cond: [B, Lc, d_cond]
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Tensor {
        let h = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&h, cond, None));
        let h = self.ln2.forward(&x);
        x.add(&self.mlp.forward(&h))
    }
}

/// Additive causal mask for self-attention: 0 on/below diagonal, -1e30 above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::new(data, &[len, len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use crate::rng::derive_rng;

    #[test]
    fn linear_shapes_and_determinism() {
        let mut ps = ParamSet::new();
        let mut rng = derive_rng(0, "lin");
        let lin = Linear::new(&mut ps, &mut rng, "l", 4, 6, true);
        let x = Tensor::new((0..8).map(|i| i as f64).collect(), &[2, 4]);
        let y1 = lin.forward(&x);
        let y2 = lin.forward(&x);
        assert_eq!(y1.shape(), &[2, 6]);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn causal_mask_blocks_future() {
        // With a causal mask, output at position 0 must not change when the
        // token at position 2 changes.
        let mut ps = ParamSet::new();
        let mut rng = derive_rng(1, "blk");
        let blk = TransformerBlock::new(&mut ps, &mut rng, "b", 8, 2);
        let mask = causal_mask(3);
        let base: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x1 = Tensor::new(base.clone(), &[1, 3, 8]);
        let mut bumped = base;
        for v in &mut bumped[16..24] {
            *v += 5.0;
        }
        let x2 = Tensor::new(bumped, &[1, 3, 8]);
        let y1 = blk.forward(&x1, Some(&mask));
        let y2 = blk.forward(&x2, Some(&mask));
        assert_eq!(&y1.data()[0..8], &y2.data()[0..8], "pos 0 affected by future");
        assert_ne!(&y1.data()[16..24], &y2.data()[16..24]);
    }

    #[test]
    fn cross_attention_ignores_cond_when_value_proj_zeroed() {
        let mut ps = ParamSet::new();
        let mut rng = derive_rng(2, "xattn");
        let blk = CrossAttentionBlock::new(&mut ps, &mut rng, "c", 8, 6, 2);
        blk.attn.wv.w.set_data(vec![0.0; 6 * 8]);
        let x = Tensor::new((0..16).map(|i| (i as f64).cos()).collect(), &[1, 2, 8]);
        let c1 = Tensor::new(vec![0.5; 12], &[1, 2, 6]);
        let c2 = Tensor::new(vec![-3.0; 12], &[1, 2, 6]);
        let y1 = blk.forward(&x, &c1);
        let y2 = blk.forward(&x, &c2);
        assert_eq!(y1.data(), y2.data());
    }
}
