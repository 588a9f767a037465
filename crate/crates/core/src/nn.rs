//! Transformer building blocks on top of the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{matmul_t, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(name, rng::normal_tensor(&[in_dim, out_dim], std, rng), true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Low-rank update `scaling · B·A` with `A: r × in` (Gaussian) and `B: out × r` (zeros).
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

pub fn check_lora_rank(rank: usize, in_dim: usize, out_dim: usize) -> Result<()> {
    if rank == 0 || rank > in_dim.min(out_dim) {
        return Err(Error::config(format!(
            "LoRA rank {rank} must lie in 1..={} for a {in_dim}->{out_dim} layer",
            in_dim.min(out_dim)
        )));
    }
    Ok(())
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_lora_rank(rank, in_dim, out_dim)?;
        let std = 1.0 / (in_dim as f64).sqrt();
        let a = store.add(format!("{name}.a"), rng::normal_tensor(&[rank, in_dim], std, rng), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim, rank]), true)?;
        Ok(Self { a, b, rank, alpha })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `scaling · x·Aᵀ·Bᵀ`.
    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let xa = tape.matmul_t(x, false, a, true)?;
        let xab = tape.matmul_t(xa, false, b, true)?;
        Ok(tape.scale(xab, self.scaling()))
    }
}

/// Tape-free LoRA layer: `x·Wᵀ + (alpha/r)·x·Aᵀ·Bᵀ` with `W: out × in`.
pub fn lora_forward(x: &Tensor, base_w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    let (out_dim, in_dim) = base_w.dims2()?;
    let (rank, a_in) = a.dims2()?;
    let (b_out, b_rank) = b.dims2()?;
    check_lora_rank(rank, in_dim, out_dim)?;
    if a_in != in_dim || b_out != out_dim || b_rank != rank {
        return Err(Error::shape(format!(
            "adapter A {:?} / B {:?} do not fit base weight {:?}",
            a.shape(),
            b.shape(),
            base_w.shape()
        )));
    }
    let mut y = matmul_t(x, false, base_w, true)?;
    let delta = matmul_t(&matmul_t(x, false, a, true)?, false, b, true)?;
    let s = alpha / rank as f64;
    y.data_mut()
        .iter_mut()
        .zip(delta.data())
        .for_each(|(v, d)| *v += s * d);
    Ok(y)
}

/// `-slope·(i - j)` for key `j` at or before query `i`, zero elsewhere, with
/// slope `2^(-8(h+1)/heads)`.
pub fn alibi_bias(n: usize, head: usize, heads: usize) -> Tensor {
    let slope = 2f64.powf(-8.0 * (head + 1) as f64 / heads as f64);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            data[i * n + j] = -slope * (i - j) as f64;
        }
    }
    Tensor::new(vec![n, n], data).expect("square bias")
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub causal: bool,
    /// Linear distance penalty on attention scores, one slope per head.
    pub alibi: bool,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, causal: bool, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng)?,
            heads,
            causal,
            alibi: false,
            lora_q: None,
            lora_v: None,
        })
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var, lin: &Linear, lora: Option<&LoraAdapter>) -> Result<Var> {
        let base = lin.forward(tape, store, x)?;
        match lora {
            Some(adapter) => {
                let d = adapter.delta(tape, store, x)?;
                tape.add(base, d)
            }
            None => Ok(base),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let dim = self.wq.out_dim;
        let dh = dim / self.heads;
        let q = self.project(tape, store, x, &self.wq, self.lora_q.as_ref())?;
        let k = self.wk.forward(tape, store, x)?;
        let v = self.project(tape, store, x, &self.wv, self.lora_v.as_ref())?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, false, kh, true)?;
            let mut scores = tape.scale(scores, scale);
            if self.alibi {
                let n = tape.value(scores).rows();
                let bias = tape.constant(alibi_bias(n, h, self.heads));
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax_rows(scores, self.causal)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let z = tape.concat_cols(&outs)?;
        self.wo.forward(tape, store, z)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Relu => tape.relu(h),
        };
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
    pub causal: bool,
    pub activation: Activation,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = cfg.dim * cfg.ff_multiplier;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim)?,
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, cfg.causal, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim)?,
            ff: FeedForward {
                fc1: Linear::new(store, &format!("{name}.ff1"), cfg.dim, hidden, true, rng)?,
                fc2: Linear::new(store, &format!("{name}.ff2"), hidden, cfg.dim, true, rng)?,
                activation: cfg.activation,
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.ff.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
