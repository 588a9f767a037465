//! Central finite differences, the reference every backward rule is checked
//! against, and a suite that compares the tape against them layer by layer.

use serde::Serialize;

use crate::align::{load_vocab_embeddings, AlignConfig, AlignmentWeights, AttentionScale, VocabSource};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::model::{ModelConfig, SitModel};
use crate::nn::{Activation, BlockConfig, FeedForward, LayerNorm, Linear, LoraAdapter, SelfAttention, TransformerBlock};
use crate::pressure::{random_posture, synth_posture};
use crate::prompt::StreamItem;
use crate::rng::{self, Rng};
use crate::sensor::{patchify, EmbeddingConfig, SensorEncoder};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest coordinate error scaled by the gradient's own magnitude:
/// `max|a − n| / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

/// Running version of [`max_relative_error`] over several tensors, so a
/// parameter whose gradient is identically zero is judged against the scale
/// of the whole layer rather than against floating-point noise.
#[derive(Default)]
struct ErrorTally {
    diff: f64,
    scale: f64,
}

impl ErrorTally {
    fn add(&mut self, analytic: &Tensor, numeric: &Tensor) {
        assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            self.diff = self.diff.max((a - n).abs());
        }
        self.scale = self.scale.max(analytic.max_abs()).max(numeric.max_abs());
    }

    fn value(&self) -> f64 {
        self.diff / self.scale.max(1e-8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Sums `out ⊙ W` for a fixed random `W`, so every output element matters.
fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = rng::normal_tensor(tape.value(out).shape(), 1.0, &mut rng::seeded(seed));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Compares tape gradients with finite differences for every input tensor.
pub fn check_inputs(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.input(x.clone())).collect();
        let l = f(&mut t, &vs).expect("evaluation succeeded once");
        t.value(l).data()[0]
    };
    let mut tally = ErrorTally::default();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut xs = inputs.to_vec();
        let numeric = finite_diff_grad(
            |x| {
                xs[i] = x.clone();
                eval(&xs)
            },
            &inputs[i],
            STEP,
        );
        tally.add(&analytic, &numeric);
    }
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: tally.value(),
    })
}

/// Compares tape gradients with finite differences for every trainable
/// parameter of `store`.
pub fn check_params(
    name: &str,
    store: &ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.accumulate(&tape, &grads)?;
    let mut tally = ErrorTally::default();
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        let original = store.value(id).clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.get_mut(id).value = x.clone();
                let mut t = Tape::new();
                let l = f(&mut t, &probe).expect("evaluation succeeded once");
                t.value(l).data()[0]
            },
            &original,
            STEP,
        );
        probe.get_mut(id).value = original;
        tally.add(&with_grads.get(id).grad, &numeric);
    }
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: tally.value(),
    })
}

fn rand_t(shape: &[usize], r: &mut Rng) -> Tensor {
    rng::normal_tensor(shape, 1.0, r)
}

/// Shifts the biases of `lin` until no pre-activation on `x` sits within 0.05
/// of zero, so finite differences never straddle the ReLU kink.
fn keep_off_kink(store: &mut ParamStore, lin: &Linear, x: &Tensor) -> Result<()> {
    let Some(bias) = lin.bias else { return Ok(()) };
    let pre = x.matmul(store.value(lin.weight))?;
    let mut b = store.value(bias).clone();
    for j in 0..lin.out_dim {
        while (0..pre.rows()).any(|i| (pre.at(i, j) + b.data()[j]).abs() < 0.05) {
            b.data_mut()[j] += 0.05;
        }
    }
    store.set_value(bias, b)
}

/// Every primitive op, every layer type and the full model at tiny sizes.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    let (a, b) = (rand_t(&[3, 4], &mut r), rand_t(&[4, 2], &mut r));
    out.push(check_inputs("matmul", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe_loss(t, y, 1)
    })?);
    let c = rand_t(&[2, 3], &mut r);
    out.push(check_inputs("matmul_transposed", &[a.clone(), c], |t, v| {
        let y = t.matmul_t(v[0], true, v[1], true)?;
        probe_loss(t, y, 2)
    })?);
    let (x, y) = (rand_t(&[3, 4], &mut r), rand_t(&[3, 4], &mut r));
    out.push(check_inputs("add_mul_scale", &[x.clone(), y], |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[0])?;
        let z = t.scale(m, 0.7);
        probe_loss(t, z, 3)
    })?);
    out.push(check_inputs("add_bias", &[x.clone(), rand_t(&[4], &mut r)], |t, v| {
        let z = t.add_bias(v[0], v[1])?;
        probe_loss(t, z, 4)
    })?);
    for causal in [false, true] {
        let sq = rand_t(&[4, 4], &mut r);
        out.push(check_inputs(&format!("softmax(causal={causal})"), &[sq], |t, v| {
            let z = t.softmax_rows(v[0], causal)?;
            probe_loss(t, z, 5)
        })?);
    }
    out.push(check_inputs(
        "layer_norm_op",
        &[x.clone(), rand_t(&[4], &mut r), rand_t(&[4], &mut r)],
        |t, v| {
            let z = t.layer_norm(v[0], v[1], v[2], crate::nn::LN_EPS)?;
            probe_loss(t, z, 6)
        },
    )?);
    out.push(check_inputs("gelu", std::slice::from_ref(&x), |t, v| {
        let z = t.gelu(v[0]);
        probe_loss(t, z, 7)
    })?);
    // Keep inputs away from the kink at zero.
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    out.push(check_inputs("relu", &[away], |t, v| {
        let z = t.relu(v[0]);
        probe_loss(t, z, 8)
    })?);
    out.push(check_inputs("dropout", std::slice::from_ref(&x), |t, v| {
        let z = t.dropout(v[0], 0.3, true, &mut rng::seeded(9))?;
        probe_loss(t, z, 9)
    })?);
    out.push(check_inputs("slice_concat", &[x.clone(), a.clone()], |t, v| {
        let s = t.slice_cols(v[0], 1, 2)?;
        let z = t.concat_cols(&[s, v[1]])?;
        probe_loss(t, z, 10)
    })?);
    out.push(check_inputs("gather_rows", &[x.clone(), a], |t, v| {
        let z = t.gather_rows(&[(v[0], 2), (v[1], 0), (v[0], 2), (v[0], 0)])?;
        probe_loss(t, z, 11)
    })?);
    let logits = rand_t(&[4, 6], &mut r);
    out.push(check_inputs("cross_entropy", &[logits], |t, v| {
        t.cross_entropy(v[0], &[1, 5, 0, 2], &[true, false, true, true])
    })?);

    let xin = rand_t(&[5, 8], &mut r);
    let layer = |name: &str, build: &dyn Fn(&mut ParamStore, &mut Rng) -> Result<Box<dyn Fn(&mut Tape, &ParamStore, Var) -> Result<Var>>>| -> Result<CheckResult> {
        let mut store = ParamStore::new();
        let mut lr = rng::seeded(seed ^ 0x1a7e);
        let fwd = build(&mut store, &mut lr)?;
        // Move LoRA B away from zero so its path carries signal.
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with(".b") {
                store.get_mut(id).value = rng::normal_tensor(store.value(id).shape(), 0.5, &mut lr);
            }
        }
        let xin = xin.clone();
        check_params(name, &store, move |t, s| {
            let x = t.constant(xin.clone());
            let y = fwd(t, s, x)?;
            probe_loss(t, y, 12)
        })
    };
    out.push(layer("linear", &|s, r| {
        let l = Linear::new(s, "l", 8, 6, true, r)?;
        Ok(Box::new(move |t, s, x| l.forward(t, s, x)))
    })?);
    out.push(layer("layer_norm", &|s, r| {
        let l = LayerNorm::new(s, "n", 8)?;
        for id in s.ids().collect::<Vec<_>>() {
            s.get_mut(id).value = rng::normal_tensor(&[8], 1.0, r);
        }
        Ok(Box::new(move |t, s, x| l.forward(t, s, x)))
    })?);
    out.push(layer("lora", &|s, r| {
        let l = LoraAdapter::new(s, "lora", 8, 6, 3, 6.0, r)?;
        Ok(Box::new(move |t, s, x| l.delta(t, s, x)))
    })?);
    for (name, causal, alibi) in [("attention", false, false), ("causal_attention_alibi", true, true)] {
        out.push(layer(name, &|s, r| {
            let mut a = SelfAttention::new(s, "attn", 8, 2, causal, r)?;
            a.alibi = alibi;
            a.lora_q = Some(LoraAdapter::new(s, "attn.lq", 8, 8, 2, 4.0, r)?);
            a.lora_v = Some(LoraAdapter::new(s, "attn.lv", 8, 8, 2, 4.0, r)?);
            Ok(Box::new(move |t, s, x| a.forward(t, s, x)))
        })?);
    }
    for act in [Activation::Gelu, Activation::Relu] {
        out.push(layer(&format!("feed_forward({act:?})"), &|s, r| {
            let f = FeedForward {
                fc1: Linear::new(s, "ff1", 8, 16, true, r)?,
                fc2: Linear::new(s, "ff2", 16, 8, true, r)?,
                activation: act,
            };
            keep_off_kink(s, &f.fc1, &xin)?;
            Ok(Box::new(move |t, s, x| f.forward(t, s, x)))
        })?);
    }
    out.push(layer("transformer_block", &|s, r| {
        let cfg = BlockConfig {
            dim: 8,
            heads: 2,
            ff_multiplier: 2,
            causal: true,
            activation: Activation::Gelu,
        };
        let b = TransformerBlock::new(s, "blk", cfg, r)?;
        Ok(Box::new(move |t, s, x| b.forward(t, s, x)))
    })?);

    // Sensor encoder on a 4x4 map.
    let geometry = crate::pressure::SensorGeometry {
        rows: 4,
        cols: 4,
        ..Default::default()
    };
    let map = synth_posture(&random_posture(&geometry, &mut r), &geometry, seed)?;
    let grid = patchify(&map, 2)?;
    let emb_cfg = EmbeddingConfig {
        patch_size: 2,
        embed_dim: 8,
        noise_std: 0.0,
        encoder_depth: 1,
        encoder_heads: 2,
        ff_multiplier: 2,
        activation: Activation::Gelu,
    };
    let mut store = ParamStore::new();
    let enc = SensorEncoder::new(&mut store, emb_cfg, grid.len(), &mut rng::seeded(seed))?;
    out.push(check_params("sensor_encoder", &store, |t, s| {
        let y = enc.forward(t, s, &grid)?;
        probe_loss(t, y, 13)
    })?);

    // Alignment with a down-projection and a frozen vocabulary.
    let mut store = ParamStore::new();
    let vocab = load_vocab_embeddings(&VocabSource::Random { seed }, &mut store, 12, 6)?;
    store.get_mut(vocab.table).value = rand_t(&[12, 6], &mut r);
    let cfg = AlignConfig {
        heads: 2,
        embed_dim: 8,
        hidden_dim: 5,
        dropout: 0.2,
        scale: AttentionScale::ModelWidth,
        top_m: None,
    };
    let align = AlignmentWeights::new(&mut store, cfg, 6, &mut rng::seeded(seed))?;
    let xs = rand_t(&[3, 8], &mut r);
    out.push(check_params("alignment", &store, |t, s| {
        let x = t.constant(xs.clone());
        let o = align.forward(t, s, x, &vocab, true, &mut rng::seeded(14))?;
        probe_loss(t, o.features, 14)
    })?);

    out.push(check_full_model(seed)?);
    Ok(out)
}

/// Sensor → alignment → language model → masked cross-entropy, all parameters
/// trainable, tiny dimensions.
pub fn check_full_model(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig::tiny();
    let mut model = SitModel::new(cfg.clone(), seed)?;
    model.store.set_trainable("", true);
    let mut r = rng::seeded(seed);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.get(id).name.ends_with(".b") {
            model.store.get_mut(id).value = rng::normal_tensor(model.store.value(id).shape(), 0.3, &mut r);
        }
    }
    let map = synth_posture(&random_posture(&cfg.geometry, &mut r), &cfg.geometry, seed)?;
    let n = cfg.n_patches();
    let mut items: Vec<StreamItem> = b"p<".iter().map(|&b| StreamItem::Hard(b as usize)).collect();
    items.extend((0..n).map(|row| StreamItem::Soft { segment: 0, row }));
    items.extend(b">a:ok".iter().map(|&b| StreamItem::Hard(b as usize)));
    let targets: Vec<usize> = items[1..]
        .iter()
        .map(|i| match i {
            StreamItem::Hard(id) => *id,
            StreamItem::Soft { .. } => 0,
        })
        .chain(std::iter::once(0))
        .collect();
    let mask: Vec<bool> = (0..items.len()).map(|t| t + 4 >= items.len()).collect();
    let m = &model;
    check_params("full_model", &model.store.clone(), |t, s| {
        let mut rr = rng::seeded(15);
        let soft = m.sensor_features_with(s, t, &map, true, &mut rr)?;
        let x = m.lm.embed(t, s, &items, &[soft])?;
        let logits = m.lm.logits(t, s, x)?;
        t.cross_entropy(logits, &targets, &mask)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert_abs_diff_eq!(g.data()[0], 2.0, epsilon = 1e-7);
        assert_abs_diff_eq!(g.data()[1], 4.0, epsilon = 1e-7);
    }

    #[test]
    fn product_rule() {
        let x = Tensor::new(vec![2], vec![3.0, 5.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[1], &x, 1e-4);
        assert_abs_diff_eq!(g.data()[0], 5.0, epsilon = 1e-7);
        assert_abs_diff_eq!(g.data()[1], 3.0, epsilon = 1e-7);
    }

    #[test]
    fn suite_passes_at_fixed_seed() {
        let results = run_suite(3).unwrap();
        for r in &results {
            assert!(r.passed(), "{} rel error {}", r.name, r.max_rel_error);
        }
        assert!(results.len() >= 20);
    }
}
