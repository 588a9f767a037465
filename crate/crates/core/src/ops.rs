//! Forward kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Row-wise softmax with max subtraction. With `causal`, entry (i, j) for j > i is
/// forced to probability zero; the matrix must then be square or wider.
pub fn softmax_rows_masked(x: &Tensor, causal: bool) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
    }
    let cols = x.last_dim();
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let live = if causal { (i + 1).min(cols) } else { cols };
        let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in &mut row[..live] {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in &mut row[..live] {
            *v /= total;
        }
        for v in &mut row[live..] {
            *v = 0.0;
        }
    }
    Ok(out)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(x, false)
}

/// Normalized rows plus per-row inverse standard deviation, before the affine step.
pub(crate) fn layer_norm_parts(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.last_dim() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    (xhat, inv)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    check_affine(x, gain, bias)?;
    let (mut y, _) = layer_norm_parts(x, eps);
    for i in 0..y.rows() {
        for ((v, g), b) in y.row_mut(i).iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(y)
}

pub(crate) fn check_affine(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<()> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(format!(
            "layer norm over last dim {d} needs gain/bias of shape [{d}], got {:?} and {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Dropout mask with survivors pre-scaled by `1/(1-rate)`; `None` means identity.
pub fn dropout_mask(len: usize, rate: f64, training: bool, rng: &mut Rng) -> Result<Option<Vec<f64>>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..len)
            .map(|_| if rng::uniform(rng) < rate { 0.0 } else { keep })
            .collect(),
    ))
}

pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    Ok(match dropout_mask(x.len(), rate, training, rng)? {
        None => x.clone(),
        Some(mask) => {
            let mut y = x.clone();
            y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            y
        }
    })
}

/// Mean cross-entropy over the masked positions together with the softmax
/// probabilities of every row.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<(f64, Tensor)> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t || mask.len() != t {
        return Err(Error::shape(format!(
            "{t} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::data("loss mask selects no positions"));
    }
    if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
        return Err(Error::data(format!("target id {bad} outside vocabulary of {v}")));
    }
    let probs = softmax_rows(logits)?;
    let mut total = 0.0;
    for (i, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            // log-sum-exp form keeps large margins finite.
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
    }
    Ok((total / count as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&row(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let big = softmax_rows(&row(&[1000.0, 1000.0, 1000.0])).unwrap();
        for p in big.data() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
        }
        let p = softmax_rows(&row(&[0.0, 3f64.ln()])).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_rows(&row(&[f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
        assert!(softmax_rows(&row(&[f64::INFINITY, 0.0])).is_err());
    }

    #[test]
    fn causal_rows_ignore_future() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 5.0, 1.0, 1.0]).unwrap();
        let p = softmax_rows_masked(&x, true).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = layer_norm(&row(&[0.3; 4]), &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&row(&[1.0, 3.0]), &g, &b, 1e-12).unwrap();
        assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-9);
        assert!(layer_norm(&row(&[1.0, 3.0]), &Tensor::zeros(&[3]), &b, 1e-5).is_err());
    }

    #[test]
    fn dropout_identity_cases_and_expectation() {
        let mut r = rng::seeded(3);
        let x = Tensor::full(&[100_000], 1.0);
        assert_eq!(dropout(&x, 0.5, false, &mut r).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, true, &mut r).unwrap(), x);
        let y = dropout(&x, 0.5, true, &mut r).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(matches!(dropout(&x, 1.0, true, &mut r), Err(Error::Config(_))));
        assert!(dropout(&x, -0.1, false, &mut r).is_err());
    }

    #[test]
    fn dropout_masks_repeat_per_seed() {
        let x = Tensor::full(&[64], 1.0);
        let a = dropout(&x, 0.3, true, &mut rng::seeded(9)).unwrap();
        let b = dropout(&x, 0.3, true, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 256]);
        let (loss, _) = masked_cross_entropy(&uniform, &[1, 2, 3], &[true, false, true]).unwrap();
        assert_abs_diff_eq!(loss, 256f64.ln(), epsilon = 1e-12);

        let mut confident = Tensor::zeros(&[1, 4]);
        confident.data_mut()[2] = 100.0;
        let (loss, _) = masked_cross_entropy(&confident, &[2], &[true]).unwrap();
        assert!(loss < 1e-30);

        // Two positions, V = 4, hand-computed: -(ln p0 + ln p1)/2.
        let logits = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0]).unwrap();
        let (loss, _) = masked_cross_entropy(&logits, &[0, 2], &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let p0 = e / (e + 3.0);
        let p1 = e / (e * e + e + 2.0);
        assert_abs_diff_eq!(loss, -(p0.ln() + p1.ln()) / 2.0, epsilon = 1e-12);

        assert!(matches!(
            masked_cross_entropy(&logits, &[0, 2], &[false, false]),
            Err(Error::Data(_))
        ));
    }
}
