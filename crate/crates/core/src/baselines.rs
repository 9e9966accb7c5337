//! Comparison training strategies: ℓ2 penalty, an L2X-style sigmoid gate,
//! and an IBA-style readout bottleneck that mixes embeddings with noise.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Example, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::tensorgrad::{Tape, Tensor, Var};

pub const SIGMA_FLOOR: f64 = 1e-6;
const LAMBDA_EPS: f64 = 1e-6;

/// `weight · Σ‖θ‖²` over the given parameter vars.
pub fn l2_penalty(tape: &mut Tape<'_>, params: &[Var], weight: f64) -> Result<Var> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 weight {weight} must be non-negative")));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for &p in params {
        let sq = tape.mul(p, p)?;
        let s = tape.sum(sq);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, weight))
}

/// Per-token importance gate `sigmoid(x·W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct L2XLayer {
    /// `[d×1]`.
    pub w: Tensor,
    /// `[1]`.
    pub b: Tensor,
}

impl L2XLayer {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[dim, 1]),
            b: Tensor::zeros(&[1]),
        }
    }
}

/// `sigmoid(x·W + b)` per row of `x`, as a `[L]` vector.
pub fn gate_scores(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let logits = tape.add(xw, b)?;
    let s = tape.sigmoid(logits);
    let n = tape.value(s).numel();
    tape.reshape(s, &[n])
}

/// Returns `(score_t · x_t, scores)`.
pub fn l2x_transform(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let scores = gate_scores(tape, x, w, b)?;
    let out = tape.scale_rows(x, scores)?;
    Ok((out, scores))
}

/// Readout bottleneck: predicts `λ_t` and noise statistics of the
/// embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct IbaReadout {
    /// `[d×1]`.
    pub w: Tensor,
    /// `[1]`.
    pub b: Tensor,
    /// `[d]` per-dimension noise mean.
    pub mu: Tensor,
    /// `[d]` per-dimension noise standard deviation, `≥ SIGMA_FLOOR`.
    pub sigma: Tensor,
}

impl IbaReadout {
    pub fn new(dim: usize, table: &Tensor) -> Result<Self> {
        let (mu, sigma) = embedding_stats(table)?;
        Ok(Self {
            w: Tensor::zeros(&[dim, 1]),
            b: Tensor::zeros(&[1]),
            mu: Tensor::vector(mu),
            sigma: Tensor::vector(sigma),
        })
    }
}

/// Per-dimension mean and population standard deviation over the
/// non-reserved rows of an embedding table.
pub fn embedding_stats(table: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (v, d) = (table.rows(), table.cols());
    if v < NUM_RESERVED + 2 || table.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "embedding_stats needs at least 2 non-reserved rows, table has shape {:?}",
            table.shape()
        )));
    }
    let n = (v - NUM_RESERVED) as f64;
    let mut mu = vec![0.0; d];
    for r in NUM_RESERVED..v {
        for (m, x) in mu.iter_mut().zip(table.row(r)) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in NUM_RESERVED..v {
        for ((s, x), m) in var.iter_mut().zip(table.row(r)).zip(&mu) {
            *s += (x - m) * (x - m);
        }
    }
    let sigma = var.into_iter().map(|s| (s / n).sqrt().max(SIGMA_FLOOR)).collect();
    Ok((mu, sigma))
}

/// Standard-normal draws `η` (`[L×d]`) for the reparameterized noise.
pub fn iba_noise<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, dim, data).expect("noise shape")
}

pub struct IbaOut {
    pub z: Var,
    /// `[L]` gate values.
    pub lambda: Var,
}

/// `z_t = λ_t x_t + (1 − λ_t) ε_t` with `ε = μ + σ ⊙ η` when `eta` is given
/// (training) and `ε = μ` otherwise.
pub fn iba_transform(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    b: Var,
    readout: &IbaReadout,
    eta: Option<Tensor>,
) -> Result<IbaOut> {
    let lambda = gate_scores(tape, x, w, b)?;
    let (l, d) = (tape.value(x).rows(), tape.value(x).cols());
    let mut eps = Tensor::zeros(&[l, d]);
    for t in 0..l {
        let row = eps.row_mut(t);
        row.copy_from_slice(readout.mu.data());
        if let Some(eta) = &eta {
            for ((e, s), n) in row.iter_mut().zip(readout.sigma.data()).zip(eta.row(t)) {
                *e += s * n;
            }
        }
    }
    let eps = tape.constant(eps);
    let kept = tape.scale_rows(x, lambda)?;
    let one_minus = tape.affine(lambda, -1.0, 1.0);
    let noise = tape.scale_rows(eps, one_minus)?;
    let z = tape.add(kept, noise)?;
    Ok(IbaOut { z, lambda })
}

/// Closed-form `KL(N(λx + (1−λ)μ, (1−λ)²σ²) ‖ N(μ, σ²))` summed over
/// dimensions, for a single token.
pub fn iba_info_loss(lambda: f64, x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let l = lambda.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS);
    let one = 1.0 - l;
    x.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((x, m), s)| {
            let dev = (x - m) / s;
            -one.ln() + (one * one + l * l * dev * dev) / 2.0 - 0.5
        })
        .sum()
}

/// Tape version returning the per-token KL `[L]`.
pub fn iba_info_loss_tokens(tape: &mut Tape<'_>, lambda: Var, x: Var, readout: &IbaReadout) -> Result<Var> {
    let d = tape.value(x).cols() as f64;
    let mu = tape.constant(readout.mu.clone());
    let inv_sigma = tape.constant(Tensor::vector(readout.sigma.data().iter().map(|s| 1.0 / s).collect()));
    let centered = tape.sub(x, mu)?;
    let dev = tape.mul(centered, inv_sigma)?;
    let dev2 = tape.mul(dev, dev)?;
    let c = tape.sum_cols(dev2)?;
    let lam = tape.clamp(lambda, LAMBDA_EPS, 1.0 - LAMBDA_EPS);
    let one = tape.affine(lam, -1.0, 1.0);
    let log_one = tape.log(one)?;
    let one2 = tape.mul(one, one)?;
    let lam2 = tape.mul(lam, lam)?;
    let lam2c = tape.mul(lam2, c)?;
    // -d ln(1-λ) + (d (1-λ)² + λ² c)/2 - d/2
    let t1 = tape.scale(log_one, -d);
    let t2 = tape.scale(one2, d / 2.0);
    let t3 = tape.scale(lam2c, 0.5);
    let s = tape.add(t1, t2)?;
    let s = tape.add(s, t3)?;
    Ok(tape.affine(s, 1.0, -d / 2.0))
}

/// Mean gate value over every training occurrence of each word; unseen
/// words score 0.5. `lambda_of` returns the gate values of one example.
pub fn iba_global_importance<F>(vocab_len: usize, examples: &[Example], mut lambda_of: F) -> Result<ImportanceTable>
where
    F: FnMut(&Example) -> Result<Vec<f64>>,
{
    let mut sum = vec![0.0; vocab_len];
    let mut count = vec![0u64; vocab_len];
    for ex in examples {
        let lam = lambda_of(ex)?;
        for (t, &id) in ex.words().iter().enumerate() {
            sum[id] += lam[t];
            count[id] += 1;
        }
    }
    Ok(ImportanceTable::from_fn(vocab_len, |id| {
        if count[id] == 0 {
            0.5
        } else {
            sum[id] / count[id] as f64
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_values() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![2.0]));
        let z = l2_penalty(&mut tape, &[p], 0.0).unwrap();
        assert_eq!(tape.value(z).item(), 0.0);
        let h = l2_penalty(&mut tape, &[p], 0.5).unwrap();
        assert_eq!(tape.value(h).item(), 2.0);
        tape.backward(h).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), [2.0]);
    }

    #[test]
    fn l2x_zero_params_halve() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0, -4.0], vec![1.0, 1.0], vec![2.0, -4.0]]).unwrap());
        let layer = L2XLayer::zeros(2);
        let (w, b) = (tape.constant_ref(&layer.w), tape.constant_ref(&layer.b));
        let (out, s) = l2x_transform(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(s).data(), [0.5, 0.5, 0.5]);
        assert_eq!(tape.value(out).data(), [1.0, -2.0, 0.5, 0.5, 1.0, -2.0]);
    }

    #[test]
    fn stats_cases() {
        let same = Tensor::from_rows(&[vec![0.0, 0.0], vec![9.0, 9.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (mu, sigma) = embedding_stats(&same).unwrap();
        assert_eq!(mu, [1.0, 2.0]);
        assert_eq!(sigma, [SIGMA_FLOOR, SIGMA_FLOOR]);
        let pm = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![-1.0]]).unwrap();
        let (mu, sigma) = embedding_stats(&pm).unwrap();
        assert_eq!((mu[0], sigma[0]), (0.0, 1.0));
        assert!(embedding_stats(&Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn info_loss_values() {
        let kl = iba_info_loss(0.5, &[0.3], &[0.3], &[2.0]);
        assert!((kl - 0.318147).abs() < 1e-6);
        assert!(iba_info_loss(0.0, &[5.0, -1.0], &[0.0, 0.0], &[1.0, 1.0]).abs() < 1e-5);
    }

    #[test]
    fn transform_limits() {
        let readout = IbaReadout {
            w: Tensor::zeros(&[2, 1]),
            b: Tensor::vector(vec![40.0]),
            mu: Tensor::vector(vec![0.5, -0.5]),
            sigma: Tensor::vector(vec![1.0, 2.0]),
        };
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (w, b) = (tape.constant_ref(&readout.w), tape.constant_ref(&readout.b));
        let out = iba_transform(&mut tape, xv, w, b, &readout, None).unwrap();
        for (a, e) in tape.value(out.z).data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        let closed = IbaReadout {
            b: Tensor::vector(vec![-800.0]),
            ..readout.clone()
        };
        let (w, b) = (tape.constant_ref(&closed.w), tape.constant_ref(&closed.b));
        let out = iba_transform(&mut tape, xv, w, b, &closed, None).unwrap();
        assert_eq!(tape.value(out.z).data(), [0.5, -0.5]);
    }

    #[test]
    fn tape_info_loss_matches_closed_form() {
        let readout = IbaReadout {
            w: Tensor::zeros(&[3, 1]),
            b: Tensor::zeros(&[1]),
            mu: Tensor::vector(vec![0.1, -0.2, 0.0]),
            sigma: Tensor::vector(vec![0.5, 1.5, 0.9]),
        };
        let x = Tensor::from_rows(&[vec![0.3, 0.2, -1.0], vec![0.0, 0.0, 0.4]]).unwrap();
        let lam = [0.25, 0.8];
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let lv = tape.constant(Tensor::vector(lam.to_vec()));
        let kl = iba_info_loss_tokens(&mut tape, lv, xv, &readout).unwrap();
        for (t, &l) in lam.iter().enumerate() {
            let want = iba_info_loss(l, x.row(t), readout.mu.data(), readout.sigma.data());
            assert!((tape.value(kl).data()[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn global_importance_means() {
        let ex = Example {
            token_ids: vec![2, 3, 2, 0],
            true_length: 3,
            label: 0,
            keyword_positions: None,
        };
        let table = iba_global_importance(5, &[ex], |_| Ok(vec![0.8, 0.1, 0.6, 0.0])).unwrap();
        assert!((table.get(2) - 0.7).abs() < 1e-15);
        assert_eq!(table.get(3), 0.1);
        assert_eq!(table.get(4), 0.5);
    }
}
