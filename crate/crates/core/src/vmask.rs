//! Variational word masks.
//!
//! Every word type `x` owns a binary mask `R_x ~ Bernoulli(p_x)` that
//! multiplies its embedding before the classifier sees it. The mask
//! posterior is amortized: a single affine layer maps an embedding to two
//! logits, and `p_x` is the softmax probability of the "keep" category.
//! Because the network reads only the embedding, every occurrence of a
//! word gets the same `p_x`.
//!
//! Training draws one relaxed sample per token with the Gumbel-softmax
//! trick and maximizes `E[log p(y|R,x)] + β·H(R|x)`; the entropy bonus is
//! the KL to a `Bernoulli(0.5)` prior up to the constant `ln 2`. Inference
//! replaces the sample with its expectation `p_x`.

use rand::distr::Open01;
use rand::Rng;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::tensorgrad::{Tape, Tensor, Var};

/// Single-layer inference network producing `(1 - p, p)` per token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskInferenceNet {
    /// `[d×2]`; column 1 scores the keep category.
    pub w: Tensor,
    /// `[2]`.
    pub b: Tensor,
}

impl MaskInferenceNet {
    /// Zero parameters put every word at `p = 0.5`, the prior.
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Tensor::zeros(&[dim, 2]),
            b: Tensor::zeros(&[2]),
        }
    }

    /// Keep-probabilities for each row of `embeddings` (`[L×d]`).
    pub fn mask_probs(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant_ref(embeddings);
        let w = tape.constant_ref(&self.w);
        let b = tape.constant_ref(&self.b);
        let (_, p) = mask_probs(&mut tape, x, w, b)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Records `logits = x·W + b` and returns `(log q(R|x) [L×2], p [L])`.
pub fn mask_probs(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, w)?;
    let logits = tape.add(xw, b)?;
    let log_q = tape.log_softmax_rows(logits)?;
    let q = tape.softmax_rows(logits)?;
    let p = tape.column(q, 1)?;
    Ok((log_q, p))
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Standard Gumbel draws, one pair `(s₀, s₁)` per row.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * 2).map(|_| gumbel(rng)).collect();
    Tensor::matrix(rows, 2, data).expect("noise shape")
}

/// Relaxed Bernoulli sample for keep-probability `p` at temperature `tau`,
/// with explicit Gumbel draws `s = (s₀, s₁)`. Returns `(rs₀, rs₁)`.
pub fn gumbel_softmax_with_noise(p: f64, tau: f64, s: (f64, f64)) -> Result<(f64, f64)> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "gumbel_softmax",
            detail: format!("temperature {tau} must be positive"),
        });
    }
    let a0 = ((1.0 - p).ln() + s.0) / tau;
    let a1 = (p.ln() + s.1) / tau;
    let m = a0.max(a1);
    let (e0, e1) = ((a0 - m).exp(), (a1 - m).exp());
    let z = e0 + e1;
    Ok((e0 / z, e1 / z))
}

/// One relaxed mask draw for keep-probability `p`; returns `(rs₀, rs₁)`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(p: f64, tau: f64, rng: &mut R) -> Result<(f64, f64)> {
    let s0 = gumbel(rng);
    let s1 = gumbel(rng);
    gumbel_softmax_with_noise(p, tau, (s0, s1))
}

/// Tape version: `softmax((log q + s)/τ)[:, 1]` per token. The noise is a
/// constant, so gradients reach the inference network only through `log q`.
pub fn relaxed_sample(tape: &mut Tape<'_>, log_q: Var, noise: Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            op: "gumbel_softmax",
            detail: format!("temperature {tau} must be positive"),
        });
    }
    let s = tape.constant(noise);
    let shifted = tape.add(log_q, s)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    let rs = tape.softmax_rows(scaled)?;
    tape.column(rs, 1)
}

/// Scales row `t` of `embeddings` by `values[t]`.
pub fn apply_mask(tape: &mut Tape<'_>, embeddings: Var, values: Var) -> Result<Var> {
    let (rows, n) = (tape.value(embeddings).rows(), tape.value(values).numel());
    if rows != n {
        return Err(Error::shape("apply_mask", tape.value(embeddings).shape(), tape.value(values).shape()));
    }
    tape.scale_rows(embeddings, values)
}

/// Expectation-mode mask values: `E[R] = p`.
pub fn infer_mask_values(probs: &[f64]) -> Vec<f64> {
    probs.to_vec()
}

/// Entropy of `Bernoulli(p)` in nats.
pub fn bernoulli_entropy(p: f64) -> f64 {
    crate::tensorgrad::bernoulli_entropy(p)
}

/// `KL(Bernoulli(p) ‖ Bernoulli(0.5)) = ln 2 − H(p)`.
pub fn kl_to_uniform(p: f64) -> f64 {
    std::f64::consts::LN_2 - bernoulli_entropy(p)
}

/// Training loss `ce − β·H̄` for scalar vars `ce` and `mean_entropy`.
pub fn vmask_objective(tape: &mut Tape<'_>, ce: Var, mean_entropy: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} must be non-negative")));
    }
    let bonus = tape.scale(mean_entropy, beta);
    tape.sub(ce, bonus)
}

/// Expected keep-probability of every non-reserved word, read off the
/// inference network applied to the word's embedding row.
pub fn global_importance(net: &MaskInferenceNet, table: &Tensor, vocab: &Vocab) -> Result<ImportanceTable> {
    if table.rows() != vocab.len() {
        return Err(Error::shape("global_importance", table.shape(), &[vocab.len()]));
    }
    let probs = net.mask_probs(table)?;
    Ok(ImportanceTable::from_fn(vocab.len(), |id| probs[id]))
}
