//! Post-hoc attribution: LIME-style local surrogates, permutation-sampled
//! Shapley values, a brute-force Shapley oracle, and SP-LIME style global
//! aggregation.
//!
//! A coalition is a set of kept token positions. Tokens outside it have
//! their embeddings zeroed, so sequence length never changes. The value of
//! a coalition is the probability of the class the model predicts on the
//! full input.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocab};
use crate::error::{Error, Result};
use crate::exec;
use crate::importance::ImportanceTable;
use crate::models::Classifier;
use crate::rng;

pub const EXACT_SHAPLEY_MAX_TOKENS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lime,
    Shapley,
    Exact,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::Shapley => "shapley",
            Method::Exact => "exact",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    pub method: Method,
    /// Perturbation samples for LIME, permutations for Shapley.
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge_alpha: f64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            method: Method::Lime,
            n_samples: 1000,
            kernel_width: 0.25,
            ridge_alpha: 1.0,
        }
    }
}

/// Per-token scores for one example, aligned to its non-pad positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub method: Method,
    pub target_class: usize,
    pub token_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionJson {
    pub method: Method,
    pub target_class: usize,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl Attribution {
    pub fn to_json(&self, vocab: &Vocab) -> AttributionJson {
        AttributionJson {
            method: self.method,
            target_class: self.target_class,
            tokens: vocab.decode(&self.token_ids),
            scores: self.scores.clone(),
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }

    /// Positions sorted by descending score; ties go to the earlier position.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }
}

fn keep_vector(ex: &Example, keep: &[bool]) -> Vec<f64> {
    let mut v = vec![0.0; ex.max_len()];
    for (t, &k) in keep.iter().enumerate() {
        if k {
            v[t] = 1.0;
        }
    }
    v
}

/// Probability of `target` when only positions with `keep[t]` survive.
/// `keep` covers the `true_length` real tokens.
pub fn value_fn<C: Classifier + ?Sized>(model: &C, ex: &Example, keep: &[bool], target: usize) -> Result<f64> {
    if keep.len() != ex.true_length {
        return Err(Error::shape("value_fn", &[ex.true_length], &[keep.len()]));
    }
    if target >= model.num_classes() {
        return Err(Error::OutOfRange {
            what: "target class",
            index: target,
            limit: model.num_classes(),
        });
    }
    let p = model.predict_proba_masked(ex, Some(&keep_vector(ex, keep)))?;
    Ok(p[target])
}

/// Values of many coalitions, evaluated with [`exec::map_range`].
fn values<C: Classifier + ?Sized>(model: &C, ex: &Example, coalitions: &[Vec<bool>], target: usize) -> Result<Vec<f64>> {
    exec::try_map_range(coalitions.len(), |i| value_fn(model, ex, &coalitions[i], target))
}

fn check_nonempty(ex: &Example) -> Result<()> {
    if ex.true_length == 0 {
        return Err(Error::InvalidArgument("cannot explain an empty example".into()));
    }
    Ok(())
}

/// Weighted ridge regression with an unpenalized intercept. Returns the
/// slope coefficients. Raises `alpha` tenfold while the normal equations
/// fail to factor.
pub fn weighted_ridge(x: &DMatrix<f64>, y: &[f64], w: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let (n, k) = x.shape();
    if y.len() != n || w.len() != n {
        return Err(Error::shape("weighted_ridge", &[n, k], &[y.len(), w.len()]));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidArgument("sample weights sum to zero".into()));
    }
    let xbar: Vec<f64> = (0..k).map(|j| (0..n).map(|i| w[i] * x[(i, j)]).sum::<f64>() / wsum).collect();
    let ybar = (0..n).map(|i| w[i] * y[i]).sum::<f64>() / wsum;
    let xc = DMatrix::from_fn(n, k, |i, j| (x[(i, j)] - xbar[j]) * w[i].sqrt());
    let yc = DVector::from_fn(n, |i, _| (y[i] - ybar) * w[i].sqrt());
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * yc;
    let mut a = alpha.max(0.0);
    for _ in 0..12 {
        let m = &gram + DMatrix::identity(k, k) * a;
        if let Some(ch) = m.cholesky() {
            return Ok(ch.solve(&rhs).iter().copied().collect());
        }
        let next = if a > 0.0 { a * 10.0 } else { 1e-8 };
        log::warn!("ridge normal equations singular at alpha={a}; retrying with alpha={next}");
        a = next;
    }
    Err(Error::Domain {
        op: "weighted_ridge",
        detail: "normal equations stayed singular".into(),
    })
}

/// LIME: fits a weighted linear surrogate on random keep-vectors.
pub fn lime_explain<C: Classifier + ?Sized>(
    model: &C,
    ex: &Example,
    n_samples: usize,
    kernel_width: f64,
    ridge_alpha: f64,
    seed: u64,
) -> Result<Attribution> {
    check_nonempty(ex)?;
    let t = ex.true_length;
    if n_samples < t + 2 {
        return Err(Error::InvalidArgument(format!(
            "lime needs at least {} samples for {t} tokens, got {n_samples}",
            t + 2
        )));
    }
    if !(kernel_width > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel width {kernel_width} must be positive")));
    }
    let target = model.predict(ex)?;
    let mut r = rng::seeded(seed);
    let mut samples = Vec::with_capacity(n_samples);
    samples.push(vec![true; t]);
    for _ in 1..n_samples {
        samples.push((0..t).map(|_| r.random_bool(0.5)).collect::<Vec<bool>>());
    }
    let y = values(model, ex, &samples, target)?;
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| {
            let dropped = s.iter().filter(|&&k| !k).count() as f64 / t as f64;
            (-(dropped * dropped) / (kernel_width * kernel_width)).exp()
        })
        .collect();
    let x = DMatrix::from_fn(n_samples, t, |i, j| if samples[i][j] { 1.0 } else { 0.0 });
    let scores = weighted_ridge(&x, &y, &weights, ridge_alpha)?;
    Ok(Attribution {
        method: Method::Lime,
        target_class: target,
        token_ids: ex.words().to_vec(),
        scores,
        n_samples,
        seed: Some(seed),
    })
}

/// Shapley estimate averaged over the given orderings of `0..true_length`.
pub fn sample_shapley_with_permutations<C: Classifier + ?Sized>(
    model: &C,
    ex: &Example,
    permutations: &[Vec<usize>],
) -> Result<Attribution> {
    check_nonempty(ex)?;
    let t = ex.true_length;
    if permutations.is_empty() {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    for p in permutations {
        let mut seen = vec![false; t];
        if p.len() != t || !p.iter().all(|&i| i < t && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument(format!("{p:?} is not a permutation of 0..{t}")));
        }
    }
    let target = model.predict(ex)?;

    // Coalitions along different orderings repeat often; each distinct one
    // is evaluated once.
    let mut index: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut coalitions = Vec::new();
    let mut chains = Vec::with_capacity(permutations.len());
    let mut intern = |c: &Vec<bool>| -> usize {
        *index.entry(c.clone()).or_insert_with(|| {
            coalitions.push(c.clone());
            coalitions.len() - 1
        })
    };
    for p in permutations {
        let mut c = vec![false; t];
        let mut chain = Vec::with_capacity(t + 1);
        chain.push(intern(&c));
        for &i in p {
            c[i] = true;
            chain.push(intern(&c));
        }
        chains.push(chain);
    }
    let v = values(model, ex, &coalitions, target)?;
    let mut scores = vec![0.0; t];
    for (p, chain) in permutations.iter().zip(&chains) {
        for (step, &i) in p.iter().enumerate() {
            scores[i] += v[chain[step + 1]] - v[chain[step]];
        }
    }
    let n = permutations.len() as f64;
    for s in &mut scores {
        *s /= n;
    }
    Ok(Attribution {
        method: Method::Shapley,
        target_class: target,
        token_ids: ex.words().to_vec(),
        scores,
        n_samples: permutations.len(),
        seed: None,
    })
}

/// Monte-Carlo Shapley over `n_permutations` uniformly random orderings.
pub fn sample_shapley<C: Classifier + ?Sized>(model: &C, ex: &Example, n_permutations: usize, seed: u64) -> Result<Attribution> {
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("n_permutations must be at least 1".into()));
    }
    let mut r = rng::seeded(seed);
    let perms: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..ex.true_length).collect();
            p.shuffle(&mut r);
            p
        })
        .collect();
    let mut a = sample_shapley_with_permutations(model, ex, &perms)?;
    a.seed = Some(seed);
    Ok(a)
}

/// Every ordering of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Exact Shapley values by enumerating all `2^T` coalitions.
pub fn exact_shapley<C: Classifier + ?Sized>(model: &C, ex: &Example) -> Result<Attribution> {
    check_nonempty(ex)?;
    let t = ex.true_length;
    if t > EXACT_SHAPLEY_MAX_TOKENS {
        return Err(Error::InvalidArgument(format!(
            "exact Shapley is limited to {EXACT_SHAPLEY_MAX_TOKENS} tokens, example has {t}"
        )));
    }
    let target = model.predict(ex)?;
    let coalitions: Vec<Vec<bool>> = (0..1usize << t).map(|m| (0..t).map(|i| m >> i & 1 == 1).collect()).collect();
    let v = values(model, ex, &coalitions, target)?;
    let mut fact = vec![1.0f64; t + 1];
    for i in 1..=t {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..t).map(|s| fact[s] * fact[t - s - 1] / fact[t]).collect();
    let mut scores = vec![0.0; t];
    for (i, score) in scores.iter_mut().enumerate() {
        for m in 0..1usize << t {
            if m >> i & 1 == 0 {
                *score += weight[m.count_ones() as usize] * (v[m | 1 << i] - v[m]);
            }
        }
    }
    Ok(Attribution {
        method: Method::Exact,
        target_class: target,
        token_ids: ex.words().to_vec(),
        scores,
        n_samples: 1 << t,
        seed: None,
    })
}

/// Dispatches on `config.method`.
pub fn explain<C: Classifier + ?Sized>(model: &C, ex: &Example, config: &ExplainerConfig, seed: u64) -> Result<Attribution> {
    match config.method {
        Method::Lime => lime_explain(model, ex, config.n_samples, config.kernel_width, config.ridge_alpha, seed),
        Method::Shapley => sample_shapley(model, ex, config.n_samples, seed),
        Method::Exact => exact_shapley(model, ex),
    }
}

/// Global score of a word = sum of its local scores over all occurrences.
pub fn sp_lime_global(attributions: &[Attribution], vocab_len: usize) -> Result<ImportanceTable> {
    let mut sums = vec![0.0; vocab_len];
    for a in attributions {
        for (&id, &s) in a.token_ids.iter().zip(&a.scores) {
            if id >= vocab_len {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    limit: vocab_len,
                });
            }
            sums[id] += s;
        }
    }
    Ok(ImportanceTable::from_fn(vocab_len, |id| sums[id]))
}
