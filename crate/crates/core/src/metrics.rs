//! Accuracy and interpretability metrics.
//!
//! AOPC removes tokens from the sequence (shift left, re-pad), while
//! post-hoc accuracy zeroes the embeddings of unselected words.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocab};
use crate::error::{Error, Result};
use crate::exec;
use crate::explainers::{self, ExplainerConfig};
use crate::importance::ImportanceTable;
use crate::models::Classifier;
use crate::rng;

pub const REPORT_VERSION: u32 = 1;

fn nonempty(examples: &[Example], what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: no examples")));
    }
    Ok(())
}

/// Percent of examples whose argmax prediction equals the label.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, examples: &[Example]) -> Result<f64> {
    nonempty(examples, "accuracy")?;
    let hits = exec::try_map_range(examples.len(), |i| Ok::<_, Error>(model.predict(&examples[i])? == examples[i].label))?;
    Ok(100.0 * hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// Average drop in predicted-class probability after deleting each
/// example's top-`n` tokens, for every `n` in `ns`, in percent.
///
/// `rank(i, ex)` returns token positions most-important first. At most
/// `true_length − 1` tokens are deleted.
pub fn aopc_with<C, F>(model: &C, examples: &[Example], ns: &[usize], rank: F) -> Result<Vec<f64>>
where
    C: Classifier + ?Sized,
    F: Fn(usize, &Example) -> Result<Vec<usize>> + Sync + Send,
{
    nonempty(examples, "aopc")?;
    let need_rank = ns.iter().any(|&n| n > 0);
    let drops = exec::try_map_range(examples.len(), |i| -> Result<Vec<f64>> {
        let ex = &examples[i];
        let full = model.predict_proba(ex)?;
        let target = crate::models::argmax(&full);
        let order = if need_rank { rank(i, ex)? } else { Vec::new() };
        ns.iter()
            .map(|&n| {
                let n = n.min(ex.true_length.saturating_sub(1));
                if n == 0 {
                    return Ok(0.0);
                }
                let drop: BTreeSet<usize> = order.iter().take(n).copied().collect();
                let reduced = ex.without_positions(&drop);
                Ok(full[target] - model.predict_proba(&reduced)?[target])
            })
            .collect()
    })?;
    let m = examples.len() as f64;
    Ok((0..ns.len())
        .map(|j| 100.0 * drops.iter().map(|d| d[j]).sum::<f64>() / m)
        .collect())
}

/// AOPC at each `n` with rankings from the configured explainer; example
/// `i` uses seed `derive_seed(seed, [i])`.
pub fn aopc<C: Classifier + ?Sized>(
    model: &C,
    examples: &[Example],
    config: &ExplainerConfig,
    ns: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    aopc_with(model, examples, ns, |i, ex| {
        Ok(explainers::explain(model, ex, config, rng::derive_seed(seed, &[i as u64]))?.ranking())
    })
}

/// Positions kept when selecting the top `k` words of `ex` by global
/// importance; ties go to the earlier position.
pub fn post_hoc_keep(ex: &Example, table: &ImportanceTable, k: usize) -> Vec<bool> {
    let words = ex.words();
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by(|&a, &b| table.get(words[b]).total_cmp(&table.get(words[a])).then(a.cmp(&b)));
    let mut keep = vec![false; words.len()];
    for &t in order.iter().take(k) {
        keep[t] = true;
    }
    keep
}

/// Percent of examples whose prediction from only the top-`k` globally
/// important words agrees with the full-input prediction.
pub fn post_hoc_accuracy<C: Classifier + ?Sized>(model: &C, examples: &[Example], table: &ImportanceTable, k: usize) -> Result<f64> {
    nonempty(examples, "post-hoc accuracy")?;
    if k == 0 {
        return Err(Error::InvalidArgument("post-hoc accuracy needs k >= 1".into()));
    }
    let agree = exec::try_map_range(examples.len(), |i| -> Result<bool> {
        let ex = &examples[i];
        let full = model.predict(ex)?;
        let keep = post_hoc_keep(ex, table, k);
        let mut mask = vec![0.0; ex.max_len()];
        for (t, &kp) in keep.iter().enumerate() {
            if kp {
                mask[t] = 1.0;
            }
        }
        let part = crate::models::argmax(&model.predict_proba_masked(ex, Some(&mask))?);
        Ok(part == full)
    })?;
    Ok(100.0 * agree.iter().filter(|&&a| a).count() as f64 / examples.len() as f64)
}

/// Pearson correlation; errors if either axis has zero variance.
pub fn pearson(x: &[f64], y: &[f64], x_name: &str, y_name: &str) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    for (s, name) in [(sxx, x_name), (syy, y_name)] {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("{name} has zero variance")));
        }
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between raw word counts and global importance over all
/// non-reserved word types.
pub fn pearson_freq_importance(vocab: &Vocab, table: &ImportanceTable) -> Result<f64> {
    if table.len() != vocab.len() {
        return Err(Error::shape("pearson_freq_importance", &[vocab.len()], &[table.len()]));
    }
    let ids = vocab.word_ids();
    let freq: Vec<f64> = ids.clone().map(|id| vocab.freq(id) as f64).collect();
    let imp: Vec<f64> = ids.map(|id| table.get(id)).collect();
    pearson(&freq, &imp, "frequency", "importance")
}

/// The `k` highest-scoring words, ties broken lexicographically.
pub fn top_k_words(table: &ImportanceTable, vocab: &Vocab, k: usize) -> Result<Vec<(String, f64)>> {
    if k > vocab.len() {
        return Err(Error::InvalidArgument(format!("k={k} exceeds vocabulary size {}", vocab.len())));
    }
    Ok(table
        .ranked(vocab)
        .into_iter()
        .take(k)
        .map(|(id, s)| (vocab.token(id).to_string(), s))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub strategy: String,
    pub n_examples: usize,
    /// Percent.
    pub accuracy: f64,
    /// `"<explainer>@<n>"` → percent.
    pub aopc: BTreeMap<String, f64>,
    /// `k` → percent.
    pub posthoc_acc: BTreeMap<String, f64>,
    pub pearson_r: Option<f64>,
    pub top_words: Vec<WordScore>,
    pub vocab_fingerprint: String,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(strategy: &str, n_examples: usize, accuracy: f64, vocab_fingerprint: String, config_fingerprint: String, seed: u64) -> Self {
        Self {
            report_version: REPORT_VERSION,
            strategy: strategy.to_string(),
            n_examples,
            accuracy,
            aopc: BTreeMap::new(),
            posthoc_acc: BTreeMap::new(),
            pearson_r: None,
            top_words: Vec::new(),
            vocab_fingerprint,
            config_fingerprint,
            seed,
        }
    }

    /// Rejects NaN anywhere and out-of-range percentages or correlations.
    pub fn validate(&self) -> Result<()> {
        let pct = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 100]")));
            }
            Ok(())
        };
        pct("accuracy", self.accuracy)?;
        for (k, &v) in &self.posthoc_acc {
            pct(&format!("posthoc_acc[{k}]"), v)?;
        }
        for (k, &v) in &self.aopc {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("aopc[{k}]")));
            }
        }
        if let Some(r) = self.pearson_r {
            if !r.is_finite() {
                return Err(Error::NonFinite("pearson_r".into()));
            }
            if !(-1.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("pearson_r = {r} outside [-1, 1]")));
            }
        }
        if let Some(w) = self.top_words.iter().find(|w| !w.score.is_finite()) {
            return Err(Error::NonFinite(format!("top_words[{}]", w.token)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("strategy".into(), self.strategy.clone()),
            ("examples".into(), self.n_examples.to_string()),
            ("accuracy (%)".into(), format!("{:.2}", self.accuracy)),
        ];
        for (k, v) in &self.aopc {
            rows.push((format!("aopc {k} (%)"), format!("{v:.2}")));
        }
        for (k, v) in &self.posthoc_acc {
            rows.push((format!("post-hoc acc k={k} (%)"), format!("{v:.2}")));
        }
        if let Some(r) = self.pearson_r {
            rows.push(("pearson r (freq, importance)".into(), format!("{r:.4}")));
        }
        if !self.top_words.is_empty() {
            let words: Vec<String> = self.top_words.iter().map(|w| format!("{} ({:.3})", w.token, w.score)).collect();
            rows.push(("top words".into(), words.join(", ")));
        }
        let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<width$}  {v}").unwrap();
        }
        out
    }
}
