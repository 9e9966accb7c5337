use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vmask_core::corpus::{self, DatasetSplit, SynthConfig};
use vmask_core::explainers::{ExplainerConfig, Method};
use vmask_core::models::ClassifierSpec;
use vmask_core::trainer::TrainConfig;

const DEFAULT_MAX_LEN: usize = 50;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ClassifierSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generate a synthetic corpus instead of reading TSV files.
    pub synth: Option<SynthConfig>,
    pub train: Option<PathBuf>,
    /// Held out from `train` by `dev_fraction` when absent.
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub dev_fraction: f64,
    pub min_freq: u64,
    /// Defaults to the synthetic document length, else 50.
    pub max_len: Option<usize>,
    /// Text vectors: header `V d`, then `token v1 … vd` per line.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: None,
            train: None,
            dev: None,
            test: None,
            dev_fraction: 0.1,
            min_freq: 1,
            max_len: None,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub explainer: Method,
    pub n_samples: usize,
    pub kernel_width: f64,
    pub ridge_alpha: f64,
    pub aopc_n: usize,
    pub posthoc_ks: Vec<usize>,
    /// Examples used for explainer-based metrics.
    pub slice_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let e = ExplainerConfig::default();
        Self {
            explainer: e.method,
            n_samples: e.n_samples,
            kernel_width: e.kernel_width,
            ridge_alpha: e.ridge_alpha,
            aopc_n: 5,
            posthoc_ks: vec![1, 2, 3],
            slice_size: 100,
        }
    }
}

impl EvalConfig {
    pub fn explainer_config(&self, method: Option<Method>, n_samples: Option<usize>) -> ExplainerConfig {
        ExplainerConfig {
            method: method.unwrap_or(self.explainer),
            n_samples: n_samples.unwrap_or(self.n_samples),
            kernel_width: self.kernel_width,
            ridge_alpha: self.ridge_alpha,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Fills in derived values so the echoed config reproduces the run.
    pub fn materialize(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if self.data.max_len.is_none() {
            self.data.max_len = Some(self.data.synth.as_ref().map_or(DEFAULT_MAX_LEN, |s| s.doc_len));
        }
    }

    pub fn max_len(&self) -> usize {
        self.data.max_len.unwrap_or(DEFAULT_MAX_LEN)
    }

    /// Loads or generates the dataset described by the `data` section.
    pub fn dataset(&self) -> Result<DatasetSplit> {
        let d = &self.data;
        let seed = self.train.seed;
        if let Some(synth) = &d.synth {
            if d.train.is_some() || d.dev.is_some() || d.test.is_some() {
                bail!("data.synth cannot be combined with data.train/dev/test paths");
            }
            let mut corpus = corpus::synth_gen(synth, seed)?.data;
            if self.max_len() != synth.doc_len {
                let parts = [&corpus.train, &corpus.dev, &corpus.test].map(|xs| {
                    xs.iter()
                        .map(|e| corpus::LabeledText {
                            label: e.label,
                            tokens: corpus.vocab.decode(e.words()),
                        })
                        .collect::<Vec<_>>()
                });
                corpus = DatasetSplit::from_texts(&parts[0], &parts[1], &parts[2], d.min_freq, self.max_len())?;
            }
            return Ok(corpus);
        }
        let Some(train_path) = &d.train else {
            bail!("data.train (or data.synth) is required");
        };
        if !(d.dev_fraction > 0.0 && d.dev_fraction < 1.0) && d.dev.is_none() {
            bail!("data.dev_fraction {} must lie in (0, 1)", d.dev_fraction);
        }
        let all_train = corpus::load_tsv(train_path)?;
        let (train, dev) = match &d.dev {
            Some(p) => (all_train, corpus::load_tsv(p)?),
            None => corpus::split_train_dev(&all_train, d.dev_fraction, seed)?,
        };
        let test = match &d.test {
            Some(p) => corpus::load_tsv(p)?,
            None => Vec::new(),
        };
        Ok(DatasetSplit::from_texts(&train, &dev, &test, d.min_freq, self.max_len())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"lr": 0.1, "learning_rate": 2}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"));
        let err = RunConfig::from_json(r#"{"bogus": {}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
    }

    #[test]
    fn defaults_materialize() {
        let mut c = RunConfig::from_json(r#"{"data": {"synth": {"num_classes": 2, "keywords_per_class": 5, "filler_vocab_size": 200, "doc_len": 12, "docs_per_class": 10, "keyword_rate": 0.1}}}"#).unwrap();
        c.materialize(Some(9));
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.max_len, Some(12));
        let echoed = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&echoed).unwrap(), c);
        assert!(echoed.contains("\"kernel_width\":0.25"));
    }
}
