//! Tokenization, vocabulary, dataset ingestion, and the synthetic
//! planted-keyword corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NUM_RESERVED: usize = 2;

/// Lowercases, collapses whitespace, and splits every non-alphanumeric
/// character off as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Vocab {
    /// Counts every token type; keeps those with count ≥ `min_freq`, ordered
    /// by descending count then lexicographically, after the reserved ids.
    pub fn build<'a, I, S>(docs: I, min_freq: u64) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in docs {
            for tok in doc {
                let tok = tok.as_ref();
                if tok != PAD && tok != UNK {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let entries = [(PAD.to_string(), 0), (UNK.to_string(), 0)]
            .into_iter()
            .chain(kept.into_iter().map(|(t, c)| (t.to_string(), c)));
        Self::from_entries(entries).expect("reserved tokens are unique")
    }

    fn from_entries(entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freq = Vec::new();
        let mut index = HashMap::new();
        for (t, f) in entries {
            if index.insert(t.clone(), tokens.len()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab token {t:?}")));
            }
            tokens.push(t);
            freq.push(f);
        }
        if tokens.get(PAD_ID).map(String::as_str) != Some(PAD) || tokens.get(UNK_ID).map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidArgument("vocab must start with <pad>, <unk>".into()));
        }
        Ok(Self { tokens, index, freq })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq[id]
    }

    /// Non-reserved ids.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        NUM_RESERVED..self.len()
    }

    /// Maps tokens to ids (unknown → `UNK_ID`), keeps the first `max_len`,
    /// and right-pads with `PAD_ID`. Returns the ids and the unpadded length.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> (Vec<usize>, usize) {
        assert!(max_len >= 1, "max_len must be at least 1");
        let true_length = tokens.len().min(max_len);
        let mut ids: Vec<usize> = tokens[..true_length]
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect();
        ids.resize(max_len, PAD_ID);
        (ids, true_length)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// `[[token, freq], …]` in id order.
    pub fn to_json(&self) -> String {
        let pairs: Vec<(&str, u64)> = self.tokens.iter().map(String::as_str).zip(self.freq.iter().copied()).collect();
        serde_json::to_string(&pairs).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pairs: Vec<(String, u64)> = serde_json::from_str(s)?;
        Self::from_entries(pairs)
    }

    /// 64-bit FNV-1a over [`Vocab::to_json`].
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub true_length: usize,
    pub label: usize,
    /// Planted keyword positions (synthetic corpora only).
    pub keyword_positions: Option<Vec<usize>>,
}

impl Example {
    pub fn encode<S: AsRef<str>>(tokens: &[S], label: usize, vocab: &Vocab, max_len: usize) -> Self {
        let (token_ids, true_length) = vocab.encode(tokens, max_len);
        Self {
            token_ids,
            true_length,
            label,
            keyword_positions: None,
        }
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Ids of the non-pad prefix.
    pub fn words(&self) -> &[usize] {
        &self.token_ids[..self.true_length]
    }

    /// Copy with the tokens at `positions` removed, the rest shifted left and
    /// re-padded to the same length.
    pub fn without_positions(&self, positions: &BTreeSet<usize>) -> Self {
        let mut ids: Vec<usize> = self
            .words()
            .iter()
            .enumerate()
            .filter(|(i, _)| !positions.contains(i))
            .map(|(_, &id)| id)
            .collect();
        let true_length = ids.len();
        ids.resize(self.max_len(), PAD_ID);
        Self {
            token_ids: ids,
            true_length,
            label: self.label,
            keyword_positions: None,
        }
    }
}

/// A labeled, tokenized line of a TSV file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// Reads `label<TAB>text` lines. Blank lines are skipped.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<LabeledText>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, path)
}

pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (label, body) = line.split_once('\t').ok_or_else(|| parse_err("missing tab separator".into()))?;
        let label = label
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(format!("label {label:?} is not a non-negative integer")))?;
        out.push(LabeledText {
            label,
            tokens: tokenize(body),
        });
    }
    Ok(out)
}

pub fn write_tsv(path: impl AsRef<Path>, items: &[LabeledText]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&it.label.to_string());
        s.push('\t');
        s.push_str(&it.tokens.join(" "));
        s.push('\n');
    }
    fs::write(path.as_ref(), s).map_err(|e| Error::io(path.as_ref(), e))
}

/// Shuffles under `seed` and holds out ⌈M·dev_fraction⌉ items.
pub fn split_train_dev<T: Clone>(items: &[T], dev_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("dev_fraction {dev_fraction} outside (0,1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let n_dev = (items.len() as f64 * dev_fraction).ceil() as usize;
    let dev = order[..n_dev].iter().map(|&i| items[i].clone()).collect();
    let train = order[n_dev..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, dev))
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub vocab: Vocab,
    pub max_len: usize,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSplit {
    /// Builds the vocabulary on `train` and encodes all three parts.
    pub fn from_texts(
        train: &[LabeledText],
        dev: &[LabeledText],
        test: &[LabeledText],
        min_freq: u64,
        max_len: usize,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let vocab = Vocab::build(train.iter().map(|t| t.tokens.as_slice()), min_freq);
        let num_classes = train.iter().chain(dev).chain(test).map(|t| t.label + 1).max().unwrap_or(0).max(2);
        let enc = |xs: &[LabeledText]| -> Vec<Example> {
            xs.iter().map(|t| Example::encode(&t.tokens, t.label, &vocab, max_len)).collect()
        };
        let (train, dev, test) = (enc(train), enc(dev), enc(test));
        Ok(Self {
            vocab,
            max_len,
            num_classes,
            train,
            dev,
            test,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub filler_vocab_size: usize,
    pub doc_len: usize,
    pub docs_per_class: usize,
    pub keyword_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            keywords_per_class: 5,
            filler_vocab_size: 200,
            doc_len: 20,
            docs_per_class: 1000,
            keyword_rate: 0.1,
        }
    }
}

impl SynthConfig {
    /// Documents per class in the dev and test parts.
    pub fn held_out_per_class(&self) -> usize {
        self.docs_per_class.div_ceil(4).max(1)
    }

    pub fn default_keywords(&self) -> Vec<Vec<String>> {
        (0..self.num_classes)
            .map(|c| (0..self.keywords_per_class).map(|j| format!("c{c}kw{j}")).collect())
            .collect()
    }

    pub fn fillers(&self) -> Vec<String> {
        (0..self.filler_vocab_size).map(|j| format!("w{j}")).collect()
    }
}

/// Raw synthetic documents before encoding.
#[derive(Clone, Debug)]
pub struct SynthDocs {
    pub train: Vec<LabeledText>,
    pub dev: Vec<LabeledText>,
    pub test: Vec<LabeledText>,
    pub keyword_positions: [Vec<Vec<usize>>; 3],
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub data: DatasetSplit,
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
}

impl SynthCorpus {
    pub fn keyword_ids(&self) -> Vec<usize> {
        self.keywords.iter().flatten().filter_map(|k| self.data.vocab.id(k)).collect()
    }

    pub fn filler_ids(&self) -> Vec<usize> {
        self.fillers.iter().filter_map(|k| self.data.vocab.id(k)).collect()
    }
}

fn validate_synth(config: &SynthConfig, keywords: &[Vec<String>], fillers: &[String]) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if config.num_classes < 2 {
        return bad("synthetic corpus needs at least 2 classes".into());
    }
    if !(config.keyword_rate > 0.0 && config.keyword_rate <= 1.0) {
        return bad(format!("keyword_rate {} outside (0,1]", config.keyword_rate));
    }
    if config.doc_len == 0 || config.docs_per_class == 0 {
        return bad("doc_len and docs_per_class must be positive".into());
    }
    if config.keyword_rate < 1.0 && fillers.is_empty() {
        return bad("filler_vocab_size must be positive when keyword_rate < 1".into());
    }
    if keywords.len() != config.num_classes || keywords.iter().any(Vec::is_empty) {
        return bad("every class needs at least one keyword".into());
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (c, kws) in keywords.iter().enumerate() {
        for k in kws {
            if let Some(prev) = seen.insert(k, c) {
                return bad(format!("keyword {k:?} shared by classes {prev} and {c}"));
            }
        }
    }
    if let Some(f) = fillers.iter().find(|f| seen.contains_key(f.as_str())) {
        return bad(format!("filler {f:?} collides with a keyword"));
    }
    Ok(())
}

/// Generates raw documents with explicit keyword sets.
pub fn synth_docs(config: &SynthConfig, keywords: &[Vec<String>], seed: u64) -> Result<SynthDocs> {
    let fillers = config.fillers();
    validate_synth(config, keywords, &fillers)?;
    let mut r = rng::seeded(seed);
    let mut part = |per_class: usize| {
        let mut docs: Vec<(LabeledText, Vec<usize>)> = Vec::with_capacity(per_class * config.num_classes);
        for (c, kws) in keywords.iter().enumerate() {
            for _ in 0..per_class {
                let mut tokens = Vec::with_capacity(config.doc_len);
                let mut positions = Vec::new();
                for t in 0..config.doc_len {
                    if r.random::<f64>() < config.keyword_rate {
                        tokens.push(kws[r.random_range(0..kws.len())].clone());
                        positions.push(t);
                    } else {
                        tokens.push(fillers[r.random_range(0..fillers.len())].clone());
                    }
                }
                if positions.is_empty() {
                    let t = r.random_range(0..config.doc_len);
                    tokens[t] = kws[r.random_range(0..kws.len())].clone();
                    positions.push(t);
                }
                docs.push((LabeledText { label: c, tokens }, positions));
            }
        }
        docs.shuffle(&mut r);
        docs.into_iter().unzip::<_, _, Vec<_>, Vec<_>>()
    };
    let (train, tp) = part(config.docs_per_class);
    let (dev, dp) = part(config.held_out_per_class());
    let (test, sp) = part(config.held_out_per_class());
    Ok(SynthDocs {
        train,
        dev,
        test,
        keyword_positions: [tp, dp, sp],
        keywords: keywords.to_vec(),
        fillers,
    })
}

/// Synthetic planted-keyword corpus with generated keyword names.
pub fn synth_gen(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    synth_gen_with_keywords(config, &config.default_keywords(), seed)
}

pub fn synth_gen_with_keywords(config: &SynthConfig, keywords: &[Vec<String>], seed: u64) -> Result<SynthCorpus> {
    let docs = synth_docs(config, keywords, seed)?;
    let mut data = DatasetSplit::from_texts(&docs.train, &docs.dev, &docs.test, 1, config.doc_len)?;
    data.num_classes = config.num_classes;
    for (part, positions) in [&mut data.train, &mut data.dev, &mut data.test]
        .into_iter()
        .zip(docs.keyword_positions)
    {
        for (ex, pos) in part.iter_mut().zip(positions) {
            ex.keyword_positions = Some(pos);
        }
    }
    Ok(SynthCorpus {
        data,
        keywords: docs.keywords,
        fillers: docs.fillers,
    })
}
