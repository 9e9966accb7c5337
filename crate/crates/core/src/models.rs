//! Text classifiers the mask layers plug into: an embedding table feeding
//! either a bag-of-embeddings head or a single-layer CNN head.
//!
//! The forward pipeline is lookup → strategy transform (vmask / L2X / IBA
//! or nothing) → per-position gate (pads and explainer-removed words get
//! 0) → head → logits.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, IbaReadout, L2XLayer};
use crate::corpus::{Example, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::exec;
use crate::importance::ImportanceTable;
use crate::rng;
use crate::tensorgrad::{Tape, Tensor, Var};
use crate::vmask::{self, MaskInferenceNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Boe,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub kind: HeadKind,
    pub embed_dim: usize,
    /// Width of the tanh hidden layer (boe only).
    pub hidden_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub num_classes: usize,
    /// Dropout rate on pooled features.
    pub dropout: f64,
    pub freeze_embeddings: bool,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: HeadKind::Cnn,
            embed_dim: 50,
            hidden_dim: 50,
            filter_widths: vec![3, 4, 5],
            filters_per_width: 50,
            num_classes: 2,
            dropout: 0.2,
            freeze_embeddings: false,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if self.kind == HeadKind::Cnn {
            if self.filter_widths.is_empty() || self.filters_per_width == 0 {
                return bad("cnn needs at least one filter width and filter".into());
            }
            if let Some(w) = self.filter_widths.iter().find(|&&w| w == 0 || w > max_len) {
                return bad(format!("filter width {w} not in 1..={max_len}"));
            }
        } else if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Base,
    L2,
    Vmask,
    L2x,
    Iba,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::L2 => "l2",
            Strategy::Vmask => "vmask",
            Strategy::L2x => "l2x",
            Strategy::Iba => "iba",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    /// `[V×d]`; row 0 (pad) is zero.
    pub weights: Tensor,
    pub frozen: bool,
}

impl EmbeddingTable {
    pub fn random<R: Rng + ?Sized>(vocab_len: usize, dim: usize, frozen: bool, rng: &mut R) -> Self {
        let mut data: Vec<f64> = (0..vocab_len * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        data[PAD_ID * dim..(PAD_ID + 1) * dim].fill(0.0);
        Self {
            weights: Tensor::matrix(vocab_len, dim, data).expect("table shape"),
            frozen,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Loads `V d` + `token v1 … vd` text vectors. Vocabulary words missing
/// from the file are drawn from U(−0.1, 0.1) under `seed`. Returns the
/// table and the number of vocabulary words found in the file.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    dim: usize,
    frozen: bool,
    seed: u64,
) -> Result<(EmbeddingTable, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| parse_err(0, "empty embedding file".into()))?;
    let file_dim: usize = header
        .split_whitespace()
        .nth(1)
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| parse_err(0, "header must be \"V d\"".into()))?;
    if file_dim != dim {
        return Err(Error::InvalidArgument(format!(
            "embedding file dimension {file_dim} does not match model dimension {dim}"
        )));
    }
    let mut table = EmbeddingTable::random(vocab.len(), dim, frozen, &mut rng::seeded(seed));
    let mut seen = vec![false; vocab.len()];
    for (i, line) in lines {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let vals: Vec<f64> = parts
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(i, format!("bad float {v:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != dim {
            return Err(parse_err(i, format!("expected {dim} values, got {}", vals.len())));
        }
        if let Some(id) = vocab.id(tok) {
            if id != PAD_ID {
                table.weights.row_mut(id).copy_from_slice(&vals);
                seen[id] = true;
            }
        }
    }
    let coverage = seen.iter().filter(|&&s| s).count();
    Ok((table, coverage))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank {
    pub width: usize,
    /// `[F×(width·d)]`.
    pub filters: Tensor,
    /// `[F]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Cnn {
        banks: Vec<ConvBank>,
        out_w: Tensor,
        out_b: Tensor,
    },
    Boe {
        hidden_w: Tensor,
        hidden_b: Tensor,
        out_w: Tensor,
        out_b: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskLayer {
    None,
    Vmask { net: MaskInferenceNet, tau: f64 },
    L2x(L2XLayer),
    Iba(IbaReadout),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("xavier shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ClassifierSpec,
    pub strategy: Strategy,
    pub embedding: EmbeddingTable,
    pub head: Head,
    pub mask: MaskLayer,
}

/// Tape handles for everything one forward pass registered.
pub struct ForwardOut {
    /// `[1×C]`.
    pub logits: Var,
    /// Per-position keep-probabilities / gate values `[L]` (vmask, l2x, iba).
    pub mask_probs: Option<Var>,
    /// Σ over non-pad tokens of the Bernoulli entropy (vmask).
    pub entropy_sum: Option<Var>,
    /// Σ over non-pad tokens of the IBA information term.
    pub info_sum: Option<Var>,
    /// Non-pad token count.
    pub n_tokens: usize,
    /// `(parameter index, var)` for every trainable parameter.
    pub params: Vec<(usize, Var)>,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

impl Model {
    /// Fresh model: U(−0.1, 0.1) embeddings, Xavier-uniform weights, zero
    /// biases, and zero mask-layer parameters (every gate starts at 0.5).
    pub fn new(spec: ClassifierSpec, strategy: Strategy, vocab_len: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let embedding = EmbeddingTable::random(vocab_len, spec.embed_dim, spec.freeze_embeddings, &mut r);
        Self::with_embedding(spec, strategy, embedding, tau, seed)
    }

    pub fn with_embedding(spec: ClassifierSpec, strategy: Strategy, embedding: EmbeddingTable, tau: f64, seed: u64) -> Result<Self> {
        let d = spec.embed_dim;
        if embedding.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} does not match spec {d}",
                embedding.dim()
            )));
        }
        let mut r = rng::derive(seed, &[1]);
        let c = spec.num_classes;
        let head = match spec.kind {
            HeadKind::Cnn => {
                let f = spec.filters_per_width;
                let banks = spec
                    .filter_widths
                    .iter()
                    .map(|&w| ConvBank {
                        width: w,
                        filters: xavier(f, w * d, w * d, f, &mut r),
                        bias: Tensor::zeros(&[f]),
                    })
                    .collect();
                let feat = f * spec.filter_widths.len();
                Head::Cnn {
                    banks,
                    out_w: xavier(feat, c, feat, c, &mut r),
                    out_b: Tensor::zeros(&[c]),
                }
            }
            HeadKind::Boe => {
                let h = spec.hidden_dim;
                Head::Boe {
                    hidden_w: xavier(d, h, d, h, &mut r),
                    hidden_b: Tensor::zeros(&[h]),
                    out_w: xavier(h, c, h, c, &mut r),
                    out_b: Tensor::zeros(&[c]),
                }
            }
        };
        let mask = match strategy {
            Strategy::Base | Strategy::L2 => MaskLayer::None,
            Strategy::Vmask => MaskLayer::Vmask {
                net: MaskInferenceNet::zeros(d),
                tau,
            },
            Strategy::L2x => MaskLayer::L2x(L2XLayer::zeros(d)),
            Strategy::Iba => MaskLayer::Iba(IbaReadout::new(d, &embedding.weights)?),
        };
        Ok(Self {
            spec,
            strategy,
            embedding,
            head,
            mask,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.embedding.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// All tensors in a fixed order, with checkpoint names.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        fn p(name: impl Into<String>, tensor: &Tensor, trainable: bool) -> ParamRef<'_> {
            ParamRef {
                name: name.into(),
                tensor,
                trainable,
            }
        }
        let mut v = vec![p("embedding", &self.embedding.weights, !self.embedding.frozen)];
        match &self.head {
            Head::Cnn { banks, out_w, out_b } => {
                for b in banks {
                    v.push(p(format!("conv{}.filters", b.width), &b.filters, true));
                    v.push(p(format!("conv{}.bias", b.width), &b.bias, true));
                }
                v.push(p("out.w", out_w, true));
                v.push(p("out.b", out_b, true));
            }
            Head::Boe {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                v.push(p("hidden.w", hidden_w, true));
                v.push(p("hidden.b", hidden_b, true));
                v.push(p("out.w", out_w, true));
                v.push(p("out.b", out_b, true));
            }
        }
        match &self.mask {
            MaskLayer::None => {}
            MaskLayer::Vmask { net, .. } => {
                v.push(p("vmask.w", &net.w, true));
                v.push(p("vmask.b", &net.b, true));
            }
            MaskLayer::L2x(l) => {
                v.push(p("l2x.w", &l.w, true));
                v.push(p("l2x.b", &l.b, true));
            }
            MaskLayer::Iba(r) => {
                v.push(p("iba.w", &r.w, true));
                v.push(p("iba.b", &r.b, true));
                v.push(p("iba.mu", &r.mu, false));
                v.push(p("iba.sigma", &r.sigma, false));
            }
        }
        v
    }

    /// Mutable view over the same tensors, in the same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.embedding.weights];
        match &mut self.head {
            Head::Cnn { banks, out_w, out_b } => {
                for b in banks {
                    v.push(&mut b.filters);
                    v.push(&mut b.bias);
                }
                v.push(out_w);
                v.push(out_b);
            }
            Head::Boe {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                v.extend([hidden_w, hidden_b, out_w, out_b]);
            }
        }
        match &mut self.mask {
            MaskLayer::None => {}
            MaskLayer::Vmask { net, .. } => v.extend([&mut net.w, &mut net.b]),
            MaskLayer::L2x(l) => v.extend([&mut l.w, &mut l.b]),
            MaskLayer::Iba(r) => v.extend([&mut r.w, &mut r.b, &mut r.mu, &mut r.sigma]),
        }
        v
    }

    /// Records one example's forward pass on `tape`.
    ///
    /// `keep` zeroes the classifier input at positions whose value is 0
    /// (explainer coalitions, post-hoc selection); pads are always zeroed.
    /// `rows` replaces the embedding lookup with precomputed rows.
    pub fn forward_example<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p>,
        ex: &Example,
        mode: Mode,
        rng: &mut R,
        keep: Option<&[f64]>,
    ) -> Result<ForwardOut> {
        self.forward_inner(tape, ex, mode, rng, keep, None)
    }

    /// Same as [`Model::forward_example`] with the lookup replaced by
    /// `rows` (`[L×d]`), bypassing any mask strategy.
    pub fn forward_rows<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p>,
        ex: &Example,
        rows: Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOut> {
        self.forward_inner(tape, ex, mode, rng, None, Some(rows))
    }

    fn forward_inner<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p>,
        ex: &Example,
        mode: Mode,
        rng: &mut R,
        keep: Option<&[f64]>,
        rows: Option<Tensor>,
    ) -> Result<ForwardOut> {
        let l = ex.max_len();
        if ex.true_length == 0 {
            return Err(Error::InvalidArgument("example has no tokens".into()));
        }
        if let Some(k) = keep {
            if k.len() != l {
                return Err(Error::shape("forward keep", &[l], &[k.len()]));
            }
        }
        let vocab_len = self.vocab_len();
        if let Some(&bad) = ex.token_ids.iter().find(|&&id| id >= vocab_len) {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad,
                limit: vocab_len,
            });
        }
        let gate: Vec<f64> = (0..l)
            .map(|t| {
                if t >= ex.true_length {
                    0.0
                } else {
                    keep.map_or(1.0, |k| k[t])
                }
            })
            .collect();
        let pad_ind: Vec<f64> = (0..l).map(|t| if t < ex.true_length { 1.0 } else { 0.0 }).collect();

        let mut params = Vec::new();
        let refs = self.tensors();
        let mut vars = Vec::with_capacity(refs.len());
        for (i, p) in refs.iter().enumerate() {
            let v = if p.trainable {
                let v = tape.param(p.tensor);
                params.push((i, v));
                v
            } else {
                tape.constant_ref(p.tensor)
            };
            vars.push(v);
        }

        let bypass = rows.is_some();
        let x = match rows {
            Some(r) => {
                if r.shape() != [l, self.spec.embed_dim] {
                    return Err(Error::shape("forward_rows", r.shape(), &[l, self.spec.embed_dim]));
                }
                tape.constant(r)
            }
            None => tape.embedding_lookup(vars[0], &ex.token_ids)?,
        };
        let head_vars = &vars[1..];
        let n_head = match &self.head {
            Head::Cnn { banks, .. } => banks.len() * 2 + 2,
            Head::Boe { .. } => 4,
        };
        let mask_vars = &head_vars[n_head..];

        let mut mask_probs = None;
        let mut entropy_sum = None;
        let mut info_sum = None;
        let gate_v = tape.constant(Tensor::vector(gate));
        let z = match (&self.mask, bypass) {
            (MaskLayer::None, _) | (_, true) => tape.scale_rows(x, gate_v)?,
            (MaskLayer::Vmask { tau, .. }, false) => {
                let (log_q, p) = vmask::mask_probs(tape, x, mask_vars[0], mask_vars[1])?;
                let values = match mode {
                    Mode::Train => vmask::relaxed_sample(tape, log_q, vmask::gumbel_noise(l, rng), *tau)?,
                    Mode::Infer => p,
                };
                let values = tape.mul(values, gate_v)?;
                let h = tape.bernoulli_entropy(p);
                let pad = tape.constant(Tensor::vector(pad_ind));
                let h = tape.mul(h, pad)?;
                entropy_sum = Some(tape.sum(h));
                mask_probs = Some(p);
                vmask::apply_mask(tape, x, values)?
            }
            (MaskLayer::L2x(_), false) => {
                let scores = baselines::gate_scores(tape, x, mask_vars[0], mask_vars[1])?;
                mask_probs = Some(scores);
                let values = tape.mul(scores, gate_v)?;
                tape.scale_rows(x, values)?
            }
            (MaskLayer::Iba(readout), false) => {
                let eta = match mode {
                    Mode::Train => Some(baselines::iba_noise(l, self.spec.embed_dim, rng)),
                    Mode::Infer => None,
                };
                let out = baselines::iba_transform(tape, x, mask_vars[0], mask_vars[1], readout, eta)?;
                let kl = baselines::iba_info_loss_tokens(tape, out.lambda, x, readout)?;
                let pad = tape.constant(Tensor::vector(pad_ind));
                let kl = tape.mul(kl, pad)?;
                info_sum = Some(tape.sum(kl));
                mask_probs = Some(out.lambda);
                tape.scale_rows(out.z, gate_v)?
            }
        };

        let training = mode == Mode::Train;
        let logits = match &self.head {
            Head::Cnn { banks, .. } => {
                let mut pooled = Vec::with_capacity(banks.len());
                for (i, b) in banks.iter().enumerate() {
                    pooled.push(tape.conv1d_maxpool(z, head_vars[2 * i], head_vars[2 * i + 1], b.width)?);
                }
                let feats = tape.concat(&pooled);
                let feats = tape.dropout(feats, self.spec.dropout, rng, training)?;
                let n = tape.value(feats).numel();
                let feats = tape.reshape(feats, &[1, n])?;
                let k = banks.len() * 2;
                let o = tape.matmul(feats, head_vars[k])?;
                tape.add(o, head_vars[k + 1])?
            }
            Head::Boe { .. } => {
                let s = tape.sum_rows(z)?;
                let mean = tape.scale(s, 1.0 / ex.true_length as f64);
                let mean = tape.dropout(mean, self.spec.dropout, rng, training)?;
                let mean = tape.reshape(mean, &[1, self.spec.embed_dim])?;
                let h = tape.matmul(mean, head_vars[0])?;
                let h = tape.add(h, head_vars[1])?;
                let h = tape.tanh(h);
                let o = tape.matmul(h, head_vars[2])?;
                tape.add(o, head_vars[3])?
            }
        };

        Ok(ForwardOut {
            logits,
            mask_probs,
            entropy_sum,
            info_sum,
            n_tokens: ex.true_length,
            params,
        })
    }

    /// Inference-mode logits of one example.
    pub fn logits(&self, ex: &Example, keep: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_example(&mut tape, ex, Mode::Infer, &mut NoRng, keep)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Per-position gate values in inference mode (vmask p, L2X score, IBA λ).
    pub fn mask_values(&self, ex: &Example) -> Result<Option<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward_example(&mut tape, ex, Mode::Infer, &mut NoRng, None)?;
        Ok(out.mask_probs.map(|p| tape.value(p).data().to_vec()))
    }

    /// Logits for a batch, `[m×C]`, plus per-example mask values.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        batch: &[Example],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<Option<Vec<f64>>>)> {
        let c = self.num_classes();
        let mut logits = Vec::with_capacity(batch.len() * c);
        let mut masks = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut tape = Tape::new();
            let out = self.forward_example(&mut tape, ex, mode, rng, None)?;
            logits.extend_from_slice(tape.value(out.logits).data());
            masks.push(out.mask_probs.map(|p| tape.value(p).data().to_vec()));
        }
        Ok((Tensor::matrix(batch.len(), c, logits)?, masks))
    }
}

/// Per-word-type global importance: the vmask keep-probability of each
/// word's embedding, or for IBA the mean gate value over its occurrences in
/// `train`. Other strategies define none and yield `None`.
pub fn global_importance(model: &Model, vocab: &Vocab, train: &[Example]) -> Result<Option<ImportanceTable>> {
    match &model.mask {
        MaskLayer::Vmask { net, .. } => Ok(Some(vmask::global_importance(net, &model.embedding.weights, vocab)?)),
        MaskLayer::Iba(_) => {
            let lambdas = exec::try_map_range(train.len(), |i| -> Result<Vec<f64>> {
                Ok(model.mask_values(&train[i])?.expect("iba model has gate values"))
            })?;
            let mut it = lambdas.into_iter();
            let table = baselines::iba_global_importance(vocab.len(), train, |_| Ok(it.next().expect("one per example")))?;
            Ok(Some(table))
        }
        MaskLayer::None | MaskLayer::L2x(_) => Ok(None),
    }
}

/// Inference never draws randomness; this generator panics if asked to.
pub struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference mode must not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference mode must not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference mode must not sample")
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps an example, with optionally zeroed positions, to
/// class probabilities. Explainers and metrics are written against this.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    /// Probabilities with positions where `keep[t] == 0` removed from the
    /// classifier input.
    fn predict_proba_masked(&self, ex: &Example, keep: Option<&[f64]>) -> Result<Vec<f64>>;

    fn predict_proba(&self, ex: &Example) -> Result<Vec<f64>> {
        self.predict_proba_masked(ex, None)
    }

    fn predict(&self, ex: &Example) -> Result<usize> {
        Ok(argmax(&self.predict_proba(ex)?))
    }
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn predict_proba_masked(&self, ex: &Example, keep: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(ex, keep)?))
    }
}
