//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmask_core::baselines::{self, IbaReadout};
use vmask_core::corpus::Example;
use vmask_core::models::{ClassifierSpec, HeadKind, Model, Strategy};
use vmask_core::tensorgrad::{Tape, Tensor, Var};
use vmask_core::trainer::batch_gradients;
use vmask_core::vmask;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely, scaled by it.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type OpFn = Box<dyn for<'a> Fn(&mut Tape<'a>, &[Var]) -> vmask_core::Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so relu kinks sit far from every probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Fixed readout weights so every output element reaches the loss with a
/// distinct coefficient.
fn readout(numel: usize) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(0xfeed);
    Tensor::vector((0..numel).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn scalar_loss(case: &OpCase, inputs: &[Tensor], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.f)(&mut tape, &vars).unwrap_or_else(|e| panic!("{}: {e}", case.name));
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[n]).unwrap();
    let r = tape.constant(readout(n));
    let prod = tape.mul(flat, r).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.into_data()))
        .collect();
    (value, g)
}

/// Largest relative error between the tape gradient and central finite
/// differences over every input element.
pub fn op_max_rel_err(case: &OpCase) -> f64 {
    let (_, analytic) = scalar_loss(case, &case.inputs, true);
    let mut worst = 0.0f64;
    for (i, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (scalar_loss(case, &plus, false).0 - scalar_loss(case, &minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// One randomized instance of every differentiable op.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let (m, n, k) = (r.random_range(1..4), r.random_range(2..5), r.random_range(1..4));
    let mut cases = Vec::new();
    let mut push = |name, inputs, f: OpFn| cases.push(OpCase { name, inputs, f });

    push("matmul", vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1])));
    push("add", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1])));
    push("add_row_broadcast", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1])));
    push("sub", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], Box::new(|t, v| t.sub(v[0], v[1])));
    push("mul", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| t.mul(v[0], v[1])));
    push("mul_row_broadcast", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], Box::new(|t, v| t.mul(v[0], v[1])));
    push("scale_rows", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[m], -1.0, 1.0)], Box::new(|t, v| t.scale_rows(v[0], v[1])));
    push("affine", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| Ok(t.affine(v[0], -1.7, 0.3))));
    push("relu", vec![away_from_zero(r, &[m, n])], Box::new(|t, v| Ok(t.relu(v[0]))));
    push("tanh", vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|t, v| Ok(t.tanh(v[0]))));
    push("sigmoid", vec![uniform(r, &[m, n], -3.0, 3.0)], Box::new(|t, v| Ok(t.sigmoid(v[0]))));
    push("exp", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| Ok(t.exp(v[0]))));
    push("log", vec![uniform(r, &[m, n], 0.2, 2.0)], Box::new(|t, v| t.log(v[0])));
    push("clamp", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| {
        // Interior only: the bounds sit outside the sampled range.
        Ok(t.clamp(v[0], -1.5, 1.5))
    }));
    push("bernoulli_entropy", vec![uniform(r, &[n], 0.05, 0.95)], Box::new(|t, v| Ok(t.bernoulli_entropy(v[0]))));
    push("softmax_rows", vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.softmax_rows(v[0])));
    push("log_softmax_rows", vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.log_softmax_rows(v[0])));
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    push("cross_entropy", vec![uniform(r, &[m, n], -2.0, 2.0)], Box::new(move |t, v| t.cross_entropy(v[0], &labels)));
    let ids: Vec<usize> = (0..m + 2).map(|_| r.random_range(0..4)).collect();
    push("embedding_lookup", vec![uniform(r, &[4, n], -1.0, 1.0)], Box::new(move |t, v| t.embedding_lookup(v[0], &ids)));
    let (l, d, f, w) = (r.random_range(3..7), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    push(
        "conv1d_maxpool",
        vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[f, w * d], -1.0, 1.0), uniform(r, &[f], 0.5, 1.0)],
        Box::new(move |t, v| t.conv1d_maxpool(v[0], v[1], v[2], w)),
    );
    let drop_seed = r.random::<u64>();
    push("dropout", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(move |t, v| {
        t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(drop_seed), true)
    }));
    push("sum", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| Ok(t.sum(v[0]))));
    push("mean", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| Ok(t.mean(v[0]))));
    push("sum_rows", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| t.sum_rows(v[0])));
    push("sum_cols", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(|t, v| t.sum_cols(v[0])));
    push("column", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(move |t, v| t.column(v[0], n - 1)));
    push("concat", vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[k], -1.0, 1.0)], Box::new(|t, v| Ok(t.concat(&[v[0], v[1]]))));
    push("reshape", vec![uniform(r, &[m, n], -1.0, 1.0)], Box::new(move |t, v| {
        let x = t.reshape(v[0], &[n, m])?;
        Ok(t.tanh(x))
    }));

    let noise = vmask::gumbel_noise(l, r);
    let tau = [1.0, 0.5, 0.1][r.random_range(0..3)];
    push(
        "vmask_relaxed_sample",
        vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[d, 2], -1.0, 1.0), uniform(r, &[2], -0.5, 0.5)],
        Box::new(move |t, v| {
            let (log_q, p) = vmask::mask_probs(t, v[0], v[1], v[2])?;
            let rs = vmask::relaxed_sample(t, log_q, noise.clone(), tau)?;
            let masked = vmask::apply_mask(t, v[0], rs)?;
            let h = t.bernoulli_entropy(p);
            let h = t.sum(h);
            let s = t.sum(masked);
            t.add(s, h)
        }),
    );
    push(
        "l2x_transform",
        vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[d, 1], -1.0, 1.0), uniform(r, &[1], -0.5, 0.5)],
        Box::new(|t, v| Ok(baselines::l2x_transform(t, v[0], v[1], v[2])?.0)),
    );
    let table = uniform(r, &[6, d], -1.0, 1.0);
    let ro = IbaReadout::new(d, &table).unwrap();
    let eta = baselines::iba_noise(l, d, r);
    push(
        "iba_transform_and_info",
        vec![uniform(r, &[l, d], -1.0, 1.0), uniform(r, &[d, 1], -1.0, 1.0), uniform(r, &[1], -0.5, 0.5)],
        Box::new(move |t, v| {
            let out = baselines::iba_transform(t, v[0], v[1], v[2], &ro, Some(eta.clone()))?;
            let info = baselines::iba_info_loss_tokens(t, out.lambda, v[0], &ro)?;
            let zs = t.sum(out.z);
            let is = t.sum(info);
            t.add(zs, is)
        }),
    );
    cases
}

pub fn small_spec(kind: HeadKind) -> ClassifierSpec {
    ClassifierSpec {
        kind,
        embed_dim: 4,
        hidden_dim: 5,
        filter_widths: vec![2, 3],
        filters_per_width: 3,
        num_classes: 2,
        dropout: 0.2,
        freeze_embeddings: false,
    }
}

/// Random model with every mask-layer parameter moved off its zero init,
/// plus a small batch of padded examples.
pub fn composed_instance(seed: u64, kind: HeadKind, strategy: Strategy) -> (Model, Vec<Example>) {
    let vocab_len = 12;
    let mut model = Model::new(small_spec(kind), strategy, vocab_len, 0.5, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let names: Vec<String> = model.tensors().iter().map(|p| p.name.clone()).collect();
    for (name, t) in names.iter().zip(model.tensors_mut()) {
        if name.starts_with("vmask.") || name.starts_with("l2x.") || name == "iba.w" || name == "iba.b" || name.ends_with("bias") || name.starts_with("out.b") || name.starts_with("hidden.b") {
            for v in t.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
    let max_len = 6;
    let batch = (0..3)
        .map(|_| {
            let len = r.random_range(3..=max_len);
            let mut ids: Vec<usize> = (0..len).map(|_| r.random_range(2..vocab_len)).collect();
            ids.resize(max_len, 0);
            Example {
                token_ids: ids,
                true_length: len,
                label: r.random_range(0..2),
                keyword_positions: None,
            }
        })
        .collect();
    (model, batch)
}

fn batch_loss(model: &Model, batch: &[Example], beta: f64, seed: u64) -> (f64, Vec<Option<Vec<f64>>>) {
    let refs: Vec<&Example> = batch.iter().collect();
    let g = batch_gradients(model, &refs, beta, seed, 0, 0.01).unwrap();
    (g.ce + g.reg, g.grads)
}

/// Largest relative error of the full training loss gradient (cross-entropy
/// plus the strategy's regularizer, with mask, noise and dropout draws held
/// fixed by the seed) against central differences over every trainable
/// parameter.
pub fn composed_max_rel_err(model: &mut Model, batch: &[Example], beta: f64, seed: u64) -> f64 {
    let (_, analytic) = batch_loss(model, batch, beta, seed);
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        for (k, &a) in g.iter().enumerate() {
            let orig = model.tensors_mut()[i].data()[k];
            model.tensors_mut()[i].data_mut()[k] = orig + FD_STEP;
            let lp = batch_loss(model, batch, beta, seed).0;
            model.tensors_mut()[i].data_mut()[k] = orig - FD_STEP;
            let lm = batch_loss(model, batch, beta, seed).0;
            model.tensors_mut()[i].data_mut()[k] = orig;
            worst = worst.max(rel_err(a, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Small planted-keyword corpus for tests that need a trained model.
pub fn small_corpus(seed: u64) -> vmask_core::corpus::SynthCorpus {
    let cfg = vmask_core::corpus::SynthConfig {
        docs_per_class: 150,
        filler_vocab_size: 40,
        doc_len: 10,
        ..Default::default()
    };
    vmask_core::corpus::synth_gen(&cfg, seed).unwrap()
}

pub fn train_small(
    corpus: &vmask_core::corpus::SynthCorpus,
    strategy: Strategy,
    seed: u64,
    freeze: bool,
) -> vmask_core::trainer::TrainOutcome {
    let spec = ClassifierSpec {
        embed_dim: 16,
        filters_per_width: 8,
        freeze_embeddings: freeze,
        ..ClassifierSpec::default()
    };
    let cfg = vmask_core::trainer::TrainConfig {
        strategy,
        epochs: 4,
        seed,
        ..Default::default()
    };
    let mut model = Model::new(spec, strategy, corpus.data.vocab.len(), cfg.tau, seed).unwrap();
    vmask_core::trainer::train(&mut model, &corpus.data, &cfg).unwrap()
}
