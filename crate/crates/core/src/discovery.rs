//! Mask learning over graph edges, plus greedy-pruning and attribution
//! baselines.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::batch::SeqBatch;
use crate::error::{Error, Result};
use crate::graph::{
    masked_final_logits, masked_forward_tape, path_filter, ComputationGraph, EdgeMask, Gates,
    Provenance, Sheaf,
};
use crate::math;
use crate::model::{ParamVars, Parameters};
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tasks::{masked_accuracy, TaskExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    #[default]
    PairCe,
    FullKl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub lambda_sparsity: f64,
    pub lambda_complete: f64,
    pub lambda_overlap: f64,
    pub loss_type: LossType,
    pub steps: usize,
    pub lr: f64,
    /// Adam's denominator floor. Large enough that numerically vanishing
    /// fidelity gradients on a saturated model do not turn into full steps.
    pub adam_eps: f64,
    pub temperature: f64,
    pub init_logit: f64,
    pub init_noise: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Edges that may never be selected.
    pub excluded: Vec<usize>,
    /// Edges penalised by the overlap term.
    pub repelled: Vec<usize>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            lambda_sparsity: 5.0,
            lambda_complete: 1.0,
            lambda_overlap: 8.0,
            loss_type: LossType::PairCe,
            steps: 2000,
            lr: 0.05,
            adam_eps: 1e-8,
            temperature: 1.0,
            init_logit: 3.0,
            init_noise: 0.01,
            batch_size: 32,
            seed: 0,
            excluded: Vec::new(),
            repelled: Vec::new(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self, n_edges: usize) -> Result<()> {
        let lambdas = [
            self.lambda_sparsity,
            self.lambda_complete,
            self.lambda_overlap,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0, got {lambdas:?}"
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if let Some(e) = self
            .excluded
            .iter()
            .chain(&self.repelled)
            .find(|&&e| e >= n_edges)
        {
            return Err(Error::InvalidConfig(format!(
                "edge index {e} out of range for {n_edges} edges"
            )));
        }
        Ok(())
    }
}

/// Per-edge mask logits; excluded edges hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl MaskLogits {
    /// Noise-free readout: `σ(l) > 0.5`.
    pub fn hard_mask(&self) -> EdgeMask {
        EdgeMask::from_bits(self.logits.iter().map(|&l| math::sigmoid(l) > 0.5).collect())
    }
}

/// Gumbel-difference noise `log(log U1 / log U2)`, resampling exact 0 or 1.
pub fn sample_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut uniform = || loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    };
    (0..n)
        .map(|_| {
            let (u1, u2) = (uniform(), uniform());
            math::ln(math::ln(u1) / math::ln(u2))
        })
        .collect()
}

/// `(scores, hard mask)` with `s = σ((l - noise) / τ)` and mask `1[s > 0.5]`.
pub fn relaxed_mask(logits: &[f64], noise: &[f64], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(&l, &n)| math::sigmoid((l - n) / temperature))
        .collect();
    let hard = scores.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
    (scores, hard)
}

/// Draw fresh noise and return `(scores, hard mask)`.
pub fn sample_mask(logits: &MaskLogits, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(logits.temperature.is_finite() && logits.temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {}",
            logits.temperature
        )));
    }
    let noise = sample_noise(logits.logits.len(), rng);
    Ok(relaxed_mask(&logits.logits, &noise, logits.temperature))
}

/// Straight-through mask on the tape: returns `(s, m)` where
/// `m = detach(1[s > 0.5] - s) + s` is binary in value with the gradient of `s`.
pub fn straight_through(
    tape: &mut Tape,
    logits: Var,
    noise: &[f64],
    temperature: f64,
) -> Result<(Var, Var)> {
    let n = tape.constant(Array::vector(noise.to_vec()));
    let shifted = tape.sub(logits, n)?;
    let scaled = tape.scale(shifted, 1.0 / temperature)?;
    let s = tape.sigmoid(scaled)?;
    let hard = tape
        .value(s)
        .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let h = tape.constant(hard);
    let gap = tape.sub(h, s)?;
    let frozen = tape.detach(gap)?;
    let m = tape.add(frozen, s)?;
    Ok((s, m))
}

/// `(1/|E|) Σ_e σ(l_e)`.
pub fn loss_sparsity(logits: &[f64]) -> f64 {
    logits.iter().map(|&l| math::sigmoid(l)).sum::<f64>() / logits.len() as f64
}

/// `(1/|E|) Σ_{e ∈ R} σ(l_e)`.
pub fn loss_overlap(logits: &[f64], repelled: &[usize]) -> f64 {
    repelled.iter().map(|&e| math::sigmoid(logits[e])).sum::<f64>() / logits.len() as f64
}

/// `(1/|E|) Σ_e w_e σ(l_e)` on the tape, for an indicator-like weight vector.
pub fn weighted_activation(tape: &mut Tape, logits: Var, weights: &[f64]) -> Result<Var> {
    let s = tape.sigmoid(logits)?;
    let w = tape.constant(Array::vector(weights.to_vec()));
    let ws = tape.mul(s, w)?;
    let total = tape.sum(ws)?;
    tape.scale(total, 1.0 / weights.len() as f64)
}

/// Final-position `[correct, incorrect]` logits (B × 2) picked out of B × V.
pub fn pair_logits(tape: &mut Tape, logits: Var, examples: &[TaskExample]) -> Result<Var> {
    let v = tape.value(logits).cols();
    let b = examples.len();
    let mut cols = Vec::with_capacity(2);
    for pick_correct in [true, false] {
        let mut sel = vec![0.0; b * v];
        for (i, e) in examples.iter().enumerate() {
            sel[i * v + if pick_correct { e.correct } else { e.incorrect }] = 1.0;
        }
        let s = tape.constant(Array::new(vec![b, v], sel)?);
        let picked = tape.mul(logits, s)?;
        let ones = tape.constant(Array::full(&[v, 1], 1.0));
        cols.push(tape.matmul(picked, ones)?);
    }
    tape.concat(&cols, 1)
}

/// Fidelity term. `pair_ce`: mean 2-way cross-entropy of the correct answer.
/// `full_kl`: mean KL(full ‖ masked) over the vocabulary, `full_logits`
/// being the unmasked model's final-position logits.
pub fn loss_fidelity(
    tape: &mut Tape,
    masked_logits: Var,
    full_logits: &Array,
    examples: &[TaskExample],
    loss_type: LossType,
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("fidelity loss on empty batch".into()));
    }
    let b = examples.len() as f64;
    match loss_type {
        LossType::PairCe => {
            let pair = pair_logits(tape, masked_logits, examples)?;
            let lp = tape.log_softmax_rows(pair)?;
            let first = tape.slice(lp, 1, 0, 1)?;
            let total = tape.sum(first)?;
            tape.scale(total, -1.0 / b)
        }
        LossType::FullKl => {
            let lq = tape.log_softmax_rows(masked_logits)?;
            let (rows, cols) = (full_logits.rows(), full_logits.cols());
            let mut p = vec![0.0; rows * cols];
            let mut entropy_term = 0.0;
            for r in 0..rows {
                let row = full_logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + math::ln(row.iter().map(|&x| math::exp(x - max)).sum::<f64>());
                for c in 0..cols {
                    let lp = row[c] - lse;
                    let pv = math::exp(lp);
                    p[r * cols + c] = pv;
                    if pv > 0.0 {
                        entropy_term += pv * lp;
                    }
                }
            }
            let pc = tape.constant(Array::new(vec![rows, cols], p)?);
            let cross = tape.mul(pc, lq)?;
            let cross = tape.sum(cross)?;
            let neg = tape.scale(cross, -1.0)?;
            let h = tape.constant(Array::scalar(entropy_term));
            let kl = tape.add(neg, h)?;
            tape.scale(kl, 1.0 / b)
        }
    }
}

/// Mean KL(answer-pair distribution ‖ uniform) of the complement graph:
/// `log 2 + Σ q log q`, zero at chance.
pub fn loss_completeness(
    tape: &mut Tape,
    complement_logits: Var,
    examples: &[TaskExample],
) -> Result<Var> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("completeness loss on empty batch".into()));
    }
    let pair = pair_logits(tape, complement_logits, examples)?;
    let lq = tape.log_softmax_rows(pair)?;
    let q = tape.exp(lq)?;
    let qlq = tape.mul(q, lq)?;
    let total = tape.sum(qlq)?;
    let mean = tape.scale(total, 1.0 / examples.len() as f64)?;
    let log2 = tape.constant(Array::scalar(core::f64::consts::LN_2));
    tape.add(mean, log2)
}

fn full_final_logits(params: &Parameters, graph: &ComputationGraph, examples: &[TaskExample]) -> Result<Array> {
    let mut rows = Vec::new();
    let mut v = 0;
    for chunk in examples.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let full = graph.full_mask();
        let l = masked_final_logits(params, graph, Gates::Hard(&full), &seqs)?;
        v = l.cols();
        rows.extend_from_slice(l.data());
    }
    Array::new(vec![examples.len(), v], rows)
}

fn indicator(n: usize, on: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &e in on {
        v[e] = 1.0;
    }
    v
}

/// Learn a sheaf by minimising
/// `fidelity + λ_s·sparsity + λ_c·completeness + λ_o·overlap(R)`
/// over Gumbel-sigmoid straight-through edge masks.
pub fn discover(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    config: &DiscoveryConfig,
) -> Result<Sheaf> {
    let (sheaf, _) = discover_with_trace(params, graph, examples, config)?;
    Ok(sheaf)
}

/// As [`discover`], also returning the per-step objective values.
pub fn discover_with_trace(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    config: &DiscoveryConfig,
) -> Result<(Sheaf, Vec<f64>)> {
    let n = graph.n_edges();
    config.validate(n)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("discovery needs examples".into()));
    }
    let excluded = EdgeMask::from_indices(n, config.excluded.iter().copied())?;
    let selectable = excluded.complement();
    if path_filter(graph, &selectable).count() == 0 {
        return Err(Error::Contract(
            "no input-to-output path remains outside the excluded edges".into(),
        ));
    }
    let cfg = &params.config;
    let selectable_w = selectable.gates();
    let repelled_w = indicator(n, &config.repelled);
    let full_logits = match config.loss_type {
        LossType::FullKl => Some(full_final_logits(params, graph, examples)?),
        LossType::PairCe => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(config.init_logit, config.init_noise.max(0.0))
        .map_err(|e| Error::InvalidConfig(format!("init noise: {e}")))?;
    let mut logits: Vec<f64> = (0..n).map(|_| init.sample(&mut rng)).collect();
    for e in excluded.iter_ones() {
        logits[e] = 0.0;
    }
    let mut opt = Adam::new(config.lr, 0.9, 0.999, config.adam_eps, None);
    let mut trace = Vec::with_capacity(config.steps);
    let ones = vec![1.0; n];

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..examples.len()))
            .collect();
        let picks: Vec<TaskExample> = idx.iter().map(|&i| examples[i].clone()).collect();
        let noise = sample_noise(n, &mut rng);
        let seqs: Vec<&[usize]> = picks.iter().map(|e| e.tokens.as_slice()).collect();
        let batch = SeqBatch::new(&seqs, cfg.vocab_size, cfg.max_seq_len)?;

        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, params, false);
        let l = tape.leaf(Array::vector(logits.clone()));
        let (_, m) = straight_through(&mut tape, l, &noise, config.temperature)?;
        let sel = tape.constant(Array::vector(selectable_w.clone()));
        let gates = tape.mul(m, sel)?;
        let run = masked_forward_tape(
            &mut tape,
            &pv,
            cfg,
            graph,
            gates,
            &batch,
            &[],
            Some(&batch.last_rows),
        )?;
        let full_rows = match &full_logits {
            Some(all) => {
                let v = all.cols();
                let mut d = Vec::with_capacity(picks.len() * v);
                for &i in &idx {
                    d.extend_from_slice(all.row(i));
                }
                Array::new(vec![picks.len(), v], d)?
            }
            None => Array::zeros(&[1, 1]),
        };
        let mut loss = loss_fidelity(&mut tape, run.logits, &full_rows, &picks, config.loss_type)?;
        if config.lambda_sparsity > 0.0 {
            let s = weighted_activation(&mut tape, l, &selectable_w)?;
            let s = tape.scale(s, config.lambda_sparsity)?;
            loss = tape.add(loss, s)?;
        }
        if config.lambda_complete > 0.0 {
            let one = tape.constant(Array::vector(ones.clone()));
            let comp = tape.sub(one, gates)?;
            let crun = masked_forward_tape(
                &mut tape,
                &pv,
                cfg,
                graph,
                comp,
                &batch,
                &[],
                Some(&batch.last_rows),
            )?;
            let c = loss_completeness(&mut tape, crun.logits, &picks)?;
            let c = tape.scale(c, config.lambda_complete)?;
            loss = tape.add(loss, c)?;
        }
        if config.lambda_overlap > 0.0 && !config.repelled.is_empty() {
            let w: Vec<f64> = repelled_w
                .iter()
                .zip(&selectable_w)
                .map(|(r, s)| r * s)
                .collect();
            let o = weighted_activation(&mut tape, l, &w)?;
            let o = tape.scale(o, config.lambda_overlap)?;
            loss = tape.add(loss, o)?;
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::DiscoveryDiverged { step });
        }
        trace.push(value);
        let grads = tape.backward(loss)?;
        let mut g = grads.wrt(l)?.into_data();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::DiscoveryDiverged { step });
        }
        for e in excluded.iter_ones() {
            g[e] = 0.0;
        }
        opt.step(&mut [&mut logits[..]], &[&g[..]]);
    }

    for e in excluded.iter_ones() {
        logits[e] = f64::NEG_INFINITY;
    }
    let ml = MaskLogits {
        logits,
        temperature: config.temperature,
    };
    let mask = ml.hard_mask();
    debug_assert!(mask.intersection(&excluded).count() == 0);
    let accuracy = masked_accuracy(params, graph, Gates::Hard(&mask), examples)?;
    let comp = mask.complement();
    let complement_accuracy = masked_accuracy(params, graph, Gates::Hard(&comp), examples)?;
    let method = if config.repelled.is_empty() || config.lambda_overlap == 0.0 {
        "mask"
    } else {
        "mask+repulsion"
    };
    let sheaf = Sheaf::new(
        mask,
        Some(ml.logits),
        accuracy,
        complement_accuracy,
        Provenance {
            seed: config.seed,
            method: method.into(),
            config_hash: cfg.fingerprint(),
        },
    );
    Ok((sheaf, trace))
}

/// Run [`discover`] `k` times, adding each sheaf's edges to the repelled set
/// before the next run. Run seeds are drawn from `rng`.
pub fn oasr_sequence(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    config: &DiscoveryConfig,
    k: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<Sheaf>> {
    let mut out = Vec::with_capacity(k);
    oasr_sequence_each(params, graph, examples, config, k, rng, |_, s| out.push(s.clone()))?;
    Ok(out)
}

/// As [`oasr_sequence`], handing each sheaf to `on_sheaf` as soon as it is
/// found, so earlier runs survive a later failure.
pub fn oasr_sequence_each(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    config: &DiscoveryConfig,
    k: usize,
    rng: &mut impl RngCore,
    mut on_sheaf: impl FnMut(usize, &Sheaf),
) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut repelled = EdgeMask::from_indices(graph.n_edges(), config.repelled.iter().copied())?;
    for run in 0..k {
        let cfg = DiscoveryConfig {
            seed: rng.next_u64(),
            repelled: repelled.indices(),
            ..config.clone()
        };
        let sheaf = discover(params, graph, examples, &cfg).map_err(|e| Error::RunFailed {
            run,
            source: alloc::boxed::Box::new(e),
        })?;
        repelled = repelled.union(&sheaf.mask);
        on_sheaf(run, &sheaf);
    }
    Ok(())
}

fn pair_distributions(logits: &Array, examples: &[TaskExample]) -> Vec<(f64, f64)> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d = logits.get(i, e.correct) - logits.get(i, e.incorrect);
            let p = math::sigmoid(d);
            (p, 1.0 - p)
        })
        .collect()
}

fn mean_pair_kl(reference: &[(f64, f64)], other: &[(f64, f64)]) -> f64 {
    let term = |p: f64, q: f64| {
        if p == 0.0 {
            0.0
        } else {
            p * (math::ln(p) - math::ln(q))
        }
    };
    reference
        .iter()
        .zip(other)
        .map(|(&(p0, p1), &(q0, q1))| term(p0, q0) + term(p1, q1))
        .sum::<f64>()
        / reference.len() as f64
}

/// Node visiting order for greedy pruning: output first, then each layer from
/// the last, its MLP before its heads, heads permuted by `head_order_seed`.
pub fn acdc_node_order(graph: &ComputationGraph, head_order_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(head_order_seed);
    let mut order = vec![graph.output()];
    for layer in (0..graph.n_layers).rev() {
        order.push(graph.mlp_node(layer));
        let mut heads: Vec<usize> = (0..graph.n_heads).map(|h| graph.head_node(layer, h)).collect();
        rand::seq::SliceRandom::shuffle(&mut heads[..], &mut rng);
        order.extend(heads);
    }
    order
}

/// Greedy pruning in reverse topological order: an incoming edge is removed
/// for good when, with it ablated from the current graph, the mean
/// KL(full ‖ pruned) over the answer pair is at most `threshold`.
pub fn acdc_prune(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    threshold: f64,
    head_order_seed: u64,
) -> Result<EdgeMask> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidConfig(format!("threshold must be >= 0, got {threshold}")));
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset("pruning needs examples".into()));
    }
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let mut mask = graph.full_mask();
    let full = masked_final_logits(params, graph, Gates::Hard(&mask), &seqs)?;
    let reference = pair_distributions(&full, examples);
    for node in acdc_node_order(graph, head_order_seed) {
        for &e in &graph.incoming[node] {
            mask.set(e, false);
            let logits = masked_final_logits(params, graph, Gates::Hard(&mask), &seqs)?;
            let kl = mean_pair_kl(&reference, &pair_distributions(&logits, examples));
            if !(kl <= threshold) {
                mask.set(e, true);
            }
        }
    }
    Ok(mask)
}

fn aligned_batches(
    params: &Parameters,
    clean: &[TaskExample],
    corrupted: &[TaskExample],
) -> Result<(SeqBatch, SeqBatch)> {
    if clean.len() != corrupted.len() || clean.is_empty() {
        return Err(Error::Contract(format!(
            "clean ({}) and corrupted ({}) batches must be nonempty and aligned",
            clean.len(),
            corrupted.len()
        )));
    }
    if clean.iter().zip(corrupted).any(|(a, b)| a.tokens.len() != b.tokens.len()) {
        return Err(Error::Contract("clean and corrupted prompts differ in length".into()));
    }
    let cfg = &params.config;
    let c: Vec<&[usize]> = clean.iter().map(|e| e.tokens.as_slice()).collect();
    let k: Vec<&[usize]> = corrupted.iter().map(|e| e.tokens.as_slice()).collect();
    Ok((
        SeqBatch::new(&c, cfg.vocab_size, cfg.max_seq_len)?,
        SeqBatch::new(&k, cfg.vocab_size, cfg.max_seq_len)?,
    ))
}

/// Mean clean answer margin from final-position logits on the tape.
fn mean_margin(tape: &mut Tape, logits: Var, examples: &[TaskExample]) -> Result<Var> {
    let v = tape.value(logits).cols();
    let mut sel = vec![0.0; examples.len() * v];
    for (i, e) in examples.iter().enumerate() {
        sel[i * v + e.correct] += 1.0;
        sel[i * v + e.incorrect] -= 1.0;
    }
    let s = tape.constant(Array::new(vec![examples.len(), v], sel)?);
    let picked = tape.mul(logits, s)?;
    let total = tape.sum(picked)?;
    tape.scale(total, 1.0 / examples.len() as f64)
}

/// First-order edge attribution: for each edge,
/// `(out_corrupted(src) - out_clean(src)) · ∂ margin / ∂ input(dst)`
/// on the clean run, averaged over the batch.
pub fn eap_attribute(
    params: &Parameters,
    graph: &ComputationGraph,
    clean: &[TaskExample],
    corrupted: &[TaskExample],
) -> Result<Vec<f64>> {
    let (cb, kb) = aligned_batches(params, clean, corrupted)?;
    let cfg = &params.config;
    let n = graph.n_edges();

    let mut ktape = Tape::new();
    let kpv = ParamVars::record(&mut ktape, params, false);
    let kg = ktape.constant(Array::full(&[n], 1.0));
    let krun = masked_forward_tape(&mut ktape, &kpv, cfg, graph, kg, &kb, &[], Some(&kb.last_rows))?;

    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let g = tape.leaf(Array::full(&[n], 1.0));
    let run = masked_forward_tape(&mut tape, &pv, cfg, graph, g, &cb, &[], Some(&cb.last_rows))?;
    let metric = mean_margin(&mut tape, run.logits, clean)?;
    let grads = tape.backward(metric)?;

    let mut scores = vec![0.0; n];
    for (e, edge) in graph.edges.iter().enumerate() {
        let dst_in = run.node_inputs[edge.dst].expect("non-input destination");
        let grad = match grads.get(dst_in) {
            Some(g) => g,
            None => continue,
        };
        let clean_out = tape.value(run.node_outputs[edge.src]).data();
        let corr_out = ktape.value(krun.node_outputs[edge.src]).data();
        scores[e] = grad
            .data()
            .iter()
            .zip(clean_out.iter().zip(corr_out))
            .map(|(g, (c, k))| g * (k - c))
            .sum();
    }
    Ok(scores)
}

/// Exact counterpart of [`eap_attribute`]: change in mean clean margin when
/// only edge `e` carries its source's corrupted output.
pub fn edge_patch_effects(
    params: &Parameters,
    graph: &ComputationGraph,
    clean: &[TaskExample],
    corrupted: &[TaskExample],
) -> Result<Vec<f64>> {
    let (cb, kb) = aligned_batches(params, clean, corrupted)?;
    let cfg = &params.config;
    let n = graph.n_edges();
    let mut ktape = Tape::new();
    let kpv = ParamVars::record(&mut ktape, params, false);
    let kg = ktape.constant(Array::full(&[n], 1.0));
    let krun = masked_forward_tape(&mut ktape, &kpv, cfg, graph, kg, &kb, &[], None)?;

    let base = {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, params, false);
        let g = tape.constant(Array::full(&[n], 1.0));
        let run = masked_forward_tape(&mut tape, &pv, cfg, graph, g, &cb, &[], Some(&cb.last_rows))?;
        let m = mean_margin(&mut tape, run.logits, clean)?;
        tape.value(m).data()[0]
    };
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, params, false);
        let g = tape.constant(Array::full(&[n], 1.0));
        let src = graph.edges[e].src;
        let patched = tape.constant(ktape.value(krun.node_outputs[src]).clone());
        let run = masked_forward_tape(
            &mut tape,
            &pv,
            cfg,
            graph,
            g,
            &cb,
            &[(e, patched)],
            Some(&cb.last_rows),
        )?;
        let m = mean_margin(&mut tape, run.logits, clean)?;
        out.push(tape.value(m).data()[0] - base);
    }
    Ok(out)
}

/// The `k` edges with largest `|score|`; ties go to the lower index.
pub fn eap_topk(scores: &[f64], k: usize) -> Result<EdgeMask> {
    if k > scores.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds the {} scored edges",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        math::abs(scores[b])
            .partial_cmp(&math::abs(scores[a]))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    EdgeMask::from_indices(scores.len(), order.into_iter().take(k))
}

/// Human-readable edge label, e.g. `a0.h1->m1`.
pub fn edge_label(graph: &ComputationGraph, e: usize) -> String {
    let (s, d) = graph.edge_names(e);
    format!("{s}->{d}")
}
