//! Edge signatures, quantised subset-sum collisions, overlap counting bounds
//! and margin preservation.
//!
//! The edge signature `s_e` is the gradient of a readout vector with respect
//! to a continuous gate on edge `e`, taken at the full model. Summing
//! signatures over a subset gives the first-order change in the readout when
//! that subset is switched off (with a minus sign).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{binomial, Combinations};
use crate::array::Array;
use crate::batch::SeqBatch;
use crate::error::{Error, Result};
use crate::graph::{masked_final_logits, masked_forward_tape, ComputationGraph, EdgeMask, Gates};
use crate::math;
use crate::model::{ParamVars, Parameters};
use crate::tape::Tape;
use crate::tasks::TaskExample;

/// Upper limit on the number of subsets any search may enumerate.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// What is read off the final position of each prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `logit[correct] - logit[incorrect]`, one value per prompt.
    PairMargin,
    /// `(logit[correct], logit[incorrect])`, two values per prompt.
    #[default]
    AnswerLogits,
}

impl Readout {
    pub fn width(self) -> usize {
        match self {
            Readout::PairMargin => 1,
            Readout::AnswerLogits => 2,
        }
    }

    /// Readout vector from B×V final-position logits, prompt-major.
    pub fn read(self, logits: &Array, examples: &[TaskExample]) -> Vec<f64> {
        let mut out = Vec::with_capacity(examples.len() * self.width());
        for (i, ex) in examples.iter().enumerate() {
            let row = logits.row(i);
            match self {
                Readout::PairMargin => out.push(row[ex.correct] - row[ex.incorrect]),
                Readout::AnswerLogits => {
                    out.push(row[ex.correct]);
                    out.push(row[ex.incorrect]);
                }
            }
        }
        out
    }

    /// Hard per-prompt predictions (true = correct answer wins) from a
    /// readout vector.
    pub fn predictions(self, z: &[f64]) -> Vec<bool> {
        match self {
            Readout::PairMargin => z.iter().map(|&m| m > 0.0).collect(),
            Readout::AnswerLogits => z.chunks(2).map(|p| p[0] > p[1]).collect(),
        }
    }

    /// Smallest per-prompt decision margin of a readout vector. For answer
    /// logits this is the gap between the two logits.
    pub fn min_margin(self, z: &[f64]) -> f64 {
        let gaps = match self {
            Readout::PairMargin => z.iter().map(|m| math::abs(*m)).collect::<Vec<_>>(),
            Readout::AnswerLogits => z.chunks(2).map(|p| math::abs(p[0] - p[1])).collect(),
        };
        gaps.into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Per-edge signature vectors with their reference readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureMatrix {
    /// `signatures[e]` has length `dim`.
    pub signatures: Vec<Vec<f64>>,
    pub dim: usize,
    /// `max_e ‖s_e‖_∞`.
    pub bound: f64,
    /// Full-model readout.
    pub reference: Vec<f64>,
    pub readout: Readout,
}

impl SignatureMatrix {
    /// Build from raw rows, computing the bound. Rows must share a length and
    /// be finite.
    pub fn from_rows(signatures: Vec<Vec<f64>>, reference: Vec<f64>, readout: Readout) -> Result<Self> {
        let dim = reference.len();
        for (e, s) in signatures.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::Contract(format!(
                    "signature {e} has length {}, expected {dim}",
                    s.len()
                )));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("signature of edge {e}")));
            }
        }
        let bound = signatures
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |b, x| b.max(math::abs(*x)));
        Ok(Self {
            signatures,
            dim,
            bound,
            reference,
            readout,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.signatures.len()
    }
}

/// Gate-gradient signatures of every edge on `examples`, one backward pass
/// per readout coordinate.
pub fn edge_signatures(
    params: &Parameters,
    graph: &ComputationGraph,
    examples: &[TaskExample],
    readout: Readout,
) -> Result<SignatureMatrix> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("signature sample is empty".into()));
    }
    let cfg = &params.config;
    let n = graph.n_edges();
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let batch = SeqBatch::new(&seqs, cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let gates = tape.leaf(Array::full(&[n], 1.0));
    let run = masked_forward_tape(&mut tape, &pv, cfg, graph, gates, &batch, &[], Some(&batch.last_rows))?;
    let logits = tape.value(run.logits).clone();
    let reference = readout.read(&logits, examples);
    let (b, v) = (logits.rows(), logits.cols());
    let m = readout.width();

    let mut signatures = vec![vec![0.0; b * m]; n];
    for (i, ex) in examples.iter().enumerate() {
        let mut cots: Vec<Vec<(usize, f64)>> = match readout {
            Readout::PairMargin => vec![vec![(ex.correct, 1.0), (ex.incorrect, -1.0)]],
            Readout::AnswerLogits => vec![vec![(ex.correct, 1.0)], vec![(ex.incorrect, 1.0)]],
        };
        for (j, entries) in cots.drain(..).enumerate() {
            let mut cot = vec![0.0; b * v];
            for (col, w) in entries {
                cot[i * v + col] += w;
            }
            let grads = tape.vjp(run.logits, &Array::new(vec![b, v], cot)?)?;
            let g = grads.wrt(gates)?;
            for (e, s) in signatures.iter_mut().enumerate() {
                s[i * m + j] = g.data()[e];
            }
        }
    }
    SignatureMatrix::from_rows(signatures, reference, readout)
}

/// `Σ_{e ∈ subset} s_e`.
pub fn subset_sum(sig: &SignatureMatrix, subset: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sig.dim];
    for &e in subset {
        let s = sig.signatures.get(e).ok_or_else(|| {
            Error::Contract(format!("edge {e} outside the {} signed edges", sig.n_edges()))
        })?;
        for (o, x) in out.iter_mut().zip(s) {
            *o += x;
        }
    }
    Ok(out)
}

/// Grid index of each coordinate: `round(v / δ)`, half away from zero.
pub fn quantize_key(v: &[f64], delta: f64) -> Vec<i64> {
    v.iter().map(|x| math::round(x / delta) as i64).collect()
}

/// Nearest point of the grid `δ·Z^D`.
pub fn quantize(v: &[f64], delta: f64) -> Vec<f64> {
    quantize_key(v, delta).into_iter().map(|k| k as f64 * delta).collect()
}

pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, math::abs(x - y)))
}

/// Largest overlap `t` between two size-`s` sets with IoU `t / (2s - t)` at
/// most `τ`; equals `⌊2τs / (1+τ)⌋` in exact arithmetic. The IoU is compared
/// directly because the closed form rounds down at ties such as `τ = 0.6,
/// s = 4`. Accepts `τ ∈ [0, 1]`.
pub fn t_tau(tau: f64, s: usize) -> usize {
    (0..=s)
        .rev()
        .find(|&t| t == 0 || t as f64 / (2 * s - t) as f64 <= tau)
        .unwrap_or(0)
}

/// Number of size-`s` subsets of an `E`-set overlapping a fixed size-`s`
/// subset in more than `t_τ` elements.
pub fn v_tau(n_edges: usize, s: usize, tau: f64) -> u128 {
    let t0 = t_tau(tau, s);
    (t0 + 1..=s)
        .map(|t| binomial(s, t).saturating_mul(binomial(n_edges.saturating_sub(s), s - t)))
        .fold(0u128, u128::saturating_add)
}

/// Upper bound on occupied grid cells for size-`s` subset sums:
/// `(⌈2sB/δ⌉ + 1)^D`, saturating.
pub fn bin_bound(s: usize, bound: f64, delta: f64, dim: usize) -> u128 {
    let per_axis = libm::ceil(2.0 * s as f64 * bound / delta) as u128 + 1;
    (0..dim).fold(1u128, |acc, _| acc.saturating_mul(per_axis))
}

/// Averaging condition guaranteeing a low-overlap collision:
/// `C(E,s) > K·(1 + V_τ)`.
pub fn low_iou_condition(n_edges: usize, s: usize, tau: f64, bins: u128) -> bool {
    binomial(n_edges, s) > bins.saturating_mul(1 + v_tau(n_edges, s, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionWitness {
    pub subset_a: Vec<usize>,
    pub subset_b: Vec<usize>,
    pub norm: f64,
    pub iou: f64,
    pub bin: Vec<i64>,
    pub delta: f64,
    pub tau: Option<f64>,
    pub bucket_size: usize,
    /// Whether the bucket was larger than `1 + V_τ` (low-overlap search only).
    pub bucket_condition_met: Option<bool>,
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|x| b.contains(x)).count()
}

fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let t = overlap(a, b);
    let u = a.len() + b.len() - t;
    if u == 0 {
        1.0
    } else {
        t as f64 / u as f64
    }
}

fn check_budget(n_edges: usize, s: usize, budget: u128) -> Result<()> {
    if s == 0 || s > n_edges {
        return Err(Error::Contract(format!(
            "subset size {s} must be in 1..={n_edges}"
        )));
    }
    let required = binomial(n_edges, s);
    let budget = budget.min(ENUMERATION_LIMIT);
    if required > budget {
        return Err(Error::BudgetExceeded { required, budget });
    }
    Ok(())
}

/// Enumerate all size-`s` subsets, returning the bins in key order.
fn bucket_subsets(sig: &SignatureMatrix, s: usize, delta: f64) -> Result<BTreeMap<Vec<i64>, Vec<Vec<usize>>>> {
    if !(delta > 0.0) {
        return Err(Error::Contract(format!("grid step must be positive, got {delta}")));
    }
    let mut bins: BTreeMap<Vec<i64>, Vec<Vec<usize>>> = BTreeMap::new();
    for c in Combinations::new(sig.n_edges(), s) {
        let key = quantize_key(&subset_sum(sig, &c)?, delta);
        bins.entry(key).or_default().push(c);
    }
    Ok(bins)
}

/// Re-verify a pair from scratch.
fn verify(sig: &SignatureMatrix, a: &[usize], b: &[usize], delta: f64) -> Result<Option<f64>> {
    if a == b || a.len() != b.len() {
        return Ok(None);
    }
    let norm = linf_distance(&subset_sum(sig, a)?, &subset_sum(sig, b)?);
    Ok((norm <= delta).then_some(norm))
}

/// Two distinct size-`s` subsets whose signature sums agree within `δ` in
/// `ℓ∞`, found by grid bucketing. Buckets are scanned in key order and pairs
/// in enumeration order.
pub fn find_collision(sig: &SignatureMatrix, s: usize, delta: f64, budget: u128) -> Result<Option<CollisionWitness>> {
    check_budget(sig.n_edges(), s, budget)?;
    for (key, members) in bucket_subsets(sig, s, delta)? {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if let Some(norm) = verify(sig, &members[i], &members[j], delta)? {
                    return Ok(Some(CollisionWitness {
                        iou: set_iou(&members[i], &members[j]),
                        subset_a: members[i].clone(),
                        subset_b: members[j].clone(),
                        norm,
                        bin: key,
                        delta,
                        tau: None,
                        bucket_size: members.len(),
                        bucket_condition_met: None,
                    }));
                }
            }
        }
    }
    Ok(None)
}

/// Like [`find_collision`] but additionally requires `IoU ≤ τ`, i.e. an
/// overlap of at most `t_τ` edges. Buckets larger than `1 + V_τ` are searched
/// first, since each of them must hold such a pair; the rest follow. The
/// witness records which kind of bucket it came from.
pub fn find_low_iou_collision(
    sig: &SignatureMatrix,
    s: usize,
    delta: f64,
    tau: f64,
    budget: u128,
) -> Result<Option<CollisionWitness>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("overlap threshold {tau} outside [0, 1]")));
    }
    check_budget(sig.n_edges(), s, budget)?;
    let t_max = t_tau(tau, s);
    let v = v_tau(sig.n_edges(), s, tau);
    let bins = bucket_subsets(sig, s, delta)?;
    let large = |m: &Vec<Vec<usize>>| m.len() as u128 > 1 + v;
    let ordered = bins.iter().filter(|(_, m)| large(m)).chain(bins.iter().filter(|(_, m)| !large(m)));
    for (key, members) in ordered {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let (a, b) = (&members[i], &members[j]);
                if overlap(a, b) > t_max {
                    continue;
                }
                let iou = set_iou(a, b);
                if iou > tau {
                    continue;
                }
                if let Some(norm) = verify(sig, a, b, delta)? {
                    return Ok(Some(CollisionWitness {
                        subset_a: a.clone(),
                        subset_b: b.clone(),
                        norm,
                        iou,
                        bin: key.clone(),
                        delta,
                        tau: Some(tau),
                        bucket_size: members.len(),
                        bucket_condition_met: Some(large(members)),
                    }));
                }
            }
        }
    }
    Ok(None)
}

/// Signatures drawn uniformly from `[-bound, bound]`.
pub fn random_signatures(n_edges: usize, dim: usize, bound: f64, seed: u64) -> Result<SignatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n_edges)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..=bound)).collect())
        .collect();
    SignatureMatrix::from_rows(rows, vec![0.0; dim], Readout::AnswerLogits)
}

/// Every edge carries the same signature `value`.
pub fn identical_signatures(n_edges: usize, value: &[f64]) -> Result<SignatureMatrix> {
    SignatureMatrix::from_rows(vec![value.to_vec(); n_edges], vec![0.0; value.len()], Readout::AnswerLogits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum MarginOutcome {
    Preserved,
    /// The margin conditions held but the argmax moved.
    Violated,
    ConditionUnmet { argmax_unchanged: bool },
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in z.iter().enumerate() {
        if *x > z[best] {
            best = i;
        }
    }
    best
}

/// Gap between the top entry and the runner-up. Errors if the top is tied.
pub fn top_margin(z: &[f64]) -> Result<f64> {
    if z.len() < 2 {
        return Err(Error::Contract("margin needs at least two logits".into()));
    }
    let top = argmax(z);
    let second = z
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if second == z[top] {
        return Err(Error::NonUniqueArgmax);
    }
    Ok(z[top] - second)
}

/// An `ℓ∞` perturbation smaller than half the margin cannot move the argmax.
pub fn check_margin_preservation(z: &[f64], perturbed: &[f64], gamma: f64) -> Result<MarginOutcome> {
    if z.len() != perturbed.len() {
        return Err(Error::Contract(format!(
            "logit vectors differ in length: {} vs {}",
            z.len(),
            perturbed.len()
        )));
    }
    let margin = top_margin(z)?;
    let rho = linf_distance(z, perturbed);
    let unchanged = argmax(z) == argmax(perturbed);
    if margin >= gamma && rho < gamma / 2.0 {
        Ok(if unchanged {
            MarginOutcome::Preserved
        } else {
            MarginOutcome::Violated
        })
    } else {
        Ok(MarginOutcome::ConditionUnmet {
            argmax_unchanged: unchanged,
        })
    }
}

/// First-order prediction of the readout when only `subset` is kept:
/// `Z - Σ_{e ∉ subset} s_e`.
pub fn linear_prediction(sig: &SignatureMatrix, subset: &EdgeMask) -> Result<Vec<f64>> {
    if subset.len() != sig.n_edges() {
        return Err(Error::GateLength {
            expected: sig.n_edges(),
            actual: subset.len(),
        });
    }
    let off: Vec<usize> = subset.complement().indices();
    let removed = subset_sum(sig, &off)?;
    Ok(sig.reference.iter().zip(&removed).map(|(z, r)| z - r).collect())
}

/// Readout of the hard-masked model keeping only `subset`.
pub fn masked_readout(
    params: &Parameters,
    graph: &ComputationGraph,
    subset: &EdgeMask,
    examples: &[TaskExample],
    readout: Readout,
) -> Result<Vec<f64>> {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let logits = masked_final_logits(params, graph, Gates::Hard(subset), &seqs)?;
    Ok(readout.read(&logits, examples))
}

/// `max ‖Z_masked(subset) − (Z − Σ_{e∉subset} s_e)‖_∞` over the sample: how
/// far the true pruned readout is from its first-order model.
pub fn linearization_residual(
    params: &Parameters,
    graph: &ComputationGraph,
    sig: &SignatureMatrix,
    subset: &EdgeMask,
    examples: &[TaskExample],
) -> Result<f64> {
    let actual = masked_readout(params, graph, subset, examples, sig.readout)?;
    if actual.len() != sig.dim {
        return Err(Error::Contract(format!(
            "sample gives {} readout values but signatures have {}",
            actual.len(),
            sig.dim
        )));
    }
    Ok(linf_distance(&actual, &linear_prediction(sig, subset)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_examples() {
        let q = quantize(&[0.26, -0.13], 0.1);
        assert!((q[0] - 0.3).abs() < 1e-12 && (q[1] + 0.1).abs() < 1e-12);
        assert_eq!(quantize_key(&[0.5, -0.5, 1.5], 1.0), [1, -1, 2]);
    }

    #[test]
    fn counting_examples() {
        assert_eq!(t_tau(0.2, 10), 3);
        assert_eq!(t_tau(1.0, 7), 7);
        assert_eq!(v_tau(6, 3, 0.3), 10);
        assert_eq!(v_tau(9, 4, 1.0), 0);
        assert_eq!(bin_bound(4, 1.0, 0.3, 2), 784);
    }

    #[test]
    fn identical_signatures_collide_disjointly() {
        let sig = identical_signatures(4, &[0.7, -0.2]).unwrap();
        let w = find_collision(&sig, 2, 0.01, 100).unwrap().unwrap();
        assert_eq!(w.norm, 0.0);
        let w = find_low_iou_collision(&sig, 2, 0.01, 0.0, 100).unwrap().unwrap();
        assert_eq!(w.iou, 0.0);
        assert_eq!(overlap(&w.subset_a, &w.subset_b), 0);
    }

    #[test]
    fn far_apart_pair_has_no_collision() {
        let sig = SignatureMatrix::from_rows(vec![vec![0.0], vec![5.0]], vec![0.0], Readout::PairMargin).unwrap();
        assert_eq!(find_collision(&sig, 1, 1e-3, 10).unwrap(), None);
    }

    #[test]
    fn budget_is_enforced() {
        let sig = identical_signatures(30, &[1.0]).unwrap();
        match find_collision(&sig, 15, 0.1, u128::MAX) {
            Err(Error::BudgetExceeded { required, budget }) => {
                assert_eq!(required, binomial(30, 15));
                assert_eq!(budget, ENUMERATION_LIMIT);
            }
            other => panic!("expected budget rejection, got {other:?}"),
        }
    }

    #[test]
    fn margin_examples() {
        let z = [2.0, 0.5, 0.0];
        assert_eq!(
            check_margin_preservation(&z, &[1.4, 1.1, 0.3], 1.5).unwrap(),
            MarginOutcome::Preserved
        );
        assert_eq!(check_margin_preservation(&z, &z, 1.5).unwrap(), MarginOutcome::Preserved);
        assert!(matches!(
            check_margin_preservation(&z, &[1.25, 0.5, 0.0], 1.5).unwrap(),
            MarginOutcome::ConditionUnmet { .. }
        ));
        assert!(matches!(
            check_margin_preservation(&[1.0, 1.0], &[1.0, 1.0], 0.1),
            Err(Error::NonUniqueArgmax)
        ));
    }
}
