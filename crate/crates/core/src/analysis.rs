//! Overlap metrics, intersection cores, exhaustive core search and ablation
//! tables.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{masked_forward, path_filter, ComputationGraph, EdgeMask, Gates, NodeKind, SheafMetrics};
use crate::model::Parameters;
use crate::tasks::{evaluate_accuracy, masked_accuracy, TaskExample};

/// `|a ∩ b| / |a ∪ b|`, or 1 when both are empty.
pub fn iou(a: &EdgeMask, b: &EdgeMask) -> f64 {
    iou_from_counts(a.intersection(b).count(), a.union(b).count())
}

pub fn iou_from_counts(intersection: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Percentage with one decimal, e.g. `0.040833 -> "4.1%"`.
pub fn format_percent(ratio: f64) -> alloc::string::String {
    format!("{:.1}%", ratio * 100.0)
}

/// Nodes touched by at least one selected edge.
pub fn node_set(graph: &ComputationGraph, mask: &EdgeMask) -> Vec<bool> {
    let mut on = vec![false; graph.n_nodes()];
    for e in mask.iter_ones() {
        let edge = graph.edges[e];
        on[edge.src] = true;
        on[edge.dst] = true;
    }
    on
}

/// IoU over node sets.
pub fn node_iou(graph: &ComputationGraph, a: &EdgeMask, b: &EdgeMask) -> f64 {
    let (na, nb) = (node_set(graph, a), node_set(graph, b));
    let inter = na.iter().zip(&nb).filter(|(x, y)| **x && **y).count();
    let union = na.iter().zip(&nb).filter(|(x, y)| **x || **y).count();
    iou_from_counts(inter, union)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub prefix: usize,
    pub e_cap: usize,
    pub e_cup: usize,
    pub mutual_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub rows: Vec<OverlapRow>,
    pub pairwise: Vec<Vec<f64>>,
    pub quality: Vec<SheafMetrics>,
}

impl OverlapReport {
    /// Mean IoU over unordered pairs; 1 for a single mask.
    pub fn mean_pairwise_iou(&self) -> f64 {
        mean_upper(&self.pairwise)
    }
}

fn mean_upper(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 1.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += m[i][j];
        }
    }
    total / (n * (n - 1) / 2) as f64
}

pub fn pairwise_iou(masks: &[EdgeMask]) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|a| masks.iter().map(|b| iou(a, b)).collect())
        .collect()
}

pub fn mean_pairwise_iou(masks: &[EdgeMask]) -> f64 {
    mean_upper(&pairwise_iou(masks))
}

/// Running intersection and union over prefixes of `masks`.
pub fn cumulative_overlap(masks: &[EdgeMask], quality: Vec<SheafMetrics>) -> Result<OverlapReport> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("overlap report needs at least one sheaf".into()))?;
    let mut cap = first.clone();
    let mut cup = first.clone();
    let mut rows = Vec::with_capacity(masks.len());
    for (i, m) in masks.iter().enumerate() {
        cap = cap.intersection(m);
        cup = cup.union(m);
        let (e_cap, e_cup) = (cap.count(), cup.count());
        rows.push(OverlapRow {
            prefix: i + 1,
            e_cap,
            e_cup,
            mutual_iou: iou_from_counts(e_cap, e_cup),
        });
    }
    Ok(OverlapReport {
        rows,
        pairwise: pairwise_iou(masks),
        quality,
    })
}

/// Path-filtered intersection of all masks.
pub fn intersection_core(graph: &ComputationGraph, masks: &[EdgeMask]) -> Result<EdgeMask> {
    if masks.len() < 2 {
        return Err(Error::Contract(format!(
            "intersection core needs at least two sheaves, got {}",
            masks.len()
        )));
    }
    let cap = masks[1..]
        .iter()
        .fold(masks[0].clone(), |acc, m| acc.intersection(m));
    Ok(path_filter(graph, &cap))
}

pub const CORE_SEARCH_BUDGET: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic `k`-subsets of `0..n`.
pub(crate) struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub(crate) fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            idx: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreSearchResult {
    /// Smallest qualifying subset, if any.
    pub subset: Option<EdgeMask>,
    pub accuracy: Option<f64>,
    /// Subsets evaluated by the search.
    pub evaluated: usize,
    /// Strictly smaller subsets re-checked (and found failing).
    pub verified_smaller: usize,
}

fn subset_mask(n_edges: usize, core: &[usize], pick: &[usize]) -> EdgeMask {
    EdgeMask::from_indices(n_edges, pick.iter().map(|&i| core[i])).expect("core edges in range")
}

/// Smallest subset of `core` (ties: lexicographic in edge index) whose
/// masked accuracy reaches `threshold`, searching sizes `0..=max_size`.
///
/// Before returning, every strictly smaller subset is re-evaluated one prompt
/// at a time and must fail; a passing one is reported as a contract violation.
pub fn minimal_core_search(
    params: &Parameters,
    graph: &ComputationGraph,
    core: &EdgeMask,
    examples: &[TaskExample],
    threshold: f64,
    max_size: usize,
) -> Result<CoreSearchResult> {
    let edges = core.indices();
    let max_size = max_size.min(edges.len());
    let required: u128 = (0..=max_size).map(|k| binomial(edges.len(), k)).sum();
    if required > CORE_SEARCH_BUDGET {
        return Err(Error::BudgetExceeded {
            required,
            budget: CORE_SEARCH_BUDGET,
        });
    }
    let n = graph.n_edges();
    let mut evaluated = 0;
    for size in 0..=max_size {
        for pick in Combinations::new(edges.len(), size) {
            let mask = subset_mask(n, &edges, &pick);
            evaluated += 1;
            let acc = masked_accuracy(params, graph, Gates::Hard(&mask), examples)?;
            if acc >= threshold {
                let verified_smaller = verify_smaller_fail(params, graph, &edges, examples, threshold, size)?;
                return Ok(CoreSearchResult {
                    subset: Some(mask),
                    accuracy: Some(acc),
                    evaluated,
                    verified_smaller,
                });
            }
        }
    }
    Ok(CoreSearchResult {
        subset: None,
        accuracy: None,
        evaluated,
        verified_smaller: 0,
    })
}

fn verify_smaller_fail(
    params: &Parameters,
    graph: &ComputationGraph,
    edges: &[usize],
    examples: &[TaskExample],
    threshold: f64,
    size: usize,
) -> Result<usize> {
    let mut checked = 0;
    for smaller in 0..size {
        for pick in Combinations::new(edges.len(), smaller) {
            let mask = subset_mask(graph.n_edges(), edges, &pick);
            let acc = evaluate_accuracy(
                |t| masked_forward(params, graph, Gates::Hard(&mask), t),
                examples,
            )?;
            if acc >= threshold {
                return Err(Error::Contract(format!(
                    "minimality check failed: smaller subset {:?} reaches accuracy {acc}",
                    mask.indices()
                )));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Accuracy of `base` with `removed` taken out.
pub fn ablate_core(
    params: &Parameters,
    graph: &ComputationGraph,
    base: &EdgeMask,
    removed: &EdgeMask,
    examples: &[TaskExample],
) -> Result<f64> {
    if !removed.is_subset(base) {
        return Err(Error::Contract(
            "ablated edges must be a subset of the base mask".into(),
        ));
    }
    let mask = base.difference(removed);
    masked_accuracy(params, graph, Gates::Hard(&mask), examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub removed: Vec<usize>,
    pub kept_core_count: usize,
    pub accuracy: f64,
}

/// Core edges still present after removing `removed`.
pub fn kept_core_count(core: &[usize], removed: &[usize]) -> usize {
    core.iter().filter(|e| !removed.contains(e)).count()
}

/// Remove every subset of `core` from `base` (smallest subsets first).
pub fn ablation_table(
    params: &Parameters,
    graph: &ComputationGraph,
    base: &EdgeMask,
    core: &EdgeMask,
    examples: &[TaskExample],
) -> Result<Vec<AblationRow>> {
    let edges = core.indices();
    if edges.len() > 16 {
        return Err(Error::BudgetExceeded {
            required: 1u128 << edges.len(),
            budget: 1 << 16,
        });
    }
    let mut rows = Vec::new();
    for size in 0..=edges.len() {
        for pick in Combinations::new(edges.len(), size) {
            let removed: Vec<usize> = pick.iter().map(|&i| edges[i]).collect();
            let rm = EdgeMask::from_indices(graph.n_edges(), removed.iter().copied())?;
            let accuracy = ablate_core(params, graph, base, &rm, examples)?;
            rows.push(AblationRow {
                kept_core_count: kept_core_count(&edges, &removed),
                removed,
                accuracy,
            });
        }
    }
    Ok(rows)
}

/// Selected incoming edges per destination layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub head_in: Vec<usize>,
    pub mlp_in: Vec<usize>,
    pub output_in: usize,
}

impl LayerProfile {
    pub fn total(&self) -> usize {
        self.head_in.iter().sum::<usize>() + self.mlp_in.iter().sum::<usize>() + self.output_in
    }
}

pub fn layer_profile(graph: &ComputationGraph, mask: &EdgeMask) -> LayerProfile {
    let mut p = LayerProfile {
        head_in: vec![0; graph.n_layers],
        mlp_in: vec![0; graph.n_layers],
        output_in: 0,
    };
    for e in mask.iter_ones() {
        match graph.nodes[graph.edges[e].dst] {
            NodeKind::Head { layer, .. } => p.head_in[layer] += 1,
            NodeKind::Mlp { layer } => p.mlp_in[layer] += 1,
            NodeKind::Output => p.output_in += 1,
            NodeKind::Input => unreachable!("input has no incoming edges"),
        }
    }
    p
}
