//! Residual-stream computation graph and masked execution.
//!
//! Nodes are the input embedding, every attention head, every MLP and the
//! output. A reader's input is the gated sum of its upstream outputs; a pruned
//! edge contributes exactly zero and there is no implicit skip path.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::batch::SeqBatch;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ParamVars, Parameters};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeKind {
    pub fn name(&self) -> String {
        match *self {
            NodeKind::Input => "input".into(),
            NodeKind::Head { layer, head } => format!("a{layer}.h{head}"),
            NodeKind::Mlp { layer } => format!("m{layer}"),
            NodeKind::Output => "output".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Topological order: input, then per layer its heads and MLP, then output.
    pub nodes: Vec<NodeKind>,
    /// Sorted by destination, then source.
    pub edges: Vec<Edge>,
    /// Incoming edge indices per node, ascending.
    pub incoming: Vec<Vec<usize>>,
    pub outgoing: Vec<Vec<usize>>,
}

/// Closed-form `|E|` for a config.
pub fn count_edges(config: &ModelConfig) -> usize {
    let (l, h) = (config.n_layers, config.n_heads);
    let per_layer: usize = (0..l)
        .map(|i| h * (1 + i * (h + 1)) + 1 + i * (h + 1) + h)
        .sum();
    per_layer + 1 + l * (h + 1)
}

pub fn build_graph(config: &ModelConfig) -> ComputationGraph {
    ComputationGraph::new(config.n_layers, config.n_heads)
}

impl ComputationGraph {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        let mut nodes = vec![NodeKind::Input];
        for layer in 0..n_layers {
            for head in 0..n_heads {
                nodes.push(NodeKind::Head { layer, head });
            }
            nodes.push(NodeKind::Mlp { layer });
        }
        nodes.push(NodeKind::Output);

        let feeds = |src: NodeKind, dst: NodeKind| -> bool {
            match (src, dst) {
                (NodeKind::Output, _) | (_, NodeKind::Input) => false,
                (NodeKind::Input, _) => true,
                (_, NodeKind::Output) => true,
                (NodeKind::Head { layer: s, .. }, NodeKind::Head { layer: d, .. }) => s < d,
                (NodeKind::Mlp { layer: s }, NodeKind::Head { layer: d, .. }) => s < d,
                (NodeKind::Head { layer: s, .. }, NodeKind::Mlp { layer: d }) => s <= d,
                (NodeKind::Mlp { layer: s }, NodeKind::Mlp { layer: d }) => s < d,
            }
        };
        let mut edges = Vec::new();
        let mut incoming = vec![Vec::new(); nodes.len()];
        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (d, &dst) in nodes.iter().enumerate() {
            for (s, &src) in nodes.iter().enumerate().take(d) {
                if feeds(src, dst) {
                    incoming[d].push(edges.len());
                    outgoing[s].push(edges.len());
                    edges.push(Edge { src: s, dst: d });
                }
            }
        }
        Self {
            n_layers,
            n_heads,
            nodes,
            edges,
            incoming,
            outgoing,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_names(&self) -> Vec<String> {
        self.nodes.iter().map(NodeKind::name).collect()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name() == name)
    }

    pub fn head_node(&self, layer: usize, head: usize) -> usize {
        1 + layer * (self.n_heads + 1) + head
    }

    pub fn mlp_node(&self, layer: usize) -> usize {
        1 + layer * (self.n_heads + 1) + self.n_heads
    }

    pub fn edge_index(&self, src: usize, dst: usize) -> Option<usize> {
        self.incoming
            .get(dst)?
            .iter()
            .copied()
            .find(|&e| self.edges[e].src == src)
    }

    /// Look up an edge by node names, e.g. `("input", "m0")`.
    pub fn edge_by_name(&self, src: &str, dst: &str) -> Option<usize> {
        self.edge_index(self.node_index(src)?, self.node_index(dst)?)
    }

    pub fn edge_names(&self, e: usize) -> (String, String) {
        let edge = self.edges[e];
        (self.nodes[edge.src].name(), self.nodes[edge.dst].name())
    }

    pub fn full_mask(&self) -> EdgeMask {
        EdgeMask::full(self.n_edges())
    }

    pub fn empty_mask(&self) -> EdgeMask {
        EdgeMask::empty(self.n_edges())
    }

    fn check_config(&self, config: &ModelConfig) -> Result<()> {
        if config.n_layers != self.n_layers || config.n_heads != self.n_heads {
            return Err(Error::InvalidConfig(format!(
                "graph built for L={}, H={} but model has L={}, H={}",
                self.n_layers, self.n_heads, config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }
}

/// One bit per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeMask {
    bits: Vec<bool>,
}

impl EdgeMask {
    pub fn full(n: usize) -> Self {
        Self {
            bits: vec![true; n],
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            bits: vec![false; n],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = Self::empty(n);
        for i in indices {
            if i >= n {
                return Err(Error::Contract(format!(
                    "edge index {i} out of range for {n} edges"
                )));
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, e: usize) -> bool {
        self.bits[e]
    }

    pub fn set(&mut self, e: usize, on: bool) {
        self.bits[e] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.iter_ones().collect()
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.len(), other.len(), "edge masks of different graphs");
        Self {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// 0/1 gate values.
    pub fn gates(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// `complement(complement(m)) == m`.
pub fn complement(mask: &EdgeMask) -> EdgeMask {
    mask.complement()
}

/// Gate values for masked execution.
#[derive(Debug, Clone, Copy)]
pub enum Gates<'a> {
    Hard(&'a EdgeMask),
    /// Per-edge reals in `[0, 1]`.
    Soft(&'a [f64]),
}

impl Gates<'_> {
    pub fn values(&self, n_edges: usize) -> Result<Vec<f64>> {
        let values = match self {
            Gates::Hard(m) => m.gates(),
            Gates::Soft(s) => {
                if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Contract(format!("soft gate {v} outside [0, 1]")));
                }
                s.to_vec()
            }
        };
        if values.len() != n_edges {
            return Err(Error::GateLength {
                expected: n_edges,
                actual: values.len(),
            });
        }
        Ok(values)
    }
}

/// Values produced by one masked pass.
#[derive(Debug, Clone)]
pub struct MaskedRun {
    /// Gated input sum per node (`None` for the input node).
    pub node_inputs: Vec<Option<Var>>,
    /// Output per node; the output node's entry is its input stream.
    pub node_outputs: Vec<Var>,
    pub logits: Var,
}

/// Masked execution recorded on a tape.
///
/// `gates` must be a vector with one entry per edge. `patches` replaces the
/// value an edge carries, `(edge, replacement source output)`; the gate still
/// applies. With `rows`, logits are computed only at those rows.
#[allow(clippy::too_many_arguments)]
pub fn masked_forward_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    graph: &ComputationGraph,
    gates: Var,
    batch: &SeqBatch,
    patches: &[(usize, Var)],
    rows: Option<&[usize]>,
) -> Result<MaskedRun> {
    graph.check_config(config)?;
    let g = tape.value(gates);
    if g.shape() != [graph.n_edges()] {
        return Err(Error::GateLength {
            expected: graph.n_edges(),
            actual: g.len(),
        });
    }
    let shape = [batch.rows(), config.d_model];
    let mut node_inputs: Vec<Option<Var>> = vec![None; graph.n_nodes()];
    let mut node_outputs: Vec<Var> = Vec::with_capacity(graph.n_nodes());
    for (u, kind) in graph.nodes.iter().enumerate() {
        if *kind == NodeKind::Input {
            node_outputs.push(model::embed_tokens(tape, pv, batch)?);
            continue;
        }
        let terms: Vec<(usize, Var)> = graph.incoming[u]
            .iter()
            .map(|&e| {
                let src = patches
                    .iter()
                    .find(|(pe, _)| *pe == e)
                    .map(|&(_, v)| v)
                    .unwrap_or(node_outputs[graph.edges[e].src]);
                (e, src)
            })
            .collect();
        let input = tape.weighted_sum(gates, &terms, &shape)?;
        node_inputs[u] = Some(input);
        let out = match *kind {
            NodeKind::Head { layer, head } => {
                model::head_forward(tape, pv, config, layer * config.n_heads + head, input, batch)?
            }
            NodeKind::Mlp { layer } => model::mlp_forward(tape, pv, config, layer, input)?,
            NodeKind::Output | NodeKind::Input => input,
        };
        node_outputs.push(out);
    }
    let stream = node_outputs[graph.output()];
    let logits = model::unembed(tape, pv, stream, rows)?;
    Ok(MaskedRun {
        node_inputs,
        node_outputs,
        logits,
    })
}

/// Logits at every position (n × V) of one sequence under the given gates.
pub fn masked_forward(
    params: &Parameters,
    graph: &ComputationGraph,
    gates: Gates<'_>,
    tokens: &[usize],
) -> Result<Array> {
    let cfg = &params.config;
    let values = gates.values(graph.n_edges())?;
    let batch = SeqBatch::new(&[tokens], cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let g = tape.constant(Array::vector(values));
    let run = masked_forward_tape(&mut tape, &pv, cfg, graph, g, &batch, &[], None)?;
    Ok(tape.value(run.logits).clone())
}

/// Final-position logits (B × V) for each sequence under the given gates.
pub fn masked_final_logits<S: AsRef<[usize]>>(
    params: &Parameters,
    graph: &ComputationGraph,
    gates: Gates<'_>,
    seqs: &[S],
) -> Result<Array> {
    let cfg = &params.config;
    let values = gates.values(graph.n_edges())?;
    let batch = SeqBatch::new(seqs, cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let g = tape.constant(Array::vector(values));
    let run = masked_forward_tape(
        &mut tape,
        &pv,
        cfg,
        graph,
        g,
        &batch,
        &[],
        Some(&batch.last_rows),
    )?;
    Ok(tape.value(run.logits).clone())
}

/// Edges lying on at least one input → output path that uses only edges of
/// `mask`.
pub fn path_filter(graph: &ComputationGraph, mask: &EdgeMask) -> EdgeMask {
    let n = graph.n_nodes();
    let walk = |start: usize, forward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let adj = if forward {
                &graph.outgoing[u]
            } else {
                &graph.incoming[u]
            };
            for &e in adj {
                if !mask.get(e) {
                    continue;
                }
                let edge = graph.edges[e];
                let v = if forward { edge.dst } else { edge.src };
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    };
    let from_input = walk(0, true);
    let to_output = walk(graph.output(), false);
    let mut out = EdgeMask::empty(graph.n_edges());
    for e in mask.iter_ones() {
        let edge = graph.edges[e];
        if from_input[edge.src] && to_output[edge.dst] {
            out.set(e, true);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheafMetrics {
    pub accuracy: f64,
    pub complement_accuracy: f64,
    pub density: f64,
    pub edge_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub method: String,
    pub config_hash: String,
}

/// A discovered mechanism: binary edge mask plus how it was found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sheaf {
    pub mask: EdgeMask,
    /// Mask logits that produced the mask; excluded edges are `-inf`.
    pub logits: Option<Vec<f64>>,
    pub metrics: SheafMetrics,
    pub provenance: Provenance,
}

impl Sheaf {
    pub fn new(
        mask: EdgeMask,
        logits: Option<Vec<f64>>,
        accuracy: f64,
        complement_accuracy: f64,
        provenance: Provenance,
    ) -> Self {
        let metrics = SheafMetrics {
            accuracy,
            complement_accuracy,
            density: mask.density(),
            edge_count: mask.count(),
        };
        Self {
            mask,
            logits,
            metrics,
            provenance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(g: &ComputationGraph) -> Vec<(String, String)> {
        (0..g.n_edges()).map(|e| g.edge_names(e)).collect()
    }

    #[test]
    fn single_layer_single_head_edges() {
        let g = ComputationGraph::new(1, 1);
        let expected: Vec<(String, String)> = [
            ("input", "a0.h0"),
            ("input", "m0"),
            ("a0.h0", "m0"),
            ("input", "output"),
            ("a0.h0", "output"),
            ("m0", "output"),
        ]
        .iter()
        .map(|(a, b)| ((*a).into(), (*b).into()))
        .collect();
        assert_eq!(names(&g), expected);
    }

    #[test]
    fn edge_counts() {
        for l in 1..5 {
            for h in 1..5 {
                let cfg = ModelConfig::new(l, h, 4 * h, 5, 4, 0);
                let g = build_graph(&cfg);
                assert_eq!(g.n_edges(), count_edges(&cfg));
                assert_eq!(g.incoming[g.output()].len(), 1 + l * (h + 1));
            }
        }
        assert_eq!(count_edges(&ModelConfig::new(2, 2, 4, 5, 4, 0)), 26);
    }

    #[test]
    fn path_filter_examples() {
        let g = ComputationGraph::new(1, 1);
        let e = |a: &str, b: &str| g.edge_by_name(a, b).unwrap();
        let chain = EdgeMask::from_indices(6, [e("input", "m0"), e("m0", "output")]).unwrap();
        assert_eq!(path_filter(&g, &chain), chain);
        let dangling = EdgeMask::from_indices(6, [e("input", "m0")]).unwrap();
        assert_eq!(path_filter(&g, &dangling).count(), 0);
        let split = EdgeMask::from_indices(6, [e("input", "a0.h0"), e("m0", "output")]).unwrap();
        assert_eq!(path_filter(&g, &split).count(), 0);
    }

    #[test]
    fn mask_algebra() {
        let m = EdgeMask::from_indices(5, [0, 3]).unwrap();
        assert_eq!(m.complement().count(), 3);
        assert_eq!(m.complement().complement(), m);
        assert_eq!(EdgeMask::full(4).complement(), EdgeMask::empty(4));
        assert!(EdgeMask::from_indices(5, [7]).is_err());
    }
}
