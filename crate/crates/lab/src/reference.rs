//! Published reference values from large pretrained models, shipped as a
//! fixture. Only their arithmetic is reproduced here; the toy model is not
//! expected to match them.

use serde::Deserialize;
use sheaf_core::analysis::{format_percent, iou_from_counts, kept_core_count};

pub const PUBLISHED_REFERENCE: &str = include_str!("../fixtures/published_reference.json");

#[derive(Debug, Clone, Deserialize)]
pub struct Published {
    pub note: String,
    pub two_sheaves: TwoSheaves,
    pub core_ablation: CoreAblation,
    pub node_overlap: Vec<NodeOverlapRow>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PublishedSheaf {
    pub name: String,
    pub accuracy: f64,
    pub complement_accuracy: f64,
    pub edge_density: f64,
    pub edge_count: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TwoSheaves {
    pub sheaves: Vec<PublishedSheaf>,
    pub intersection: usize,
    pub union: usize,
    pub reported_iou: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AblationRow {
    pub removed: Vec<String>,
    pub kept_core_edges: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CoreAblation {
    pub core: Vec<String>,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NodeOverlapRow {
    pub task: String,
    pub node_iou: f64,
    pub node_density_a: f64,
    pub node_density_b: f64,
    pub edge_iou: f64,
}

pub fn published() -> Published {
    serde_json::from_str(PUBLISHED_REFERENCE).expect("bundled fixture parses")
}

/// Result of re-deriving the published figures.
#[derive(Debug, Clone, PartialEq)]
pub struct Reproduction {
    pub iou: f64,
    pub iou_text: String,
    pub iou_matches: bool,
    /// `(stored, recomputed)` kept-core counts per ablation row.
    pub kept_counts: Vec<(usize, usize)>,
    /// Tasks whose node IoU does not exceed their edge IoU.
    pub node_not_above_edge: Vec<String>,
}

impl Reproduction {
    pub fn all_match(&self) -> bool {
        self.iou_matches && self.kept_counts.iter().all(|(a, b)| a == b) && self.node_not_above_edge.is_empty()
    }
}

pub fn reproduce(p: &Published) -> Reproduction {
    let iou = iou_from_counts(p.two_sheaves.intersection, p.two_sheaves.union);
    let iou_text = format_percent(iou);
    // Core edges are named; map them to positions to reuse the counting rule.
    let index = |name: &String| p.core_ablation.core.iter().position(|c| c == name).unwrap_or(usize::MAX);
    let core: Vec<usize> = (0..p.core_ablation.core.len()).collect();
    let kept_counts = p
        .core_ablation
        .rows
        .iter()
        .map(|r| (r.kept_core_edges, kept_core_count(&core, &r.removed.iter().map(index).collect::<Vec<_>>())))
        .collect();
    let node_not_above_edge =
        p.node_overlap.iter().filter(|r| r.node_iou <= r.edge_iou).map(|r| r.task.clone()).collect();
    Reproduction { iou_matches: iou_text == p.two_sheaves.reported_iou, iou, iou_text, kept_counts, node_not_above_edge }
}
