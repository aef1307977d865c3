//! On-disk formats: checkpoints, datasets, sheaf records and CSV reports.
//!
//! Every file carries the experiment config hash and seed. JSON is written
//! pretty-printed with a trailing newline and fixed field order, so reruns
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sheaf_core::discovery::edge_label;
use sheaf_core::graph::{ComputationGraph, EdgeMask, SheafMetrics};
use sheaf_core::model::hex16;
use sheaf_core::tasks::{TaskDataset, TaskExample, TaskKind};
use sheaf_core::{Array, ModelConfig, Parameters, Sheaf};

use crate::error::LabError;

pub const MODEL_JSON: &str = "model.json";
pub const MODEL_BIN: &str = "model.bin";
pub const DATASET_JSONL: &str = "dataset.jsonl";

/// Identifies which experiment produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), LabError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, LabError> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Contract(format!("{}: {e}", path.display())))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), LabError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::Io(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `model.bin`.
    pub offset: usize,
}

/// `model.json`: describes the raw little-endian `f64` payload in `model.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub model: ModelConfig,
    pub model_fingerprint: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub total_bytes: usize,
    /// Short SHA-256 of `model.bin`.
    pub payload_hash: String,
    pub eval_accuracy: f64,
}

pub fn write_checkpoint(dir: &Path, params: &Parameters, stamp: &Stamp, eval_accuracy: f64) -> Result<(), LabError> {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (name, a) in params.named_arrays() {
        tensors.push(TensorEntry { name, shape: a.shape().to_vec(), offset: bytes.len() });
        for x in a.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = ModelManifest {
        stamp: stamp.clone(),
        model: params.config.clone(),
        model_fingerprint: params.config.fingerprint(),
        dtype: "f64-le".into(),
        tensors,
        total_bytes: bytes.len(),
        payload_hash: hex16(&bytes),
        eval_accuracy,
    };
    write_bytes(&dir.join(MODEL_BIN), &bytes)?;
    write_json(&dir.join(MODEL_JSON), &manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<(Parameters, ModelManifest), LabError> {
    let json = dir.join(MODEL_JSON);
    if !json.exists() {
        return Err(LabError::Contract(format!(
            "no checkpoint at {}; run `train` first",
            json.display()
        )));
    }
    let manifest: ModelManifest = read_json(&json)?;
    let bytes = fs::read(dir.join(MODEL_BIN))?;
    if bytes.len() != manifest.total_bytes || hex16(&bytes) != manifest.payload_hash {
        return Err(LabError::Contract(format!("{} does not match its manifest", MODEL_BIN)));
    }
    let expected = Parameters::manifest(&manifest.model);
    if expected.len() != manifest.tensors.len() {
        return Err(LabError::Contract("tensor list does not match the model config".into()));
    }
    let mut arrays = Vec::with_capacity(expected.len());
    for ((name, shape), t) in expected.iter().zip(&manifest.tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(LabError::Contract(format!("unexpected tensor {} {:?}", t.name, t.shape)));
        }
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(t.offset..t.offset + 8 * n)
            .ok_or_else(|| LabError::Contract(format!("tensor {name} runs past the payload")))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push(Array::new(shape.clone(), data)?);
    }
    Ok((Parameters::from_arrays(manifest.model.clone(), arrays)?, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(flatten)]
    stamp: Stamp,
    task: TaskKind,
    task_seed: u64,
    vocab: Vec<String>,
    n_examples: usize,
}

/// Header line, then one example per line.
pub fn write_dataset(path: &Path, dataset: &TaskDataset, stamp: &Stamp) -> Result<(), LabError> {
    let header = DatasetHeader {
        stamp: stamp.clone(),
        task: dataset.task,
        task_seed: dataset.seed,
        vocab: dataset.vocab.clone(),
        n_examples: dataset.examples.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for e in &dataset.examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<(TaskDataset, Stamp), LabError> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: DatasetHeader = serde_json::from_str(
        lines.next().ok_or_else(|| LabError::Contract(format!("{} is empty", path.display())))?,
    )?;
    let examples = lines.map(serde_json::from_str).collect::<Result<Vec<TaskExample>, _>>()?;
    if examples.len() != header.n_examples {
        return Err(LabError::Contract(format!(
            "{}: header promises {} examples, found {}",
            path.display(),
            header.n_examples,
            examples.len()
        )));
    }
    let dataset = TaskDataset { task: header.task, seed: header.task_seed, vocab: header.vocab, examples };
    Ok((dataset, header.stamp))
}

/// One discovered sheaf as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheafRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub model_fingerprint: String,
    pub run: usize,
    pub method: String,
    /// Seed of this discovery run.
    pub run_seed: u64,
    pub n_edges: usize,
    /// Selected edges, ascending.
    pub edges: Vec<usize>,
    pub edge_labels: Vec<String>,
    pub metrics: SheafMetrics,
    /// Final mask logits; excluded edges are `null`.
    pub logits: Option<Vec<Option<f64>>>,
}

impl SheafRecord {
    pub fn new(graph: &ComputationGraph, sheaf: &Sheaf, run: usize, stamp: &Stamp) -> Self {
        let edges = sheaf.mask.indices();
        Self {
            stamp: stamp.clone(),
            model_fingerprint: sheaf.provenance.config_hash.clone(),
            run,
            method: sheaf.provenance.method.clone(),
            run_seed: sheaf.provenance.seed,
            n_edges: sheaf.mask.len(),
            edge_labels: edges.iter().map(|&e| edge_label(graph, e)).collect(),
            edges,
            metrics: sheaf.metrics.clone(),
            logits: sheaf
                .logits
                .as_ref()
                .map(|l| l.iter().map(|x| x.is_finite().then_some(*x)).collect()),
        }
    }

    pub fn mask(&self) -> Result<EdgeMask, LabError> {
        Ok(EdgeMask::from_indices(self.n_edges, self.edges.iter().copied())?)
    }
}

/// Edge list from any JSON file with an `edges` array (sheaf records, core
/// files).
pub fn read_edge_list(path: &Path) -> Result<Vec<usize>, LabError> {
    #[derive(Deserialize)]
    struct Edges {
        edges: Vec<usize>,
    }
    Ok(read_json::<Edges>(path)?.edges)
}

/// Write rows as CSV with a fixed header. Every row is prefixed with the
/// config hash and seed.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], stamp: &Stamp) -> Result<(), LabError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut full = vec!["config_hash", "seed"];
    full.extend_from_slice(header);
    w.write_record(&full)?;
    let seed = stamp.seed.to_string();
    for row in rows {
        let mut rec = vec![stamp.config_hash.as_str(), seed.as_str()];
        rec.extend(row.iter().map(String::as_str));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.to_string()))?;
    write_bytes(path, &bytes)
}

/// Fixed six-decimal rendering for CSV cells.
pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

pub fn sheaf_path(dir: &Path, run: usize) -> PathBuf {
    dir.join(format!("sheaf_{run:03}.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sheaf_core::model::init_model;
    use sheaf_core::tasks::{generate_ioi, IoiVariant};

    fn stamp() -> Stamp {
        Stamp { config_hash: "abc".into(), seed: 3 }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_model(&ModelConfig::new(2, 2, 8, 10, 6, 1), 1).unwrap();
        write_checkpoint(dir.path(), &p, &stamp(), 0.5).unwrap();
        let (back, manifest) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(manifest.stamp, stamp());
        assert_eq!(manifest.tensors[1].offset, 8 * 10 * 8);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_model(&ModelConfig::new(1, 1, 4, 5, 4, 0), 0).unwrap();
        write_checkpoint(dir.path(), &p, &stamp(), 0.5).unwrap();
        let bin = dir.path().join(MODEL_BIN);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(read_checkpoint(dir.path()).is_err());
        assert!(read_checkpoint(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_ioi(50, 2, IoiVariant::Mixed).unwrap();
        let path = dir.path().join(DATASET_JSONL);
        write_dataset(&path, &d, &stamp()).unwrap();
        let (back, s) = read_dataset(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(s, stamp());
    }

    #[test]
    fn csv_rows_carry_the_stamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&path, &["a", "b"], &[vec!["1".into(), "x,y".into()]], &stamp()).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "config_hash,seed,a,b\nabc,3,1,\"x,y\"\n");
    }
}
