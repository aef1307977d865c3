//! The four pipelines behind the CLI. Each reads and writes under the
//! experiment's output root and returns a summary for printing.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sheaf_core::analysis::{
    ablation_table, cumulative_overlap, format_percent, intersection_core, layer_profile, minimal_core_search,
    node_iou, pairwise_iou, CoreSearchResult, OverlapReport,
};
use sheaf_core::discovery::{discover, edge_label, oasr_sequence_each, DiscoveryConfig};
use sheaf_core::graph::{build_graph, path_filter, ComputationGraph, EdgeMask};
use sheaf_core::model::{init_model, train};
use sheaf_core::tasks::{filter_solved, model_accuracy, Split, TaskDataset, TaskExample};
use sheaf_core::theory::{
    bin_bound, check_margin_preservation, edge_signatures, find_collision, find_low_iou_collision,
    identical_signatures, linearization_residual, linf_distance, low_iou_condition, random_signatures, subset_sum,
    t_tau, top_margin, v_tau, CollisionWitness, MarginOutcome, SignatureMatrix,
};
use sheaf_core::Parameters;

use crate::config::{ExperimentConfig, SignatureSource};
use crate::error::LabError;
use crate::files::{
    fmt6, read_checkpoint, read_dataset, read_edge_list, read_json, sheaf_path, write_bytes, write_checkpoint,
    write_csv, write_dataset, write_json, SheafRecord, Stamp, DATASET_JSONL,
};

fn stamp(cfg: &ExperimentConfig) -> Stamp {
    Stamp { config_hash: cfg.hash(), seed: cfg.seed }
}

/// Apply `f` to every item on up to `jobs` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub eval_accuracy: f64,
    pub eval_examples: usize,
    pub filtered_examples: usize,
    pub filtered_accuracy: f64,
    pub final_loss: Option<f64>,
}

/// Train the base model, write the checkpoint and the filtered eval set.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, LabError> {
    let root = cfg.output_root();
    let st = stamp(cfg);
    let dataset = cfg.task.generate()?;
    let model_cfg = cfg.model.model_config(&dataset);
    let init = init_model(&model_cfg, cfg.model.seed)?;
    let outcome = train(&init, &dataset.split(Split::Train), &cfg.train.optimizer)?;
    let params = outcome.params;
    let eval = dataset.split(Split::Eval);
    let eval_accuracy = model_accuracy(&params, &eval)?;
    if eval_accuracy < cfg.train.accuracy_floor {
        return Err(LabError::Contract(format!(
            "eval accuracy {eval_accuracy:.4} is below the floor {}",
            cfg.train.accuracy_floor
        )));
    }
    let solved = filter_solved(&params, &dataset)?;
    let filtered = TaskDataset { examples: solved.split(Split::Eval), ..solved };
    let filtered_accuracy = model_accuracy(&params, &filtered.examples)?;
    if filtered_accuracy != 1.0 {
        return Err(LabError::Contract(format!("filtered split scores {filtered_accuracy}, expected 1")));
    }

    write_checkpoint(&root, &params, &st, eval_accuracy)?;
    write_dataset(&root.join(DATASET_JSONL), &filtered, &st)?;
    let rows: Vec<Vec<String>> =
        outcome.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt6(*l)]).collect();
    write_csv(&root.join("train_loss.csv"), &["step", "loss"], &rows, &st)?;
    // Relative root, so the saved config does not depend on where it ran.
    let saved = ExperimentConfig { output_dir: PathBuf::from("."), ..cfg.clone() };
    write_bytes(&root.join("config.toml"), saved.to_toml().as_bytes())?;
    let summary = TrainSummary {
        stamp: st,
        eval_accuracy,
        eval_examples: eval.len(),
        filtered_examples: filtered.examples.len(),
        filtered_accuracy,
        final_loss: outcome.losses.last().copied(),
    };
    write_json(&root.join("train_report.json"), &summary)?;
    Ok(summary)
}

/// Trained model, its graph and the filtered eval prompts.
pub struct Loaded {
    pub params: Parameters,
    pub graph: ComputationGraph,
    pub examples: Vec<TaskExample>,
}

pub fn load_trained(cfg: &ExperimentConfig) -> Result<Loaded, LabError> {
    let root = cfg.output_root();
    let (params, _) = read_checkpoint(&root)?;
    let (dataset, _) = read_dataset(&root.join(DATASET_JSONL))?;
    let expected = cfg.model.model_config(&cfg.task.generate()?);
    if params.config != expected {
        return Err(LabError::Contract(format!(
            "checkpoint model {} does not match the configured model {}",
            params.config.fingerprint(),
            expected.fingerprint()
        )));
    }
    if dataset.examples.is_empty() {
        return Err(LabError::Contract("filtered dataset is empty".into()));
    }
    let graph = build_graph(&params.config);
    Ok(Loaded { params, graph, examples: dataset.examples })
}

#[derive(Debug, Clone)]
pub struct DiscoverOptions {
    pub runs: usize,
    pub oasr: bool,
    pub exclude: Vec<PathBuf>,
    pub jobs: usize,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        Self { runs: 5, oasr: true, exclude: Vec::new(), jobs: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct DiscoverSummary {
    pub dir: PathBuf,
    pub records: Vec<SheafRecord>,
    pub report: OverlapReport,
}

fn overlap_rows(report: &OverlapReport) -> Vec<Vec<String>> {
    report
        .rows
        .iter()
        .map(|r| vec![r.prefix.to_string(), r.e_cap.to_string(), r.e_cup.to_string(), fmt6(r.mutual_iou)])
        .collect()
}

const OVERLAP_HEADER: [&str; 4] = ["runs", "intersection_edges", "union_edges", "mutual_iou"];

/// Discover `runs` sheaves, either as an overlap-repelled sequence or as
/// independent random restarts without repulsion. Records land in
/// `discover/oasr` or `discover/random`.
pub fn cmd_discover(cfg: &ExperimentConfig, opts: &DiscoverOptions) -> Result<DiscoverSummary, LabError> {
    if opts.runs == 0 {
        return Err(LabError::Contract("--runs must be at least 1".into()));
    }
    let st = stamp(cfg);
    let loaded = load_trained(cfg)?;
    let Loaded { params, graph, examples } = &loaded;
    let mut dcfg = cfg.discovery.clone();
    for path in &opts.exclude {
        dcfg.excluded.extend(read_edge_list(path)?);
    }
    dcfg.excluded.sort_unstable();
    dcfg.excluded.dedup();
    let dir = cfg.output_root().join("discover").join(if opts.oasr { "oasr" } else { "random" });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut records = Vec::new();
    let mut failure = None;
    if opts.oasr {
        let mut write_err = None;
        let res = oasr_sequence_each(params, graph, examples, &dcfg, opts.runs, &mut rng, |run, sheaf| {
            let rec = SheafRecord::new(graph, sheaf, run, &st);
            if let Err(e) = write_json(&sheaf_path(&dir, run), &rec) {
                write_err.get_or_insert(e);
            }
            records.push(rec);
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        failure = res.err().map(LabError::from);
    } else {
        dcfg.lambda_overlap = 0.0;
        dcfg.repelled.clear();
        let seeds: Vec<u64> = (0..opts.runs).map(|_| rng.next_u64()).collect();
        let results = parallel_map(&seeds, opts.jobs, |&seed| {
            discover(params, graph, examples, &DiscoveryConfig { seed, ..dcfg.clone() })
        });
        for (run, r) in results.into_iter().enumerate() {
            match r {
                Ok(sheaf) => {
                    let rec = SheafRecord::new(graph, &sheaf, run, &st);
                    write_json(&sheaf_path(&dir, run), &rec)?;
                    records.push(rec);
                }
                Err(e) => {
                    failure.get_or_insert(LabError::Contract(format!("discovery run {run} failed: {e}")));
                }
            }
        }
    }
    if !records.is_empty() {
        let masks = records.iter().map(SheafRecord::mask).collect::<Result<Vec<_>, _>>()?;
        let report = cumulative_overlap(&masks, records.iter().map(|r| r.metrics.clone()).collect())?;
        write_csv(&dir.join("overlap.csv"), &OVERLAP_HEADER, &overlap_rows(&report), &st)?;
        write_pairwise(&dir.join("pairwise_iou.csv"), graph, &masks, &st)?;
        if let Some(e) = failure {
            return Err(e);
        }
        return Ok(DiscoverSummary { dir, records, report });
    }
    Err(failure.unwrap_or_else(|| LabError::Contract("no sheaf was produced".into())))
}

fn write_pairwise(path: &Path, graph: &ComputationGraph, masks: &[EdgeMask], st: &Stamp) -> Result<(), LabError> {
    let edge = pairwise_iou(masks);
    let mut rows = Vec::new();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            rows.push(vec![
                i.to_string(),
                j.to_string(),
                fmt6(edge[i][j]),
                fmt6(node_iou(graph, &masks[i], &masks[j])),
            ]);
        }
    }
    write_csv(path, &["a", "b", "edge_iou", "node_iou"], &rows, st)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub core_search: bool,
    pub ablate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub sources: Vec<String>,
    pub edges: Vec<usize>,
    pub edge_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreSearchRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub threshold: f64,
    pub max_size: usize,
    pub core_edges: Vec<usize>,
    pub found: bool,
    pub edges: Vec<usize>,
    pub edge_labels: Vec<String>,
    pub accuracy: Option<f64>,
    pub evaluated: usize,
    pub verified_smaller: usize,
}

#[derive(Debug, Clone)]
pub struct AnalyzeSummary {
    pub dir: PathBuf,
    pub mean_pairwise_iou: f64,
    pub core: EdgeMask,
    pub core_search: Option<CoreSearchResult>,
}

/// Overlap, profile and core analysis of a set of sheaf records. With one
/// record the core is its path-filtered mask.
pub fn cmd_analyze(cfg: &ExperimentConfig, files: &[PathBuf], opts: &AnalyzeOptions) -> Result<AnalyzeSummary, LabError> {
    let first_path = files.first().ok_or_else(|| LabError::Contract("analyze needs at least one sheaf file".into()))?;
    let records = files.iter().map(|p| read_json::<SheafRecord>(p)).collect::<Result<Vec<_>, _>>()?;
    let first = &records[0];
    for (r, p) in records.iter().zip(files) {
        if r.stamp.config_hash != first.stamp.config_hash || r.model_fingerprint != first.model_fingerprint {
            return Err(LabError::Contract(format!(
                "{} comes from config {} / model {}, {} from {} / {}",
                p.display(),
                r.stamp.config_hash,
                r.model_fingerprint,
                first_path.display(),
                first.stamp.config_hash,
                first.model_fingerprint
            )));
        }
    }
    let masks = records.iter().map(SheafRecord::mask).collect::<Result<Vec<_>, _>>()?;
    let loaded = if opts.core_search || opts.ablate { Some(load_trained(cfg)?) } else { None };
    let graph = match &loaded {
        Some(l) => l.graph.clone(),
        None => graph_for(first.n_edges, cfg)?,
    };
    if graph.n_edges() != first.n_edges {
        return Err(LabError::Contract(format!(
            "records have {} edges but the configured model has {}",
            first.n_edges,
            graph.n_edges()
        )));
    }
    let st = Stamp { config_hash: first.stamp.config_hash.clone(), seed: first.stamp.seed };
    let dir = cfg.output_root().join("analysis");

    let report = cumulative_overlap(&masks, records.iter().map(|r| r.metrics.clone()).collect())?;
    write_csv(&dir.join("overlap.csv"), &OVERLAP_HEADER, &overlap_rows(&report), &st)?;
    write_pairwise(&dir.join("pairwise_iou.csv"), &graph, &masks, &st)?;
    let mut profile = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        let p = layer_profile(&graph, m);
        for (layer, (h, mlp)) in p.head_in.iter().zip(&p.mlp_in).enumerate() {
            profile.push(vec![i.to_string(), format!("layer{layer}.heads"), h.to_string()]);
            profile.push(vec![i.to_string(), format!("layer{layer}.mlp"), mlp.to_string()]);
        }
        profile.push(vec![i.to_string(), "output".into(), p.output_in.to_string()]);
    }
    write_csv(&dir.join("profile.csv"), &["sheaf", "site", "incoming_edges"], &profile, &st)?;

    let core = if masks.len() >= 2 { intersection_core(&graph, &masks)? } else { path_filter(&graph, &masks[0]) };
    let labels = |m: &EdgeMask| m.indices().iter().map(|&e| edge_label(&graph, e)).collect::<Vec<_>>();
    write_json(
        &dir.join("core.json"),
        &CoreRecord {
            stamp: st.clone(),
            sources: files.iter().map(|p| p.display().to_string()).collect(),
            edges: core.indices(),
            edge_labels: labels(&core),
        },
    )?;

    let mut core_search = None;
    if let Some(l) = &loaded {
        if opts.core_search {
            let a = &cfg.analysis;
            let res = minimal_core_search(&l.params, &l.graph, &core, &l.examples, a.core_threshold, a.core_max_size)?;
            let empty = EdgeMask::empty(l.graph.n_edges());
            let found = res.subset.as_ref().unwrap_or(&empty);
            write_json(
                &dir.join("core_search.json"),
                &CoreSearchRecord {
                    stamp: st.clone(),
                    threshold: a.core_threshold,
                    max_size: a.core_max_size,
                    core_edges: core.indices(),
                    found: res.subset.is_some(),
                    edges: found.indices(),
                    edge_labels: labels(found),
                    accuracy: res.accuracy,
                    evaluated: res.evaluated,
                    verified_smaller: res.verified_smaller,
                },
            )?;
            core_search = Some(res);
        }
        if opts.ablate {
            let rows = ablation_table(&l.params, &l.graph, &l.graph.full_mask(), &core, &l.examples)?;
            let rows: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let removed: Vec<String> = r.removed.iter().map(|&e| edge_label(&l.graph, e)).collect();
                    vec![removed.join(" "), r.kept_core_count.to_string(), fmt6(r.accuracy)]
                })
                .collect();
            write_csv(&dir.join("ablation.csv"), &["removed", "kept_core_edges", "accuracy"], &rows, &st)?;
        }
    }
    Ok(AnalyzeSummary { dir, mean_pairwise_iou: report.mean_pairwise_iou(), core, core_search })
}

/// Graph of the configured model, used when no checkpoint is needed.
fn graph_for(n_edges: usize, cfg: &ExperimentConfig) -> Result<ComputationGraph, LabError> {
    let g = ComputationGraph::new(cfg.model.n_layers, cfg.model.n_heads);
    if g.n_edges() != n_edges {
        return Err(LabError::Contract(format!(
            "records have {n_edges} edges; a {}-layer {}-head model has {}",
            cfg.model.n_layers,
            cfg.model.n_heads,
            g.n_edges()
        )));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryMode {
    Collision,
    LowIou,
    Margin,
    Residual,
}

impl TheoryMode {
    pub fn file_name(self) -> &'static str {
        match self {
            TheoryMode::Collision => "collision.json",
            TheoryMode::LowIou => "low_iou.json",
            TheoryMode::Margin => "margin.json",
            TheoryMode::Residual => "residual.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessReport {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub mode: TheoryMode,
    pub source: SignatureSource,
    pub instance_hash: String,
    pub n_edges: usize,
    pub dim: usize,
    pub signature_bound: f64,
    pub subset_size: usize,
    pub delta: f64,
    pub tau: Option<f64>,
    /// Upper bound on the number of occupied quantisation bins.
    pub bin_bound: String,
    pub subsets: String,
    pub overlap_limit: Option<usize>,
    pub neighbours: Option<String>,
    pub averaging_condition: Option<bool>,
    pub witness: Option<CollisionWitness>,
    /// `‖S(A) − S(B)‖_∞` recomputed from the signatures.
    pub recomputed_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub mode: TheoryMode,
    pub trials: usize,
    pub preserved: usize,
    pub violated: usize,
    pub condition_unmet: usize,
    /// Perturbation of exactly half the margin is outside the hypothesis.
    pub boundary_condition_unmet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub kept_edges: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub mode: TheoryMode,
    pub sample_size: usize,
    /// Smallest reference margin over the sample.
    pub reference_margin: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub rows: Vec<ResidualRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TheorySummary {
    Witness(WitnessReport),
    Margin(MarginReport),
    Residual(ResidualReport),
}

fn signatures(cfg: &ExperimentConfig) -> Result<SignatureMatrix, LabError> {
    let t = &cfg.theory;
    Ok(match t.source {
        SignatureSource::Model => {
            let l = load_trained(cfg)?;
            let n = t.sample_size.min(l.examples.len());
            edge_signatures(&l.params, &l.graph, &l.examples[..n], t.readout)?
        }
        SignatureSource::Random => random_signatures(t.n_edges, t.dim, t.bound, cfg.seed)?,
        SignatureSource::Identical => identical_signatures(t.n_edges, &vec![t.bound; t.dim])?,
    })
}

fn recompute_norm(sig: &SignatureMatrix, w: &CollisionWitness) -> Result<f64, LabError> {
    Ok(linf_distance(&subset_sum(sig, &w.subset_a)?, &subset_sum(sig, &w.subset_b)?))
}

/// Run one theory verifier and write its report under `theory/`.
pub fn cmd_theory(cfg: &ExperimentConfig, mode: TheoryMode, jobs: usize) -> Result<TheorySummary, LabError> {
    let st = stamp(cfg);
    let path = cfg.output_root().join("theory").join(mode.file_name());
    let t = &cfg.theory;
    let summary = match mode {
        TheoryMode::Collision | TheoryMode::LowIou => {
            let sig = signatures(cfg)?;
            let budget = u128::from(t.budget);
            let s = t.subset_size;
            let bins = bin_bound(s, sig.bound, t.delta, sig.dim);
            let low = mode == TheoryMode::LowIou;
            let witness = if low {
                find_low_iou_collision(&sig, s, t.delta, t.tau, budget)?
            } else {
                find_collision(&sig, s, t.delta, budget)?
            };
            let recomputed_norm = witness.as_ref().map(|w| recompute_norm(&sig, w)).transpose()?;
            if let (Some(w), Some(n)) = (&witness, recomputed_norm) {
                if n > t.delta {
                    return Err(LabError::Contract(format!("witness gap {n} exceeds delta {}", t.delta)));
                }
                if low && w.iou > t.tau {
                    return Err(LabError::Contract(format!("witness IoU {} exceeds tau {}", w.iou, t.tau)));
                }
            }
            TheorySummary::Witness(WitnessReport {
                stamp: st,
                mode,
                source: t.source,
                instance_hash: sheaf_core::model::hex16(serde_json::to_string(&sig)?.as_bytes()),
                n_edges: sig.n_edges(),
                dim: sig.dim,
                signature_bound: sig.bound,
                subset_size: s,
                delta: t.delta,
                tau: low.then_some(t.tau),
                bin_bound: bins.to_string(),
                subsets: sheaf_core::analysis::binomial(sig.n_edges(), s).to_string(),
                overlap_limit: low.then(|| t_tau(t.tau, s)),
                neighbours: low.then(|| v_tau(sig.n_edges(), s, t.tau).to_string()),
                averaging_condition: low.then(|| low_iou_condition(sig.n_edges(), s, t.tau, bins)),
                witness,
                recomputed_norm,
            })
        }
        TheoryMode::Margin => {
            let report = margin_trials(t.margin_trials, cfg.seed)?;
            if report.violated > 0 {
                write_json(&path, &MarginReport { stamp: st, ..report.clone() })?;
                return Err(LabError::Contract(format!("{} margin violations", report.violated)));
            }
            TheorySummary::Margin(MarginReport { stamp: st, ..report })
        }
        TheoryMode::Residual => {
            if t.source != SignatureSource::Model {
                return Err(LabError::Contract("residual mode needs `theory.source = \"model\"`".into()));
            }
            let l = load_trained(cfg)?;
            let sample = &l.examples[..t.sample_size.min(l.examples.len())];
            let sig = edge_signatures(&l.params, &l.graph, sample, t.readout)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let subsets: Vec<EdgeMask> = (0..t.residual_subsets)
                .map(|_| EdgeMask::from_bits((0..l.graph.n_edges()).map(|_| rng.random_bool(0.5)).collect()))
                .collect();
            let etas = parallel_map(&subsets, jobs, |m| linearization_residual(&l.params, &l.graph, &sig, m, sample));
            let rows = subsets
                .iter()
                .zip(etas)
                .map(|(m, eta)| Ok(ResidualRow { kept_edges: m.count(), residual: eta? }))
                .collect::<Result<Vec<_>, LabError>>()?;
            let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
            let mean_residual = rows.iter().map(|r| r.residual).sum::<f64>() / rows.len().max(1) as f64;
            TheorySummary::Residual(ResidualReport {
                stamp: st,
                mode,
                sample_size: sample.len(),
                reference_margin: sig.readout.min_margin(&sig.reference),
                max_residual,
                mean_residual,
                rows,
            })
        }
    };
    match &summary {
        TheorySummary::Witness(r) => write_json(&path, r)?,
        TheorySummary::Margin(r) => write_json(&path, r)?,
        TheorySummary::Residual(r) => write_json(&path, r)?,
    }
    Ok(summary)
}

/// Random logit vectors with a unique top entry, perturbed by strictly less
/// than half their margin in every coordinate.
pub fn margin_trials(trials: usize, seed: u64) -> Result<MarginReport, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut preserved, mut violated, mut unmet) = (0, 0, 0);
    let mut done = 0;
    while done < trials {
        let dim = rng.random_range(2..=8);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let Ok(margin) = top_margin(&z) else { continue };
        let gamma = margin * rng.random_range(0.05..=1.0);
        let radius = rng.random_range(0.0..1.0) * gamma / 2.0;
        let perturbed: Vec<f64> = z.iter().map(|x| x + rng.random_range(-radius..=radius)).collect();
        match check_margin_preservation(&z, &perturbed, gamma)? {
            MarginOutcome::Preserved => preserved += 1,
            MarginOutcome::Violated => violated += 1,
            MarginOutcome::ConditionUnmet { .. } => unmet += 1,
        }
        done += 1;
    }
    let z = [2.0, 0.5, 0.0];
    let boundary = check_margin_preservation(&z, &[1.25, 0.5, 0.0], 1.5)?;
    Ok(MarginReport {
        stamp: Stamp { config_hash: String::new(), seed },
        mode: TheoryMode::Margin,
        trials,
        preserved,
        violated,
        condition_unmet: unmet,
        boundary_condition_unmet: matches!(boundary, MarginOutcome::ConditionUnmet { .. }),
    })
}

/// One-line description of a sheaf for terminal output.
pub fn describe_sheaf(rec: &SheafRecord) -> String {
    format!(
        "run {} edges {} density {} acc {:.3} complement {:.3}",
        rec.run,
        rec.metrics.edge_count,
        format_percent(rec.metrics.density),
        rec.metrics.accuracy,
        rec.metrics.complement_accuracy
    )
}
