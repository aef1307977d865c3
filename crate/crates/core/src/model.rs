//! Bias-free, normalization-free decoder-only transformer.
//!
//! Every block adds head and MLP outputs straight onto the residual stream:
//! `x_mid = x + Σ_h head_h(x)`, `x_next = x_mid + mlp(x_mid)`, and the logits
//! are `x_final · W_U`. Learned absolute position embeddings are added to the
//! token embeddings before the first block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::Array;
use crate::batch::SeqBatch;
use crate::error::{Error, Result};
use crate::math;
use crate::optim::Adam;
use crate::tape::{Tape, Var};
use crate::tasks::TaskExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear MLPs; used for exactness fixtures.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(2, 2, 32, 40, 12, 0)
    }
}

impl ModelConfig {
    /// Config with `d_head = d_model / n_heads` and `d_mlp = 4 * d_model`.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: if n_heads == 0 { 0 } else { d_model / n_heads },
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len,
            seed,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "n_heads * d_head = {} * {} != d_model = {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    /// Stable short hash identifying the architecture (and init seed).
    pub fn fingerprint(&self) -> String {
        let canonical = format!(
            "L={};H={};d={};dh={};dm={};V={};n={};seed={};act={:?}",
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
            self.seed,
            self.activation
        );
        hex16(canonical.as_bytes())
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn hex16(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Array,
    pub w_k: Array,
    pub w_v: Array,
    pub w_o: Array,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w_in: Array,
    pub w_out: Array,
}

/// All learned weights. Heads are stored layer-major: `heads[layer * H + h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub config: ModelConfig,
    pub embed: Array,
    pub pos_embed: Array,
    pub unembed: Array,
    pub heads: Vec<HeadParams>,
    pub mlps: Vec<MlpParams>,
}

impl Parameters {
    /// `(name, array)` in canonical order. Checkpoints use this order.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        let h = self.config.n_heads;
        let mut out: Vec<(String, &Array)> =
            vec![("embed".into(), &self.embed), ("pos_embed".into(), &self.pos_embed)];
        for layer in 0..self.config.n_layers {
            for head in 0..h {
                let p = &self.heads[layer * h + head];
                for (suffix, a) in [("w_q", &p.w_q), ("w_k", &p.w_k), ("w_v", &p.w_v), ("w_o", &p.w_o)] {
                    out.push((format!("blocks.{layer}.heads.{head}.{suffix}"), a));
                }
            }
            let m = &self.mlps[layer];
            out.push((format!("blocks.{layer}.mlp.w_in"), &m.w_in));
            out.push((format!("blocks.{layer}.mlp.w_out"), &m.w_out));
        }
        out.push(("unembed".into(), &self.unembed));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut out: Vec<&mut Array> = vec![&mut self.embed, &mut self.pos_embed];
        let mut heads = self.heads.iter_mut();
        for m in self.mlps.iter_mut() {
            for p in heads.by_ref().take(self.config.n_heads) {
                out.extend([&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o]);
            }
            out.extend([&mut m.w_in, &mut m.w_out]);
        }
        out.push(&mut self.unembed);
        out
    }

    /// Expected `(name, shape)` list for a config, in canonical order.
    pub fn manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, dh, dm, v) = (config.d_model, config.d_head, config.d_mlp, config.vocab_size);
        let mut out = vec![
            ("embed".into(), vec![v, d]),
            ("pos_embed".into(), vec![config.max_seq_len, d]),
        ];
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                for (suffix, shape) in [
                    ("w_q", vec![d, dh]),
                    ("w_k", vec![d, dh]),
                    ("w_v", vec![d, dh]),
                    ("w_o", vec![dh, d]),
                ] {
                    out.push((format!("blocks.{layer}.heads.{head}.{suffix}"), shape));
                }
            }
            out.push((format!("blocks.{layer}.mlp.w_in"), vec![d, dm]));
            out.push((format!("blocks.{layer}.mlp.w_out"), vec![dm, d]));
        }
        out.push(("unembed".into(), vec![d, v]));
        out
    }

    /// Rebuild from arrays in canonical order, checking every shape.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<Array>) -> Result<Self> {
        config.validate()?;
        let manifest = Self::manifest(&config);
        if manifest.len() != arrays.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} arrays, got {}",
                manifest.len(),
                arrays.len()
            )));
        }
        for ((name, shape), a) in manifest.iter().zip(&arrays) {
            if a.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    a.shape()
                )));
            }
            if !a.all_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("length checked");
        let embed = next();
        let pos_embed = next();
        let mut heads = Vec::new();
        let mut mlps = Vec::new();
        for _ in 0..config.n_layers {
            for _ in 0..config.n_heads {
                heads.push(HeadParams {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                });
            }
            mlps.push(MlpParams {
                w_in: next(),
                w_out: next(),
            });
        }
        let unembed = next();
        Ok(Self {
            config,
            embed,
            pos_embed,
            unembed,
            heads,
            mlps,
        })
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadParams {
        &self.heads[layer * self.config.n_heads + head]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadParams {
        let h = self.config.n_heads;
        &mut self.heads[layer * h + head]
    }

    pub fn parameter_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }
}

/// Draw weights from N(0, 0.02²), with std 0.02/√L for the two output
/// projections (`w_o`, `w_out`).
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, 0.02).expect("valid std");
    let out_std = 0.02 / math::sqrt(config.n_layers as f64);
    let proj = Normal::new(0.0, out_std).expect("valid std");
    let arrays = Parameters::manifest(config)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let dist = if name.ends_with("w_o") || name.ends_with("w_out") {
                &proj
            } else {
                &base
            };
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Array::from_parts(shape, data)
        })
        .collect();
    Parameters::from_arrays(config.clone(), arrays)
}

/// Parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub pos_embed: Var,
    pub unembed: Var,
    /// `[w_q, w_k, w_v, w_o]`, layer-major.
    pub heads: Vec<[Var; 4]>,
    /// `[w_in, w_out]` per layer.
    pub mlps: Vec<[Var; 2]>,
}

impl ParamVars {
    /// Record every weight as a leaf (`differentiable`) or a constant.
    pub fn record(tape: &mut Tape, params: &Parameters, differentiable: bool) -> Self {
        let mut put = |a: &Array| {
            if differentiable {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let embed = put(&params.embed);
        let pos_embed = put(&params.pos_embed);
        let heads = params
            .heads
            .iter()
            .map(|h| [put(&h.w_q), put(&h.w_k), put(&h.w_v), put(&h.w_o)])
            .collect();
        let mlps = params
            .mlps
            .iter()
            .map(|m| [put(&m.w_in), put(&m.w_out)])
            .collect();
        let unembed = put(&params.unembed);
        Self {
            embed,
            pos_embed,
            unembed,
            heads,
            mlps,
        }
    }

    /// Vars in canonical order.
    pub fn all(&self, config: &ModelConfig) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos_embed];
        for layer in 0..config.n_layers {
            for head in 0..config.n_heads {
                out.extend(self.heads[layer * config.n_heads + head]);
            }
            out.extend(self.mlps[layer]);
        }
        out.push(self.unembed);
        out
    }
}

/// Token plus position embeddings: the output of the graph's input node.
pub fn embed_tokens(tape: &mut Tape, pv: &ParamVars, batch: &SeqBatch) -> Result<Var> {
    let tok = tape.gather_rows(pv.embed, &batch.tokens)?;
    let pos = tape.gather_rows(pv.pos_embed, &batch.positions)?;
    tape.add(tok, pos)
}

/// One attention head applied to its input stream.
pub fn head_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    index: usize,
    input: Var,
    batch: &SeqBatch,
) -> Result<Var> {
    let [wq, wk, wv, wo] = pv.heads[index];
    let q = tape.matmul(input, wq)?;
    let k = tape.matmul(input, wk)?;
    let v = tape.matmul(input, wv)?;
    let scale = 1.0 / math::sqrt(config.d_head as f64);
    let z = tape.causal_attention(q, k, v, &batch.segments, scale)?;
    tape.matmul(z, wo)
}

pub fn mlp_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    input: Var,
) -> Result<Var> {
    let [w_in, w_out] = pv.mlps[layer];
    let pre = tape.matmul(input, w_in)?;
    let act = match config.activation {
        Activation::Relu => tape.relu(pre)?,
        Activation::Identity => pre,
    };
    tape.matmul(act, w_out)
}

/// Logits from a residual stream, optionally only at the given rows.
pub fn unembed(tape: &mut Tape, pv: &ParamVars, resid: Var, rows: Option<&[usize]>) -> Result<Var> {
    let r = match rows {
        Some(rows) => tape.gather_rows(resid, rows)?,
        None => resid,
    };
    tape.matmul(r, pv.unembed)
}

/// Residual-stream forward pass; returns the final stream (rows × d).
pub fn residual_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    batch: &SeqBatch,
) -> Result<Var> {
    let mut x = embed_tokens(tape, pv, batch)?;
    for layer in 0..config.n_layers {
        let mut mid = x;
        for h in 0..config.n_heads {
            let out = head_forward(tape, pv, config, layer * config.n_heads + h, x, batch)?;
            mid = tape.add(mid, out)?;
        }
        let m = mlp_forward(tape, pv, config, layer, mid)?;
        x = tape.add(mid, m)?;
    }
    Ok(x)
}

/// Logits at every position of one sequence (n × V).
pub fn forward_full(params: &Parameters, tokens: &[usize]) -> Result<Array> {
    let cfg = &params.config;
    let batch = SeqBatch::new(&[tokens], cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let resid = residual_forward(&mut tape, &pv, cfg, &batch)?;
    let logits = unembed(&mut tape, &pv, resid, None)?;
    Ok(tape.value(logits).clone())
}

/// Final-position logits for each sequence (B × V).
pub fn final_logits<S: AsRef<[usize]>>(params: &Parameters, seqs: &[S]) -> Result<Array> {
    let cfg = &params.config;
    let batch = SeqBatch::new(seqs, cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let resid = residual_forward(&mut tape, &pv, cfg, &batch)?;
    let logits = unembed(&mut tape, &pv, resid, Some(&batch.last_rows))?;
    Ok(tape.value(logits).clone())
}

/// Per-component outputs of a full forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct ResidualTrace {
    pub input: Array,
    /// Layer-major head outputs.
    pub heads: Vec<Array>,
    pub mlps: Vec<Array>,
    pub final_stream: Array,
    pub logits: Array,
}

pub fn forward_trace(params: &Parameters, tokens: &[usize]) -> Result<ResidualTrace> {
    let cfg = &params.config;
    let batch = SeqBatch::new(&[tokens], cfg.vocab_size, cfg.max_seq_len)?;
    let mut tape = Tape::new();
    let pv = ParamVars::record(&mut tape, params, false);
    let input = embed_tokens(&mut tape, &pv, &batch)?;
    let mut heads = Vec::new();
    let mut mlps = Vec::new();
    let mut x = input;
    for layer in 0..cfg.n_layers {
        let mut mid = x;
        for h in 0..cfg.n_heads {
            let out = head_forward(&mut tape, &pv, cfg, layer * cfg.n_heads + h, x, &batch)?;
            heads.push(tape.value(out).clone());
            mid = tape.add(mid, out)?;
        }
        let m = mlp_forward(&mut tape, &pv, cfg, layer, mid)?;
        mlps.push(tape.value(m).clone());
        x = tape.add(mid, m)?;
    }
    let logits = unembed(&mut tape, &pv, x, None)?;
    Ok(ResidualTrace {
        input: tape.value(input).clone(),
        heads,
        mlps,
        final_stream: tape.value(x).clone(),
        logits: tape.value(logits).clone(),
    })
}

/// `logits[last, correct] - logits[last, incorrect]`. Accepts an n × V matrix
/// or a single row.
pub fn answer_margin(logits: &Array, correct: usize, incorrect: usize) -> f64 {
    let last = logits.row(logits.rows() - 1);
    last[correct] - last[incorrect]
}

/// Mean cross-entropy of `targets` under final-position `logits` (B × V),
/// recorded on the tape.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax_rows(logits)?;
    let value = tape.value(lp);
    let (b, v) = (value.rows(), value.cols());
    if targets.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: value.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut select = vec![0.0; b * v];
    for (i, &t) in targets.iter().enumerate() {
        select[i * v + t] = -1.0 / b as f64;
    }
    let sel = tape.constant(Array::from_parts(vec![b, v], select));
    let picked = tape.mul(lp, sel)?;
    tape.sum(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Cosine-anneal the learning rate from `lr` to `lr * final_lr_ratio`.
    pub final_lr_ratio: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 3000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            final_lr_ratio: 0.05,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    /// Loss or gradient became non-finite; `checkpoint` holds the last
    /// finite parameters.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        checkpoint: alloc::boxed::Box<Parameters>,
        losses: Vec<f64>,
    },
}

/// Adam on the cross-entropy of the correct answer at the final position.
/// Batches are drawn with replacement from `examples`.
pub fn train(
    params: &Parameters,
    examples: &[TaskExample],
    config: &TrainConfig,
) -> core::result::Result<TrainOutcome, TrainError> {
    // Zero steps is a no-op; config files still require at least one.
    if config.steps == 0 {
        return Ok(TrainOutcome {
            params: params.clone(),
            losses: Vec::new(),
        });
    }
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset("no training examples".into()).into());
    }
    let cfg = params.config.clone();
    let mut current = params.clone();
    let mut opt = Adam::new(
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
        Some(config.clip_norm),
    );
    opt.weight_decay = config.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let picks: Vec<&TaskExample> = (0..config.batch_size)
            .map(|_| &examples[rand::Rng::random_range(&mut rng, 0..examples.len())])
            .collect();
        let seqs: Vec<&[usize]> = picks.iter().map(|e| e.tokens.as_slice()).collect();
        let targets: Vec<usize> = picks.iter().map(|e| e.correct).collect();
        let batch = SeqBatch::new(&seqs, cfg.vocab_size, cfg.max_seq_len)?;

        let mut tape = Tape::new();
        let pv = ParamVars::record(&mut tape, &current, true);
        let resid = residual_forward(&mut tape, &pv, &cfg, &batch)?;
        let logits = unembed(&mut tape, &pv, resid, Some(&batch.last_rows))?;
        let loss = cross_entropy(&mut tape, logits, &targets)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let grad_arrays = pv
            .all(&cfg)
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect::<Result<Vec<_>>>()?;
        if !value.is_finite() || grad_arrays.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::Diverged {
                step,
                checkpoint: alloc::boxed::Box::new(current),
                losses,
            });
        }
        losses.push(value);
        let progress = step as f64 / config.steps as f64;
        let cosine = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
        opt.lr = config.lr * (config.final_lr_ratio + (1.0 - config.final_lr_ratio) * cosine);
        let grad_slices: Vec<&[f64]> = grad_arrays.iter().map(|g| g.data()).collect();
        let mut arrays = current.arrays_mut();
        let mut slices: Vec<&mut [f64]> = arrays.iter_mut().map(|a| a.data_mut()).collect();
        opt.step(&mut slices, &grad_slices);
    }
    Ok(TrainOutcome {
        params: current,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(2, 2, 8, 10, 6, 0)
    }

    #[test]
    fn init_is_seeded() {
        let a = init_model(&tiny(), 1).unwrap();
        assert_eq!(a, init_model(&tiny(), 1).unwrap());
        assert_ne!(a, init_model(&tiny(), 2).unwrap());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::new(2, 2, 32, 40, 12, 0);
        let p = init_model(&cfg, 0).unwrap();
        assert_eq!(p.embed.shape(), &[40, 32]);
        assert_eq!(p.unembed.shape(), &[32, 40]);
        assert_eq!(p.heads.len(), 4);
        for h in &p.heads {
            assert_eq!(h.w_q.shape(), &[32, 16]);
            assert_eq!(h.w_k.shape(), &[32, 16]);
            assert_eq!(h.w_v.shape(), &[32, 16]);
            assert_eq!(h.w_o.shape(), &[16, 32]);
        }
        for m in &p.mlps {
            assert_eq!(m.w_in.shape(), &[32, 128]);
            assert_eq!(m.w_out.shape(), &[128, 32]);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = tiny();
        cfg.d_head = 3;
        assert!(matches!(init_model(&cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn margin_arithmetic() {
        let logits = Array::matrix(2, 3, vec![9.0, 9.0, 9.0, 2.0, 0.5, 0.0]).unwrap();
        assert_eq!(answer_margin(&logits, 0, 1), 1.5);
        assert_eq!(answer_margin(&logits, 2, 2), 0.0);
    }

    #[test]
    fn token_out_of_range_rejected() {
        let p = init_model(&tiny(), 0).unwrap();
        assert!(matches!(
            forward_full(&p, &[1, 10]),
            Err(Error::TokenOutOfRange { token: 10, .. })
        ));
    }
}
