//! Synthetic pair-discrimination tasks with task-local vocabularies.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{masked_final_logits, ComputationGraph, Gates};
use crate::model::{final_logits, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ioi,
    Agreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Abba,
    Baba,
    Singular,
    Plural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoiVariant {
    Abba,
    Baba,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskExample {
    pub tokens: Vec<usize>,
    pub correct: usize,
    pub incorrect: usize,
    pub template_id: usize,
    pub variant: Variant,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: TaskKind,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub examples: Vec<TaskExample>,
}

impl TaskDataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<TaskExample> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }

    pub fn with_variant(&self, variant: Variant) -> TaskDataset {
        TaskDataset {
            examples: self
                .examples
                .iter()
                .filter(|e| e.variant == variant)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        let words: Vec<&str> = tokens.iter().map(|&t| self.vocab[t].as_str()).collect();
        words.join(" ")
    }

    pub fn token(&self, word: &str) -> Option<usize> {
        self.vocab.iter().position(|w| w == word)
    }
}

const IOI_STRUCTURE: [&str; 13] = [
    "then", "and", "went", "to", "gave", "when", "got", "at", "it", "had", "argument", "after",
    "said",
];
const NAMES: [&str; 12] = [
    "Mary", "John", "Alice", "Bob", "Clara", "David", "Emma", "Frank", "Grace", "Henry", "Irene",
    "Jack",
];
const PLACES: [&str; 5] = ["store", "garden", "school", "park", "office"];
const OBJECTS: [&str; 5] = ["drink", "ring", "book", "kite", "ball"];

#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    First,
    Second,
    Repeat,
    Place,
    Object,
}

use Slot::{First as X, Object as O, Place as P, Repeat as R, Second as Y, Word as W};

const IOI_TEMPLATES: [&[Slot]; 4] = [
    &[W("then"), X, W("and"), Y, W("went"), W("to"), P, R, W("gave"), O, W("to")],
    &[W("when"), X, W("and"), Y, W("got"), O, W("at"), P, R, W("gave"), W("it"), W("to")],
    &[W("then"), X, W("and"), Y, W("had"), W("argument"), W("after"), R, W("said"), W("to")],
    &[W("after"), X, W("and"), Y, W("went"), W("to"), P, R, W("gave"), O, W("to")],
];

fn ioi_vocab() -> Vec<String> {
    IOI_STRUCTURE
        .iter()
        .chain(&NAMES)
        .chain(&PLACES)
        .chain(&OBJECTS)
        .map(|s| String::from(*s))
        .collect()
}

fn vocab_id(vocab: &[String], word: &str) -> usize {
    vocab
        .iter()
        .position(|w| w == word)
        .expect("template word in vocabulary")
}

/// Every distinct prompt of one variant, in a fixed order.
fn enumerate_ioi(vocab: &[String], variant: Variant) -> Vec<TaskExample> {
    let name_ids: Vec<usize> = NAMES.iter().map(|n| vocab_id(vocab, n)).collect();
    let place_ids: Vec<usize> = PLACES.iter().map(|n| vocab_id(vocab, n)).collect();
    let object_ids: Vec<usize> = OBJECTS.iter().map(|n| vocab_id(vocab, n)).collect();
    let mut out = Vec::new();
    for (template_id, template) in IOI_TEMPLATES.iter().enumerate() {
        let uses_place = template.iter().any(|s| matches!(s, Slot::Place));
        let uses_object = template.iter().any(|s| matches!(s, Slot::Object));
        let places: &[usize] = if uses_place { &place_ids } else { &place_ids[..1] };
        let objects: &[usize] = if uses_object { &object_ids } else { &object_ids[..1] };
        for &a in &name_ids {
            for &b in &name_ids {
                if a == b {
                    continue;
                }
                // ABBA: X=A, Y=B, repeat B. BABA: X=B, Y=A, repeat B.
                let (x, y) = match variant {
                    Variant::Abba => (a, b),
                    _ => (b, a),
                };
                for &place in places {
                    for &object in objects {
                        let tokens = template
                            .iter()
                            .map(|slot| match *slot {
                                Slot::Word(w) => vocab_id(vocab, w),
                                Slot::First => x,
                                Slot::Second => y,
                                Slot::Repeat => b,
                                Slot::Place => place,
                                Slot::Object => object,
                            })
                            .collect();
                        out.push(TaskExample {
                            tokens,
                            correct: a,
                            incorrect: b,
                            template_id,
                            variant,
                            split: Split::Train,
                        });
                    }
                }
            }
        }
    }
    out
}

fn draw(mut pool: Vec<TaskExample>, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TaskExample>> {
    if n > pool.len() {
        return Err(Error::NotEnoughCombinations {
            requested: n,
            available: pool.len(),
        });
    }
    pool.shuffle(rng);
    pool.truncate(n);
    Ok(pool)
}

/// Tag the last `n / 5` examples as the eval split.
fn tag_eval(examples: &mut [TaskExample]) {
    let n = examples.len();
    for e in &mut examples[n - n / 5..] {
        e.split = Split::Eval;
    }
}

/// IOI-style prompts: `X and Y ... R gave ... to`, where `R` repeats one of
/// the two names and the answer is the other one.
pub fn generate_ioi(n: usize, seed: u64, variant: IoiVariant) -> Result<TaskDataset> {
    let vocab = ioi_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = match variant {
        IoiVariant::Abba => draw(enumerate_ioi(&vocab, Variant::Abba), n, &mut rng)?,
        IoiVariant::Baba => draw(enumerate_ioi(&vocab, Variant::Baba), n, &mut rng)?,
        IoiVariant::Mixed => {
            let half = n / 2;
            let mut all = draw(enumerate_ioi(&vocab, Variant::Abba), n - half, &mut rng)?;
            all.extend(draw(enumerate_ioi(&vocab, Variant::Baba), half, &mut rng)?);
            all.shuffle(&mut rng);
            all
        }
    };
    tag_eval(&mut examples);
    Ok(TaskDataset {
        task: TaskKind::Ioi,
        seed,
        vocab,
        examples,
    })
}

const NOUNS: [(&str, &str); 6] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
    ("bird", "birds"),
];
const FILLERS: [&str; 6] = ["near", "the", "old", "red", "tree", "house"];
const VERBS: (&str, &str) = ("is", "are");

fn agreement_vocab() -> Vec<String> {
    let mut v: Vec<String> = Vec::new();
    for (s, p) in NOUNS {
        v.push(s.into());
        v.push(p.into());
    }
    v.extend(FILLERS.iter().map(|s| String::from(*s)));
    v.push(VERBS.0.into());
    v.push(VERBS.1.into());
    v
}

/// Number agreement: `noun filler{1,3}` followed by the verb form matching
/// the noun's number.
pub fn generate_agreement(n: usize, seed: u64) -> Result<TaskDataset> {
    let vocab = agreement_vocab();
    let sg_verb = vocab_id(&vocab, VERBS.0);
    let pl_verb = vocab_id(&vocab, VERBS.1);
    let filler_ids: Vec<usize> = FILLERS.iter().map(|f| vocab_id(&vocab, f)).collect();
    let mut fill_seqs: Vec<Vec<usize>> = Vec::new();
    for len in 1..=3u32 {
        let count = filler_ids.len().pow(len);
        for mut code in 0..count {
            let mut seq = Vec::new();
            for _ in 0..len {
                seq.push(filler_ids[code % filler_ids.len()]);
                code /= filler_ids.len();
            }
            fill_seqs.push(seq);
        }
    }
    let mut pool = Vec::new();
    for (noun_index, (s, p)) in NOUNS.iter().enumerate() {
        for (word, variant) in [(*s, Variant::Singular), (*p, Variant::Plural)] {
            let noun = vocab_id(&vocab, word);
            let (correct, incorrect) = match variant {
                Variant::Singular => (sg_verb, pl_verb),
                _ => (pl_verb, sg_verb),
            };
            for fill in &fill_seqs {
                let mut tokens = alloc::vec![noun];
                tokens.extend_from_slice(fill);
                pool.push(TaskExample {
                    tokens,
                    correct,
                    incorrect,
                    template_id: noun_index,
                    variant,
                    split: Split::Train,
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = draw(pool, n, &mut rng)?;
    tag_eval(&mut examples);
    Ok(TaskDataset {
        task: TaskKind::Agreement,
        seed,
        vocab,
        examples,
    })
}

/// Corrupted counterpart: the two answer names swapped everywhere (IOI), or
/// the subject's number flipped (agreement). The answer pair flips with it.
pub fn corrupt(dataset: &TaskDataset, example: &TaskExample) -> TaskExample {
    let mut out = example.clone();
    match dataset.task {
        TaskKind::Ioi => {
            for t in &mut out.tokens {
                if *t == example.correct {
                    *t = example.incorrect;
                } else if *t == example.incorrect {
                    *t = example.correct;
                }
            }
        }
        TaskKind::Agreement => {
            // Nouns are stored as adjacent (singular, plural) ids.
            let noun = out.tokens[0];
            out.tokens[0] = noun ^ 1;
        }
    }
    out.correct = example.incorrect;
    out.incorrect = example.correct;
    out
}

/// Fraction of examples whose final-position margin is strictly positive.
///
/// `logit_fn` maps a prompt to its logits; a single row or an n × V matrix
/// (last row used).
pub fn evaluate_accuracy<F>(mut logit_fn: F, examples: &[TaskExample]) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<Array>,
{
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for e in examples {
        let logits = logit_fn(&e.tokens)?;
        if crate::model::answer_margin(&logits, e.correct, e.incorrect) > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Margins from final-position logits (B × V), one row per example.
pub fn margins(logits: &Array, examples: &[TaskExample]) -> Vec<f64> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| logits.get(i, e.correct) - logits.get(i, e.incorrect))
        .collect()
}

const CHUNK: usize = 256;

fn chunked_margins(
    examples: &[TaskExample],
    mut logits_for: impl FnMut(&[&[usize]]) -> Result<Array>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(CHUNK) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        out.extend(margins(&logits_for(&seqs)?, chunk));
    }
    Ok(out)
}

fn accuracy_of(margins: &[f64]) -> f64 {
    if margins.is_empty() {
        return 0.0;
    }
    margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64
}

/// Full-model margins, batched.
pub fn model_margins(params: &Parameters, examples: &[TaskExample]) -> Result<Vec<f64>> {
    chunked_margins(examples, |seqs| final_logits(params, seqs))
}

pub fn model_accuracy(params: &Parameters, examples: &[TaskExample]) -> Result<f64> {
    Ok(accuracy_of(&model_margins(params, examples)?))
}

/// Margins under masked execution, batched.
pub fn masked_margins(
    params: &Parameters,
    graph: &ComputationGraph,
    gates: Gates<'_>,
    examples: &[TaskExample],
) -> Result<Vec<f64>> {
    chunked_margins(examples, |seqs| masked_final_logits(params, graph, gates, seqs))
}

pub fn masked_accuracy(
    params: &Parameters,
    graph: &ComputationGraph,
    gates: Gates<'_>,
    examples: &[TaskExample],
) -> Result<f64> {
    Ok(accuracy_of(&masked_margins(params, graph, gates, examples)?))
}

/// Keep only the examples the full model answers correctly.
pub fn filter_solved(params: &Parameters, dataset: &TaskDataset) -> Result<TaskDataset> {
    let m = model_margins(params, &dataset.examples)?;
    let examples: Vec<TaskExample> = dataset
        .examples
        .iter()
        .zip(&m)
        .filter(|(_, &m)| m > 0.0)
        .map(|(e, _)| e.clone())
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "model solves none of the {} examples",
            dataset.examples.len()
        )));
    }
    Ok(TaskDataset {
        examples,
        ..dataset.clone()
    })
}
