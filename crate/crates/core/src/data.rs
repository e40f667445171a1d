//! Synthetic in-context-learning tasks.
//!
//! Every task id binds keys to values, and the binding is drawn fresh for
//! each sample, so an answer can only come from the examples in context. An
//! example is the chunk `[TASK, KEY, VALUE]`; the target question is
//! `[TASK, KEY]` with the value as answer. Of the six examples, two
//! share the target's task (one of them holds the target key) and four come
//! from other task families, all reusing the target key with a different
//! value. Test targets come only from a family never seen in training.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First id after the reserved tokens (PAD, MEM, RET, CALL_RETRIEVAL, EOS).
pub const FIRST_TASK_ID: u32 = 5;
pub const EXAMPLES_PER_SAMPLE: usize = 6;
pub const RELEVANT_PER_SAMPLE: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSpec {
    pub n_families: usize,
    pub tasks_per_family: usize,
    pub n_keys: usize,
    pub n_values: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            n_families: 4,
            tasks_per_family: 32,
            n_keys: 32,
            n_values: 32,
        }
    }
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_families < 3 {
            return Err(Error::Config(format!(
                "need at least 3 task families, got {}",
                self.n_families
            )));
        }
        if self.tasks_per_family == 0 {
            return Err(Error::Config("tasks_per_family must be positive".into()));
        }
        if self.n_keys < 2 || self.n_values < 2 {
            return Err(Error::Config(format!(
                "conflicting bindings need at least 2 keys and 2 values, got {} and {}",
                self.n_keys, self.n_values
            )));
        }
        Ok(())
    }

    /// The last family is held out from training.
    pub fn heldout_family(&self) -> usize {
        self.n_families - 1
    }

    pub fn task_token(&self, family: usize, task: usize) -> u32 {
        FIRST_TASK_ID + (family * self.tasks_per_family + task) as u32
    }

    pub fn family_of(&self, token: u32) -> Option<usize> {
        let i = token.checked_sub(FIRST_TASK_ID)? as usize;
        (i < self.n_families * self.tasks_per_family).then(|| i / self.tasks_per_family)
    }

    pub fn key_token(&self, key: usize) -> u32 {
        FIRST_TASK_ID + (self.n_families * self.tasks_per_family + key) as u32
    }

    pub fn value_token(&self, value: usize) -> u32 {
        self.key_token(self.n_keys) + value as u32
    }

    pub fn value_tokens(&self) -> std::ops::Range<u32> {
        self.value_token(0)..self.value_token(self.n_values)
    }

    /// Smallest model vocabulary that holds every token.
    pub fn vocab_size(&self) -> usize {
        self.value_token(self.n_values) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub task_id: u32,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub relevant: bool,
}

impl IclExample {
    /// The chunk stored in memory: question followed by its answer.
    pub fn chunk_tokens(&self) -> Vec<u32> {
        let mut t = self.question.clone();
        t.extend_from_slice(&self.answer);
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclSample {
    pub examples: Vec<IclExample>,
    pub target_task: u32,
    pub target_question: Vec<u32>,
    pub target_answer: Vec<u32>,
}

impl IclSample {
    /// All example chunks in order, then the target question.
    pub fn full_context(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.examples.iter().flat_map(IclExample::chunk_tokens).collect();
        t.extend_from_slice(&self.target_question);
        t
    }

    pub fn relevant_indices(&self) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].relevant)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_train: usize,
    pub n_test: usize,
    pub mean_full_context_len: f64,
    pub answer_vocab: usize,
    pub heldout_family: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclDataset {
    pub train: Vec<IclSample>,
    pub test: Vec<IclSample>,
    pub stats: DatasetStats,
}

/// Deterministic generation; sample `i` of each split draws from its own stream.
pub fn gen_icl_dataset(seed: u64, n_train: usize, n_test: usize, spec: &VocabSpec) -> Result<IclDataset> {
    spec.validate()?;
    let heldout = spec.heldout_family();
    let train_families: Vec<usize> = (0..spec.n_families).filter(|&f| f != heldout).collect();
    let make = |split: u64, i: usize, target_family: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split << 40) | i as u64);
        let others: Vec<usize> = train_families
            .iter()
            .copied()
            .filter(|&f| f != target_family)
            .collect();
        gen_sample(&mut rng, spec, target_family, &others)
    };
    let train: Vec<IclSample> = (0..n_train)
        .map(|i| make(0, i, train_families[i % train_families.len()]))
        .collect();
    let test: Vec<IclSample> = (0..n_test).map(|i| make(1, i, heldout)).collect();
    let total: usize = train.iter().chain(&test).map(|s| s.full_context().len()).sum();
    let count = n_train + n_test;
    let stats = DatasetStats {
        n_train,
        n_test,
        mean_full_context_len: if count == 0 { 0.0 } else { total as f64 / count as f64 },
        answer_vocab: spec.n_values,
        heldout_family: heldout,
    };
    let heldout_in_train = train
        .iter()
        .any(|s| spec.family_of(s.target_task) == Some(heldout));
    assert!(!heldout_in_train, "held-out family leaked into training targets");
    Ok(IclDataset { train, test, stats })
}

fn question(spec: &VocabSpec, task: u32, key: usize) -> Vec<u32> {
    vec![task, spec.key_token(key)]
}

fn gen_sample(rng: &mut ChaCha8Rng, spec: &VocabSpec, family: usize, others: &[usize]) -> IclSample {
    let task = spec.task_token(family, rng.random_range(0..spec.tasks_per_family));
    let key = rng.random_range(0..spec.n_keys);
    let value = rng.random_range(0..spec.n_values);
    let other_key = (key + rng.random_range(1..spec.n_keys)) % spec.n_keys;
    let mut examples = vec![
        IclExample {
            task_id: task,
            question: question(spec, task, key),
            answer: vec![spec.value_token(value)],
            relevant: true,
        },
        IclExample {
            task_id: task,
            question: question(spec, task, other_key),
            answer: vec![spec.value_token(rng.random_range(0..spec.n_values))],
            relevant: true,
        },
    ];
    for _ in RELEVANT_PER_SAMPLE..EXAMPLES_PER_SAMPLE {
        let f = others[rng.random_range(0..others.len())];
        let t = spec.task_token(f, rng.random_range(0..spec.tasks_per_family));
        let v = (value + rng.random_range(1..spec.n_values)) % spec.n_values;
        examples.push(IclExample {
            task_id: t,
            question: question(spec, t, key),
            answer: vec![spec.value_token(v)],
            relevant: false,
        });
    }
    examples.shuffle(rng);
    IclSample {
        examples,
        target_task: task,
        target_question: question(spec, task, key),
        target_answer: vec![spec.value_token(value)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Relevant,
    Irrelevant,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Record {
    sample: usize,
    role: Role,
    task_id: u32,
    question: Vec<u32>,
    answer: Vec<u32>,
}

/// One JSON record per line: each sample's examples in order, then its target.
pub fn write_jsonl(path: impl AsRef<Path>, samples: &[IclSample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (i, s) in samples.iter().enumerate() {
        for e in &s.examples {
            let rec = Record {
                sample: i,
                role: if e.relevant { Role::Relevant } else { Role::Irrelevant },
                task_id: e.task_id,
                question: e.question.clone(),
                answer: e.answer.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        let rec = Record {
            sample: i,
            role: Role::Target,
            task_id: s.target_task,
            question: s.target_question.clone(),
            answer: s.target_answer.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<IclSample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut samples = Vec::new();
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        if rec.sample != samples.len() {
            return Err(Error::Format(format!(
                "line {}: sample {} out of order (expected {})",
                lineno + 1,
                rec.sample,
                samples.len()
            )));
        }
        match rec.role {
            Role::Target => samples.push(IclSample {
                examples: std::mem::take(&mut examples),
                target_task: rec.task_id,
                target_question: rec.question,
                target_answer: rec.answer,
            }),
            role => examples.push(IclExample {
                task_id: rec.task_id,
                question: rec.question,
                answer: rec.answer,
                relevant: role == Role::Relevant,
            }),
        }
    }
    if !examples.is_empty() {
        return Err(Error::Format("trailing examples without a target record".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ranges_do_not_overlap() {
        let s = VocabSpec::default();
        assert_eq!(s.task_token(0, 0), FIRST_TASK_ID);
        assert_eq!(s.key_token(0), s.task_token(3, 31) + 1);
        assert_eq!(s.value_token(0), s.key_token(31) + 1);
        assert_eq!(s.vocab_size(), 5 + 128 + 64);
        assert_eq!(s.family_of(s.task_token(2, 5)), Some(2));
        assert_eq!(s.family_of(s.key_token(0)), None);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let s = VocabSpec {
            n_values: 1,
            ..VocabSpec::default()
        };
        assert!(gen_icl_dataset(0, 1, 1, &s).is_err());
        let s = VocabSpec {
            n_families: 2,
            ..VocabSpec::default()
        };
        assert!(gen_icl_dataset(0, 1, 1, &s).is_err());
    }
}
