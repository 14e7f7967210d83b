//! Synthetic tasks with exact labels, the shared token vocabulary, and the
//! held-out evaluation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::rule_judge;
use crate::model::Transformer;
use crate::rollout::greedy_decode;
use crate::seeding;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
const EQUALS: u32 = 2;
const PLUS: u32 = 3;
const MOD: u32 = 4;
const COPY: u32 = 5;
const SORT: u32 = 6;
const PARITY: u32 = 7;
const DIGIT0: u32 = 8;
const LETTER_A: u32 = 18;
const LETTERS: u32 = 8;

/// Number of distinct token ids.
pub const VOCAB_SIZE: usize = 26;
pub const MAX_DIFFICULTY: usize = 4;

const SYMBOLS: [&str; 8] = ["<bos>", "<eos>", "=", "+", "mod", "copy:", "sort:", "parity:"];

pub fn token_text(id: u32) -> String {
    match id {
        0..=7 => SYMBOLS[id as usize].to_string(),
        8..=17 => (id - DIGIT0).to_string(),
        18..=25 => char::from(b'a' + (id - LETTER_A) as u8).to_string(),
        _ => format!("<{id}>"),
    }
}

/// Renders response tokens as text, stopping at end-of-sequence.
pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t != BOS)
        .map(|&t| token_text(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of [`decode`] for answer text; unknown words are rejected.
pub fn encode_answer(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            if let Ok(d) = w.parse::<u32>() {
                if d < 10 {
                    return Ok(DIGIT0 + d);
                }
            }
            let bytes = w.as_bytes();
            if bytes.len() == 1 && (b'a'..b'a' + LETTERS as u8).contains(&bytes[0]) {
                return Ok(LETTER_A + (bytes[0] - b'a') as u32);
            }
            Err(Error::Domain(format!("`{w}` is not an answer token")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ModularArithmetic,
    SequenceCopy,
    Sorting,
    Parity,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] =
        [TaskFamily::ModularArithmetic, TaskFamily::SequenceCopy, TaskFamily::Sorting, TaskFamily::Parity];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModularArithmetic => "modular-arithmetic",
            TaskFamily::SequenceCopy => "sequence-copy",
            TaskFamily::Sorting => "sorting",
            TaskFamily::Parity => "parity",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    /// Longest prompt (in tokens, including `<bos>` and `=`) at `difficulty`.
    pub fn max_prompt_len(self, difficulty: usize) -> usize {
        match self {
            TaskFamily::ModularArithmetic => 7,
            TaskFamily::SequenceCopy | TaskFamily::Sorting => 3 + seq_len(difficulty),
            TaskFamily::Parity => 3 + parity_len(difficulty),
        }
    }

    /// Longest answer (in tokens, including `<eos>`) at `difficulty`.
    pub fn max_answer_len(self, difficulty: usize) -> usize {
        match self {
            TaskFamily::ModularArithmetic | TaskFamily::Parity => 2,
            TaskFamily::SequenceCopy | TaskFamily::Sorting => seq_len(difficulty) + 1,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("tasks.families", format!("unknown task family `{s}`")))
    }
}

fn seq_len(difficulty: usize) -> usize {
    1 + difficulty
}

fn parity_len(difficulty: usize) -> usize {
    2 + difficulty
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub question_id: u64,
    pub task_family: TaskFamily,
    pub prompt: Vec<u32>,
    pub prompt_text: String,
    pub label: String,
}

impl TaskInstance {
    /// Label tokens followed by `<eos>`.
    pub fn answer_tokens(&self) -> Vec<u32> {
        let mut out = encode_answer(&self.label).expect("labels use answer tokens");
        out.push(EOS);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Question ids: family in bits 40.., split in bit 32, sequence number below.
pub fn question_id(family: TaskFamily, split: Split, n: u64) -> u64 {
    (family.index() << 40) | ((split == Split::Eval) as u64) << 32 | n
}

pub fn split_of(question_id: u64) -> Split {
    if question_id >> 32 & 1 == 1 { Split::Eval } else { Split::Train }
}

fn letters(rng: &mut impl Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| LETTER_A + rng.random_range(0..LETTERS)).collect()
}

fn make_instance(family: TaskFamily, id: u64, rng: &mut impl Rng, difficulty: usize) -> TaskInstance {
    let join = |ts: &[u32]| ts.iter().map(|&t| token_text(t)).collect::<Vec<_>>().join(" ");
    let (body, prompt_text, label) = match family {
        TaskFamily::ModularArithmetic => {
            let max_operand = (2 + 2 * difficulty).min(9) as u32;
            let modulus = rng.random_range(2..=(3 + difficulty as u32).min(9));
            let a = rng.random_range(0..=max_operand);
            let b = rng.random_range(0..=max_operand);
            (
                vec![DIGIT0 + a, PLUS, DIGIT0 + b, MOD, DIGIT0 + modulus],
                format!("({a} + {b}) mod {modulus}"),
                ((a + b) % modulus).to_string(),
            )
        }
        TaskFamily::SequenceCopy => {
            let seq = letters(rng, seq_len(difficulty));
            let mut body = vec![COPY];
            body.extend(&seq);
            (body, format!("copy: {}", join(&seq)), join(&seq))
        }
        TaskFamily::Sorting => {
            let seq = letters(rng, seq_len(difficulty));
            let mut sorted = seq.clone();
            sorted.sort();
            let mut body = vec![SORT];
            body.extend(&seq);
            (body, format!("sort: {}", join(&seq)), join(&sorted))
        }
        TaskFamily::Parity => {
            let digits: Vec<u32> = (0..parity_len(difficulty)).map(|_| rng.random_range(0..4)).collect();
            let tokens: Vec<u32> = digits.iter().map(|d| DIGIT0 + d).collect();
            let sum: u32 = digits.iter().sum();
            let mut body = vec![PARITY];
            body.extend(&tokens);
            (body, format!("parity: {}", join(&tokens)), (sum % 4).to_string())
        }
    };
    let mut prompt = vec![BOS];
    prompt.extend(body);
    prompt.push(EQUALS);
    TaskInstance { question_id: id, task_family: family, prompt, prompt_text, label }
}

fn generate(family: TaskFamily, count: usize, difficulty: usize, seed: u64, split: Split) -> Result<Vec<TaskInstance>> {
    if count == 0 {
        return Err(Error::Domain("task count must be at least 1".into()));
    }
    if !(1..=MAX_DIFFICULTY).contains(&difficulty) {
        return Err(Error::config("tasks.difficulty", format!("{difficulty} outside 1..={MAX_DIFFICULTY}")));
    }
    let label = format!("tasks/{}/{:?}", family.name(), split);
    let mut rng = seeding::rng_for(seed, &label);
    Ok((0..count as u64)
        .map(|n| make_instance(family, question_id(family, split, n), &mut rng, difficulty))
        .collect())
}

/// Training-split instances of one family.
pub fn generate_tasks(family: TaskFamily, count: usize, difficulty: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    generate(family, count, difficulty, seed, Split::Train)
}

/// Held-out instances; ids never collide with [`generate_tasks`].
pub fn generate_eval_tasks(family: TaskFamily, count: usize, difficulty: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    generate(family, count, difficulty, seed, Split::Eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_family: BTreeMap<TaskFamily, FamilyScore>,
    pub overall: f64,
    pub count: usize,
}

/// Greedy-decodes every instance and scores it with the rule judge.
pub fn evaluate(model: &Transformer, instances: &[TaskInstance], max_new_tokens: usize) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let scores = instances
        .par_iter()
        .map(|inst| {
            let tokens = greedy_decode(model, &inst.prompt, max_new_tokens)?;
            let verdict = rule_judge(&inst.prompt_text, &decode(&tokens), &inst.label);
            Ok((inst.task_family, verdict.score >= 0.5))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_family: BTreeMap<TaskFamily, FamilyScore> = BTreeMap::new();
    for (family, correct) in scores {
        let entry = per_family.entry(family).or_insert(FamilyScore { correct: 0, total: 0, accuracy: 0.0 });
        entry.total += 1;
        entry.correct += correct as usize;
    }
    let mut correct = 0;
    for s in per_family.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
        correct += s.correct;
    }
    Ok(EvalReport { per_family, overall: correct as f64 / instances.len() as f64, count: instances.len() })
}
