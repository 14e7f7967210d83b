//! Sampling and the offline response store.
//!
//! Sampling applies, per step: repetition penalty over already generated
//! tokens, temperature, top-k, top-p, renormalization, categorical draw.
//! Each response gets its own RNG stream derived from
//! `(seed, question, source, sample index)`.
//!
//! The store is a directory:
//!
//! - `records.jsonl`: append-only lines, each either a full response record
//!   (`"kind":"record"`) or an annotation revision (`"kind":"revision"`)
//! - `questions.jsonl`: the task instances the records answer
//! - `manifest.json`: group size, source mix and stage list

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::Judge;
use crate::model::{log_softmax, softmax, Transformer};
use crate::objectives::RewardBundle;
use crate::seeding;
use crate::tasks::{decode, TaskInstance, EOS};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    /// Argmax decoding (the zero-temperature limit).
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 0.9, top_k: 50, repetition_penalty: 1.05, max_new_tokens: 8, greedy: false }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(Error::config("sampling.temperature", "must be positive unless greedy"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("sampling.top_p", "must lie in (0, 1]"));
        }
        if self.top_k == 0 {
            return Err(Error::config("sampling.top_k", "must be positive"));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::config("sampling.repetition_penalty", "must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("sampling.max_new_tokens", "must be positive"));
        }
        Ok(())
    }
}

/// Divides positive logits and multiplies negative ones by `penalty` for
/// every distinct token in `generated`.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let seen: BTreeSet<u32> = generated.iter().copied().collect();
    for t in seen {
        let l = &mut logits[t as usize];
        *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The post-filter next-token distribution.
pub fn next_token_distribution(logits: &[f64], generated: &[u32], config: &SamplingConfig) -> Vec<f64> {
    let mut z = logits.to_vec();
    apply_repetition_penalty(&mut z, generated, config.repetition_penalty);
    let mut probs = vec![0.0; z.len()];
    if config.greedy {
        probs[argmax(&z)] = 1.0;
        return probs;
    }
    z.iter_mut().for_each(|v| *v /= config.temperature);

    // Ranked by descending logit, ties to the lower id.
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(config.top_k.min(z.len()));

    let kept: Vec<f64> = order.iter().map(|&i| z[i]).collect();
    let p = softmax(&kept);
    let mut cumulative = 0.0;
    let mut cut = p.len();
    for (n, &pi) in p.iter().enumerate() {
        cumulative += pi;
        if cumulative >= config.top_p - 1e-12 {
            cut = n + 1;
            break;
        }
    }
    let mass: f64 = p[..cut].iter().sum();
    for (&i, &pi) in order[..cut].iter().zip(&p[..cut]) {
        probs[i] = pi / mass;
    }
    probs
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        cumulative += p;
        last = i;
        if u < cumulative {
            return i;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// Log-probability of each token under the post-filter distribution.
    pub logprobs: Vec<f64>,
}

/// Autoregressive sampling until `<eos>`, `max_new_tokens`, or a full context.
pub fn sample_response(
    model: &Transformer,
    prompt: &[u32],
    config: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if prompt.is_empty() {
        return Err(Error::Domain("empty prompt".into()));
    }
    model.check_tokens(prompt)?;
    let context = model.config().context_len;
    let mut seq = prompt.to_vec();
    let mut sample = Sample { tokens: vec![], logprobs: vec![] };
    while sample.tokens.len() < config.max_new_tokens && seq.len() <= context {
        let logits = model.next_logits(&seq)?;
        let probs = next_token_distribution(&logits, &sample.tokens, config);
        let token = draw(&probs, rng);
        sample.tokens.push(token as u32);
        sample.logprobs.push(probs[token].ln());
        seq.push(token as u32);
        if token as u32 == EOS {
            break;
        }
    }
    Ok(sample)
}

/// Greedy decoding without repetition penalty.
pub fn greedy_decode(model: &Transformer, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    let config = SamplingConfig { greedy: true, repetition_penalty: 1.0, max_new_tokens, ..Default::default() };
    let mut unused = seeding::rng_for(0, "greedy");
    Ok(sample_response(model, prompt, &config, &mut unused)?.tokens)
}

/// Recomputes post-filter log-probabilities of a fixed response.
pub fn rescore(model: &Transformer, prompt: &[u32], tokens: &[u32], config: &SamplingConfig) -> Result<Vec<f64>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(tokens.len());
    for (n, &t) in tokens.iter().enumerate() {
        let logits = model.next_logits(&seq)?;
        let probs = next_token_distribution(&logits, &tokens[..n], config);
        out.push(probs[t as usize].ln());
        seq.push(t);
    }
    Ok(out)
}

/// Full-softmax log-probabilities of a fixed response (temperature 1).
pub fn plain_log_probs(model: &Transformer, prompt: &[u32], tokens: &[u32]) -> Result<Vec<f64>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        out.push(log_softmax(&model.next_logits(&seq)?)?[t as usize]);
        seq.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Source {
    Teacher { teacher_id: String, ratio: f64 },
    Student,
}

/// The curriculum stage a group belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageKey {
    pub teacher_id: String,
    /// Mask ratio rendered with [`ratio_key`].
    pub ratio: String,
}

impl StageKey {
    pub fn new(teacher_id: &str, ratio: f64) -> Self {
        Self { teacher_id: teacher_id.to_string(), ratio: ratio_key(ratio) }
    }
}

impl std::fmt::Display for StageKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.teacher_id, self.ratio)
    }
}

pub fn ratio_key(ratio: f64) -> String {
    format!("{ratio:.4}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub seq: u64,
    pub question_id: u64,
    pub stage: StageKey,
    pub source: Source,
    pub sample_index: usize,
    pub tokens: Vec<u32>,
    pub gen_logprobs: Vec<f64>,
    pub judge_score: Option<f64>,
    pub judge_rationale: Option<String>,
    pub distill_divergence: Option<f64>,
    pub rewards: Option<RewardBundle>,
}

/// Annotation appended after the fact; only the present fields apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Revision {
    pub seq: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub judge_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub judge_rationale: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distill_divergence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rewards: Option<RewardBundle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreLine {
    Record(ResponseRecord),
    Revision(Revision),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceMix {
    pub teacher: usize,
    pub student: usize,
}

impl Default for SourceMix {
    fn default() -> Self {
        Self { teacher: 4, student: 4 }
    }
}

impl SourceMix {
    pub fn group_size(&self) -> usize {
        self.teacher + self.student
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub seed: u64,
    pub mix: SourceMix,
    pub sampling: SamplingConfig,
    pub stages: Vec<StageKey>,
}

/// One masked teacher checkpoint ready for generation.
pub struct StagedTeacher {
    pub teacher_id: String,
    pub ratio: f64,
    pub model: Transformer,
}

pub struct PregenRequest<'a> {
    pub questions: &'a [TaskInstance],
    pub teachers: &'a [StagedTeacher],
    pub student: &'a Transformer,
    pub sampling: SamplingConfig,
    pub mix: SourceMix,
    pub seed: u64,
}

fn student_label(question_id: u64, k: usize) -> String {
    format!("gen/q{question_id}/student/{k}")
}

fn teacher_label(stage: &StageKey, question_id: u64, k: usize) -> String {
    format!("gen/{stage}/q{question_id}/teacher/{k}")
}

/// Generates every group: for each staged teacher and question, `mix.teacher`
/// teacher responses followed by `mix.student` student responses. Student
/// responses depend only on the question, so every stage reuses the same ones.
pub fn pregenerate(req: &PregenRequest<'_>) -> Result<Vec<ResponseRecord>> {
    req.sampling.validate()?;
    if req.mix.group_size() < 2 {
        return Err(Error::config("mix", "group needs at least two responses"));
    }
    let jobs: Vec<(&StagedTeacher, &TaskInstance)> =
        req.teachers.iter().flat_map(|t| req.questions.iter().map(move |q| (t, q))).collect();
    let groups = jobs
        .par_iter()
        .map(|(teacher, q)| {
            let stage = StageKey::new(&teacher.teacher_id, teacher.ratio);
            let mut out = Vec::with_capacity(req.mix.group_size());
            let sources = (0..req.mix.teacher)
                .map(|k| (true, k))
                .chain((0..req.mix.student).map(|k| (false, k)));
            for (from_teacher, k) in sources {
                let (model, label, source) = if from_teacher {
                    let source = Source::Teacher { teacher_id: teacher.teacher_id.clone(), ratio: teacher.ratio };
                    (&teacher.model, teacher_label(&stage, q.question_id, k), source)
                } else {
                    (req.student, student_label(q.question_id, k), Source::Student)
                };
                let mut rng = seeding::rng_for(req.seed, &label);
                let sample = sample_response(model, &q.prompt, &req.sampling, &mut rng)?;
                out.push(ResponseRecord {
                    seq: 0,
                    question_id: q.question_id,
                    stage: stage.clone(),
                    source,
                    sample_index: k,
                    tokens: sample.tokens,
                    gen_logprobs: sample.logprobs,
                    judge_score: None,
                    judge_rationale: None,
                    distill_divergence: None,
                    rewards: None,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<ResponseRecord> = groups.into_iter().flatten().collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.seq = i as u64;
    }
    Ok(records)
}

/// Resamples the student-sourced responses of a group with `student`.
/// Used when the student's responses are refreshed per stage.
pub fn resample_student_records(
    student: &Transformer,
    prompt: &[u32],
    records: &mut [ResponseRecord],
    sampling: &SamplingConfig,
    seed: u64,
    salt: &str,
) -> Result<()> {
    for r in records.iter_mut().filter(|r| r.source == Source::Student) {
        let label = format!("refresh/{salt}/{}/{}", student_label(r.question_id, r.sample_index), r.stage);
        let sample = sample_response(student, prompt, sampling, &mut seeding::rng_for(seed, &label))?;
        r.tokens = sample.tokens;
        r.gen_logprobs = sample.logprobs;
        r.judge_score = None;
        r.judge_rationale = None;
    }
    Ok(())
}

/// Rule-style judging of records against their question labels.
pub fn judge_records(
    records: &[ResponseRecord],
    questions: &BTreeMap<u64, TaskInstance>,
    judge: &dyn Judge,
) -> Result<Vec<Revision>> {
    records
        .par_iter()
        .map(|r| {
            let q = questions
                .get(&r.question_id)
                .ok_or_else(|| Error::config("store", format!("record {} answers unknown question {}", r.seq, r.question_id)))?;
            let verdict = judge.judge(&q.prompt_text, &decode(&r.tokens), &q.label);
            Ok(Revision {
                seq: r.seq,
                judge_score: Some(verdict.score),
                judge_rationale: verdict.rationale,
                distill_divergence: None,
                rewards: None,
            })
        })
        .collect()
}

/// Grouping key: stage then question.
pub type GroupKey = (StageKey, u64);

/// In-memory view of a store directory with revisions folded in.
#[derive(Debug, Clone)]
pub struct ResponseStore {
    dir: PathBuf,
    pub manifest: StoreManifest,
    pub questions: BTreeMap<u64, TaskInstance>,
    pub records: Vec<ResponseRecord>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("serializable");
        out.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

impl ResponseStore {
    /// Creates a new store directory; the directory must not hold a store yet.
    pub fn create(
        dir: &Path,
        manifest: StoreManifest,
        questions: &[TaskInstance],
        records: &[ResponseRecord],
    ) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let records_path = dir.join(RECORDS_FILE);
        if records_path.exists() {
            return Err(Error::OutputExists(records_path));
        }
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest).expect("serializable"))?;
        write_jsonl(&dir.join(QUESTIONS_FILE), questions)?;
        let lines: Vec<StoreLine> = records.iter().cloned().map(StoreLine::Record).collect();
        write_jsonl(&records_path, &lines)?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(manifest_path));
        }
        let manifest: StoreManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let questions: Vec<TaskInstance> = read_jsonl(&dir.join(QUESTIONS_FILE))?;
        let lines: Vec<StoreLine> = read_jsonl(&dir.join(RECORDS_FILE))?;
        let mut records: Vec<ResponseRecord> = Vec::new();
        for line in lines {
            match line {
                StoreLine::Record(r) => {
                    if r.seq as usize != records.len() {
                        return Err(Error::format(dir.join(RECORDS_FILE), format!("record seq {} out of order", r.seq)));
                    }
                    if r.tokens.len() != r.gen_logprobs.len() {
                        return Err(Error::format(dir.join(RECORDS_FILE), format!("record {} logprob length", r.seq)));
                    }
                    records.push(r);
                }
                StoreLine::Revision(rev) => {
                    let r = records
                        .get_mut(rev.seq as usize)
                        .ok_or_else(|| Error::format(dir.join(RECORDS_FILE), format!("revision for unknown record {}", rev.seq)))?;
                    if rev.judge_score.is_some() {
                        r.judge_score = rev.judge_score;
                        r.judge_rationale = rev.judge_rationale;
                    }
                    if rev.distill_divergence.is_some() {
                        r.distill_divergence = rev.distill_divergence;
                    }
                    if rev.rewards.is_some() {
                        r.rewards = rev.rewards;
                    }
                }
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            questions: questions.into_iter().map(|q| (q.question_id, q)).collect(),
            records,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends revisions to disk and folds them into memory.
    pub fn append_revisions(&mut self, revisions: &[Revision]) -> Result<()> {
        if revisions.is_empty() {
            return Ok(());
        }
        let mut out = Vec::new();
        for rev in revisions {
            serde_json::to_writer(&mut out, &StoreLine::Revision(rev.clone())).expect("serializable");
            out.push(b'\n');
        }
        OpenOptions::new().append(true).open(self.dir.join(RECORDS_FILE))?.write_all(&out)?;
        *self = Self::open(&self.dir)?;
        Ok(())
    }

    pub fn unjudged(&self) -> Vec<&ResponseRecord> {
        self.records.iter().filter(|r| r.judge_score.is_none()).collect()
    }

    pub fn groups(&self) -> BTreeMap<GroupKey, Vec<&ResponseRecord>> {
        let mut out: BTreeMap<GroupKey, Vec<&ResponseRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry((r.stage.clone(), r.question_id)).or_default().push(r);
        }
        out
    }
}
