//! Run configuration.
//!
//! A run is described by one TOML file. Every section has defaults, so a
//! file only needs the keys it changes. Values can be overridden from the
//! command line with dotted `key=value` pairs (`teachers.0.budget=40`), and
//! the artifact root can be redirected with `MASTERS_ARTIFACT_ROOT`.
//! Precedence, lowest first: built-in defaults, file, environment, overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{ObjectiveConfig, DEFAULT_BETA};
use crate::rollout::{SamplingConfig, SourceMix};
use crate::schedule::{stage_count, stage_plan, StagePlan, TeacherSweep};
use crate::seeding::derive_seed;
use crate::tasks::{TaskFamily, MAX_DIFFICULTY, VOCAB_SIZE};
use crate::trainer::{Mode, OptimizerConfig, PretrainConfig, ReferenceRefresh, RunSettings};

pub const ARTIFACT_ROOT_ENV: &str = "MASTERS_ARTIFACT_ROOT";

/// Transformer shape; the vocabulary is fixed by the task suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { context_len: 24, n_layers: 1, d_model: 16, n_heads: 2 }
    }
}

impl ModelSpec {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            context_len: self.context_len,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub id: String,
    pub r_max: f64,
    /// Iterations spent on this teacher's mask sweep.
    pub budget: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub families: Vec<TaskFamily>,
    pub train_per_family: usize,
    pub eval_per_family: usize,
    pub difficulty: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { families: TaskFamily::ALL.to_vec(), train_per_family: 64, eval_per_family: 100, difficulty: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    #[default]
    Rule,
    /// Prompts are exported for an outside judge and replies imported.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOptions {
    pub reference_refresh: ReferenceRefresh,
    pub refresh_student_responses: bool,
    /// 0 evaluates once, after the last iteration.
    pub eval_every: usize,
    pub eval_max_new_tokens: usize,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self { reference_refresh: ReferenceRefresh::Never, refresh_student_responses: false, eval_every: 0, eval_max_new_tokens: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub root: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("artifacts") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub iterations: usize,
    pub decrement: f64,
    pub group_size: usize,
    pub beta: f64,
    pub judge: JudgeKind,
    pub mix: SourceMix,
    pub student: ModelSpec,
    /// Supervised warm start of the student before distillation; 0 steps
    /// keeps the seeded random initialization.
    pub student_pretrain: PretrainConfig,
    pub teachers: Vec<TeacherConfig>,
    pub sampling: SamplingConfig,
    pub optimizer: OptimizerConfig,
    pub tasks: TaskConfig,
    pub training: TrainingOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Masters,
            iterations: 1000,
            decrement: 0.05,
            group_size: 8,
            beta: DEFAULT_BETA,
            judge: JudgeKind::Rule,
            mix: SourceMix::default(),
            student: ModelSpec::default(),
            student_pretrain: PretrainConfig { steps: 0, ..PretrainConfig::default() },
            teachers: vec![TeacherConfig {
                id: "teacher".into(),
                r_max: 0.2,
                budget: 1000,
                model: ModelSpec { context_len: 24, n_layers: 2, d_model: 48, n_heads: 4 },
                pretrain: PretrainConfig::default(),
            }],
            sampling: SamplingConfig::default(),
            optimizer: OptimizerConfig::default(),
            tasks: TaskConfig::default(),
            training: TrainingOptions::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn teacher_field(index: usize, field: &str) -> String {
    format!("teachers.{index}.{field}")
}

fn check_model(field: &str, spec: &ModelSpec, needed: usize) -> Result<()> {
    spec.model_config(0).validate().map_err(|e| match e {
        Error::Config { field: f, message } => Error::config(format!("{field}.{f}"), message),
        other => other,
    })?;
    if spec.context_len < needed {
        return Err(Error::config(
            format!("{field}.context_len"),
            format!("{} is shorter than the longest prompt plus response ({needed})", spec.context_len),
        ));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be positive"));
        }
        if !(self.decrement > 0.0 && self.decrement <= 1.0) {
            return Err(Error::config("decrement", "must lie in (0, 1]"));
        }
        if self.mix.group_size() != self.group_size {
            return Err(Error::config(
                "mix",
                format!(
                    "teacher {} + student {} = {} does not equal group_size {}",
                    self.mix.teacher,
                    self.mix.student,
                    self.mix.group_size(),
                    self.group_size
                ),
            ));
        }
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be a finite non-negative number"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta1", "beta1 and beta2 must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.eps", "eps must be positive and weight_decay non-negative"));
        }
        self.sampling.validate()?;

        let t = &self.tasks;
        if t.families.is_empty() {
            return Err(Error::config("tasks.families", "at least one family is required"));
        }
        if !(1..=MAX_DIFFICULTY).contains(&t.difficulty) {
            return Err(Error::config("tasks.difficulty", format!("must lie in 1..={MAX_DIFFICULTY}")));
        }
        if t.train_per_family == 0 || t.eval_per_family == 0 {
            return Err(Error::config("tasks.train_per_family", "task counts must be positive"));
        }
        let longest_prompt = t.families.iter().map(|f| f.max_prompt_len(t.difficulty)).max().unwrap_or(0);
        let longest_answer = t.families.iter().map(|f| f.max_answer_len(t.difficulty)).max().unwrap_or(0);
        let generation = longest_prompt + self.sampling.max_new_tokens.max(self.training.eval_max_new_tokens);
        check_model("student", &self.student, generation.max(longest_prompt + longest_answer))?;
        if self.student_pretrain.steps > 0
            && (self.student_pretrain.batch_size == 0 || !(self.student_pretrain.learning_rate > 0.0))
        {
            return Err(Error::config("student_pretrain", "batch_size and learning_rate must be positive"));
        }

        if self.teachers.is_empty() {
            return Err(Error::config("teachers", "curriculum is empty"));
        }
        let mut ids = BTreeSet::new();
        for (i, teacher) in self.teachers.iter().enumerate() {
            let valid_id = !teacher.id.is_empty()
                && teacher.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !valid_id {
                return Err(Error::config(teacher_field(i, "id"), "use letters, digits, `-` or `_`"));
            }
            if !ids.insert(teacher.id.as_str()) {
                return Err(Error::config(teacher_field(i, "id"), format!("duplicate teacher id `{}`", teacher.id)));
            }
            let stages = stage_count(teacher.r_max, self.decrement).map_err(|e| match e {
                Error::Config { message, .. } => Error::config(teacher_field(i, "r_max"), message),
                other => other,
            })?;
            if teacher.budget < stages {
                return Err(Error::config(
                    teacher_field(i, "budget"),
                    format!("{} iterations cannot cover {stages} stages", teacher.budget),
                ));
            }
            check_model(&teacher_field(i, "model"), &teacher.model, generation.max(longest_prompt + longest_answer))?;
            let p = &teacher.pretrain;
            if p.batch_size == 0 || !(p.learning_rate > 0.0) {
                return Err(Error::config(teacher_field(i, "pretrain"), "batch_size and learning_rate must be positive"));
            }
        }
        let total: usize = self.teachers.iter().map(|t| t.budget).sum();
        if total != self.iterations {
            return Err(Error::config(
                "teachers.budget",
                format!("teacher budgets sum to {total}, expected iterations = {}", self.iterations),
            ));
        }
        Ok(())
    }

    /// Stage count per teacher, in curriculum order.
    pub fn stage_counts(&self) -> Result<Vec<usize>> {
        self.teachers.iter().map(|t| stage_count(t.r_max, self.decrement)).collect()
    }

    /// The curriculum as trained in `mode`. Naive mode trains every teacher
    /// unmasked for its whole budget.
    pub fn sweeps(&self, mode: Mode) -> Vec<TeacherSweep> {
        self.teachers
            .iter()
            .map(|t| TeacherSweep {
                teacher_id: t.id.clone(),
                r_max: if mode.masks_teacher() { t.r_max } else { 0.0 },
                budget: t.budget,
            })
            .collect()
    }

    pub fn plan(&self, mode: Mode) -> Result<StagePlan> {
        stage_plan(&self.sweeps(mode), self.decrement, self.iterations)
    }

    pub fn student_model(&self) -> ModelConfig {
        self.student.model_config(derive_seed(self.seed, "student-init"))
    }

    pub fn teacher_model(&self, index: usize) -> ModelConfig {
        let t = &self.teachers[index];
        t.model.model_config(derive_seed(self.seed, &format!("teacher-init/{}", t.id)))
    }

    pub fn objective(&self, mode: Mode) -> ObjectiveConfig {
        ObjectiveConfig { beta: self.beta, policy: mode.rewards_enabled(), distill: true }
    }

    pub fn run_settings(&self, mode: Mode) -> RunSettings {
        RunSettings {
            seed: self.seed,
            objective: self.objective(mode),
            optimizer: self.optimizer,
            group_size: self.group_size,
            reference_refresh: self.training.reference_refresh,
            refresh_student_responses: self.training.refresh_student_responses,
            sampling: self.sampling,
            eval_every: self.training.eval_every,
            eval_max_new_tokens: self.training.eval_max_new_tokens,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets a dotted key inside a TOML tree. Numeric segments index arrays.
/// The value is parsed as a TOML literal and falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config("--set", format!("bad key `{key}`")));
    }
    let (first, rest) = segments.split_first().expect("non-empty");
    if rest.is_empty() {
        root.insert(first.to_string(), value);
        return Ok(());
    }
    let child = root.entry(first.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    set_path(child, rest, value, key)
}

fn set_path(node: &mut toml::Value, path: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let (seg, rest) = path.split_first().expect("non-empty");
    let child = match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(seg.to_string(), value);
                return Ok(());
            }
            t.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(items) => {
            let idx: usize = seg.parse().map_err(|_| Error::config(key, format!("`{seg}` must be an array index")))?;
            let len = items.len();
            let item = items
                .get_mut(idx)
                .ok_or_else(|| Error::config(key, format!("index {idx} out of range (length {len})")))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(Error::config(key, format!("`{seg}` is inside a scalar"))),
    };
    set_path(child, rest, value, key)
}

/// Parses, applies the environment and explicit overrides, and validates.
pub fn parse_config(text: &str, origin: &Path, overrides: &[String]) -> Result<RunConfig> {
    let file: toml::Table = toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
    let mut table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
    merge(&mut table, file);
    if let Ok(root) = std::env::var(ARTIFACT_ROOT_ENV) {
        if !root.is_empty() {
            apply_override(&mut table, &format!("paths.root = {}", toml::Value::String(root)))?;
        }
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
        Error::config(field_from_message(&e), e.message().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

/// Deep merge: tables merge key by key, anything else (arrays included) replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn field_from_message(e: &toml::de::Error) -> String {
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    parse_config(&text, path, overrides)
}
