//! Optimizer and training loops.
//!
//! [`train_step`] consumes one generation group: it scores every response's
//! teacher/student divergence under the current student, turns judge
//! verdicts and divergences into rewards and group advantages, evaluates the
//! unified objective and applies one AdamW update. [`run`] walks a
//! [`StagePlan`], swapping masked teachers as stages change.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::rule_judge;
use crate::model::{next_token_loss, ParameterView, Transformer};
use crate::objectives::{
    advantages, distill_reward, final_objective, sequence_divergence, GroupItem, ObjectiveConfig, RewardBundle,
};
use crate::rollout::{resample_student_records, ResponseRecord, SamplingConfig, StageKey};
use crate::schedule::{shard_questions, PlanEntry, StagePlan};
use crate::seeding;
use crate::tasks::{decode, evaluate, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-8 }
    }
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: OptimizerConfig,
    pub first_moment: ParameterView,
    pub second_moment: ParameterView,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ParameterView, config: OptimizerConfig) -> Self {
        Self { config, first_moment: params.zeros_like(), second_moment: params.zeros_like(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut ParameterView, grads: &ParameterView) -> Result<()> {
        params.check_same_structure(grads)?;
        params.check_same_structure(&self.first_moment)?;
        let c = self.config;
        self.steps += 1;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        let entries = params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(self.first_moment.entries_mut().iter_mut().zip(self.second_moment.entries_mut()));
        for ((p, g), (m, v)) in entries {
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m.values[i] = c.beta1 * m.values[i] + (1.0 - c.beta1) * gi;
                v.values[i] = c.beta2 * v.values[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m.values[i] / bias1;
                let v_hat = v.values[i] / bias2;
                let w = p.values[i];
                p.values[i] = w - c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unmasked teacher, distillation only.
    Naive,
    /// Mask-progressive teacher, distillation only.
    Progressive,
    /// Mask-progressive teacher with reward feedback.
    #[default]
    Masters,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Naive, Mode::Progressive, Mode::Masters];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Progressive => "progressive",
            Mode::Masters => "masters",
        }
    }

    pub fn rewards_enabled(self) -> bool {
        self == Mode::Masters
    }

    pub fn masks_teacher(self) -> bool {
        self != Mode::Naive
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}` (naive|progressive|masters)")))
    }
}

/// When the frozen reference policy is re-snapshotted from the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceRefresh {
    #[default]
    Never,
    Stage,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub objective: ObjectiveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub teacher_id: String,
    pub ratio: f64,
    pub loss_total: f64,
    pub loss_grpo: f64,
    pub loss_jsd: f64,
    pub kl_ref: f64,
    pub mean_reward_acc: f64,
    pub mean_reward_distill: f64,
    pub eval_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "iteration,teacher_id,ratio,loss_total,loss_grpo,loss_jsd,kl_ref,mean_reward_acc,mean_reward_distill,eval_accuracy";

pub fn write_metrics_csv(rows: &[MetricRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        let eval = r.eval_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.teacher_id,
            r.ratio,
            r.loss_total,
            r.loss_grpo,
            r.loss_jsd,
            r.kl_ref,
            r.mean_reward_acc,
            r.mean_reward_distill,
            eval
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: Transformer,
    pub reference: Transformer,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub iteration: usize,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(student: Transformer, optimizer: OptimizerConfig) -> Self {
        let optimizer = AdamW::new(student.params(), optimizer);
        Self { reference: student.clone(), student, optimizer, iteration: 0, metrics: Vec::new() }
    }
}

/// Per-record annotations produced while scoring a group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub divergences: Vec<f64>,
    pub rewards: Vec<RewardBundle>,
    pub advantages: Vec<f64>,
}

/// Divergences, rewards and advantages for a group under the current student.
pub fn score_group(
    student: &Transformer,
    teacher: &Transformer,
    prompt: &[u32],
    group: &[ResponseRecord],
) -> Result<GroupScores> {
    let divergences = group
        .par_iter()
        .map(|r| sequence_divergence(teacher, student, prompt, &r.tokens).map(|d| d.mean))
        .collect::<Result<Vec<_>>>()?;
    let distill = distill_reward(&divergences)?;
    let rewards: Vec<RewardBundle> = group
        .iter()
        .zip(&distill)
        .map(|(r, &d)| {
            r.judge_score
                .map(|acc| RewardBundle::new(acc, d))
                .ok_or_else(|| Error::config("store", format!("record {} has not been judged", r.seq)))
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = advantages(&totals)?.advantages;
    Ok(GroupScores { divergences, rewards, advantages })
}

/// One optimizer update on one group. On a non-finite loss or gradient the
/// state is left untouched and a numeric error is returned.
pub fn train_step(
    state: &mut TrainState,
    entry: &PlanEntry,
    teacher: &Transformer,
    prompt: &[u32],
    group: &[ResponseRecord],
    settings: &StepSettings,
) -> Result<MetricRow> {
    let scores = score_group(&state.student, teacher, prompt, group)?;
    let items: Vec<GroupItem<'_>> = group
        .iter()
        .zip(&scores.advantages)
        .map(|(r, &advantage)| GroupItem { prompt, response: &r.tokens, advantage })
        .collect();
    let (terms, grads) = final_objective(
        &state.student,
        Some(teacher),
        Some(&state.reference),
        &items,
        settings.objective,
        None,
    )?;
    if !terms.total.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {} at iteration {}; state kept at iteration {}",
            terms.total, entry.iteration, state.iteration
        )));
    }
    state.optimizer.step(state.student.params_mut(), &grads)?;
    state.iteration += 1;
    let n = group.len() as f64;
    let row = MetricRow {
        iteration: entry.iteration,
        teacher_id: entry.teacher_id.clone(),
        ratio: entry.ratio,
        loss_total: terms.total,
        loss_grpo: terms.grpo,
        loss_jsd: if settings.objective.distill { terms.jsd } else { 0.0 },
        kl_ref: terms.kl,
        mean_reward_acc: scores.rewards.iter().map(|r| r.acc).sum::<f64>() / n,
        mean_reward_distill: scores.rewards.iter().map(|r| r.distill).sum::<f64>() / n,
        eval_accuracy: None,
    };
    state.metrics.push(row.clone());
    Ok(row)
}

/// Supplies the masked teacher for a stage.
pub trait TeacherProvider {
    fn teacher(&self, teacher_id: &str, ratio: f64) -> Result<Transformer>;
}

impl<F> TeacherProvider for F
where
    F: Fn(&str, f64) -> Result<Transformer>,
{
    fn teacher(&self, teacher_id: &str, ratio: f64) -> Result<Transformer> {
        self(teacher_id, ratio)
    }
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub group_size: usize,
    pub reference_refresh: ReferenceRefresh,
    /// Resample the student's responses with the current student at every stage start.
    pub refresh_student_responses: bool,
    pub sampling: SamplingConfig,
    /// Evaluate every this many iterations; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub eval_max_new_tokens: usize,
}

pub struct RunOutput {
    pub student: Transformer,
    pub metrics: Vec<MetricRow>,
}

/// Question shards per teacher sweep: `shards[teacher][stage]`.
pub fn plan_shards(plan: &StagePlan, question_ids: &[u64], seed: u64) -> Vec<Vec<Vec<u64>>> {
    plan.sweeps
        .iter()
        .enumerate()
        .map(|(t, (sweep, schedule))| {
            shard_questions(question_ids, schedule.stage_count(), seed, &format!("shards/{t}/{}", sweep.teacher_id))
        })
        .collect()
}

/// The question trained on at a plan entry.
pub fn question_for(shards: &[Vec<Vec<u64>>], entry: &PlanEntry) -> Result<u64> {
    let shard = &shards[entry.teacher_index][entry.shard];
    if shard.is_empty() {
        return Err(Error::config(
            "tasks",
            format!("shard {} of teacher `{}` has no questions", entry.shard, entry.teacher_id),
        ));
    }
    Ok(shard[entry.step_in_stage % shard.len()])
}

/// Every `(question, stage)` pair the plan will read whose group is absent
/// or not exactly `group_size` records.
pub fn missing_groups(
    plan: &StagePlan,
    shards: &[Vec<Vec<u64>>],
    groups: &BTreeMap<(StageKey, u64), Vec<&ResponseRecord>>,
    group_size: usize,
) -> Result<Vec<(u64, StageKey)>> {
    let mut missing = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for entry in plan.entries() {
        let q = question_for(shards, entry)?;
        let key = StageKey::new(&entry.teacher_id, entry.ratio);
        if !seen.insert((key.clone(), q)) {
            continue;
        }
        match groups.get(&(key.clone(), q)) {
            Some(g) if g.len() == group_size => {}
            _ => missing.push((q, key)),
        }
    }
    Ok(missing)
}

/// Runs every iteration of `plan`.
pub fn run(
    initial_student: Transformer,
    plan: &StagePlan,
    teachers: &dyn TeacherProvider,
    records: &[ResponseRecord],
    questions: &BTreeMap<u64, TaskInstance>,
    eval_set: &[TaskInstance],
    settings: &RunSettings,
) -> Result<RunOutput> {
    let mut ids: Vec<u64> = questions.keys().copied().collect();
    ids.sort();
    let shards = plan_shards(plan, &ids, settings.seed);

    let mut groups: BTreeMap<(StageKey, u64), Vec<ResponseRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.stage.clone(), r.question_id)).or_default().push(r.clone());
    }
    {
        let borrowed: BTreeMap<(StageKey, u64), Vec<&ResponseRecord>> =
            groups.iter().map(|(k, v)| (k.clone(), v.iter().collect())).collect();
        let missing = missing_groups(plan, &shards, &borrowed, settings.group_size)?;
        if !missing.is_empty() {
            let listed: Vec<String> = missing.iter().take(20).map(|(q, s)| format!("(question {q}, stage {s})")).collect();
            return Err(Error::config(
                "store",
                format!(
                    "{} missing or incomplete groups: {}{}",
                    missing.len(),
                    listed.join(", "),
                    if missing.len() > 20 { ", ..." } else { "" }
                ),
            ));
        }
    }

    let step_settings = StepSettings { objective: settings.objective };
    let mut state = TrainState::new(initial_student, settings.optimizer);
    let mut current: Option<(usize, usize, Transformer)> = None;
    for entry in plan.entries() {
        let stage_changed = current.as_ref().is_none_or(|(t, s, _)| *t != entry.teacher_index || *s != entry.stage);
        if stage_changed {
            let teacher_changed = current.as_ref().is_none_or(|(t, _, _)| *t != entry.teacher_index);
            if current.is_some() {
                let refresh = match settings.reference_refresh {
                    ReferenceRefresh::Never => false,
                    ReferenceRefresh::Stage => true,
                    ReferenceRefresh::Teacher => teacher_changed,
                };
                if refresh {
                    state.reference = state.student.clone();
                }
            }
            let teacher = teachers.teacher(&entry.teacher_id, entry.ratio)?;
            if settings.refresh_student_responses && current.is_some() {
                refresh_stage_groups(&mut groups, &state.student, &shards, entry, questions, settings)?;
            }
            current = Some((entry.teacher_index, entry.stage, teacher));
        }
        let teacher = &current.as_ref().expect("teacher loaded").2;
        let q = question_for(&shards, entry)?;
        let prompt = &questions[&q].prompt;
        let group = &groups[&(StageKey::new(&entry.teacher_id, entry.ratio), q)];
        let mut row = train_step(&mut state, entry, teacher, prompt, group, &step_settings)?;

        let last = entry.iteration == plan.iterations();
        let periodic = settings.eval_every > 0 && entry.iteration % settings.eval_every == 0;
        if !eval_set.is_empty() && (last || periodic) {
            let report = evaluate(&state.student, eval_set, settings.eval_max_new_tokens)?;
            row.eval_accuracy = Some(report.overall);
            state.metrics.last_mut().expect("row pushed").eval_accuracy = Some(report.overall);
        }
    }
    Ok(RunOutput { student: state.student, metrics: state.metrics })
}

fn refresh_stage_groups(
    groups: &mut BTreeMap<(StageKey, u64), Vec<ResponseRecord>>,
    student: &Transformer,
    shards: &[Vec<Vec<u64>>],
    entry: &PlanEntry,
    questions: &BTreeMap<u64, TaskInstance>,
    settings: &RunSettings,
) -> Result<()> {
    let key = StageKey::new(&entry.teacher_id, entry.ratio);
    for &q in &shards[entry.teacher_index][entry.shard] {
        let inst = &questions[&q];
        if let Some(records) = groups.get_mut(&(key.clone(), q)) {
            resample_student_records(student, &inst.prompt, records, &settings.sampling, settings.seed, &format!("it{}", entry.iteration))?;
            for r in records.iter_mut().filter(|r| r.judge_score.is_none()) {
                let v = rule_judge(&inst.prompt_text, &decode(&r.tokens), &inst.label);
                r.judge_score = Some(v.score);
                r.judge_rationale = v.rationale;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, learning_rate: 3e-3, batch_size: 16 }
    }
}

/// Plain next-token training on `prompt ++ answer`, with the loss on the
/// answer positions only.
pub fn pretrain(mut model: Transformer, tasks: &[TaskInstance], config: &PretrainConfig, seed: u64) -> Result<Transformer> {
    if tasks.is_empty() {
        return Err(Error::Domain("no pretraining tasks".into()));
    }
    let opt_cfg = OptimizerConfig { learning_rate: config.learning_rate, weight_decay: 0.0, ..Default::default() };
    let mut optimizer = AdamW::new(model.params(), opt_cfg);
    let mut rng = seeding::rng_for(seed, "pretrain");
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = batch
            .par_iter()
            .map(|&i| {
                let t = &tasks[i];
                let mut seq = t.prompt.clone();
                seq.extend(t.answer_tokens());
                next_token_loss(&model, &seq, t.prompt.len() - 1)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = model.params().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_assign(g);
        }
        grads.scale(1.0 / results.len() as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss diverged at step {step}")));
        }
        // Linear decay over the last fifth keeps the final accuracy stable.
        let tail = config.steps / 5;
        let lr_scale = if tail > 0 && step + tail >= config.steps {
            (config.steps - step) as f64 / tail as f64
        } else {
            1.0
        };
        optimizer.config.learning_rate = config.learning_rate * lr_scale;
        optimizer.step(model.params_mut(), &grads)?;
    }
    Ok(model)
}
