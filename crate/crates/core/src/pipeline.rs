//! File-level orchestration behind each command-line subcommand.
//!
//! Artifact layout under the configured root:
//!
//! ```text
//! tasks/train.jsonl, tasks/eval.jsonl
//! teachers/<id>.ckpt                 pretrained teacher
//! teachers/<id>@<ratio>.ckpt         masked copy per stage ratio
//! student/init.ckpt                  student before distillation
//! store/                             pre-generated, judged responses
//! runs/<mode>/final.ckpt, metrics.csv, plan.csv, eval.json
//! report/report.csv, report/curves.csv
//! ```
//!
//! No step overwrites an existing output unless `force` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{JudgeKind, RunConfig};
use crate::error::{Error, Result};
use crate::judge::{parse_judge_reply, render_judge_prompts, JudgeMessage, RuleJudge};
use crate::masking::{apply_mask, build_mask};
use crate::model::Transformer;
use crate::rollout::{
    judge_records, pregenerate, ratio_key, read_jsonl, write_jsonl, PregenRequest, ResponseStore, Revision, StageKey,
    StagedTeacher, StoreManifest, MANIFEST_FILE, QUESTIONS_FILE, RECORDS_FILE,
};
use crate::seeding::derive_seed;
use crate::tasks::{decode, evaluate, generate_eval_tasks, generate_tasks, EvalReport, TaskInstance};
use crate::trainer::{self, write_metrics_csv, MetricRow, Mode};

pub const JUDGE_REQUESTS_FILE: &str = "judge_requests.jsonl";
pub const JUDGE_REPLIES_FILE: &str = "judge_replies.jsonl";

/// What a step wrote, plus a one-line summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    pub summary: String,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(config: &RunConfig) -> Self {
        Self { root: config.paths.root.clone() }
    }

    pub fn train_tasks(&self) -> PathBuf {
        self.root.join("tasks").join("train.jsonl")
    }

    pub fn eval_tasks(&self) -> PathBuf {
        self.root.join("tasks").join("eval.jsonl")
    }

    pub fn teacher(&self, id: &str) -> PathBuf {
        self.root.join("teachers").join(format!("{id}.ckpt"))
    }

    pub fn masked_teacher(&self, id: &str, ratio: f64) -> PathBuf {
        self.root.join("teachers").join(format!("{id}@{}.ckpt", ratio_key(ratio)))
    }

    pub fn initial_student(&self) -> PathBuf {
        self.root.join("student").join("init.ckpt")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn run_dir(&self, mode: Mode) -> PathBuf {
        self.root.join("runs").join(mode.name())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    Ok(())
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    read_jsonl(path)
}

pub fn gen_tasks(config: &RunConfig, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let (train_path, eval_path) = (layout.train_tasks(), layout.eval_tasks());
    guard(&train_path, force)?;
    guard(&eval_path, force)?;
    let t = &config.tasks;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for &family in &t.families {
        let seed = derive_seed(config.seed, &format!("tasks/{family}"));
        train.extend(generate_tasks(family, t.train_per_family, t.difficulty, seed)?);
        eval.extend(generate_eval_tasks(family, t.eval_per_family, t.difficulty, seed)?);
    }
    write_jsonl(&train_path, &train)?;
    write_jsonl(&eval_path, &eval)?;
    Ok(Outcome {
        summary: format!("wrote {} train and {} eval tasks", train.len(), eval.len()),
        written: vec![train_path, eval_path],
    })
}

fn teacher_index(config: &RunConfig, id: &str) -> Result<usize> {
    config
        .teachers
        .iter()
        .position(|t| t.id == id)
        .ok_or_else(|| Error::config("teachers", format!("no teacher with id `{id}`")))
}

fn selected_teachers(config: &RunConfig, only: Option<&str>) -> Result<Vec<usize>> {
    match only {
        Some(id) => Ok(vec![teacher_index(config, id)?]),
        None => Ok((0..config.teachers.len()).collect()),
    }
}

/// Trains each selected teacher from its seeded initialization.
pub fn pretrain_teachers(config: &RunConfig, only: Option<&str>, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let train = load_tasks(&layout.train_tasks())?;
    let eval = load_tasks(&layout.eval_tasks())?;
    let mut out = Outcome::default();
    let mut notes = Vec::new();
    for index in selected_teachers(config, only)? {
        let teacher = &config.teachers[index];
        let path = layout.teacher(&teacher.id);
        guard(&path, force)?;
        let model = Transformer::new(config.teacher_model(index))?;
        let seed = derive_seed(config.seed, &format!("pretrain/{}", teacher.id));
        let model = trainer::pretrain(model, &train, &teacher.pretrain, seed)?;
        let report = evaluate(&model, &eval, config.training.eval_max_new_tokens)?;
        let mut ckpt = Checkpoint::new(*model.config(), model.into_params());
        ckpt.meta.insert("teacher_id".into(), teacher.id.clone());
        ckpt.meta.insert("eval_accuracy".into(), report.overall.to_string());
        ckpt.save(&path)?;
        notes.push(format!("{} eval accuracy {:.3}", teacher.id, report.overall));
        out.written.push(path);
    }
    out.summary = notes.join("; ");
    Ok(out)
}

/// Ratios a teacher is needed at across all modes, in schedule order.
pub fn teacher_ratios(config: &RunConfig, index: usize) -> Result<Vec<f64>> {
    let plan = config.plan(Mode::Masters)?;
    Ok(plan.sweeps[index].1.ratios())
}

/// Writes one masked checkpoint per stage ratio of each selected teacher.
pub fn mask_teachers(config: &RunConfig, only: Option<&str>, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let mut out = Outcome::default();
    for index in selected_teachers(config, only)? {
        let id = &config.teachers[index].id;
        let source = Checkpoint::load(&layout.teacher(id))?;
        for ratio in teacher_ratios(config, index)? {
            let path = layout.masked_teacher(id, ratio);
            guard(&path, force)?;
            let plan = build_mask(&source.params, ratio)?;
            let params = apply_mask(&source.params, &plan)?;
            let mut ckpt = Checkpoint::new(source.config, params);
            ckpt.mask = Some(plan);
            ckpt.meta = source.meta.clone();
            ckpt.meta.insert("mask_ratio".into(), ratio_key(ratio));
            ckpt.save(&path)?;
            out.written.push(path);
        }
    }
    out.summary = format!("wrote {} masked teacher checkpoints", out.written.len());
    Ok(out)
}

pub fn load_masked(layout: &Layout, id: &str, ratio: f64) -> Result<Transformer> {
    let path = layout.masked_teacher(id, ratio);
    if !path.exists() {
        return Err(Error::config(
            "teachers",
            format!("masked checkpoint for stage {} is missing ({})", StageKey::new(id, ratio), path.display()),
        ));
    }
    let ckpt = Checkpoint::load(&path)?;
    Transformer::from_parts(ckpt.config, ckpt.params)
}

fn remove_store(dir: &Path) -> Result<()> {
    for name in [RECORDS_FILE, QUESTIONS_FILE, MANIFEST_FILE, JUDGE_REQUESTS_FILE] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

/// Samples every (stage, question) group with the teachers and the initial student.
pub fn pregenerate_store(config: &RunConfig, store: Option<&Path>, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let dir = store.map(Path::to_path_buf).unwrap_or_else(|| layout.store());
    if dir.join(RECORDS_FILE).exists() {
        if !force {
            return Err(Error::OutputExists(dir.join(RECORDS_FILE)));
        }
        remove_store(&dir)?;
    }
    let questions = load_tasks(&layout.train_tasks())?;
    let mut staged = Vec::new();
    let mut stages = Vec::new();
    for (index, teacher) in config.teachers.iter().enumerate() {
        for ratio in teacher_ratios(config, index)? {
            stages.push(StageKey::new(&teacher.id, ratio));
            staged.push(StagedTeacher {
                teacher_id: teacher.id.clone(),
                ratio,
                model: load_masked(&layout, &teacher.id, ratio)?,
            });
        }
    }
    let student = build_initial_student(config, &layout.train_tasks())?;
    let init_path = layout.initial_student();
    let mut ckpt = Checkpoint::new(*student.config(), student.params().clone());
    ckpt.meta.insert("role".into(), "initial student".into());
    ckpt.save(&init_path)?;
    let records = pregenerate(&PregenRequest {
        questions: &questions,
        teachers: &staged,
        student: &student,
        sampling: config.sampling,
        mix: config.mix,
        seed: config.seed,
    })?;
    let manifest = StoreManifest { seed: config.seed, mix: config.mix, sampling: config.sampling, stages };
    ResponseStore::create(&dir, manifest, &questions, &records)?;
    Ok(Outcome {
        summary: format!("wrote {} records for {} stages", records.len(), staged.len()),
        written: vec![dir.join(RECORDS_FILE), dir.join(QUESTIONS_FILE), dir.join(MANIFEST_FILE), init_path],
    })
}

/// The student the store was generated with: seeded initialization,
/// optionally warm-started on the training tasks.
pub fn build_initial_student(config: &RunConfig, train_tasks: &Path) -> Result<Transformer> {
    let student = Transformer::new(config.student_model())?;
    if config.student_pretrain.steps == 0 {
        return Ok(student);
    }
    let train = load_tasks(train_tasks)?;
    trainer::pretrain(student, &train, &config.student_pretrain, derive_seed(config.seed, "pretrain/student"))
}

/// One exported judge request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub seq: u64,
    pub evaluation: JudgeMessage,
    pub parsing: JudgeMessage,
}

/// One imported judge reply; `reply` is the raw model text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReply {
    pub seq: u64,
    pub reply: String,
}

/// Scores every unjudged record. The rule judge runs in-process; the
/// external judge exports requests on the first call and imports replies
/// once `judge_replies.jsonl` exists in the store.
pub fn judge_store(config: &RunConfig, store: Option<&Path>) -> Result<Outcome> {
    let layout = Layout::new(config);
    let dir = store.map(Path::to_path_buf).unwrap_or_else(|| layout.store());
    let mut store = ResponseStore::open(&dir)?;
    let pending: Vec<_> = store.unjudged().into_iter().cloned().collect();
    if pending.is_empty() {
        return Ok(Outcome { written: vec![], summary: "all records already judged".into() });
    }
    let revisions = match config.judge {
        JudgeKind::Rule => judge_records(&pending, &store.questions, &RuleJudge)?,
        JudgeKind::External => {
            let replies_path = dir.join(JUDGE_REPLIES_FILE);
            if !replies_path.exists() {
                let requests: Vec<JudgeRequest> = pending
                    .iter()
                    .map(|r| {
                        let q = &store.questions[&r.question_id];
                        let (evaluation, parsing) = render_judge_prompts(&q.prompt_text, &decode(&r.tokens), &q.label);
                        JudgeRequest { seq: r.seq, evaluation, parsing }
                    })
                    .collect();
                let path = dir.join(JUDGE_REQUESTS_FILE);
                write_jsonl(&path, &requests)?;
                return Ok(Outcome {
                    summary: format!(
                        "exported {} judge requests; write replies to {} and rerun",
                        requests.len(),
                        replies_path.display()
                    ),
                    written: vec![path],
                });
            }
            let replies: Vec<JudgeReply> = read_jsonl(&replies_path)?;
            let by_seq: BTreeMap<u64, &JudgeReply> = replies.iter().map(|r| (r.seq, r)).collect();
            pending
                .iter()
                .filter_map(|r| by_seq.get(&r.seq))
                .map(|reply| {
                    let v = parse_judge_reply(&reply.reply);
                    let rationale = if v.flagged { "flagged: unparseable judge reply".to_string() } else { reply.reply.clone() };
                    Revision {
                        seq: reply.seq,
                        judge_score: Some(v.score),
                        judge_rationale: Some(rationale),
                        distill_divergence: None,
                        rewards: None,
                    }
                })
                .collect()
        }
    };
    let mean = revisions.iter().filter_map(|r| r.judge_score).sum::<f64>() / revisions.len().max(1) as f64;
    store.append_revisions(&revisions)?;
    let remaining = store.unjudged().len();
    Ok(Outcome {
        summary: format!("judged {} records (mean accuracy {mean:.3}), {remaining} still unjudged", revisions.len()),
        written: vec![dir.join(RECORDS_FILE)],
    })
}

/// Trains the student in `mode` from the judged store.
pub fn train(config: &RunConfig, mode: Mode, store: Option<&Path>, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let run_dir = layout.run_dir(mode);
    let (ckpt_path, metrics_path, plan_path) =
        (run_dir.join("final.ckpt"), run_dir.join("metrics.csv"), run_dir.join("plan.csv"));
    guard(&ckpt_path, force)?;
    guard(&metrics_path, force)?;

    let plan = config.plan(mode)?;
    let dir = store.map(Path::to_path_buf).unwrap_or_else(|| layout.store());
    if !dir.join(RECORDS_FILE).exists() {
        let mut stages: Vec<String> = Vec::new();
        for e in plan.entries() {
            let s = StageKey::new(&e.teacher_id, e.ratio).to_string();
            if stages.last() != Some(&s) {
                stages.push(s);
            }
        }
        return Err(Error::config(
            "store",
            format!("no response store at {}; missing stages: {}", dir.display(), stages.join(", ")),
        ));
    }
    let store = ResponseStore::open(&dir)?;
    if !store.unjudged().is_empty() {
        return Err(Error::config("store", format!("{} records are not judged yet", store.unjudged().len())));
    }
    let eval = load_tasks(&layout.eval_tasks())?;
    let teachers = |id: &str, ratio: f64| load_masked(&layout, id, ratio);
    let init = Checkpoint::load(&layout.initial_student())?;
    let student = Transformer::from_parts(init.config, init.params)?;
    if *student.config() != config.student_model() {
        return Err(Error::config("student", "initial student checkpoint does not match the configured student"));
    }
    let output = trainer::run(student, &plan, &teachers, &store.records, &store.questions, &eval, &config.run_settings(mode))?;

    fs::create_dir_all(&run_dir)?;
    let mut ckpt = Checkpoint::new(*output.student.config(), output.student.into_params());
    ckpt.meta.insert("mode".into(), mode.name().into());
    ckpt.meta.insert("iterations".into(), plan.iterations().to_string());
    ckpt.save(&ckpt_path)?;
    let mut buf = Vec::new();
    write_metrics_csv(&output.metrics, &mut buf)?;
    fs::write(&metrics_path, buf)?;
    let mut buf = Vec::new();
    plan.write_csv(&mut buf)?;
    fs::write(&plan_path, buf)?;
    let final_acc = output.metrics.last().and_then(|r| r.eval_accuracy);
    Ok(Outcome {
        summary: format!(
            "{} finished {} iterations; eval accuracy {}",
            mode.name(),
            plan.iterations(),
            final_acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into())
        ),
        written: vec![ckpt_path, metrics_path, plan_path],
    })
}

/// Evaluates a checkpoint on the held-out tasks. With no explicit path the
/// trained student of `mode` is used and the report lands next to it.
pub fn evaluate_checkpoint(config: &RunConfig, mode: Mode, checkpoint: Option<&Path>, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let (ckpt_path, out_path) = match checkpoint {
        Some(p) => (p.to_path_buf(), p.with_extension("eval.json")),
        None => (layout.run_dir(mode).join("final.ckpt"), layout.run_dir(mode).join("eval.json")),
    };
    guard(&out_path, force)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = Transformer::from_parts(ckpt.config, ckpt.params)?;
    let eval = load_tasks(&layout.eval_tasks())?;
    let report = evaluate(&model, &eval, config.training.eval_max_new_tokens)?;
    fs::write(&out_path, serde_json::to_vec_pretty(&report).expect("serializable"))?;
    Ok(Outcome { summary: format!("accuracy {:.3} over {} tasks", report.overall, report.count), written: vec![out_path] })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub iterations: usize,
    pub eval_accuracy: f64,
    pub delta_vs_naive: Option<f64>,
    pub mean_loss_total: f64,
    pub mean_loss_jsd: f64,
    pub mean_reward_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CurvePoint<'a> {
    mode: &'a str,
    iteration: usize,
    teacher_id: &'a str,
    ratio: f64,
    loss_total: f64,
    loss_jsd: f64,
    mean_reward_acc: f64,
    eval_accuracy: Option<f64>,
}

/// Aggregates every trained mode into a comparison table and a long-format
/// curve file.
pub fn report(config: &RunConfig, force: bool) -> Result<Outcome> {
    let layout = Layout::new(config);
    let dir = layout.report_dir();
    let (table_path, curves_path) = (dir.join("report.csv"), dir.join("curves.csv"));
    guard(&table_path, force)?;
    guard(&curves_path, force)?;

    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let run_dir = layout.run_dir(mode);
        let metrics_path = run_dir.join("metrics.csv");
        if !metrics_path.exists() {
            continue;
        }
        let metrics = read_metrics(&metrics_path)?;
        let eval_path = run_dir.join("eval.json");
        let accuracy = if eval_path.exists() {
            let report: EvalReport =
                serde_json::from_slice(&fs::read(&eval_path)?).map_err(|e| Error::format(&eval_path, e.to_string()))?;
            report.overall
        } else {
            metrics.iter().rev().find_map(|r| r.eval_accuracy).unwrap_or(f64::NAN)
        };
        runs.push((mode, metrics, accuracy));
    }
    if runs.is_empty() {
        return Err(Error::MissingArtifact(layout.root.join("runs")));
    }
    let naive = runs.iter().find(|(m, _, _)| *m == Mode::Naive).map(|r| r.2);
    let mean = |rows: &[MetricRow], f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;

    fs::create_dir_all(&dir)?;
    let mut table = csv::Writer::from_path(&table_path).map_err(|e| Error::format(&table_path, e.to_string()))?;
    for (mode, metrics, accuracy) in &runs {
        table
            .serialize(ReportRow {
                mode: mode.name().into(),
                iterations: metrics.len(),
                eval_accuracy: *accuracy,
                delta_vs_naive: naive.map(|n| accuracy - n),
                mean_loss_total: mean(metrics, |r| r.loss_total),
                mean_loss_jsd: mean(metrics, |r| r.loss_jsd),
                mean_reward_acc: mean(metrics, |r| r.mean_reward_acc),
            })
            .map_err(|e| Error::format(&table_path, e.to_string()))?;
    }
    table.flush()?;
    let mut curves = csv::Writer::from_path(&curves_path).map_err(|e| Error::format(&curves_path, e.to_string()))?;
    for (mode, metrics, _) in &runs {
        for r in metrics {
            curves
                .serialize(CurvePoint {
                    mode: mode.name(),
                    iteration: r.iteration,
                    teacher_id: &r.teacher_id,
                    ratio: r.ratio,
                    loss_total: r.loss_total,
                    loss_jsd: r.loss_jsd,
                    mean_reward_acc: r.mean_reward_acc,
                    eval_accuracy: r.eval_accuracy,
                })
                .map_err(|e| Error::format(&curves_path, e.to_string()))?;
        }
    }
    curves.flush()?;
    let listed: Vec<String> = runs.iter().map(|(m, _, a)| format!("{} {a:.3}", m.name())).collect();
    Ok(Outcome { summary: format!("report rows: {}", listed.join(", ")), written: vec![table_path, curves_path] })
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

/// Runs every step in order (tasks, teachers, masks, store, judge, one
/// training run per mode, evaluation, report) under the configured root and
/// returns the report rows.
pub fn run_all(config: &RunConfig, modes: &[Mode], force: bool) -> Result<Vec<ReportRow>> {
    gen_tasks(config, force)?;
    pretrain_teachers(config, None, force)?;
    mask_teachers(config, None, force)?;
    pregenerate_store(config, None, force)?;
    judge_store(config, None)?;
    for &mode in modes {
        train(config, mode, None, force)?;
        evaluate_checkpoint(config, mode, None, force)?;
    }
    report(config, force)?;
    read_report(&Layout::new(config).report_dir().join("report.csv"))
}
