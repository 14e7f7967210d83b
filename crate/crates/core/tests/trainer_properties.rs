mod common;

use std::fs;

use common::{prepare, run_dir, smoke_config};
use masters::checkpoint::Checkpoint;
use masters::model::{ModelConfig, Transformer};
use masters::pipeline::{self, load_masked, Layout};
use masters::rollout::{ResponseRecord, ResponseStore, Source, StageKey};
use masters::schedule::PlanEntry;
use masters::tasks::{generate_tasks, TaskFamily, VOCAB_SIZE};
use masters::trainer::{self, train_step, Mode, OptimizerConfig, StepSettings, TrainState};
use masters::Error;

#[test]
fn metrics_file_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path(), &[]);
    prepare(&config);
    pipeline::train(&config, Mode::Masters, None, false).unwrap();
    let text = fs::read_to_string(run_dir(&config, Mode::Masters).join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), config.iterations + 1);
    assert!(text.starts_with("iteration,"));
    let rows = pipeline::read_metrics(&run_dir(&config, Mode::Masters).join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), (1..=config.iterations).collect::<Vec<_>>());
    assert!(rows.last().unwrap().eval_accuracy.is_some());
}

#[test]
fn training_is_deterministic_and_leaves_teachers_alone() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path(), &[]);
    prepare(&config);
    let layout = Layout::new(&config);
    let teacher_files: Vec<_> = fs::read_dir(dir.path().join("teachers"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert!(!teacher_files.is_empty());
    let before: Vec<Vec<u8>> = teacher_files.iter().map(|p| fs::read(p).unwrap()).collect();

    pipeline::train(&config, Mode::Masters, None, false).unwrap();
    let out = run_dir(&config, Mode::Masters);
    let first = (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("final.ckpt")).unwrap());
    pipeline::train(&config, Mode::Masters, None, true).unwrap();
    let second = (fs::read(out.join("metrics.csv")).unwrap(), fs::read(out.join("final.ckpt")).unwrap());
    assert_eq!(first, second);

    let after: Vec<Vec<u8>> = teacher_files.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
    assert!(layout.initial_student().exists());
}

#[test]
fn zero_learning_rate_keeps_the_student() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path(), &["optimizer.learning_rate = 0.0"]);
    prepare(&config);
    pipeline::train(&config, Mode::Masters, None, false).unwrap();
    let init = Checkpoint::load(&Layout::new(&config).initial_student()).unwrap();
    let fin = Checkpoint::load(&run_dir(&config, Mode::Masters).join("final.ckpt")).unwrap();
    assert_eq!(init.params, fin.params);
}

#[test]
fn naive_equals_unmasked_masters_without_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(dir.path(), &["teachers.0.r_max = 0.0"]);
    prepare(&config);
    pipeline::train(&config, Mode::Naive, None, false).unwrap();
    let naive = pipeline::read_metrics(&run_dir(&config, Mode::Naive).join("metrics.csv")).unwrap();

    let layout = Layout::new(&config);
    let store = ResponseStore::open(&layout.store()).unwrap();
    let eval = pipeline::load_tasks(&layout.eval_tasks()).unwrap();
    let init = Checkpoint::load(&layout.initial_student()).unwrap();
    let student = Transformer::from_parts(init.config, init.params).unwrap();
    let mut settings = config.run_settings(Mode::Masters);
    settings.objective.policy = false;
    let teachers = |id: &str, ratio: f64| load_masked(&layout, id, ratio);
    let plan = config.plan(Mode::Masters).unwrap();
    assert_eq!(plan, config.plan(Mode::Naive).unwrap());
    let out = trainer::run(student, &plan, &teachers, &store.records, &store.questions, &eval, &settings).unwrap();

    let mut buf = Vec::new();
    trainer::write_metrics_csv(&out.metrics, &mut buf).unwrap();
    let naive_text = fs::read(run_dir(&config, Mode::Naive).join("metrics.csv")).unwrap();
    assert_eq!(buf, naive_text);
    assert_eq!(naive.len(), out.metrics.len());
}

fn tiny(seed: u64) -> Transformer {
    Transformer::new(ModelConfig { vocab_size: VOCAB_SIZE, context_len: 16, n_layers: 1, d_model: 8, n_heads: 2, seed })
        .unwrap()
}

#[test]
fn non_finite_teacher_is_a_numeric_error_and_keeps_state() {
    let q = generate_tasks(TaskFamily::SequenceCopy, 1, 1, 0).unwrap().remove(0);
    let stage = StageKey::new("t", 0.0);
    let group: Vec<ResponseRecord> = (0..4)
        .map(|k| ResponseRecord {
            seq: k as u64,
            question_id: q.question_id,
            stage: stage.clone(),
            source: Source::Student,
            sample_index: k,
            tokens: vec![18 + k as u32, 1],
            gen_logprobs: vec![-1.0, -1.0],
            judge_score: Some((k % 2) as f64),
            judge_rationale: None,
            distill_divergence: None,
            rewards: None,
        })
        .collect();
    let mut teacher = tiny(7);
    for e in teacher.params_mut().entries_mut() {
        e.values.iter_mut().for_each(|v| *v = f64::NAN);
    }
    let mut state = TrainState::new(tiny(3), OptimizerConfig { learning_rate: 1e-3, ..Default::default() });
    let before = state.student.params().clone();
    let entry = PlanEntry { iteration: 1, teacher_index: 0, teacher_id: "t".into(), stage: 0, ratio: 0.0, shard: 0, step_in_stage: 0 };
    let settings = StepSettings { objective: Default::default() };
    let err = train_step(&mut state, &entry, &teacher, &q.prompt, &group, &settings).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert_eq!(state.iteration, 0);
    assert_eq!(state.optimizer.steps, 0);
    assert!(state.metrics.is_empty());
    assert_eq!(state.student.params(), &before);

    // The same group trains fine against a finite teacher.
    train_step(&mut state, &entry, &tiny(7), &q.prompt, &group, &settings).unwrap();
    assert_eq!(state.iteration, 1);
    assert_ne!(state.student.params(), &before);
}
