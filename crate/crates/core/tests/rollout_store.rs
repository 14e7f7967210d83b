use std::fs;

use masters::model::{ModelConfig, Transformer};
use masters::rollout::{
    apply_repetition_penalty, greedy_decode, next_token_distribution, pregenerate, rescore, sample_response,
    PregenRequest, ResponseStore, Revision, SamplingConfig, Source, SourceMix, StagedTeacher, StageKey, StoreManifest,
    RECORDS_FILE,
};
use masters::seeding::rng_for;
use masters::tasks::{generate_tasks, TaskFamily, TaskInstance, VOCAB_SIZE};
use masters::Error;

fn model(seed: u64, d_model: usize) -> Transformer {
    Transformer::new(ModelConfig { vocab_size: VOCAB_SIZE, context_len: 24, n_layers: 1, d_model, n_heads: 2, seed })
        .unwrap()
}

fn questions(n: usize) -> Vec<TaskInstance> {
    generate_tasks(TaskFamily::ModularArithmetic, n, 1, 5).unwrap()
}

fn staged(ratios: &[f64]) -> Vec<StagedTeacher> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, &ratio)| StagedTeacher { teacher_id: "t".into(), ratio, model: model(100 + i as u64, 16) })
        .collect()
}

fn manifest(mix: SourceMix, stages: &[StagedTeacher]) -> StoreManifest {
    StoreManifest {
        seed: 9,
        mix,
        sampling: SamplingConfig::default(),
        stages: stages.iter().map(|s| StageKey::new(&s.teacher_id, s.ratio)).collect(),
    }
}

#[test]
fn penalty_on_three_token_vocabulary() {
    // vocab {a, b, c}, logits (2, -1, 0.5), "a" and "b" already generated, penalty 1.5
    let mut z = vec![2.0, -1.0, 0.5];
    apply_repetition_penalty(&mut z, &[0, 1], 1.5);
    assert!((z[0] - 2.0 / 1.5).abs() < 1e-15);
    assert!((z[1] + 1.5).abs() < 1e-15);
    assert_eq!(z[2], 0.5);

    let cfg = SamplingConfig { repetition_penalty: 1.5, top_p: 1.0, top_k: 3, ..Default::default() };
    let p = next_token_distribution(&[2.0, -1.0, 0.5], &[0, 1], &cfg);
    let e = [(2.0f64 / 1.5).exp(), (-1.5f64).exp(), 0.5f64.exp()];
    let total: f64 = e.iter().sum();
    for (pi, ei) in p.iter().zip(e) {
        assert!((pi - ei / total).abs() < 1e-12);
    }
}

#[test]
fn penalty_of_one_is_identity() {
    let mut z = vec![0.3, -0.7, 1.1];
    apply_repetition_penalty(&mut z, &[0, 1, 2, 2], 1.0);
    assert_eq!(z, vec![0.3, -0.7, 1.1]);
}

#[test]
fn greedy_flag_matches_argmax_and_top_k_one_matches_greedy() {
    let m = model(3, 8);
    let q = &questions(4)[2];
    let expected = greedy_decode(&m, &q.prompt, 6).unwrap();

    let mut seq = q.prompt.clone();
    let mut argmax_tokens = Vec::new();
    for _ in 0..6 {
        let logits = m.next_logits(&seq).unwrap();
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b }) as u32;
        argmax_tokens.push(best);
        seq.push(best);
        if best == masters::tasks::EOS {
            break;
        }
    }
    assert_eq!(expected, argmax_tokens);

    for temperature in [0.1, 1.0, 25.0] {
        let cfg = SamplingConfig { top_k: 1, temperature, repetition_penalty: 1.0, max_new_tokens: 6, ..Default::default() };
        let s = sample_response(&m, &q.prompt, &cfg, &mut rng_for(temperature.to_bits(), "k1")).unwrap();
        assert_eq!(s.tokens, expected, "temperature {temperature}");
        assert!(s.logprobs.iter().all(|&l| l == 0.0));
    }
}

#[test]
fn empty_prompt_is_a_domain_error() {
    let m = model(3, 8);
    let err = sample_response(&m, &[], &SamplingConfig::default(), &mut rng_for(0, "x")).unwrap_err();
    assert!(matches!(err, Error::Domain(_)));
}

#[test]
fn two_questions_five_stages_group_of_eight() {
    let qs = questions(2);
    let teachers = staged(&[0.2, 0.15, 0.1, 0.05, 0.0]);
    let student = model(1, 8);
    let mix = SourceMix { teacher: 4, student: 4 };
    let req = PregenRequest { questions: &qs, teachers: &teachers, student: &student, sampling: SamplingConfig::default(), mix, seed: 9 };
    let records = pregenerate(&req).unwrap();
    assert_eq!(records.len(), 80);

    let dir = tempfile::tempdir().unwrap();
    let store = ResponseStore::create(dir.path(), manifest(mix, &teachers), &qs, &records).unwrap();
    let groups = store.groups();
    assert_eq!(groups.len(), 10);
    for ((stage, _), group) in &groups {
        assert_eq!(group.len(), 8);
        let from_teacher = group.iter().filter(|r| matches!(r.source, Source::Teacher { .. })).count();
        assert_eq!(from_teacher, 4);
        for r in group {
            assert_eq!(&r.stage, stage);
            assert_eq!(r.tokens.len(), r.gen_logprobs.len());
        }
    }
    // Student responses are shared between stages of the same question.
    for q in &qs {
        let per_stage: Vec<Vec<Vec<u32>>> = groups
            .iter()
            .filter(|((_, qid), _)| *qid == q.question_id)
            .map(|(_, g)| g.iter().filter(|r| r.source == Source::Student).map(|r| r.tokens.clone()).collect())
            .collect();
        assert!(per_stage.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn all_student_mix() {
    let qs = questions(3);
    let teachers = staged(&[0.1, 0.0]);
    let student = model(1, 8);
    let mix = SourceMix { teacher: 0, student: 8 };
    let req = PregenRequest { questions: &qs, teachers: &teachers, student: &student, sampling: SamplingConfig::default(), mix, seed: 2 };
    let records = pregenerate(&req).unwrap();
    assert_eq!(records.len(), 3 * 2 * 8);
    assert!(records.iter().all(|r| r.source == Source::Student));
}

#[test]
fn generation_logprobs_match_rescoring() {
    let qs = questions(3);
    let teachers = staged(&[0.1]);
    let student = model(1, 8);
    let sampling = SamplingConfig::default();
    let req = PregenRequest { questions: &qs, teachers: &teachers, student: &student, sampling, mix: SourceMix::default(), seed: 4 };
    for r in pregenerate(&req).unwrap() {
        let m = match r.source {
            Source::Student => &student,
            Source::Teacher { .. } => &teachers[0].model,
        };
        let q = qs.iter().find(|q| q.question_id == r.question_id).unwrap();
        let again = rescore(m, &q.prompt, &r.tokens, &sampling).unwrap();
        for (a, b) in again.iter().zip(&r.gen_logprobs) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn rerun_writes_byte_identical_store() {
    let qs = questions(2);
    let teachers = staged(&[0.2, 0.1, 0.0]);
    let student = model(1, 8);
    let mix = SourceMix::default();
    let write = || {
        let req = PregenRequest { questions: &qs, teachers: &teachers, student: &student, sampling: SamplingConfig::default(), mix, seed: 77 };
        let dir = tempfile::tempdir().unwrap();
        ResponseStore::create(dir.path(), manifest(mix, &teachers), &qs, &pregenerate(&req).unwrap()).unwrap();
        let bytes = fs::read(dir.path().join(RECORDS_FILE)).unwrap();
        (dir, bytes)
    };
    let (_a, first) = write();
    let (_b, second) = write();
    assert_eq!(first, second);
}

#[test]
fn revisions_annotate_without_touching_tokens() {
    let qs = questions(2);
    let teachers = staged(&[0.0]);
    let student = model(1, 8);
    let mix = SourceMix::default();
    let req = PregenRequest { questions: &qs, teachers: &teachers, student: &student, sampling: SamplingConfig::default(), mix, seed: 3 };
    let records = pregenerate(&req).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ResponseStore::create(dir.path(), manifest(mix, &teachers), &qs, &records).unwrap();
    assert_eq!(store.unjudged().len(), records.len());

    let revisions: Vec<Revision> = records
        .iter()
        .map(|r| Revision { seq: r.seq, judge_score: Some(1.0), judge_rationale: None, distill_divergence: Some(0.25), rewards: None })
        .collect();
    store.append_revisions(&revisions).unwrap();
    assert!(store.unjudged().is_empty());
    for (before, after) in records.iter().zip(&store.records) {
        assert_eq!(before.tokens, after.tokens);
        assert_eq!(before.gen_logprobs, after.gen_logprobs);
        assert_eq!(after.judge_score, Some(1.0));
        assert_eq!(after.distill_divergence, Some(0.25));
    }

    let reopened = ResponseStore::open(dir.path()).unwrap();
    assert_eq!(reopened.records, store.records);
    assert!(matches!(
        ResponseStore::create(dir.path(), manifest(mix, &teachers), &qs, &records),
        Err(Error::OutputExists(_))
    ));
}
