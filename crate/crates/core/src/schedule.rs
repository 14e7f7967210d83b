//! Staged mask-ratio schedule and teacher curriculum.
//!
//! A sweep of `I` iterations over `M = r_max / s + 1` stages uses stage
//! `min(floor((i - 1) * M / I), M - 1)` at iteration `i` (1-based) and ratio
//! `r_max - s * stage`, so the last stage always runs the unmasked teacher.
//! A curriculum concatenates one full sweep per teacher.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding;

/// Ratios are rounded to this grid so `0.2 - 3 * 0.05` prints as `0.05`.
const RATIO_GRID: f64 = 1e9;

fn snap(ratio: f64) -> f64 {
    let snapped = (ratio * RATIO_GRID).round() / RATIO_GRID;
    if snapped == 0.0 { 0.0 } else { snapped }
}

/// `M = r_max / s + 1`; `r_max` must be a whole multiple of `s`.
pub fn stage_count(r_max: f64, decrement: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&r_max) {
        return Err(Error::config("r_max", format!("{r_max} outside [0, 1]")));
    }
    if r_max == 0.0 {
        return Ok(1);
    }
    if !(decrement > 0.0) {
        return Err(Error::config("decrement", "must be positive when r_max > 0"));
    }
    let steps = r_max / decrement;
    let whole = steps.round();
    if (steps - whole).abs() > 1e-9 {
        return Err(Error::config(
            "r_max",
            format!("{r_max} is not a whole multiple of the decrement {decrement}"),
        ));
    }
    Ok(whole as usize + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub index: usize,
    pub ratio: f64,
    /// Inclusive, 1-based.
    pub first: usize,
    pub last: usize,
}

impl Stage {
    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub r_max: f64,
    pub decrement: f64,
    pub iterations: usize,
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn new(r_max: f64, decrement: f64, iterations: usize) -> Result<Self> {
        let m = stage_count(r_max, decrement)?;
        if iterations < m {
            return Err(Error::config(
                "iterations",
                format!("{iterations} iterations cannot cover {m} stages"),
            ));
        }
        let stage_of = |i: usize| ((i - 1) * m / iterations).min(m - 1);
        let mut stages: Vec<Stage> = (0..m)
            .map(|index| Stage {
                index,
                ratio: snap(r_max - decrement * index as f64).max(0.0),
                first: usize::MAX,
                last: 0,
            })
            .collect();
        if let Some(last) = stages.last_mut() {
            last.ratio = 0.0;
        }
        for i in 1..=iterations {
            let st = &mut stages[stage_of(i)];
            st.first = st.first.min(i);
            st.last = st.last.max(i);
        }
        Ok(Self { r_max, decrement, iterations, stages })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_of(&self, i: usize) -> Result<usize> {
        if i == 0 || i > self.iterations {
            return Err(Error::Domain(format!("iteration {i} outside 1..={}", self.iterations)));
        }
        Ok(((i - 1) * self.stage_count() / self.iterations).min(self.stage_count() - 1))
    }

    pub fn ratio_at(&self, i: usize) -> Result<f64> {
        Ok(self.stages[self.stage_of(i)?].ratio)
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.ratio).collect()
    }
}

/// One teacher's slot in the curriculum.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSweep {
    pub teacher_id: String,
    pub r_max: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub iteration: usize,
    pub teacher_index: usize,
    pub teacher_id: String,
    pub stage: usize,
    pub ratio: f64,
    /// Shard index within the teacher's sweep; equals the stage index.
    pub shard: usize,
    /// 0-based position of this iteration inside its stage.
    pub step_in_stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub sweeps: Vec<(TeacherSweep, StageSchedule)>,
    entries: Vec<PlanEntry>,
}

impl StagePlan {
    pub fn iterations(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> Result<&PlanEntry> {
        if i == 0 || i > self.entries.len() {
            return Err(Error::Domain(format!("iteration {i} outside 1..={}", self.entries.len())));
        }
        Ok(&self.entries[i - 1])
    }

    /// Audit table: `iteration,teacher_id,ratio,shard`.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "iteration,teacher_id,ratio,shard")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", e.iteration, e.teacher_id, e.ratio, e.shard)?;
        }
        Ok(())
    }
}

/// Concatenates one schedule per teacher; budgets must sum to `iterations`.
pub fn stage_plan(sweeps: &[TeacherSweep], decrement: f64, iterations: usize) -> Result<StagePlan> {
    if sweeps.is_empty() {
        return Err(Error::config("teachers", "curriculum is empty"));
    }
    let total: usize = sweeps.iter().map(|s| s.budget).sum();
    if total != iterations {
        return Err(Error::config(
            "teachers.budget",
            format!("teacher budgets sum to {total}, expected {iterations}"),
        ));
    }
    let mut entries = Vec::with_capacity(iterations);
    let mut built = Vec::with_capacity(sweeps.len());
    for (teacher_index, sweep) in sweeps.iter().enumerate() {
        let schedule = StageSchedule::new(sweep.r_max, decrement, sweep.budget)
            .map_err(|e| match e {
                Error::Config { field, message } => {
                    Error::config(format!("teachers.{}.{field}", sweep.teacher_id), message)
                }
                other => other,
            })?;
        for local in 1..=sweep.budget {
            let stage = schedule.stage_of(local)?;
            let st = schedule.stages[stage];
            entries.push(PlanEntry {
                iteration: entries.len() + 1,
                teacher_index,
                teacher_id: sweep.teacher_id.clone(),
                stage,
                ratio: st.ratio,
                shard: stage,
                step_in_stage: local - st.first,
            });
        }
        built.push((sweep.clone(), schedule));
    }
    Ok(StagePlan { sweeps: built, entries })
}

/// Seeded uniform shuffle of `ids` split into `shards` contiguous, near-equal parts.
pub fn shard_questions(ids: &[u64], shards: usize, seed: u64, label: &str) -> Vec<Vec<u64>> {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seeding::rng_for(seed, label));
    let n = shuffled.len();
    (0..shards)
        .map(|k| shuffled[k * n / shards..(k + 1) * n / shards].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_count_rules() {
        assert_eq!(stage_count(0.2, 0.05).unwrap(), 5);
        assert_eq!(stage_count(0.4, 0.05).unwrap(), 9);
        assert_eq!(stage_count(0.0, 0.05).unwrap(), 1);
        assert!(stage_count(0.22, 0.05).is_err());
        assert!(stage_count(0.2, 0.0).is_err());
        assert!(stage_count(1.2, 0.1).is_err());
    }

    #[test]
    fn thousand_iteration_sweep() {
        let s = StageSchedule::new(0.2, 0.05, 1000).unwrap();
        assert_eq!(s.ratio_at(1).unwrap(), 0.2);
        assert_eq!(s.ratio_at(1000).unwrap(), 0.0);
        let mut seen = vec![];
        for i in 1..=1000 {
            let r = s.ratio_at(i).unwrap();
            if seen.last() != Some(&r) {
                seen.push(r);
            }
        }
        assert_eq!(seen, vec![0.2, 0.15, 0.1, 0.05, 0.0]);
        assert!(matches!(s.ratio_at(0), Err(Error::Domain(_))));
        assert!(matches!(s.ratio_at(1001), Err(Error::Domain(_))));
    }

    #[test]
    fn one_iteration_per_stage() {
        let s = StageSchedule::new(0.2, 0.05, 5).unwrap();
        let r: Vec<f64> = (1..=5).map(|i| s.ratio_at(i).unwrap()).collect();
        assert_eq!(r, vec![0.2, 0.15, 0.1, 0.05, 0.0]);
    }

    #[test]
    fn zero_r_max_is_plain_distillation() {
        let s = StageSchedule::new(0.0, 0.05, 37).unwrap();
        assert!((1..=37).all(|i| s.ratio_at(i).unwrap() == 0.0));
    }

    #[test]
    fn uneven_stage_lengths_differ_by_at_most_one() {
        let s = StageSchedule::new(0.2, 0.05, 1003).unwrap();
        let lens: Vec<usize> = s.stages.iter().map(Stage::len).collect();
        assert_eq!(lens.iter().sum::<usize>(), 1003);
        assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        assert!(StageSchedule::new(0.2, 0.05, 4).is_err());
    }

    #[test]
    fn single_teacher_plan_has_two_iterations_per_stage() {
        let plan = stage_plan(&[TeacherSweep { teacher_id: "t".into(), r_max: 0.2, budget: 10 }], 0.05, 10).unwrap();
        let shards: Vec<usize> = plan.entries().iter().map(|e| e.shard).collect();
        assert_eq!(shards, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        let steps: Vec<usize> = plan.entries().iter().map(|e| e.step_in_stage).collect();
        assert_eq!(steps, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn curriculum_concatenates_sweeps() {
        let sweeps = [
            TeacherSweep { teacher_id: "mid".into(), r_max: 0.2, budget: 20 },
            TeacherSweep { teacher_id: "large".into(), r_max: 0.2, budget: 20 },
        ];
        let plan = stage_plan(&sweeps, 0.05, 40).unwrap();
        assert!(plan.entries()[..20].iter().all(|e| e.teacher_id == "mid"));
        assert!(plan.entries()[20..].iter().all(|e| e.teacher_id == "large"));
        assert_eq!(plan.entry(20).unwrap().ratio, 0.0);
        assert_eq!(plan.entry(21).unwrap().ratio, 0.2);
        assert_eq!(plan.entry(40).unwrap().ratio, 0.0);

        let mut csv = Vec::new();
        plan.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 41);
        assert_eq!(text.lines().nth(1).unwrap(), "1,mid,0.2,0");
    }

    #[test]
    fn curriculum_errors() {
        assert!(matches!(stage_plan(&[], 0.05, 10), Err(Error::Config { .. })));
        let sweeps = [TeacherSweep { teacher_id: "t".into(), r_max: 0.2, budget: 9 }];
        assert!(matches!(stage_plan(&sweeps, 0.05, 10), Err(Error::Config { .. })));
    }

    #[test]
    fn shards_partition_the_questions() {
        let ids: Vec<u64> = (0..23).collect();
        let shards = shard_questions(&ids, 5, 3, "t");
        let mut all: Vec<u64> = shards.iter().flatten().copied().collect();
        assert!(shards.iter().all(|s| s.len() == 4 || s.len() == 5));
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(shards, shard_questions(&ids, 5, 3, "t"));
    }
}
