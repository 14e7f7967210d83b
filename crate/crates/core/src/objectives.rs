//! Loss-side mathematics.
//!
//! All divergences use natural logarithms. Sequence-level quantities are
//! computed by teacher forcing: the model reads `prompt ++ response[..n-1]`
//! and the rows at positions `prompt.len()-1 ..` predict the response tokens.
//!
//! The unified objective for a group of `G` responses is
//!
//! ```text
//! L = -(1/G) sum_j [ mean_t(ratio_jt * A_j) - beta * KL_j ] + (1/G) sum_j JSD_j
//! ```
//!
//! where `ratio_jt = exp(logp_jt - anchor_jt)` with the anchor being the
//! detached current log-probability, so the ratio is one in value but carries
//! the policy-gradient direction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax, ParameterView, Transformer};

pub const DEFAULT_BETA: f64 = 0.1;
pub const ADVANTAGE_EPS: f64 = 1e-8;
/// Groups whose reward spread is below this are treated as constant.
const FLAT_STD: f64 = 1e-12;

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log of the mixture `(P + Q) / 2`, elementwise.
fn log_mixture(p_logp: &[f64], q_logp: &[f64]) -> Vec<f64> {
    p_logp.iter().zip(q_logp).map(|(&a, &b)| logsumexp2(a, b) - std::f64::consts::LN_2).collect()
}

fn kl_terms(p_logp: &[f64], m_logp: &[f64]) -> f64 {
    p_logp
        .iter()
        .zip(m_logp)
        .map(|(&lp, &lm)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lm) })
        .sum()
}

/// JSD between two distributions given as log-probabilities.
pub fn jsd_from_log_probs(p_logp: &[f64], q_logp: &[f64]) -> f64 {
    if p_logp == q_logp {
        return 0.0;
    }
    let m = log_mixture(p_logp, q_logp);
    (0.5 * kl_terms(p_logp, &m) + 0.5 * kl_terms(q_logp, &m)).max(0.0)
}

/// `KL(P || Q)` from log-probabilities.
pub fn kl_from_log_probs(p_logp: &[f64], q_logp: &[f64]) -> f64 {
    kl_terms(p_logp, q_logp).max(0.0)
}

/// Jensen-Shannon divergence between the softmax distributions of two rows.
pub fn jsd(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Structural(format!(
            "vocab sizes differ: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    Ok(jsd_from_log_probs(&log_softmax(p_logits)?, &log_softmax(q_logits)?))
}

/// Gradient of `JSD(P || Q)` with respect to the logits of `Q`:
/// `q_k (h_k - sum_j q_j h_j)` with `h_k = (ln q_k - ln m_k) / 2`.
fn jsd_grad_q_logits(p_logp: &[f64], q_logp: &[f64]) -> Vec<f64> {
    let m = log_mixture(p_logp, q_logp);
    let h: Vec<f64> = q_logp.iter().zip(&m).map(|(&lq, &lm)| 0.5 * (lq - lm)).collect();
    softmax_chain(q_logp, &h)
}

/// Gradient of `KL(Q || R)` with respect to the logits of `Q`.
fn kl_grad_q_logits(q_logp: &[f64], r_logp: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = q_logp.iter().zip(r_logp).map(|(&a, &b)| a - b).collect();
    softmax_chain(q_logp, &g)
}

/// Maps a gradient with respect to probabilities onto logits.
fn softmax_chain(q_logp: &[f64], g: &[f64]) -> Vec<f64> {
    let q: Vec<f64> = q_logp.iter().map(|l| l.exp()).collect();
    let mean: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    q.iter().zip(g).map(|(qi, gi)| qi * (gi - mean)).collect()
}

/// Model input and the index of the first response-predicting row.
pub fn teacher_forced_input(prompt: &[u32], response: &[u32]) -> Result<(Vec<u32>, usize)> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Domain("teacher forcing needs a prompt and a response".into()));
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&response[..response.len() - 1]);
    Ok((input, prompt.len() - 1))
}

/// Log-probability rows at every response position.
pub fn response_log_probs(model: &Transformer, prompt: &[u32], response: &[u32]) -> Result<Vec<Vec<f64>>> {
    let (input, start) = teacher_forced_input(prompt, response)?;
    let cache = model.forward_cached(&input)?;
    let v = model.config().vocab_size;
    (start..input.len()).map(|t| log_softmax(cache.logits_at(t, v))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub per_token: Vec<f64>,
    pub mean: f64,
}

impl DivergenceReport {
    pub fn from_rows(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Self {
        let per_token: Vec<f64> = teacher.iter().zip(student).map(|(p, q)| jsd_from_log_probs(p, q)).collect();
        let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
        Self { per_token, mean }
    }
}

/// Token-level JSD between teacher and student along a fixed response.
pub fn sequence_divergence(
    teacher: &Transformer,
    student: &Transformer,
    prompt: &[u32],
    response: &[u32],
) -> Result<DivergenceReport> {
    if teacher.config().vocab_size != student.config().vocab_size {
        return Err(Error::Structural("teacher and student vocabularies differ".into()));
    }
    let t = response_log_probs(teacher, prompt, response)?;
    let s = response_log_probs(student, prompt, response)?;
    Ok(DivergenceReport::from_rows(&t, &s))
}

/// Reverse min-max normalization: smallest divergence maps to 1, largest to 0.
/// A group with no spread maps to 0.5 everywhere.
pub fn distill_reward(divergences: &[f64]) -> Result<Vec<f64>> {
    if divergences.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 divergences, got {}", divergences.len())));
    }
    if divergences.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite divergence".into()));
    }
    let max = divergences.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = divergences.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(vec![0.5; divergences.len()]);
    }
    Ok(divergences
        .iter()
        .map(|&d| if d == min { 1.0 } else if d == max { 0.0 } else { (max - d) / (max - min) })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub acc: f64,
    pub distill: f64,
    pub total: f64,
}

impl RewardBundle {
    pub fn new(acc: f64, distill: f64) -> Self {
        Self { acc, distill, total: acc + distill }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Group-normalized advantages `(R - mean) / (std + eps)` with the
/// population standard deviation; constant groups get zeros.
pub fn advantages(rewards: &[f64]) -> Result<AdvantageGroup> {
    if rewards.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let advantages = if std <= FLAT_STD {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
    };
    Ok(AdvantageGroup { rewards: rewards.to_vec(), advantages })
}

/// Which terms of the unified objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub beta: f64,
    /// Policy-gradient and KL terms.
    pub policy: bool,
    /// Teacher/student JSD term.
    pub distill: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, policy: true, distill: true }
    }
}

/// One response of a group, with its advantage.
#[derive(Debug, Clone, Copy)]
pub struct GroupItem<'a> {
    pub prompt: &'a [u32],
    pub response: &'a [u32],
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub total: f64,
    /// `-(1/G) sum_j mean_t(ratio * A_j) + beta * kl`.
    pub grpo: f64,
    /// `(1/G) sum_j mean_t(ratio * A_j)`.
    pub policy: f64,
    /// Group mean of the per-record token-mean `KL(student || reference)`.
    pub kl: f64,
    /// Group mean of the per-record token-mean JSD.
    pub jsd: f64,
}

struct RecordOutcome {
    policy: f64,
    kl: f64,
    jsd: f64,
    grads: ParameterView,
}

/// Value and student gradient of the unified objective.
///
/// `anchors`, when given, fixes the detached log-probabilities in the policy
/// ratio (one row of per-token values per item); by default they equal the
/// student's current log-probabilities. The teacher is required when the
/// distillation term is on and the reference when the policy term is on.
pub fn final_objective(
    student: &Transformer,
    teacher: Option<&Transformer>,
    reference: Option<&Transformer>,
    group: &[GroupItem<'_>],
    config: ObjectiveConfig,
    anchors: Option<&[Vec<f64>]>,
) -> Result<(ObjectiveTerms, ParameterView)> {
    if group.is_empty() {
        return Err(Error::Structural("empty group".into()));
    }
    if let Some(a) = anchors {
        if a.len() != group.len() {
            return Err(Error::Structural("anchors misaligned with group".into()));
        }
    }
    let teacher = match (config.distill, teacher) {
        (true, None) => return Err(Error::Structural("distillation term needs a teacher".into())),
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let reference = match (config.policy, reference) {
        (true, None) => return Err(Error::Structural("policy term needs a reference".into())),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let v = student.config().vocab_size;
    for m in teacher.iter().chain(reference.iter()) {
        if m.config().vocab_size != v {
            return Err(Error::Structural("models disagree on vocabulary size".into()));
        }
    }
    let g = group.len() as f64;

    let outcomes = group
        .par_iter()
        .enumerate()
        .map(|(j, item)| {
            let (input, start) = teacher_forced_input(item.prompt, item.response)?;
            let cache = student.forward_cached(&input)?;
            let teacher_rows = teacher.map(|t| response_log_probs(t, item.prompt, item.response)).transpose()?;
            let ref_rows = reference.map(|r| response_log_probs(r, item.prompt, item.response)).transpose()?;
            let steps = item.response.len();
            if let Some(a) = anchors {
                if a[j].len() != steps {
                    return Err(Error::Structural(format!("anchor row {j} has wrong length")));
                }
            }
            let inv = 1.0 / (g * steps as f64);
            let mut dlogits = vec![0.0; input.len() * v];
            let (mut policy, mut kl, mut jsd_sum) = (0.0, 0.0, 0.0);
            for (s, &token) in item.response.iter().enumerate() {
                let t = start + s;
                let q = log_softmax(cache.logits_at(t, v))?;
                let row = &mut dlogits[t * v..(t + 1) * v];
                if let Some(r) = &ref_rows {
                    let logp = q[token as usize];
                    let anchor = anchors.map_or(logp, |a| a[j][s]);
                    let ratio = (logp - anchor).exp();
                    policy += ratio * item.advantage;
                    // d(ratio * A)/dz = ratio * A * (onehot - q); the loss has a minus sign.
                    for (k, gk) in row.iter_mut().enumerate() {
                        let onehot = if k == token as usize { 1.0 } else { 0.0 };
                        *gk -= inv * ratio * item.advantage * (onehot - q[k].exp());
                    }
                    kl += kl_from_log_probs(&q, &r[s]);
                    for (gk, d) in row.iter_mut().zip(kl_grad_q_logits(&q, &r[s])) {
                        *gk += inv * config.beta * d;
                    }
                }
                if let Some(p) = &teacher_rows {
                    jsd_sum += jsd_from_log_probs(&p[s], &q);
                    for (gk, d) in row.iter_mut().zip(jsd_grad_q_logits(&p[s], &q)) {
                        *gk += inv * d;
                    }
                }
            }
            let grads = student.backward_cached(&cache, &dlogits)?;
            let n = steps as f64;
            Ok(RecordOutcome { policy: policy / n, kl: kl / n, jsd: jsd_sum / n, grads })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = student.params().zeros_like();
    let mut terms = ObjectiveTerms::default();
    for o in &outcomes {
        grads.add_assign(&o.grads);
        terms.policy += o.policy / g;
        terms.kl += o.kl / g;
        terms.jsd += o.jsd / g;
    }
    if config.policy {
        terms.grpo = -terms.policy + config.beta * terms.kl;
    }
    terms.total = terms.grpo + if config.distill { terms.jsd } else { 0.0 };
    Ok((terms, grads))
}

/// The simplified GRPO loss alone (no distillation term).
pub fn grpo_loss(
    student: &Transformer,
    reference: &Transformer,
    group: &[GroupItem<'_>],
    beta: f64,
) -> Result<(ObjectiveTerms, ParameterView)> {
    final_objective(student, None, Some(reference), group, ObjectiveConfig { beta, policy: true, distill: false }, None)
}
