//! Accuracy judges.
//!
//! [`rule_judge`] is the deterministic judge used for synthetic tasks. The
//! LLM-judge surface is a pair of prompt templates (evaluation and parsing)
//! plus a reply parser; any external judge plugs in through those.

use serde::{Deserialize, Serialize};

pub const EVALUATION_TEMPLATE: &str = include_str!("../templates/evaluation_prompt.txt");
pub const PARSING_TEMPLATE: &str = include_str!("../templates/parsing_prompt.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub score: f64,
    pub rationale: Option<String>,
    /// Set when a judge reply could not be parsed and the score fell back to 0.
    #[serde(default)]
    pub flagged: bool,
}

impl JudgeVerdict {
    fn new(score: f64, rationale: &str) -> Self {
        Self { score, rationale: Some(rationale.to_string()), flagged: false }
    }
}

pub trait Judge: Sync {
    fn judge(&self, question: &str, generated: &str, label: &str) -> JudgeVerdict;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl Judge for RuleJudge {
    fn judge(&self, question: &str, generated: &str, label: &str) -> JudgeVerdict {
        rule_judge(question, generated, label)
    }
}

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

fn canonical_number(word: &str) -> Option<String> {
    if let Some(n) = NUMBER_WORDS.iter().position(|w| *w == word) {
        return Some(n.to_string());
    }
    let (int, frac) = word.split_once('.').unwrap_or((word, ""));
    let digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() || !digits(int) || !digits(frac) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = frac.trim_end_matches('0');
    Some(if frac.is_empty() { int.to_string() } else { format!("{int}.{frac}") })
}

/// Lowercase, trim, strip punctuation, canonicalize numerals, collapse spaces.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .filter_map(|raw| {
            let word = raw.trim_matches(|c: char| c.is_ascii_punctuation());
            if word.is_empty() {
                return None;
            }
            let out = canonical_number(word)
                .unwrap_or_else(|| word.chars().filter(|c| !c.is_ascii_punctuation()).collect());
            (!out.is_empty()).then_some(out)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// The answer portion of normalized text: whatever follows the last
/// "answer is", or the text after a leading "answer".
pub fn extract_answer(normalized: &str) -> &str {
    if let Some(idx) = normalized.rfind("answer is ") {
        return normalized[idx + "answer is ".len()..].trim();
    }
    normalized.strip_prefix("answer ").unwrap_or(normalized).trim()
}

/// True when some 4-token window occurs at least three times back to back.
pub fn is_repetitive(normalized: &str) -> bool {
    let words: Vec<&str> = normalized.split_whitespace().collect();
    const N: usize = 4;
    if words.len() < 3 * N {
        return false;
    }
    (0..=words.len() - 3 * N).any(|i| {
        let w = &words[i..i + N];
        w == &words[i + N..i + 2 * N] && w == &words[i + 2 * N..i + 3 * N]
    })
}

pub fn rule_judge(_question: &str, generated: &str, label: &str) -> JudgeVerdict {
    let gen = normalize(generated);
    let want = normalize(label);
    if want.is_empty() {
        return JudgeVerdict::new(0.0, "empty label");
    }
    if gen.is_empty() {
        return JudgeVerdict::new(0.0, "empty response");
    }
    if gen == want {
        return JudgeVerdict::new(1.0, "exact match");
    }
    if is_repetitive(&gen) {
        return JudgeVerdict::new(0.0, "repetitive response");
    }
    if extract_answer(&gen) == want {
        return JudgeVerdict::new(1.0, "answer match");
    }
    JudgeVerdict::new(0.0, "incorrect")
}

/// One chat message split into its system and user parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeMessage {
    pub system: String,
    pub user: String,
}

impl JudgeMessage {
    /// Reassembles the template layout: `System:` block, blank line, `User:` block.
    pub fn to_text(&self) -> String {
        format!("System:\n{}\nUser:\n{}", self.system, self.user)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgePromptPair {
    pub evaluation_prompt: String,
    pub parsing_prompt: String,
}

impl Default for JudgePromptPair {
    fn default() -> Self {
        Self { evaluation_prompt: EVALUATION_TEMPLATE.to_string(), parsing_prompt: PARSING_TEMPLATE.to_string() }
    }
}

fn fill(template: &str, slots: &[&str]) -> String {
    let parts: Vec<&str> = template.split("{}").collect();
    assert_eq!(parts.len(), slots.len() + 1, "template slot count");
    let mut out = String::with_capacity(template.len() + slots.iter().map(|s| s.len()).sum::<usize>());
    for (i, part) in parts.iter().enumerate() {
        out.push_str(part);
        if let Some(slot) = slots.get(i) {
            out.push_str(slot);
        }
    }
    out
}

fn split_message(text: &str) -> JudgeMessage {
    let body = text.strip_prefix("System:\n").expect("template starts with System:");
    let (system, user) = body.split_once("\nUser:\n").expect("template has a User: block");
    JudgeMessage { system: system.to_string(), user: user.to_string() }
}

impl JudgePromptPair {
    pub fn render_evaluation(&self, question: &str, generated: &str, label: &str) -> JudgeMessage {
        split_message(&fill(&self.evaluation_prompt, &[question, label, generated]))
    }

    pub fn render_parsing(&self, summary: &str) -> JudgeMessage {
        split_message(&fill(&self.parsing_prompt, &[summary]))
    }
}

/// Evaluation message for `(question, generated, label)` and the parsing
/// message with an empty summary slot, ready to receive the evaluation reply.
pub fn render_judge_prompts(question: &str, generated: &str, label: &str) -> (JudgeMessage, JudgeMessage) {
    let pair = JudgePromptPair::default();
    (pair.render_evaluation(question, generated, label), pair.render_parsing(""))
}

/// Score from a judge reply: the `<answer>` tag when present, otherwise the
/// last standalone `0`/`1`. Anything else scores 0 and is flagged.
pub fn parse_judge_reply(reply: &str) -> JudgeVerdict {
    if let Some(start) = reply.rfind("<answer>") {
        let rest = &reply[start + "<answer>".len()..];
        if let Some(end) = rest.find("</answer>") {
            match rest[..end].trim() {
                "0" => return JudgeVerdict::new(0.0, "answer tag"),
                "1" => return JudgeVerdict::new(1.0, "answer tag"),
                _ => {}
            }
        }
    }
    let last = reply
        .split(|c: char| !c.is_ascii_alphanumeric())
        .rfind(|w| *w == "0" || *w == "1");
    match last {
        Some("1") => JudgeVerdict::new(1.0, "standalone score"),
        Some(_) => JudgeVerdict::new(0.0, "standalone score"),
        None => JudgeVerdict { score: 0.0, rationale: Some("unparseable judge reply".into()), flagged: true },
    }
}
