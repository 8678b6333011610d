//! Scoring model answers against a spatial benchmark key.
//!
//! Task scoring rules:
//!
//! | task       | rule                                                        |
//! |------------|-------------------------------------------------------------|
//! | `depth`    | mean of `max(0, 1 - |gt - est| / gt) * 100`                  |
//! | `mcq`      | `100 * correct / items`                                     |
//! | `counting` | as `mcq`                                                    |
//! | `pair`     | `100 * pairs with both members correct / pairs`             |
//! | `reaching`, `size` | `choice ratio * (100 - w) + pair ratio * w` (bonus) |
//!
//! The overall score is the unweighted mean of the tasks present in the key.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BONUS_WEIGHT: f64 = 33.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("item {id}: depth ground truth must be positive, got {value}")]
    NonPositiveDepth { id: String, value: f64 },
    #[error("item {id}: ground truth must be {expected}")]
    WrongTruthType { id: String, expected: &'static str },
    #[error("item {id}: ground truth {truth:?} is not among the options")]
    TruthNotAnOption { id: String, truth: String },
    #[error("pair {pair} has {count} items, expected 2")]
    UnmatchedPair { pair: String, count: usize },
    #[error("task {task:?} requires every item to carry a pair id (item {id})")]
    MissingPairId { task: Task, id: String },
    #[error("duplicate item id {0}")]
    DuplicateId(String),
    #[error("bonus weight {0} must lie in [0, 100]")]
    BadBonusWeight(f64),
    #[error("prediction line {line}: {message}")]
    BadPrediction { line: usize, message: String },
    #[error("malformed key: {0}")]
    BadKey(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Depth,
    Mcq,
    Pair,
    Reaching,
    Size,
    Counting,
}

/// A ground truth or a prediction: a number or a choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Number(f64),
    Choice(String),
}

impl Answer {
    /// Numeric reading; strings yield their first decimal number, so
    /// `"about 1200mm"` reads as 1200.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Answer::Number(n) => n.is_finite().then_some(*n),
            Answer::Choice(s) => first_number(s),
        }
    }

    fn as_choice(&self) -> String {
        match self {
            Answer::Number(n) => n.to_string(),
            Answer::Choice(s) => normalize_choice(s),
        }
    }
}

fn first_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let start = bytes.iter().position(|b| b.is_ascii_digit())?;
    let mut end = start;
    let mut seen_dot = false;
    while end < bytes.len() {
        match bytes[end] {
            b'0'..=b'9' => {}
            b'.' if !seen_dot && bytes.get(end + 1).is_some_and(u8::is_ascii_digit) => seen_dot = true,
            _ => break,
        }
        end += 1;
    }
    let neg = start > 0 && bytes[start - 1] == b'-';
    let v: f64 = s[start..end].parse().ok()?;
    Some(if neg { -v } else { v })
}

fn normalize_choice(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', ')'])
        .trim_start_matches('(')
        .trim()
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyItem {
    pub id: String,
    pub task: Task,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub items: Vec<KeyItem>,
}

impl AnswerKey {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ScoreError> {
        let key: Self = serde_json::from_slice(bytes).map_err(|e| ScoreError::BadKey(e.to_string()))?;
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let mut seen = std::collections::HashSet::new();
        let mut pairs: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(ScoreError::DuplicateId(item.id.clone()));
            }
            match item.task {
                Task::Depth => match item.answer {
                    Answer::Number(v) if v > 0.0 && v.is_finite() => {}
                    Answer::Number(v) => {
                        return Err(ScoreError::NonPositiveDepth {
                            id: item.id.clone(),
                            value: v,
                        })
                    }
                    Answer::Choice(_) => {
                        return Err(ScoreError::WrongTruthType {
                            id: item.id.clone(),
                            expected: "a number",
                        })
                    }
                },
                _ => {
                    if let Some(opts) = &item.options {
                        let truth = item.answer.as_choice();
                        if !opts.iter().any(|o| normalize_choice(o) == truth) {
                            return Err(ScoreError::TruthNotAnOption {
                                id: item.id.clone(),
                                truth,
                            });
                        }
                    }
                }
            }
            if item.task == Task::Pair && item.pair_id.is_none() {
                return Err(ScoreError::MissingPairId {
                    task: item.task,
                    id: item.id.clone(),
                });
            }
            if let Some(p) = &item.pair_id {
                *pairs.entry(p.as_str()).or_default() += 1;
            }
        }
        if let Some((pair, &count)) = pairs.iter().find(|(_, &c)| c != 2) {
            return Err(ScoreError::UnmatchedPair {
                pair: (*pair).to_owned(),
                count,
            });
        }
        Ok(())
    }

    fn items_for(&self, task: Task) -> Vec<&KeyItem> {
        self.items.iter().filter(|i| i.task == task).collect()
    }
}

/// Model answers by item id.
pub type Predictions = HashMap<String, Answer>;

#[derive(Debug, Deserialize)]
struct PredictionLine {
    id: String,
    answer: Answer,
}

/// Parses JSONL `{"id": ..., "answer": ...}` lines. Later lines win on
/// duplicate ids.
pub fn parse_predictions(text: &str) -> Result<Predictions, ScoreError> {
    let mut out = Predictions::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| ScoreError::BadPrediction {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(p.id, p.answer);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Unanswered,
    NotAnOption,
    NotNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub id: String,
    pub task: Task,
    pub correct: bool,
    /// Per-item score in `[0, 100]`.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

/// One task's contribution to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Task,
    pub score: f64,
    pub items: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    pub verdicts: Vec<ItemVerdict>,
}

fn unanswered(item: &KeyItem) -> ItemVerdict {
    ItemVerdict {
        id: item.id.clone(),
        task: item.task,
        correct: false,
        score: 0.0,
        flag: Some(Flag::Unanswered),
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

/// Relative depth accuracy in percent, floored at 0.
pub fn depth_accuracy(gt: f64, est: f64) -> f64 {
    (1.0 - (gt - est).abs() / gt).max(0.0) * 100.0
}

fn depth_verdict(item: &KeyItem, pred: Option<&Answer>) -> ItemVerdict {
    let gt = item.answer.as_number().unwrap_or(f64::NAN);
    match pred.map(Answer::as_number) {
        None => unanswered(item),
        Some(None) => ItemVerdict {
            flag: Some(Flag::NotNumeric),
            ..unanswered(item)
        },
        Some(Some(est)) => {
            let score = depth_accuracy(gt, est);
            ItemVerdict {
                id: item.id.clone(),
                task: item.task,
                correct: score == 100.0,
                score,
                flag: None,
            }
        }
    }
}

fn choice_verdict(item: &KeyItem, pred: Option<&Answer>) -> ItemVerdict {
    let Some(pred) = pred else {
        return unanswered(item);
    };
    let choice = pred.as_choice();
    let in_options = item
        .options
        .as_ref()
        .is_none_or(|o| o.iter().any(|opt| normalize_choice(opt) == choice));
    let correct = in_options && choice == item.answer.as_choice();
    ItemVerdict {
        id: item.id.clone(),
        task: item.task,
        correct,
        score: if correct { 100.0 } else { 0.0 },
        flag: (!in_options).then_some(Flag::NotAnOption),
    }
}

pub fn score_depth(preds: &Predictions, key: &AnswerKey) -> TaskScore {
    let items = key.items_for(Task::Depth);
    let verdicts: Vec<_> = items.iter().map(|i| depth_verdict(i, preds.get(&i.id))).collect();
    TaskScore {
        task: Task::Depth,
        score: mean(verdicts.iter().map(|v| v.score)),
        items: items.len(),
        pairs: None,
        verdicts,
    }
}

fn choice_score(preds: &Predictions, key: &AnswerKey, task: Task) -> TaskScore {
    let items = key.items_for(task);
    let verdicts: Vec<_> = items.iter().map(|i| choice_verdict(i, preds.get(&i.id))).collect();
    TaskScore {
        task,
        score: ratio(verdicts.iter().filter(|v| v.correct).count(), verdicts.len()),
        items: items.len(),
        pairs: None,
        verdicts,
    }
}

/// Multiple-choice accuracy over `mcq` items.
pub fn score_mcq(preds: &Predictions, key: &AnswerKey) -> TaskScore {
    choice_score(preds, key, Task::Mcq)
}

pub fn score_counting(preds: &Predictions, key: &AnswerKey) -> TaskScore {
    choice_score(preds, key, Task::Counting)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// (pairs with both members correct, total pairs)
fn pair_counts(verdicts: &[ItemVerdict], items: &[&KeyItem]) -> (usize, usize) {
    let mut by_pair: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (item, v) in items.iter().zip(verdicts) {
        if let Some(p) = &item.pair_id {
            by_pair.entry(p).or_default().push(v.correct);
        }
    }
    let correct = by_pair.values().filter(|v| v.iter().all(|&c| c)).count();
    (correct, by_pair.len())
}

/// Positive/negative pairs: a pair counts only if both answers are right.
pub fn score_pairs(preds: &Predictions, key: &AnswerKey) -> TaskScore {
    let items = key.items_for(Task::Pair);
    let verdicts: Vec<_> = items.iter().map(|i| choice_verdict(i, preds.get(&i.id))).collect();
    let (correct, total) = pair_counts(&verdicts, &items);
    TaskScore {
        task: Task::Pair,
        score: ratio(correct, total),
        items: items.len(),
        pairs: Some(total),
        verdicts,
    }
}

/// Choice accuracy scaled to `100 - bonus_weight`, plus `bonus_weight`
/// times the fraction of fully correct pairs. Items without a pair id only
/// contribute to the base.
pub fn score_with_bonus(
    preds: &Predictions,
    key: &AnswerKey,
    task: Task,
    bonus_weight: f64,
) -> Result<TaskScore, ScoreError> {
    if !(0.0..=100.0).contains(&bonus_weight) {
        return Err(ScoreError::BadBonusWeight(bonus_weight));
    }
    let items = key.items_for(task);
    let verdicts: Vec<_> = items.iter().map(|i| choice_verdict(i, preds.get(&i.id))).collect();
    let base = ratio(verdicts.iter().filter(|v| v.correct).count(), verdicts.len()) / 100.0
        * (100.0 - bonus_weight);
    let (correct, total) = pair_counts(&verdicts, &items);
    let bonus = ratio(correct, total) / 100.0 * bonus_weight;
    Ok(TaskScore {
        task,
        score: base + bonus,
        items: items.len(),
        pairs: Some(total),
        verdicts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub score: f64,
    pub items: usize,
    pub unanswered: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub overall: f64,
    pub bonus_weight: f64,
    pub tasks: BTreeMap<Task, TaskSummary>,
    pub unanswered: usize,
    pub verdicts: Vec<ItemVerdict>,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Assembles task scores into a report; overall is the unweighted mean.
pub fn aggregate(parts: Vec<TaskScore>, bonus_weight: f64) -> ScoreReport {
    let mut tasks = BTreeMap::new();
    let mut verdicts = Vec::new();
    for part in parts {
        let unanswered = part
            .verdicts
            .iter()
            .filter(|v| v.flag == Some(Flag::Unanswered))
            .count();
        tasks.insert(
            part.task,
            TaskSummary {
                score: part.score,
                items: part.items,
                unanswered,
                pairs: part.pairs,
            },
        );
        verdicts.extend(part.verdicts);
    }
    let overall = mean(tasks.values().map(|t| t.score).collect::<Vec<_>>().into_iter());
    let unanswered = tasks.values().map(|t| t.unanswered).sum();
    ScoreReport {
        overall,
        bonus_weight,
        tasks,
        unanswered,
        verdicts,
    }
}

/// Scores every task present in the key.
pub fn score_all(preds: &Predictions, key: &AnswerKey, bonus_weight: f64) -> Result<ScoreReport, ScoreError> {
    key.validate()?;
    if !(0.0..=100.0).contains(&bonus_weight) {
        return Err(ScoreError::BadBonusWeight(bonus_weight));
    }
    let present: std::collections::BTreeSet<Task> = key.items.iter().map(|i| i.task).collect();
    let mut parts = Vec::new();
    for task in present {
        parts.push(match task {
            Task::Depth => score_depth(preds, key),
            Task::Mcq => score_mcq(preds, key),
            Task::Counting => score_counting(preds, key),
            Task::Pair => score_pairs(preds, key),
            Task::Reaching | Task::Size => score_with_bonus(preds, key, task, bonus_weight)?,
        });
    }
    Ok(aggregate(parts, bonus_weight))
}
