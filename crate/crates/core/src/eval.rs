//! Human-evaluation metrics: plausibility accuracy, Fleiss' kappa over 0/1
//! ratings and per-question-type reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DatasetManifest, QuestionType};
use crate::pipeline::RunLog;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("accuracy of an empty list is undefined")]
    Empty,
    #[error("score must be 0 or 1, got {0}")]
    Score(i64),
    #[error("rating matrix needs at least {what}, got {got}")]
    Shape { what: &'static str, got: usize },
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("duplicate rating by `{evaluator}` for `{question}`")]
    DuplicateRating { evaluator: String, question: String },
    #[error("no item is rated by every rater")]
    NoCompleteItems,
    #[error("majority vote needs an odd number of raters, got {0}")]
    EvenRaters(usize),
    #[error("kappa is undefined: expected agreement is 1 but observed agreement is {0}")]
    UndefinedKappa(f64),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("question `{0}` has no answer in the run log")]
    NotAnswered(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One evaluator's 0/1 judgment of one answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub evaluator_id: String,
    pub question_id: String,
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_note: Option<String>,
}

fn check_score(score: i64) -> Result<u8, EvalError> {
    match score {
        0 | 1 => Ok(score as u8),
        other => Err(EvalError::Score(other)),
    }
}

/// Parses a JSON Lines ratings file. Unknown fields (e.g. `task_id`,
/// `timestamp` written by the annotation service) are ignored.
pub fn parse_ratings_jsonl(text: &str) -> Result<Vec<Rating>, EvalError> {
    #[derive(Deserialize)]
    struct Line {
        evaluator_id: String,
        question_id: String,
        score: i64,
        #[serde(default)]
        rubric_note: Option<String>,
    }
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parse = |message: String| EvalError::Parse { line: i + 1, message };
        let line: Line = serde_json::from_str(raw).map_err(|e| parse(e.to_string()))?;
        let score = check_score(line.score).map_err(|e| parse(e.to_string()))?;
        out.push(Rating {
            evaluator_id: line.evaluator_id,
            question_id: line.question_id,
            score,
            rubric_note: line.rubric_note,
        });
    }
    Ok(out)
}

/// Complete items × raters grid of 0/1 scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RatingMatrix {
    items: Vec<String>,
    raters: Vec<String>,
    cells: Vec<Vec<u8>>,
}

impl RatingMatrix {
    pub fn new(
        items: Vec<String>,
        raters: Vec<String>,
        cells: Vec<Vec<u8>>,
    ) -> Result<Self, EvalError> {
        if items.is_empty() {
            return Err(EvalError::Shape { what: "1 item", got: 0 });
        }
        if raters.len() < 2 {
            return Err(EvalError::Shape { what: "2 raters", got: raters.len() });
        }
        if cells.len() != items.len() {
            return Err(EvalError::Shape { what: "one row per item", got: cells.len() });
        }
        for (row, r) in cells.iter().enumerate() {
            if r.len() != raters.len() {
                return Err(EvalError::Ragged { row, got: r.len(), expected: raters.len() });
            }
            if let Some(&bad) = r.iter().find(|&&s| s > 1) {
                return Err(EvalError::Score(bad.into()));
            }
        }
        Ok(Self { items, raters, cells })
    }

    /// Unlabelled matrix; items and raters are numbered.
    pub fn from_cells(cells: Vec<Vec<u8>>) -> Result<Self, EvalError> {
        let n = cells.first().map_or(0, Vec::len);
        let items = (0..cells.len()).map(|i| format!("item{i}")).collect();
        let raters = (0..n).map(|j| format!("rater{j}")).collect();
        Self::new(items, raters, cells)
    }

    /// The sub-matrix of items rated by every rater. Raters default to the
    /// distinct evaluators in order of first appearance; items keep their
    /// order of first appearance in `ratings`.
    pub fn from_ratings(ratings: &[Rating], raters: Option<&[String]>) -> Result<Self, EvalError> {
        let raters: Vec<String> = match raters {
            Some(r) => r.to_vec(),
            None => {
                let mut seen = HashSet::new();
                ratings
                    .iter()
                    .filter(|r| seen.insert(r.evaluator_id.as_str()))
                    .map(|r| r.evaluator_id.clone())
                    .collect()
            }
        };
        if raters.len() < 2 {
            return Err(EvalError::Shape { what: "2 raters", got: raters.len() });
        }
        let col: HashMap<&str, usize> =
            raters.iter().enumerate().map(|(j, r)| (r.as_str(), j)).collect();

        let mut items: Vec<String> = Vec::new();
        let mut rows: HashMap<&str, Vec<Option<u8>>> = HashMap::new();
        for r in ratings {
            let Some(&j) = col.get(r.evaluator_id.as_str()) else {
                continue;
            };
            let row = rows.entry(r.question_id.as_str()).or_insert_with(|| {
                items.push(r.question_id.clone());
                vec![None; raters.len()]
            });
            if row[j].replace(r.score).is_some() {
                return Err(EvalError::DuplicateRating {
                    evaluator: r.evaluator_id.clone(),
                    question: r.question_id.clone(),
                });
            }
        }

        let mut kept = Vec::new();
        let mut cells = Vec::new();
        for item in items {
            let row = &rows[item.as_str()];
            if let Some(full) = row.iter().copied().collect::<Option<Vec<u8>>>() {
                cells.push(full);
                kept.push(item);
            }
        }
        if kept.is_empty() {
            return Err(EvalError::NoCompleteItems);
        }
        Self::new(kept, raters, cells)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn cells(&self) -> &[Vec<u8>] {
        &self.cells
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }
}

/// Share of ones in a list of 0/1 judgments.
pub fn accuracy(plausibility: &[u8]) -> Result<f64, EvalError> {
    if plausibility.is_empty() {
        return Err(EvalError::Empty);
    }
    let ones = plausibility.iter().filter(|&&p| p == 1).count();
    Ok(ones as f64 / plausibility.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Strict majority over an odd number of raters, one value per item.
    #[default]
    Majority,
    /// Every cell counts as its own observation.
    PerRating,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Majority => "majority",
            Aggregation::PerRating => "per_rating",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "majority" => Ok(Aggregation::Majority),
            "per_rating" => Ok(Aggregation::PerRating),
            other => Err(format!("unknown aggregation `{other}`")),
        }
    }
}

/// Observations `(question_id, score)` that feed accuracy. Majority yields
/// one per item; per-rating yields one per cell.
pub fn aggregate_plausibility(
    matrix: &RatingMatrix,
    mode: Aggregation,
) -> Result<Vec<(String, u8)>, EvalError> {
    let n = matrix.n_raters();
    match mode {
        Aggregation::Majority => {
            if n.is_multiple_of(2) {
                return Err(EvalError::EvenRaters(n));
            }
            Ok(matrix
                .items
                .iter()
                .zip(&matrix.cells)
                .map(|(id, row)| {
                    let ones = row.iter().filter(|&&s| s == 1).count();
                    (id.clone(), u8::from(2 * ones > n))
                })
                .collect())
        }
        Aggregation::PerRating => Ok(matrix
            .items
            .iter()
            .zip(&matrix.cells)
            .flat_map(|(id, row)| row.iter().map(move |&s| (id.clone(), s)))
            .collect()),
    }
}

/// Fleiss' kappa for two categories.
///
/// Computed on integer counts with one final division, so the value does
/// not depend on item or rater order.
pub fn fleiss_kappa(matrix: &RatingMatrix) -> Result<f64, EvalError> {
    let n = matrix.n_raters() as i128;
    let big_n = matrix.n_items() as i128;
    let (mut sum_sq, mut ones) = (0i128, 0i128);
    for row in &matrix.cells {
        let n1 = row.iter().filter(|&&s| s == 1).count() as i128;
        let n0 = n - n1;
        sum_sq += n0 * n0 + n1 * n1;
        ones += n1;
    }
    let total = big_n * n;
    let zeros = total - ones;
    // P̄ = a / b and P̄e = c / d.
    let a = sum_sq - total;
    let b = total * (n - 1);
    let c = zeros * zeros + ones * ones;
    let d = total * total;
    if c == d {
        return if a == b {
            Ok(1.0)
        } else {
            Err(EvalError::UndefinedKappa(a as f64 / b as f64))
        };
    }
    let num = a * d - c * b;
    let den = b * (d - c);
    let g = gcd(num.unsigned_abs(), den.unsigned_abs()).max(1) as i128;
    Ok((num / g) as f64 / (den / g) as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaGate {
    pub threshold: f64,
}

impl Default for KappaGate {
    fn default() -> Self {
        Self { threshold: 0.70 }
    }
}

impl KappaGate {
    pub fn passes(&self, kappa: f64) -> bool {
        kappa >= self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Only types with at least one observation appear.
    pub by_type: BTreeMap<QuestionType, f64>,
    pub denominators: BTreeMap<QuestionType, usize>,
}

impl AccuracyReport {
    /// Σ accuracy × denominator / Σ denominator.
    pub fn weighted_mean(&self) -> f64 {
        let total: usize = self.denominators.values().sum();
        let weighted: f64 = self
            .by_type
            .iter()
            .map(|(t, a)| a * self.denominators[t] as f64)
            .sum();
        weighted / total as f64
    }
}

/// Builds a per-type accuracy report. Every observed question must exist in
/// the manifest and have an answer in the run log.
pub fn report(
    run_log: &RunLog,
    observations: &[(String, u8)],
    manifest: &DatasetManifest,
) -> Result<AccuracyReport, EvalError> {
    if observations.is_empty() {
        return Err(EvalError::Empty);
    }
    let answered: HashSet<&str> = run_log.answers().map(|a| a.question_id.as_str()).collect();
    let mut ones: BTreeMap<QuestionType, usize> = BTreeMap::new();
    let mut denominators: BTreeMap<QuestionType, usize> = BTreeMap::new();
    for (id, score) in observations {
        let q = manifest
            .question(id)
            .ok_or_else(|| EvalError::UnknownQuestion(id.clone()))?;
        if !answered.contains(id.as_str()) {
            return Err(EvalError::NotAnswered(id.clone()));
        }
        check_score((*score).into())?;
        *denominators.entry(q.qtype).or_default() += 1;
        *ones.entry(q.qtype).or_default() += usize::from(*score);
    }
    let total_ones: usize = ones.values().sum();
    let by_type = denominators
        .iter()
        .map(|(t, d)| (*t, ones[t] as f64 / *d as f64))
        .collect();
    Ok(AccuracyReport {
        overall: total_ones as f64 / observations.len() as f64,
        by_type,
        denominators,
    })
}

pub const TABLE_COLUMNS: [&str; 4] = ["All", "Multiple-choice", "Free-form", "Yes-no"];

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", v * 100.0))
}

/// Aligned text table, one row per `(method, report)`.
pub fn render_table(rows: &[(String, &AccuracyReport)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(TABLE_COLUMNS.iter().map(|s| s.to_string()));
    let mut body: Vec<Vec<String>> = vec![header];
    for (method, r) in rows {
        let mut line = vec![method.clone(), percent(Some(r.overall))];
        for t in QuestionType::ALL {
            line.push(percent(r.by_type.get(&t).copied()));
        }
        body.push(line);
    }
    let widths: Vec<usize> = (0..body[0].len())
        .map(|c| body.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in body.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "{}", rule.join("-|-"));
        }
    }
    out
}

/// Scoring criteria shown to evaluators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub plausible: String,
    pub implausible: String,
}

impl Default for Rubric {
    fn default() -> Self {
        Self {
            plausible: "Score 1 (plausible): the answer agrees with what the image shows. \
                        When a reasoning chain is included, each of its steps must also \
                        agree with the image."
                .into(),
            implausible: "Score 0 (implausible): the answer contradicts the image or cannot \
                          be supported by it. A correct answer whose reasoning chain conflicts \
                          with the image content also scores 0."
                .into(),
        }
    }
}
