//! Per-sample class probabilities and two-stream fusion.
//!
//! File format: a header line `#sttr-scores v1`, then one record per line,
//! `sample_id<TAB>label<TAB>p_0,p_1,...,p_{K-1}`, probabilities written with
//! 8 significant digits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCORES_HEADER: &str = "#sttr-scores v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "score table",
        msg: msg.into(),
    }
}

impl ScoreTable {
    pub fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, |r| r.probs.len())
    }

    /// Top-1 accuracy; 0 for an empty table.
    pub fn accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let hits = self.rows.iter().filter(|r| argmax(&r.probs) == r.label).count();
        hits as f64 / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(SCORES_HEADER);
        s.push('\n');
        for r in &self.rows {
            let probs: Vec<String> = r.probs.iter().map(|p| format!("{p:.7e}")).collect();
            s.push_str(&format!("{}\t{}\t{}\n", r.id, r.label, probs.join(",")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(SCORES_HEADER) {
            return Err(fmt_err(format!("missing header line {SCORES_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, found {}", parts.len()),
                });
            }
            let label = parts[1].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad label {:?}", parts[1]),
            })?;
            let probs = parts[2]
                .split(',')
                .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "bad probability list".into(),
                })?;
            rows.push(ScoreRow {
                id: parts[0].to_string(),
                label,
                probs,
            });
        }
        let t = ScoreTable { rows };
        t.validate()?;
        Ok(t)
    }

    /// Rows share one class count, labels are in range and ids are unique.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.probs.len() != k || k == 0 {
                return Err(fmt_err(format!("sample {} has {} scores, expected {k}", r.id, r.probs.len())));
            }
            if r.label >= k {
                return Err(fmt_err(format!("sample {} has label {} of {k} classes", r.id, r.label)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(fmt_err(format!("duplicate sample id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedRow {
    pub id: String,
    pub label: usize,
    /// Element-wise sum of the two probability vectors.
    pub scores: Vec<f64>,
    pub prediction: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    pub rows: Vec<FusedRow>,
}

impl Fused {
    pub fn accuracy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.prediction == r.label).count() as f64 / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#sttr-fused v1\n");
        for r in &self.rows {
            let scores: Vec<String> = r.scores.iter().map(|p| format!("{p:.7e}")).collect();
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.id, r.label, r.prediction, scores.join(",")));
        }
        s
    }
}

/// Sums the probability vectors of matching samples; rows follow `a`'s order.
pub fn fuse_scores(a: &ScoreTable, b: &ScoreTable) -> Result<Fused> {
    a.validate()?;
    b.validate()?;
    let b_index: HashMap<&str, &ScoreRow> = b.rows.iter().map(|r| (r.id.as_str(), r)).collect();
    let a_ids: HashSet<&str> = a.rows.iter().map(|r| r.id.as_str()).collect();
    let mut missing_in_b: Vec<String> = a
        .rows
        .iter()
        .filter(|r| !b_index.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    let mut missing_in_a: Vec<String> = b.rows.iter().filter(|r| !a_ids.contains(r.id.as_str())).map(|r| r.id.clone()).collect();
    if !missing_in_a.is_empty() || !missing_in_b.is_empty() {
        missing_in_a.sort();
        missing_in_b.sort();
        return Err(Error::IdMismatch { missing_in_a, missing_in_b });
    }
    if !a.rows.is_empty() && a.num_classes() != b.num_classes() {
        return Err(fmt_err(format!("class counts differ: {} vs {}", a.num_classes(), b.num_classes())));
    }
    let mut rows = Vec::with_capacity(a.rows.len());
    for ra in &a.rows {
        let rb = b_index[ra.id.as_str()];
        if ra.label != rb.label {
            return Err(fmt_err(format!(
                "sample {} has label {} in one table and {} in the other",
                ra.id, ra.label, rb.label
            )));
        }
        let scores: Vec<f64> = ra.probs.iter().zip(&rb.probs).map(|(x, y)| x + y).collect();
        rows.push(FusedRow {
            id: ra.id.clone(),
            label: ra.label,
            prediction: argmax(&scores),
            scores,
        });
    }
    Ok(Fused { rows })
}
