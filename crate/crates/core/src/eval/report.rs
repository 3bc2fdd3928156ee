use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PosTag;
use crate::error::{Error, Result};
use crate::io;

/// Outcome for one sense-tagged test token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_id: usize,
    pub position: usize,
    pub lemma: String,
    pub pos: PosTag,
    pub gold: String,
    /// `None` when the instance was not attempted.
    pub predicted: Option<String>,
    /// 1-based rank of the gold sense among the candidates.
    pub gold_rank: Option<usize>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.gold.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub support: usize,
    pub attempted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassScore {
    fn new(class: &str, support: usize, attempted: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, attempted);
        let recall = ratio(correct, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassScore {
            class: class.to_string(),
            support,
            attempted,
            correct,
            precision,
            recall,
            f1,
        }
    }
}

pub const REPORT_CLASSES: [&str; 5] = ["nn", "vb", "adj", "adv", "all"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub train: String,
    pub test: String,
    /// In the order of [`REPORT_CLASSES`].
    pub classes: Vec<ClassScore>,
    pub instances: Vec<Prediction>,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassScore> {
        self.classes.iter().find(|c| c.class == name)
    }

    pub fn overall(&self) -> &ClassScore {
        self.class("all").expect("every report has an `all` row")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// One aligned text row per report, F1 in percent.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut rows = vec![["model", "train", "test", "nn", "vb", "adj", "adv", "all"].map(String::from).to_vec()];
        for r in reports {
            let mut row = vec![r.model.clone(), r.train.clone(), r.test.clone()];
            for c in REPORT_CLASSES {
                let s = r.class(c).expect("all classes present");
                row.push(if s.support == 0 { "-".into() } else { format!("{:.1}", 100.0 * s.f1) });
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i < 3 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }
}

fn class_of(pos: PosTag) -> Option<&'static str> {
    match pos {
        PosTag::Nn => Some("nn"),
        PosTag::Vb => Some("vb"),
        PosTag::Adj => Some("adj"),
        PosTag::Adv => Some("adv"),
        PosTag::Other => None,
    }
}

/// Precision over attempted instances, recall over all, per POS class and
/// overall (micro-averaged).
pub fn score_f1(predictions: &[Prediction], model: &str, train: &str, test: &str) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Usage("cannot score an empty set of gold instances".into()));
    }
    let classes = REPORT_CLASSES
        .iter()
        .map(|&name| {
            let members = predictions
                .iter()
                .filter(|p| name == "all" || class_of(p.pos) == Some(name));
            let (mut support, mut attempted, mut correct) = (0, 0, 0);
            for p in members {
                support += 1;
                attempted += p.predicted.is_some() as usize;
                correct += p.correct() as usize;
            }
            ClassScore::new(name, support, attempted, correct)
        })
        .collect();
    Ok(EvalReport {
        model: model.into(),
        train: train.into(),
        test: test.into(),
        classes,
        instances: predictions.to_vec(),
    })
}
