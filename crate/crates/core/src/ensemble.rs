//! Combining the three task models into one five-grade prediction.
//!
//! The activity group is decided first (majority vote of the three models,
//! or the neutrophil model alone for the gated baseline), then the matching
//! specialist picks the grade by argmax over its concrete grade classes.
//! Every tie resolves toward lower severity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{group_of, ActivityGroup, NhiGrade, TaskClass, TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// A probability distribution over a task's classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub classes: Vec<TaskClass>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn new(task: &TaskSpec, probs: Vec<f64>) -> Result<Self> {
        let d = Distribution {
            classes: task.classes.clone(),
            probs,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.probs.len() || self.probs.is_empty() {
            return Err(Error::Shape {
                context: "distribution classes vs probabilities",
                expected: self.classes.len(),
                actual: self.probs.len(),
            });
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid(format!("invalid probabilities {:?}", self.probs)));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Probability mass assigned to `group`, counting both the placeholder
    /// class and the concrete grades belonging to it.
    pub fn group_mass(&self, group: ActivityGroup) -> f64 {
        self.classes
            .iter()
            .zip(&self.probs)
            .filter(|(c, _)| match c {
                TaskClass::Group(g) => *g == group,
                TaskClass::Grade(g) => group_of(*g) == group,
            })
            .map(|(_, p)| p)
            .sum()
    }

    /// Encoded as `class=prob` pairs joined by commas, e.g. `Lo=0.2,Hi=0.8`.
    pub fn encode(&self) -> String {
        self.classes
            .iter()
            .zip(&self.probs)
            .map(|(c, p)| format!("{c}={p}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl FromStr for Distribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut classes = Vec::new();
        let mut probs = Vec::new();
        for part in s.split(',') {
            let (c, p) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("bad distribution entry {part:?}")))?;
            classes.push(c.trim().parse()?);
            probs.push(
                p.trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("bad probability {p:?}")))?,
            );
        }
        let d = Distribution { classes, probs };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutputs {
    pub neutrophil: Distribution,
    pub nancy_low: Distribution,
    pub nancy_high: Distribution,
}

impl TaskOutputs {
    /// From raw probability vectors in the standard class orders.
    pub fn from_probs(neutrophil: Vec<f64>, nancy_low: Vec<f64>, nancy_high: Vec<f64>) -> Result<Self> {
        Ok(TaskOutputs {
            neutrophil: Distribution::new(&TaskSpec::new(TaskKind::Neutrophil), neutrophil)?,
            nancy_low: Distribution::new(&TaskSpec::new(TaskKind::NancyLow), nancy_low)?,
            nancy_high: Distribution::new(&TaskSpec::new(TaskKind::NancyHigh), nancy_high)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.neutrophil.validate()?;
        self.nancy_low.validate()?;
        self.nancy_high.validate()
    }
}

/// How a model's distribution becomes a Lo/Hi vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteRule {
    /// Hi iff the mass on Hi classes exceeds the mass on Lo classes.
    #[default]
    GroupedMass,
    /// Group of the single most probable class (first maximum).
    Argmax,
}

impl fmt::Display for VoteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteRule::GroupedMass => "grouped-mass",
            VoteRule::Argmax => "argmax",
        })
    }
}

impl FromStr for VoteRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouped-mass" => Ok(VoteRule::GroupedMass),
            "argmax" => Ok(VoteRule::Argmax),
            _ => Err(Error::Invalid(format!("unknown vote rule {s:?}"))),
        }
    }
}

pub fn vote(dist: &Distribution, rule: VoteRule) -> ActivityGroup {
    match rule {
        VoteRule::GroupedMass => {
            if dist.group_mass(ActivityGroup::Hi) > dist.group_mass(ActivityGroup::Lo) {
                ActivityGroup::Hi
            } else {
                ActivityGroup::Lo
            }
        }
        VoteRule::Argmax => {
            let mut best = 0;
            for (i, &p) in dist.probs.iter().enumerate() {
                if p > dist.probs[best] {
                    best = i;
                }
            }
            match dist.classes[best] {
                TaskClass::Group(g) => g,
                TaskClass::Grade(g) => group_of(g),
            }
        }
    }
}

pub fn majority(votes: [ActivityGroup; 3]) -> ActivityGroup {
    let hi = votes.iter().filter(|&&v| v == ActivityGroup::Hi).count();
    if hi >= 2 {
        ActivityGroup::Hi
    } else {
        ActivityGroup::Lo
    }
}

/// Votes of the neutrophil, Nancy-low and Nancy-high models, and their majority.
pub fn group_vote(outputs: &TaskOutputs, rule: VoteRule) -> (ActivityGroup, [ActivityGroup; 3]) {
    let votes = [
        vote(&outputs.neutrophil, rule),
        vote(&outputs.nancy_low, rule),
        vote(&outputs.nancy_high, rule),
    ];
    (majority(votes), votes)
}

/// Argmax over the delegated specialist's concrete grades within `group`;
/// placeholder classes never compete.
pub fn final_grade(outputs: &TaskOutputs, group: ActivityGroup) -> NhiGrade {
    let specialist = match group {
        ActivityGroup::Lo => &outputs.nancy_low,
        ActivityGroup::Hi => &outputs.nancy_high,
    };
    let mut candidates: Vec<(NhiGrade, f64)> = specialist
        .classes
        .iter()
        .zip(&specialist.probs)
        .filter_map(|(c, &p)| match c {
            TaskClass::Grade(g) if group_of(*g) == group => Some((*g, p)),
            _ => None,
        })
        .collect();
    candidates.sort_by_key(|(g, _)| *g);
    let mut best = match candidates.first() {
        Some(&c) => c,
        // A specialist with no grade of this group: fall back to the least
        // severe grade of the group.
        None => {
            return match group {
                ActivityGroup::Lo => NhiGrade::ALL[0],
                ActivityGroup::Hi => NhiGrade::ALL[2],
            }
        }
    };
    for &(g, p) in &candidates[1..] {
        if p > best.1 {
            best = (g, p);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Ensemble,
    HierarchicalGate,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ensemble => "ensemble",
            Strategy::HierarchicalGate => "gate",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ensemble" => Ok(Strategy::Ensemble),
            "gate" => Ok(Strategy::HierarchicalGate),
            _ => Err(Error::Invalid(format!(
                "unknown strategy {s:?} (expected ensemble or gate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub grade: NhiGrade,
    pub group: ActivityGroup,
    pub votes: [ActivityGroup; 3],
    pub delegated_task: TaskKind,
    pub strategy: Strategy,
}

fn delegate(group: ActivityGroup) -> TaskKind {
    match group {
        ActivityGroup::Lo => TaskKind::NancyLow,
        ActivityGroup::Hi => TaskKind::NancyHigh,
    }
}

pub fn ensemble(outputs: &TaskOutputs, rule: VoteRule) -> FinalPrediction {
    let (group, votes) = group_vote(outputs, rule);
    FinalPrediction {
        grade: final_grade(outputs, group),
        group,
        votes,
        delegated_task: delegate(group),
        strategy: Strategy::Ensemble,
    }
}

/// Baseline: the neutrophil model alone decides the group.
pub fn hierarchical_gate(outputs: &TaskOutputs, rule: VoteRule) -> FinalPrediction {
    let (_, votes) = group_vote(outputs, rule);
    let group = votes[0];
    FinalPrediction {
        grade: final_grade(outputs, group),
        group,
        votes,
        delegated_task: delegate(group),
        strategy: Strategy::HierarchicalGate,
    }
}

pub fn combine(outputs: &TaskOutputs, strategy: Strategy, rule: VoteRule) -> FinalPrediction {
    match strategy {
        Strategy::Ensemble => ensemble(outputs, rule),
        Strategy::HierarchicalGate => hierarchical_gate(outputs, rule),
    }
}

pub const PREDICTION_HEADER: &str =
    "slide_id\tstrategy\tneutrophil\tnancy_low\tnancy_high\tvotes\tgroup\tgrade\tvote_rule";

/// One row of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub slide_id: String,
    pub outputs: TaskOutputs,
    pub prediction: FinalPrediction,
    pub vote_rule: VoteRule,
}

impl PredictionRecord {
    pub fn to_tsv_row(&self) -> String {
        let v = &self.prediction.votes;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{},{},{}\t{}\t{}\t{}",
            self.slide_id,
            self.prediction.strategy,
            self.outputs.neutrophil.encode(),
            self.outputs.nancy_low.encode(),
            self.outputs.nancy_high.encode(),
            v[0],
            v[1],
            v[2],
            self.prediction.group,
            self.prediction.grade,
            self.vote_rule
        )
    }

    pub fn parse_tsv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::Invalid(format!(
                "prediction row has {} columns, expected 9",
                f.len()
            )));
        }
        let votes: Vec<ActivityGroup> = f[5].split(',').map(str::parse).collect::<Result<_>>()?;
        let votes: [ActivityGroup; 3] = votes
            .try_into()
            .map_err(|_| Error::Invalid(format!("expected three votes in {:?}", f[5])))?;
        let group: ActivityGroup = f[6].parse()?;
        Ok(PredictionRecord {
            slide_id: f[0].to_string(),
            outputs: TaskOutputs {
                neutrophil: f[2].parse()?,
                nancy_low: f[3].parse()?,
                nancy_high: f[4].parse()?,
            },
            prediction: FinalPrediction {
                grade: f[7].parse()?,
                group,
                votes,
                delegated_task: delegate(group),
                strategy: f[1].parse()?,
            },
            vote_rule: f[8].parse()?,
        })
    }
}

pub fn predictions_tsv(records: &[PredictionRecord]) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_tsv_row());
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == PREDICTION_HEADER => {}
        _ => return Err(Error::Invalid("prediction file header missing".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(PredictionRecord::parse_tsv_row)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivityGroup::{Hi, Lo};

    fn outs(neu: [f64; 2], low: [f64; 3], high: [f64; 4]) -> TaskOutputs {
        TaskOutputs::from_probs(neu.to_vec(), low.to_vec(), high.to_vec()).unwrap()
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority([Hi, Hi, Lo]), Hi);
        assert_eq!(majority([Lo, Lo, Lo]), Lo);
        assert_eq!(majority([Lo, Hi, Lo]), Lo);
    }

    #[test]
    fn specialist_votes_use_grouped_mass() {
        // P(Hi) = 0.45 < P(0) + P(1) = 0.55 even though Hi is the argmax
        let o = outs([0.5, 0.5], [0.3, 0.25, 0.45], [0.4, 0.2, 0.2, 0.2]);
        let (_, votes) = group_vote(&o, VoteRule::GroupedMass);
        assert_eq!(votes, [Lo, Lo, Hi]);
        let (_, votes) = group_vote(&o, VoteRule::Argmax);
        assert_eq!(votes, [Lo, Hi, Lo]);
    }

    #[test]
    fn final_grade_ignores_placeholders() {
        let o = outs([0.5, 0.5], [0.2, 0.1, 0.7], [0.9, 0.05, 0.03, 0.02]);
        // P(0) = 0.2 beats P(1) = 0.1; the Hi placeholder's 0.7 never competes
        assert_eq!(final_grade(&o, Lo).value(), 0);
        assert_eq!(final_grade(&o, Hi).value(), 2);
        let tie = outs([0.5, 0.5], [0.2, 0.1, 0.7], [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(final_grade(&tie, Hi).value(), 2);
        let o = outs([0.5, 0.5], [0.1, 0.2, 0.7], [0.0, 0.1, 0.2, 0.7]);
        assert_eq!(final_grade(&o, Lo).value(), 1);
        assert_eq!(final_grade(&o, Hi).value(), 4);
    }

    #[test]
    fn gate_examples() {
        let o = outs([0.1, 0.9], [0.5, 0.3, 0.2], [0.8, 0.1, 0.05, 0.05]);
        let e = ensemble(&o, VoteRule::GroupedMass);
        let g = hierarchical_gate(&o, VoteRule::GroupedMass);
        assert_eq!((e.group, g.group), (Lo, Hi));
        assert_eq!(g.delegated_task, TaskKind::NancyHigh);
        let half = outs([0.5, 0.5], [0.1, 0.1, 0.8], [0.1, 0.3, 0.3, 0.3]);
        assert_eq!(hierarchical_gate(&half, VoteRule::GroupedMass).group, Lo);
    }

    #[test]
    fn bare_specialists() {
        let low = TaskSpec::without_placeholder(TaskKind::NancyLow).unwrap();
        let high = TaskSpec::without_placeholder(TaskKind::NancyHigh).unwrap();
        let o = TaskOutputs {
            neutrophil: Distribution::new(&TaskSpec::new(TaskKind::Neutrophil), vec![0.2, 0.8]).unwrap(),
            nancy_low: Distribution::new(&low, vec![0.4, 0.6]).unwrap(),
            nancy_high: Distribution::new(&high, vec![0.2, 0.5, 0.3]).unwrap(),
        };
        let g = hierarchical_gate(&o, VoteRule::GroupedMass);
        assert_eq!((g.group, g.grade.value()), (Hi, 3));
    }

    #[test]
    fn record_round_trip() {
        let o = outs([0.25, 0.75], [0.5, 0.25, 0.25], [0.125, 0.5, 0.25, 0.125]);
        let rec = PredictionRecord {
            slide_id: "s-1".into(),
            prediction: ensemble(&o, VoteRule::GroupedMass),
            outputs: o,
            vote_rule: VoteRule::GroupedMass,
        };
        let text = predictions_tsv(std::slice::from_ref(&rec));
        assert_eq!(parse_predictions(&text).unwrap(), vec![rec]);
        assert!("Lo=0.5,Hi=0.6".parse::<Distribution>().is_err());
    }
}
