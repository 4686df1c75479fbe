//! Grades, activity groups, task label spaces and the tile/bag data model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nancy histological index, an ordinal grade in `0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct NhiGrade(u8);

impl NhiGrade {
    pub const MAX: u8 = 4;
    pub const ALL: [NhiGrade; 5] = [NhiGrade(0), NhiGrade(1), NhiGrade(2), NhiGrade(3), NhiGrade(4)];

    pub fn new(value: u8) -> Result<Self> {
        if value <= Self::MAX {
            Ok(NhiGrade(value))
        } else {
            Err(Error::Invalid(format!("NHI grade {value} outside 0..=4")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn group(self) -> ActivityGroup {
        group_of(self)
    }
}

impl TryFrom<u8> for NhiGrade {
    type Error = Error;
    fn try_from(value: u8) -> Result<Self> {
        NhiGrade::new(value)
    }
}

impl From<NhiGrade> for u8 {
    fn from(g: NhiGrade) -> u8 {
        g.0
    }
}

impl fmt::Display for NhiGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for NhiGrade {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("not an NHI grade: {s:?}")))?;
        NhiGrade::new(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityGroup {
    Lo,
    Hi,
}

impl fmt::Display for ActivityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivityGroup::Lo => "Lo",
            ActivityGroup::Hi => "Hi",
        })
    }
}

impl FromStr for ActivityGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Lo" => Ok(ActivityGroup::Lo),
            "Hi" => Ok(ActivityGroup::Hi),
            _ => Err(Error::Invalid(format!("not an activity group: {s:?}"))),
        }
    }
}

/// Lo for grades 0 and 1, Hi for 2 through 4.
pub fn group_of(grade: NhiGrade) -> ActivityGroup {
    if grade.value() <= 1 {
        ActivityGroup::Lo
    } else {
        ActivityGroup::Hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Neutrophil,
    NancyLow,
    NancyHigh,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Neutrophil, TaskKind::NancyLow, TaskKind::NancyHigh];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Neutrophil => "neutrophil",
            TaskKind::NancyLow => "nancy-low",
            TaskKind::NancyHigh => "nancy-high",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutrophil" => Ok(TaskKind::Neutrophil),
            "nancy-low" => Ok(TaskKind::NancyLow),
            "nancy-high" => Ok(TaskKind::NancyHigh),
            _ => Err(Error::Invalid(format!(
                "unknown task {s:?} (expected neutrophil, nancy-low or nancy-high)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Sigmoid,
    Softmax,
}

/// One class of a task label space: either a concrete grade or a group placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskClass {
    Grade(NhiGrade),
    Group(ActivityGroup),
}

impl TaskClass {
    pub fn contains(self, grade: NhiGrade) -> bool {
        match self {
            TaskClass::Grade(g) => g == grade,
            TaskClass::Group(group) => group_of(grade) == group,
        }
    }

    pub fn is_placeholder(self) -> bool {
        matches!(self, TaskClass::Group(_))
    }
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskClass::Grade(g) => write!(f, "{g}"),
            TaskClass::Group(g) => write!(f, "{g}"),
        }
    }
}

impl FromStr for TaskClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.parse::<ActivityGroup>()
            .map(TaskClass::Group)
            .or_else(|_| s.parse::<NhiGrade>().map(TaskClass::Grade))
    }
}

/// A task label space. Class order is fixed and is the index order used by
/// model outputs and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: Vec<TaskClass>,
    pub link: Link,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        use ActivityGroup::*;
        let g = |v| TaskClass::Grade(NhiGrade(v));
        let (classes, link) = match kind {
            TaskKind::Neutrophil => (vec![TaskClass::Group(Lo), TaskClass::Group(Hi)], Link::Sigmoid),
            TaskKind::NancyLow => (vec![g(0), g(1), TaskClass::Group(Hi)], Link::Softmax),
            TaskKind::NancyHigh => (vec![TaskClass::Group(Lo), g(2), g(3), g(4)], Link::Softmax),
        };
        TaskSpec { kind, classes, link }
    }

    /// Specialist without its group placeholder class, used by the gated
    /// baseline: Nancy-low over {0, 1}, Nancy-high over {2, 3, 4}. Bags whose
    /// grade falls outside the remaining classes have no label in this space.
    pub fn without_placeholder(kind: TaskKind) -> Result<Self> {
        if kind == TaskKind::Neutrophil {
            return Err(Error::Invalid(
                "the neutrophil task has no concrete grade classes".into(),
            ));
        }
        let mut spec = TaskSpec::new(kind);
        spec.classes.retain(|c| !c.is_placeholder());
        Ok(spec)
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Width of the head output: one logit for the sigmoid task, one per class otherwise.
    pub fn n_outputs(&self) -> usize {
        match self.link {
            Link::Sigmoid => 1,
            Link::Softmax => self.classes.len(),
        }
    }

    pub fn has_placeholder(&self) -> bool {
        self.classes.iter().any(|c| c.is_placeholder())
    }

    /// Classes that are concrete NHI grades.
    pub fn specific_classes(&self) -> Vec<NhiGrade> {
        self.classes
            .iter()
            .filter_map(|c| match c {
                TaskClass::Grade(g) => Some(*g),
                TaskClass::Group(_) => None,
            })
            .collect()
    }

    /// Index of the class containing `grade`. Always `Some` for the standard
    /// label spaces; `None` only for placeholder-free specialists.
    pub fn map_label(&self, grade: NhiGrade) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(grade))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.to_string()).collect()
    }
}

/// Geometric reference to one tile of a slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub level: u32,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub microns_per_pixel: f64,
}

impl TileRef {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!(
                "tile at ({}, {}) of {} has zero size",
                self.x, self.y, self.slide_id
            )));
        }
        if !(self.microns_per_pixel > 0.0 && self.microns_per_pixel.is_finite()) {
            return Err(Error::Invalid(format!(
                "tile of {} has non-positive resolution {}",
                self.slide_id, self.microns_per_pixel
            )));
        }
        Ok(())
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.width as u64 <= width as u64 && self.y as u64 + self.height as u64 <= height as u64
    }
}

/// One slide: its tiles, their embeddings and the weak slide-level label.
///
/// Embeddings are stored as `f32` rows (the on-disk precision); model code
/// widens them to `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBag {
    pub slide_id: String,
    pub case_id: String,
    pub center: String,
    pub label: NhiGrade,
    pub profile: String,
    pub dim: usize,
    pub tiles: Vec<TileRef>,
    /// Row-major `tiles.len() x dim`.
    pub embeddings: Vec<f32>,
}

impl EmbeddingBag {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Invalid(format!("bag {} has dimension 0", self.slide_id)));
        }
        if self.tiles.is_empty() {
            return Err(Error::Invalid(format!("bag {} has no tiles", self.slide_id)));
        }
        if self.embeddings.len() != self.tiles.len() * self.dim {
            return Err(Error::Shape {
                context: "bag embeddings",
                expected: self.tiles.len() * self.dim,
                actual: self.embeddings.len(),
            });
        }
        if let Some(i) = self.embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bag {} tile {} embedding",
                self.slide_id,
                i / self.dim
            )));
        }
        for t in &self.tiles {
            t.validate()?;
        }
        Ok(())
    }

    /// Embeddings widened to a row-major `f64` matrix.
    pub fn to_f64(&self) -> Vec<f64> {
        self.embeddings.iter().map(|&v| v as f64).collect()
    }
}
