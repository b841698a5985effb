//! Overlap and classification metrics.

use std::fmt;

use thiserror::Error;

use crate::volio::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("label sequences differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Dice coefficient of two binary masks given as nonzero flags.
/// Two empty masks score 1.0.
pub fn dice_flags(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice coefficient of two masks; any nonzero voxel is foreground.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimMismatch(a.dims(), b.dims()));
    }
    let fa: Vec<bool> = a.to_f32().iter().map(|&v| v != 0.0).collect();
    let fb: Vec<bool> = b.to_f32().iter().map(|&v| v != 0.0).collect();
    dice_flags(&fa, &fb)
}

/// Class of a specimen; mutant is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phenotype {
    Normal,
    Mutant,
}

impl Phenotype {
    pub fn is_mutant(self) -> bool {
        self == Phenotype::Mutant
    }

    pub fn from_mutant(mutant: bool) -> Self {
        if mutant {
            Phenotype::Mutant
        } else {
            Phenotype::Normal
        }
    }

    /// Class index used by the classifier: normal 0, mutant 1.
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phenotype::Normal => "normal",
            Phenotype::Mutant => "mutant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(Phenotype::Normal),
            "mutant" => Some(Phenotype::Mutant),
            _ => None,
        }
    }
}

/// Binary confusion counts with mutant as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
        self.tn += other.tn;
    }
}

/// Counts predictions against truth; `true` means mutant.
pub fn confusion(truth: &[bool], predicted: &[bool]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
    }
    let mut m = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        m.add(t, p);
    }
    Ok(m)
}

/// Rates derived from a confusion matrix. `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn summarize(m: &ConfusionMatrix) -> Summary {
    Summary {
        accuracy: ratio(m.tp + m.tn, m.total()),
        sensitivity: ratio(m.tp, m.tp + m.fn_),
        specificity: ratio(m.tn, m.tn + m.fp),
    }
}

/// Formats an optional rate, writing `undefined` for `None`.
pub fn fmt_rate(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".to_string(),
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "predict\\true,mutant,normal")?;
        writeln!(f, "mutant,{},{}", self.tp, self.fp)?;
        write!(f, "normal,{},{}", self.fn_, self.tn)
    }
}
