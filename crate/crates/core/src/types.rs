//! Volumes, label masks, datasets and fold splits, plus the DSC metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::phantom::DeformationField;
use crate::seed;

/// Lower edge of the Hounsfield window every volume is clamped into.
pub const HU_MIN: f64 = -125.0;
/// Upper edge of the Hounsfield window.
pub const HU_MAX: f64 = 275.0;
/// Smallest supported grid side.
pub const MIN_GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PhaseTag {
    Arterial,
    Venous,
}

impl PhaseTag {
    pub const BOTH: [PhaseTag; 2] = [PhaseTag::Arterial, PhaseTag::Venous];

    pub fn other(self) -> PhaseTag {
        match self {
            PhaseTag::Arterial => PhaseTag::Venous,
            PhaseTag::Venous => PhaseTag::Arterial,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Arterial => "ARTERIAL",
            PhaseTag::Venous => "VENOUS",
        }
    }

    pub fn parse(s: &str) -> Option<PhaseTag> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ARTERIAL" | "A" => Some(PhaseTag::Arterial),
            "VENOUS" | "V" => Some(PhaseTag::Venous),
            _ => None,
        }
    }
}

impl fmt::Display for PhaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phase attached to a label mask. Latent labels belong to no acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelPhase {
    Arterial,
    Venous,
    Latent,
}

impl From<PhaseTag> for LabelPhase {
    fn from(p: PhaseTag) -> Self {
        match p {
            PhaseTag::Arterial => LabelPhase::Arterial,
            PhaseTag::Venous => LabelPhase::Venous,
        }
    }
}

impl LabelPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelPhase::Arterial => "ARTERIAL",
            LabelPhase::Venous => "VENOUS",
            LabelPhase::Latent => "LATENT",
        }
    }

    pub fn parse(s: &str) -> Option<LabelPhase> {
        match s.trim() {
            "LATENT" => Some(LabelPhase::Latent),
            other => PhaseTag::parse(other).map(Into::into),
        }
    }
}

/// A 2D intensity slice in HU, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub phase: PhaseTag,
    pub case_id: String,
    /// Physical size of one cell (row, column), when known.
    pub spacing: Option<(f64, f64)>,
}

impl Volume {
    pub fn new(height: usize, width: usize, data: Vec<f64>, phase: PhaseTag, case_id: impl Into<String>) -> Result<Self> {
        if data.len() != height * width {
            return Err(PcnError::ShapeMismatch(format!(
                "volume data has {} values for a {height}x{width} grid",
                data.len()
            )));
        }
        if height < MIN_GRID || width < MIN_GRID {
            return Err(PcnError::ShapeMismatch(format!(
                "grid {height}x{width} is below the {MIN_GRID}x{MIN_GRID} minimum"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            phase,
            case_id: case_id.into(),
            spacing: None,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Clamps every value into `[lo, hi]`.
pub fn clamp_hu(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(PcnError::InvalidRange { lo, hi });
    }
    let mut out = v.clone();
    for x in &mut out.data {
        *x = x.clamp(lo, hi);
    }
    Ok(out)
}

/// Clamps into the default `[-125, 275]` HU window.
pub fn clamp_default(v: &Volume) -> Volume {
    clamp_hu(v, HU_MIN, HU_MAX).expect("default window is valid")
}

/// Integer class map; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub num_classes: u8,
    pub phase: LabelPhase,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, num_classes: u8, phase: LabelPhase) -> Result<Self> {
        if data.len() != height * width {
            return Err(PcnError::ShapeMismatch(format!(
                "mask data has {} values for a {height}x{width} grid",
                data.len()
            )));
        }
        if num_classes < 2 {
            return Err(PcnError::Config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        if let Some(bad) = data.iter().find(|&&v| v >= num_classes) {
            return Err(PcnError::ShapeMismatch(format!(
                "label value {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            num_classes,
            phase,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn class_area(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Channel-major one-hot encoding, `num_classes × height × width`.
    pub fn one_hot(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.num_classes as usize * plane];
        for (i, &v) in self.data.iter().enumerate() {
            out[v as usize * plane + i] = 1.0;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Dice-Sørensen coefficient `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) || a.data.len() != b.data.len() {
        return Err(PcnError::ShapeMismatch(format!(
            "dsc of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Image/label pair for one phase of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub label: LabelMask,
    /// Displacement that produced `label` from the latent anatomy (phantom data only).
    pub deformation: Option<DeformationField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub arterial: Option<Sample>,
    pub venous: Option<Sample>,
    pub latent_label: Option<LabelMask>,
}

impl Case {
    pub fn phase(&self, p: PhaseTag) -> Option<&Sample> {
        match p {
            PhaseTag::Arterial => self.arterial.as_ref(),
            PhaseTag::Venous => self.venous.as_ref(),
        }
    }

    pub fn phase_mut(&mut self, p: PhaseTag) -> &mut Option<Sample> {
        match p {
            PhaseTag::Arterial => &mut self.arterial,
            PhaseTag::Venous => &mut self.venous,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut classes = None;
        for p in PhaseTag::BOTH {
            if let Some(s) = self.phase(p) {
                if s.volume.phase != p || s.label.phase != p.into() {
                    return Err(PcnError::PhaseMismatch {
                        expected: p,
                        got: s.volume.phase,
                    });
                }
                if s.volume.case_id != self.case_id {
                    return Err(PcnError::Config(format!(
                        "case {} holds a volume tagged {}",
                        self.case_id, s.volume.case_id
                    )));
                }
                if s.volume.shape() != s.label.shape() {
                    return Err(PcnError::ShapeMismatch(format!("case {} {p}: volume and label grids differ", self.case_id)));
                }
                if let Some(c) = classes {
                    if c != s.label.num_classes {
                        return Err(PcnError::Config(format!("case {}: phases disagree on class count", self.case_id)));
                    }
                }
                classes = Some(s.label.num_classes);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Phantom,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub arterial: usize,
    pub venous: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    cases: Vec<Case>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(cases: Vec<Case>, provenance: Provenance) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.clone()) {
                return Err(PcnError::Config(format!("duplicate case id {}", c.case_id)));
            }
            c.validate()?;
        }
        Ok(Self { cases, provenance })
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn counts(&self) -> PhaseCounts {
        PhaseCounts {
            arterial: self.cases.iter().filter(|c| c.arterial.is_some()).count(),
            venous: self.cases.iter().filter(|c| c.venous.is_some()).count(),
        }
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.case_id.clone()).collect()
    }

    /// Samples of one phase, in case order.
    pub fn samples(&self, p: PhaseTag) -> Vec<&Sample> {
        self.cases.iter().filter_map(|c| c.phase(p)).collect()
    }

    pub fn num_classes(&self) -> Option<u8> {
        self.cases
            .iter()
            .find_map(|c| c.arterial.as_ref().or(c.venous.as_ref()).map(|s| s.label.num_classes))
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.cases
            .iter()
            .find_map(|c| c.arterial.as_ref().or(c.venous.as_ref()).map(|s| s.volume.shape()))
    }

    /// Sub-dataset holding the listed ids, in this dataset's order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            cases: self.cases.iter().filter(|c| ids.contains(&c.case_id)).cloned().collect(),
            provenance: self.provenance,
        }
    }

    /// Copy with one phase removed from every case.
    pub fn drop_phase(&self, p: PhaseTag) -> Dataset {
        let mut cases = self.cases.clone();
        for c in &mut cases {
            *c.phase_mut(p) = None;
        }
        Dataset {
            cases,
            provenance: self.provenance,
        }
    }

    pub fn into_cases(self) -> Vec<Case> {
        self.cases
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_ids(&self, fold: usize) -> BTreeSet<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Held-out ids for `fold` and the training ids (every other fold).
    pub fn train_test(&self, fold: usize) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for (id, &f) in &self.assignments {
            if f == fold {
                test.insert(id.clone());
            } else {
                train.insert(id.clone());
            }
        }
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Shuffled round-robin assignment of cases to `k` folds.
pub fn split_folds(d: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(PcnError::Config(format!("fold count must be at least 2, got {k}")));
    }
    if d.len() < k {
        return Err(PcnError::InsufficientData(format!("{} cases cannot fill {k} folds", d.len())));
    }
    let mut ids = d.case_ids();
    ids.sort();
    ids.shuffle(&mut seed::stream(seed, "folds", k as u64));
    let assignments = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldSplit { k, seed, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(vals: Vec<f64>) -> Volume {
        let n = (vals.len() as f64).sqrt() as usize;
        Volume::new(n, n, vals, PhaseTag::Arterial, "c0").unwrap()
    }

    #[test]
    fn clamp_examples() {
        let mut data = vec![0.0; 64];
        data[0] = -200.0;
        data[1] = 100.0;
        data[2] = 400.0;
        let v = clamp_default(&vol(data));
        assert_eq!(v.data[0], -125.0);
        assert_eq!(v.data[1], 100.0);
        assert_eq!(v.data[2], 275.0);
        assert_eq!(v.phase, PhaseTag::Arterial);
    }

    #[test]
    fn clamp_rejects_inverted_range() {
        let v = vol(vec![0.0; 64]);
        assert!(matches!(clamp_hu(&v, 10.0, 10.0), Err(PcnError::InvalidRange { .. })));
        assert!(matches!(clamp_hu(&v, 20.0, 10.0), Err(PcnError::InvalidRange { .. })));
    }

    fn bm(bits: &[u8]) -> BinaryMask {
        BinaryMask {
            height: 1,
            width: bits.len(),
            data: bits.iter().map(|&b| b == 1).collect(),
        }
    }

    #[test]
    fn dsc_examples() {
        let a = bm(&[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &bm(&[0, 0, 0, 0, 1, 1, 1, 1])).unwrap(), 0.0);
        assert_eq!(dsc(&a, &bm(&[0, 0, 1, 1, 1, 1, 0, 0])).unwrap(), 0.5);
        assert_eq!(dsc(&bm(&[0, 0]), &bm(&[0, 0])).unwrap(), 1.0);
        assert!(dsc(&a, &bm(&[1])).is_err());
    }

    #[test]
    fn label_mask_rejects_out_of_range_values() {
        assert!(LabelMask::new(1, 2, vec![0, 2], 2, LabelPhase::Latent).is_err());
        let m = LabelMask::new(1, 3, vec![0, 1, 1], 2, LabelPhase::Latent).unwrap();
        assert_eq!(m.one_hot(), vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    fn dataset(n: usize) -> Dataset {
        let cases = (0..n)
            .map(|i| Case {
                case_id: format!("case{i:03}"),
                arterial: None,
                venous: None,
                latent_label: None,
            })
            .collect();
        Dataset::new(cases, Provenance::External).unwrap()
    }

    #[test]
    fn split_examples() {
        let d = dataset(8);
        let s = split_folds(&d, 4, 11).unwrap();
        assert_eq!(s.fold_sizes(), vec![2, 2, 2, 2]);
        assert_eq!(s, split_folds(&d, 4, 11).unwrap());
        let all: BTreeSet<String> = (0..4).flat_map(|f| s.fold_ids(f)).collect();
        assert_eq!(all, d.case_ids().into_iter().collect());
        let (train, test) = s.train_test(1);
        assert_eq!((train.len(), test.len()), (6, 2));
        assert!(split_folds(&d, 9, 0).is_err());
        assert!(split_folds(&d, 1, 0).is_err());
        let back = FoldSplit::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut cases = dataset(2).into_cases();
        cases[1].case_id = cases[0].case_id.clone();
        assert!(Dataset::new(cases, Provenance::External).is_err());
    }
}
