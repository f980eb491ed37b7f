//! Fused two-branch prediction and the measurement suite: per-case DSC
//! reports, pixel-gain accounting and pooled histogram comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::objective::ModelBundle;
use crate::phantom::{check_hist_args, histogram_from_counts, masked_counts, Histogram};
use crate::seg::{seg_forward, ProbMap, SegModel};
use crate::translate::{translate, Generator};
use crate::types::{dsc, BinaryMask, Dataset, LabelMask, LabelPhase, PhaseTag, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted average of probability maps.
    #[default]
    Soft,
    /// Weighted vote of the two branches' hard labels.
    HardVote,
}

fn check_lambda(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(PcnError::OutOfBounds {
            name: "lambda_fuse".into(),
            value: l,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

fn one_hot_map(m: &LabelMask) -> ProbMap {
    ProbMap {
        height: m.height,
        width: m.width,
        classes: m.num_classes as usize,
        data: m.one_hot(),
    }
}

/// `lambda_fuse * f_native(x) + (1 - lambda_fuse) * f_other(translate(g, x))`
/// and its argmax.
pub fn predict_fused_with(
    f_native: &SegModel,
    f_other: &SegModel,
    g: &Generator,
    x: &Volume,
    lambda_fuse: f64,
    mode: FusionMode,
) -> Result<(ProbMap, LabelMask)> {
    check_lambda(lambda_fuse)?;
    if g.direction.source != x.phase {
        return Err(PcnError::PhaseMismatch {
            expected: g.direction.source,
            got: x.phase,
        });
    }
    let lp = LabelPhase::from(x.phase);
    let mut a = seg_forward(f_native, x)?;
    let mut b = seg_forward(f_other, &translate(g, x)?)?;
    if a.classes != b.classes {
        return Err(PcnError::ShapeMismatch("branches disagree on class count".into()));
    }
    if mode == FusionMode::HardVote {
        a = one_hot_map(&a.argmax(lp));
        b = one_hot_map(&b.argmax(lp));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| lambda_fuse * p + (1.0 - lambda_fuse) * q)
        .collect();
    let fused = ProbMap { data, ..a };
    let labels = fused.argmax(lp);
    Ok((fused, labels))
}

pub fn predict_fused(
    f_native: &SegModel,
    f_other: &SegModel,
    g: &Generator,
    x: &Volume,
    lambda_fuse: f64,
) -> Result<(ProbMap, LabelMask)> {
    predict_fused_with(f_native, f_other, g, x, lambda_fuse, FusionMode::Soft)
}

/// Models used to segment one phase: the native model and, optionally, a
/// translated branch.
#[derive(Clone, Copy, Debug)]
pub struct Branches<'a> {
    pub native: &'a SegModel,
    pub translated: Option<(&'a SegModel, &'a Generator)>,
}

impl<'a> Branches<'a> {
    pub fn single(native: &'a SegModel) -> Self {
        Self {
            native,
            translated: None,
        }
    }

    pub fn from_bundle(b: &'a ModelBundle, p: PhaseTag) -> Self {
        Self {
            native: b.seg(p),
            translated: Some((b.seg(p.other()), b.gen(p))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub lambda_fuse: f64,
    pub fusion: FusionMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lambda_fuse: 0.5,
            fusion: FusionMode::Soft,
        }
    }
}

pub const METHOD_SINGLE: &str = "single";
pub const METHOD_FUSED: &str = "fused";

/// DSC of one case under one method; `dsc[k]` is foreground class `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub phase: PhaseTag,
    pub method: String,
    pub dsc: Vec<f64>,
    /// Mean over foreground classes.
    pub mean: f64,
}

/// Key of a summary row: a foreground class number or `"mean"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub phase: PhaseTag,
    pub class: String,
    pub average: f64,
    pub max: f64,
    pub min: f64,
    pub cases: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelGain {
    pub gained: u64,
    pub lost: u64,
    pub fp_removed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelGainRow {
    pub phase: PhaseTag,
    pub class: u8,
    #[serde(flatten)]
    pub counts: PixelGain,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_case: Vec<CaseScore>,
    pub summary: Vec<SummaryRow>,
    pub pixel_gain: Vec<PixelGainRow>,
    /// Reference to the run and data this report was computed from.
    pub provenance: String,
}

fn class_key(k: Option<usize>) -> String {
    match k {
        Some(k) => (k + 1).to_string(),
        None => "mean".into(),
    }
}

impl MetricsReport {
    /// Rebuilds the summary from `per_case`.
    pub fn summarize(&mut self) {
        let mut keys: Vec<(String, PhaseTag)> = Vec::new();
        for c in &self.per_case {
            if !keys.iter().any(|(m, p)| *m == c.method && *p == c.phase) {
                keys.push((c.method.clone(), c.phase));
            }
        }
        let mut rows = Vec::new();
        for (method, phase) in keys {
            let sel: Vec<&CaseScore> = self
                .per_case
                .iter()
                .filter(|c| c.method == method && c.phase == phase)
                .collect();
            let nc = sel[0].dsc.len();
            for k in (0..nc).map(Some).chain([None]) {
                let vals: Vec<f64> = sel
                    .iter()
                    .map(|c| match k {
                        Some(k) => c.dsc[k],
                        None => c.mean,
                    })
                    .collect();
                rows.push(SummaryRow {
                    method: method.clone(),
                    phase,
                    class: class_key(k),
                    average: vals.iter().sum::<f64>() / vals.len() as f64,
                    max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                    cases: vals.len(),
                });
            }
        }
        self.summary = rows;
    }

    pub fn row(&self, method: &str, phase: PhaseTag, class: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.phase == phase && r.class == class)
    }

    /// True when every summary row matches a recomputation from `per_case`
    /// within `tol`, and `min <= average <= max`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let mut re = self.clone();
        re.summarize();
        re.summary.len() == self.summary.len()
            && re.summary.iter().zip(&self.summary).all(|(a, b)| {
                a.method == b.method
                    && a.phase == b.phase
                    && a.class == b.class
                    && (a.average - b.average).abs() <= tol
                    && a.max == b.max
                    && a.min == b.min
                    && b.min <= b.average + tol
                    && b.average <= b.max + tol
            })
    }

    pub fn merge(mut self, other: MetricsReport) -> MetricsReport {
        self.per_case.extend(other.per_case);
        self.pixel_gain.extend(other.pixel_gain);
        self.summarize();
        self
    }

    pub fn per_case_csv(&self) -> String {
        let nc = self.per_case.first().map_or(0, |c| c.dsc.len());
        let mut s = String::from("case_id,phase,method");
        for k in 0..nc {
            s.push_str(&format!(",dsc_{}", k + 1));
        }
        s.push_str(",dsc_mean\n");
        for c in &self.per_case {
            s.push_str(&format!("{},{},{}", c.case_id, c.phase, c.method));
            for v in &c.dsc {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}\n", c.mean));
        }
        s
    }
}

/// Foreground-class DSCs of a prediction.
pub fn class_dsc(pred: &LabelMask, gt: &LabelMask) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(PcnError::ShapeMismatch("prediction and ground truth grids differ".into()));
    }
    (1..gt.num_classes)
        .map(|c| dsc(&pred.class_mask(c), &gt.class_mask(c)))
        .collect()
}

fn score(case_id: &str, phase: PhaseTag, method: &str, d: Vec<f64>) -> CaseScore {
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    CaseScore {
        case_id: case_id.to_string(),
        phase,
        method: method.to_string(),
        dsc: d,
        mean,
    }
}

/// Counts cells where fusion fixed or broke a prediction of `class`.
pub fn pixel_gain(pred_fused: &LabelMask, pred_single: &LabelMask, gt: &LabelMask, class: u8) -> Result<PixelGain> {
    if pred_fused.shape() != gt.shape() || pred_single.shape() != gt.shape() {
        return Err(PcnError::ShapeMismatch("pixel_gain needs equal grids".into()));
    }
    let mut g = PixelGain::default();
    for ((&f, &s), &t) in pred_fused.data.iter().zip(&pred_single.data).zip(&gt.data) {
        let fc = (f == class) == (t == class);
        let sc = (s == class) == (t == class);
        if fc && !sc {
            g.gained += 1;
        }
        if sc && !fc {
            g.lost += 1;
        }
        if s == class && t != class && f != class {
            g.fp_removed += 1;
        }
    }
    Ok(g)
}

/// Predictions for one case of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct CasePrediction {
    pub case_id: String,
    pub single: LabelMask,
    pub fused: Option<LabelMask>,
}

pub fn predict_phase(br: Branches<'_>, data: &Dataset, phase: PhaseTag, o: &EvalOptions) -> Result<Vec<CasePrediction>> {
    let lp = LabelPhase::from(phase);
    data.cases()
        .par_iter()
        .filter_map(|c| c.phase(phase).map(|s| (c, s)))
        .map(|(c, s)| {
            let single = seg_forward(br.native, &s.volume)?.argmax(lp);
            let fused = match br.translated {
                Some((other, g)) => {
                    Some(predict_fused_with(br.native, other, g, &s.volume, o.lambda_fuse, o.fusion)?.1)
                }
                None => None,
            };
            Ok(CasePrediction {
                case_id: c.case_id.clone(),
                single,
                fused,
            })
        })
        .collect()
}

/// Per-case DSC for the single-branch and (when available) fused methods on one phase.
pub fn evaluate(br: Branches<'_>, data: &Dataset, phase: PhaseTag, o: &EvalOptions) -> Result<MetricsReport> {
    let preds = predict_phase(br, data, phase, o)?;
    if preds.is_empty() {
        return Err(PcnError::InsufficientData(format!("no {phase} samples to evaluate")));
    }
    let mut report = MetricsReport::default();
    let nc = br.native.arch.num_classes as u8;
    let mut gains = vec![PixelGain::default(); nc as usize];
    for (pr, c) in preds.iter().zip(data.cases().iter().filter(|c| c.phase(phase).is_some())) {
        let gt = &c.phase(phase).expect("filtered").label;
        report
            .per_case
            .push(score(&pr.case_id, phase, METHOD_SINGLE, class_dsc(&pr.single, gt)?));
        if let Some(f) = &pr.fused {
            report.per_case.push(score(&pr.case_id, phase, METHOD_FUSED, class_dsc(f, gt)?));
            for class in 1..nc {
                let g = pixel_gain(f, &pr.single, gt, class)?;
                let acc = &mut gains[class as usize];
                acc.gained += g.gained;
                acc.lost += g.lost;
                acc.fp_removed += g.fp_removed;
            }
        }
    }
    if br.translated.is_some() {
        for class in 1..nc {
            report.pixel_gain.push(PixelGainRow {
                phase,
                class,
                counts: gains[class as usize].clone(),
            });
        }
    }
    report.summarize();
    Ok(report)
}

/// Evaluates both phases of a two-phase bundle.
pub fn evaluate_bundle(b: &ModelBundle, data: &Dataset, o: &EvalOptions) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    for p in PhaseTag::BOTH {
        if data.cases().iter().any(|c| c.phase(p).is_some()) {
            r = r.merge(evaluate(Branches::from_bundle(b, p), data, p, o)?);
        }
    }
    Ok(r)
}

/// Picks the fusion weight in {0.1, ..., 0.9} with the best mean fused DSC on
/// a validation set (ties go to the value closest to 0.5, then the smaller).
pub fn tune_lambda_fuse(br: Branches<'_>, val: &Dataset, phase: PhaseTag, class: Option<u8>) -> Result<(f64, f64)> {
    if br.translated.is_none() {
        return Err(PcnError::Config("fusion weight tuning needs a translated branch".into()));
    }
    let mut grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    grid.sort_by(|a, b| (a - 0.5).abs().total_cmp(&(b - 0.5).abs()).then(a.total_cmp(b)));
    let key = class.map_or("mean".to_string(), |c| c.to_string());
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for l in grid {
        let o = EvalOptions {
            lambda_fuse: l,
            fusion: FusionMode::Soft,
        };
        let r = evaluate(br, val, phase, &o)?;
        let v = r.row(METHOD_FUSED, phase, &key).map_or(f64::NEG_INFINITY, |r| r.average);
        if v > best.1 {
            best = (l, v);
        }
    }
    Ok(best)
}

/// Pooled masked histograms of real and generated volumes and their distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramComparison {
    pub real: Histogram,
    pub generated: Histogram,
    /// Distance between the two histogram peaks, HU.
    pub peak_distance: f64,
    /// Sum of absolute differences of normalized frequencies; lies in [0, 2].
    pub l1: f64,
}

fn pooled(items: &[(&Volume, &BinaryMask)], bins: usize, range: (f64, f64), what: &str) -> Result<Histogram> {
    let mut counts = vec![0.0; bins];
    let mut n = 0;
    for (v, m) in items {
        n += masked_counts(v, m, bins, range, &mut counts)?;
    }
    if n == 0 {
        return Err(PcnError::EmptyRegion(format!("pooled {what} mask selects no cells")));
    }
    Ok(histogram_from_counts(counts, n, range))
}

pub fn histogram_compare(
    real: &[(&Volume, &BinaryMask)],
    generated: &[(&Volume, &BinaryMask)],
    bins: usize,
    range: (f64, f64),
) -> Result<HistogramComparison> {
    check_hist_args(bins, range)?;
    let r = pooled(real, bins, range, "real")?;
    let g = pooled(generated, bins, range, "generated")?;
    let l1 = r.freq.iter().zip(&g.freq).map(|(a, b)| (a - b).abs()).sum();
    Ok(HistogramComparison {
        peak_distance: (r.peak() - g.peak()).abs(),
        l1,
        real: r,
        generated: g,
    })
}

/// Compares translated source-phase images with real target-phase images over
/// `class`, each masked by its own label.
pub fn translation_histograms(
    g: &Generator,
    data: &Dataset,
    class: u8,
    bins: usize,
    range: (f64, f64),
) -> Result<HistogramComparison> {
    let src = g.direction.source;
    let tgt = g.direction.target;
    let fakes: Vec<(Volume, BinaryMask)> = data
        .samples(src)
        .par_iter()
        .map(|s| Ok((translate(g, &s.volume)?, s.label.class_mask(class))))
        .collect::<Result<_>>()?;
    let reals: Vec<(&Volume, BinaryMask)> = data
        .samples(tgt)
        .iter()
        .map(|s| (&s.volume, s.label.class_mask(class)))
        .collect();
    let f: Vec<(&Volume, &BinaryMask)> = fakes.iter().map(|(v, m)| (v, m)).collect();
    let r: Vec<(&Volume, &BinaryMask)> = reals.iter().map(|(v, m)| (*v, m)).collect();
    histogram_compare(&r, &f, bins, range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: Vec<u8>) -> LabelMask {
        LabelMask::new(8, 8, data, 3, LabelPhase::Arterial).unwrap()
    }

    #[test]
    fn pixel_gain_examples() {
        let gt = mask((0..64).map(|i| if i < 7 { 1 } else { 0 }).collect());
        let zero = mask(vec![0; 64]);
        assert_eq!(pixel_gain(&zero, &zero, &gt, 1).unwrap(), PixelGain::default());
        let g = pixel_gain(&gt, &zero, &gt, 1).unwrap();
        assert_eq!((g.gained, g.lost, g.fp_removed), (7, 0, 0));
        let fp = mask((0..64).map(|i| if i < 10 { 1 } else { 0 }).collect());
        let g = pixel_gain(&gt, &fp, &gt, 1).unwrap();
        assert_eq!((g.gained, g.lost, g.fp_removed), (3, 0, 3));
    }

    #[test]
    fn summary_rows_follow_cases() {
        let mut r = MetricsReport::default();
        r.per_case.push(score("a", PhaseTag::Venous, "single", vec![0.5, 1.0]));
        r.per_case.push(score("b", PhaseTag::Venous, "single", vec![0.7, 0.0]));
        r.summarize();
        let row = r.row("single", PhaseTag::Venous, "1").unwrap();
        assert!((row.average - 0.6).abs() < 1e-12);
        assert_eq!((row.max, row.min), (0.7, 0.5));
        let m = r.row("single", PhaseTag::Venous, "mean").unwrap();
        assert!((m.average - 0.55).abs() < 1e-12);
        assert!(r.is_consistent(1e-12));
        r.summary[0].average = 0.9;
        assert!(!r.is_consistent(1e-12));
    }

    #[test]
    fn identical_histogram_sets_have_zero_distance() {
        let v = Volume::new(8, 8, (0..64).map(|i| i as f64 * 3.0 - 100.0).collect(), PhaseTag::Venous, "c").unwrap();
        let m = BinaryMask {
            height: 8,
            width: 8,
            data: vec![true; 64],
        };
        let c = histogram_compare(&[(&v, &m)], &[(&v, &m)], 40, (-125.0, 275.0)).unwrap();
        assert_eq!((c.peak_distance, c.l1), (0.0, 0.0));
        let empty = BinaryMask {
            height: 8,
            width: 8,
            data: vec![false; 64],
        };
        assert!(matches!(
            histogram_compare(&[(&v, &empty)], &[(&v, &m)], 40, (-125.0, 275.0)),
            Err(PcnError::EmptyRegion(_))
        ));
    }
}
