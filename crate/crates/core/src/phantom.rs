//! Synthetic two-phase phantoms.
//!
//! Each case has one latent anatomy. The arterial and venous labels are two
//! independent smooth deformations of it, and each phase is rendered with its
//! own class intensity table, so the phases are never pixel-aligned.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::seed;
use crate::types::{
    clamp_default, BinaryMask, Case, Dataset, LabelMask, LabelPhase, PhaseTag, Provenance, Sample, Volume, HU_MAX,
    HU_MIN,
};

/// Mean and standard deviation of a class's intensity, in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauss {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIntensity {
    pub arterial: Gauss,
    pub venous: Gauss,
}

impl ClassIntensity {
    pub fn get(&self, p: PhaseTag) -> Gauss {
        match p {
            PhaseTag::Arterial => self.arterial,
            PhaseTag::Venous => self.venous,
        }
    }

    pub fn get_mut(&mut self, p: PhaseTag) -> &mut Gauss {
        match p {
            PhaseTag::Arterial => &mut self.arterial,
            PhaseTag::Venous => &mut self.venous,
        }
    }
}

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_ORGAN: u8 = 1;
pub const CLASS_ARTERY: u8 = 2;
pub const CLASS_VEIN: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    /// RMS displacement of the per-phase label deformation, in cells.
    pub deformation_magnitude: f64,
    /// Indexed by class.
    pub intensity_table: Vec<ClassIntensity>,
    /// Additive acquisition noise, HU.
    pub noise_std: f64,
    /// Peak deviation of the multiplicative bias field, expressed in HU at a 100 HU tissue.
    pub bias_field_amplitude: f64,
    pub seed: u64,
}

fn ci(a: (f64, f64), v: (f64, f64)) -> ClassIntensity {
    ClassIntensity {
        arterial: Gauss { mean: a.0, std: a.1 },
        venous: Gauss { mean: v.0, std: v.1 },
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            deformation_magnitude: 1.5,
            intensity_table: vec![
                ci((-60.0, 20.0), (-60.0, 20.0)),
                ci((50.0, 6.0), (100.0, 6.0)),
                ci((220.0, 8.0), (90.0, 8.0)),
                ci((70.0, 8.0), (180.0, 8.0)),
            ],
            noise_std: 10.0,
            bias_field_amplitude: 5.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Default phantom with the organ's mean intensity in `weak` set to the background
    /// mean. The organ keeps its own texture, so only a weak cue is left in that phase.
    pub fn weak_phase(weak: PhaseTag) -> Self {
        let mut cfg = Self::default();
        cfg.suppress_contrast(CLASS_ORGAN, weak);
        cfg
    }

    /// Larger label disagreement between phases, standing in for abnormal anatomy.
    pub fn abnormal() -> Self {
        Self {
            deformation_magnitude: 3.0,
            ..Self::default()
        }
    }

    pub fn suppress_contrast(&mut self, class: u8, phase: PhaseTag) {
        let bg = self.intensity_table[CLASS_BACKGROUND as usize].get(phase).mean;
        self.intensity_table[class as usize].get_mut(phase).mean = bg;
    }

    pub fn with_grid(mut self, side: usize) -> Self {
        self.height = side;
        self.width = side;
        self
    }

    /// Every violated invariant as (field path, message).
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(("num_classes".into(), format!("must be >= 2, got {}", self.num_classes)));
        }
        if self.height < crate::types::MIN_GRID || self.width < crate::types::MIN_GRID {
            v.push(("height".into(), format!("grid {}x{} below minimum 8x8", self.height, self.width)));
        }
        if !(self.deformation_magnitude >= 0.0) {
            v.push(("deformation_magnitude".into(), format!("must be >= 0, got {}", self.deformation_magnitude)));
        }
        if self.intensity_table.len() < self.num_classes as usize {
            v.push((
                "intensity_table".into(),
                format!("has {} entries for {} classes", self.intensity_table.len(), self.num_classes),
            ));
        }
        for (c, e) in self.intensity_table.iter().enumerate() {
            for p in PhaseTag::BOTH {
                let g = e.get(p);
                if !(HU_MIN..=HU_MAX).contains(&g.mean) || !(g.std >= 0.0) {
                    v.push((
                        format!("intensity_table.{c}.{}", p.as_str().to_lowercase()),
                        format!("mean {} must lie in [{HU_MIN}, {HU_MAX}] with std >= 0", g.mean),
                    ));
                }
            }
        }
        if !(self.noise_std >= 0.0) {
            v.push(("noise_std".into(), format!("must be >= 0, got {}", self.noise_std)));
        }
        if !(self.bias_field_amplitude >= 0.0) {
            v.push(("bias_field_amplitude".into(), format!("must be >= 0, got {}", self.bias_field_amplitude)));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            Some((k, m)) => Err(PcnError::Config(format!("{k}: {m}"))),
            None => Ok(()),
        }
    }
}

/// Per-cell displacement `(dy, dx)` in cells.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub height: usize,
    pub width: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

impl DeformationField {
    pub fn rms(&self) -> f64 {
        let s: f64 = self.dy.iter().zip(&self.dx).map(|(a, b)| a * a + b * b).sum();
        (s / self.dy.len() as f64).sqrt()
    }
}

/// Separable Gaussian blur with edge-renormalized weights.
pub(crate) fn gaussian_blur(grid: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return grid.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut ws) = (0.0, 0.0);
                for (ki, kv) in kernel.iter().enumerate() {
                    let o = ki as isize - r;
                    let (yy, xx) = if along_x { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        s += kv * src[yy as usize * w + xx as usize];
                        ws += kv;
                    }
                }
                out[y * w + x] = s / ws;
            }
        }
        out
    };
    let tmp = pass(grid, true);
    pass(&tmp, false)
}

fn white_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

const AREA_MIN: f64 = 0.01;
const AREA_MAX: f64 = 0.30;
const ANATOMY_RETRIES: u64 = 32;

fn target_fraction(class: u8) -> f64 {
    if class == CLASS_ORGAN {
        0.18
    } else {
        0.05
    }
}

fn blob_sigma(class: u8, side: usize) -> f64 {
    if class == CLASS_ORGAN {
        side as f64 / 10.0
    } else {
        side as f64 / 20.0
    }
}

/// Latent anatomy: thresholded smooth noise per class, painted in class order.
pub fn sample_anatomy(cfg: &PhantomConfig, seed: u64) -> Result<LabelMask> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let side = h.min(w);
    for attempt in 0..ANATOMY_RETRIES {
        let mut rng = seed::stream(seed, "anatomy", attempt);
        let mut mask = vec![CLASS_BACKGROUND; n];
        for class in 1..cfg.num_classes {
            let field = gaussian_blur(&white_noise(&mut rng, n), h, w, blob_sigma(class, side));
            let mut sorted = field.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let cut = ((1.0 - target_fraction(class)) * n as f64) as usize;
            let threshold = sorted[cut.min(n - 1)];
            for (m, &f) in mask.iter_mut().zip(&field) {
                if f > threshold {
                    *m = class;
                }
            }
        }
        let ok = (1..cfg.num_classes).all(|c| {
            let frac = mask.iter().filter(|&&v| v == c).count() as f64 / n as f64;
            (AREA_MIN..=AREA_MAX).contains(&frac)
        });
        if ok {
            return LabelMask::new(h, w, mask, cfg.num_classes, LabelPhase::Latent);
        }
    }
    Err(PcnError::Generation(format!(
        "no anatomy with every class area in [{AREA_MIN}, {AREA_MAX}] after {ANATOMY_RETRIES} attempts"
    )))
}

/// Correlation length of the displacement noise, in cells.
const DEFORMATION_SMOOTHING: f64 = 3.0;

/// Nearest-neighbour pull-back of `labels` through `field`.
pub fn warp_labels(labels: &LabelMask, field: &DeformationField, phase: LabelPhase) -> Result<LabelMask> {
    let (h, w) = labels.shape();
    if (field.height, field.width) != (h, w) {
        return Err(PcnError::ShapeMismatch("deformation field and label grid differ".into()));
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as f64 + field.dy[i]).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + field.dx[i]).round().clamp(0.0, (w - 1) as f64) as usize;
            out[i] = labels.data[sy * w + sx];
        }
    }
    LabelMask::new(h, w, out, labels.num_classes, phase)
}

/// Smooth random displacement with RMS magnitude `sigma`, applied to the latent labels.
pub fn deform_labels(y_star: &LabelMask, sigma: f64, seed: u64) -> Result<(LabelMask, DeformationField)> {
    deform_labels_as(y_star, sigma, seed, y_star.phase)
}

pub fn deform_labels_as(
    y_star: &LabelMask,
    sigma: f64,
    seed: u64,
    phase: LabelPhase,
) -> Result<(LabelMask, DeformationField)> {
    if !(sigma >= 0.0) {
        return Err(PcnError::Config(format!("deformation sigma must be >= 0, got {sigma}")));
    }
    let (h, w) = y_star.shape();
    let n = h * w;
    let mut field = DeformationField {
        height: h,
        width: w,
        dy: vec![0.0; n],
        dx: vec![0.0; n],
    };
    if sigma == 0.0 {
        let mut same = y_star.clone();
        same.phase = phase;
        return Ok((same, field));
    }
    let mut rng = seed::stream(seed, "deformation", 0);
    field.dy = gaussian_blur(&white_noise(&mut rng, n), h, w, DEFORMATION_SMOOTHING);
    field.dx = gaussian_blur(&white_noise(&mut rng, n), h, w, DEFORMATION_SMOOTHING);
    let rms = field.rms();
    if rms > 0.0 {
        let k = sigma / rms;
        field.dy.iter_mut().chain(field.dx.iter_mut()).for_each(|v| *v *= k);
    }
    let warped = warp_labels(y_star, &field, phase)?;
    Ok((warped, field))
}

fn bias_field<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for _ in 0..3 {
        let fy: f64 = rng.gen_range(-1.5..1.5);
        let fx: f64 = rng.gen_range(-1.5..1.5);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                field[y * w + x] += amp * t.sin();
            }
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

/// Renders one phase: class texture, smooth multiplicative bias, additive noise, clamp.
pub fn render_phase(y: &LabelMask, phase: PhaseTag, cfg: &PhantomConfig, seed: u64, case_id: &str) -> Result<Volume> {
    if cfg.intensity_table.len() < y.num_classes as usize {
        return Err(PcnError::Config(format!(
            "intensity_table has no entry for class {}",
            cfg.intensity_table.len()
        )));
    }
    let (h, w) = y.shape();
    let mut rng = seed::stream(seed, "render", phase as u64);
    let bias = if cfg.bias_field_amplitude > 0.0 {
        bias_field(&mut rng, h, w)
    } else {
        vec![0.0; h * w]
    };
    let gain = cfg.bias_field_amplitude / 100.0;
    let mut data = Vec::with_capacity(h * w);
    for (i, &c) in y.data.iter().enumerate() {
        let g = cfg.intensity_table[c as usize].get(phase);
        let z: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        let tissue = g.mean + g.std * z;
        let v = tissue * (1.0 + gain * bias[i]) + cfg.noise_std * e;
        // stored at f32 precision so the on-disk container round-trips exactly
        data.push(v as f32 as f64);
    }
    let v = Volume::new(h, w, data, phase, case_id)?;
    Ok(clamp_default(&v))
}

/// Builds a paired two-phase dataset of `n_cases` phantoms.
pub fn generate_dataset(cfg: &PhantomConfig, n_cases: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_cases == 0 {
        return Err(PcnError::Config("n_cases must be >= 1".into()));
    }
    let cases = (0..n_cases)
        .into_par_iter()
        .map(|i| generate_case(cfg, i, seed::derive(seed, "case", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cases, Provenance::Phantom)
}

pub fn generate_case(cfg: &PhantomConfig, index: usize, case_seed: u64) -> Result<Case> {
    let case_id = format!("case{index:04}");
    let latent = sample_anatomy(cfg, seed::derive(case_seed, "anatomy", 0))?;
    let mut case = Case {
        case_id: case_id.clone(),
        arterial: None,
        venous: None,
        latent_label: Some(latent.clone()),
    };
    for p in PhaseTag::BOTH {
        let (label, field) = deform_labels_as(
            &latent,
            cfg.deformation_magnitude,
            seed::derive(case_seed, "deform", p as u64),
            p.into(),
        )?;
        let volume = render_phase(&label, p, cfg, seed::derive(case_seed, "render", p as u64), &case_id)?;
        *case.phase_mut(p) = Some(Sample {
            volume,
            label,
            deformation: Some(field),
        });
    }
    Ok(case)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    /// Normalized frequencies, one per bin.
    pub freq: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.freq.len()
    }

    pub fn bin_of(&self, v: f64) -> usize {
        bin_index(v, self.edges[0], self.edges[self.bins()], self.bins())
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    /// Index of the most populated bin (lowest index on ties).
    pub fn mode_bin(&self) -> usize {
        let mut best = 0;
        for (i, &f) in self.freq.iter().enumerate() {
            if f > self.freq[best] {
                best = i;
            }
        }
        best
    }

    pub fn peak(&self) -> f64 {
        self.center(self.mode_bin())
    }
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    t.clamp(0.0, (bins - 1) as f64) as usize
}

/// Accumulates raw counts of masked voxels. Values outside `range` land in the edge bins.
pub(crate) fn masked_counts(v: &Volume, mask: &BinaryMask, bins: usize, range: (f64, f64), counts: &mut [f64]) -> Result<usize> {
    if (v.height, v.width) != (mask.height, mask.width) {
        return Err(PcnError::ShapeMismatch("volume and mask grids differ".into()));
    }
    let mut n = 0;
    for (&x, &m) in v.data.iter().zip(&mask.data) {
        if m {
            counts[bin_index(x, range.0, range.1, bins)] += 1.0;
            n += 1;
        }
    }
    Ok(n)
}

pub(crate) fn histogram_from_counts(counts: Vec<f64>, total: usize, range: (f64, f64)) -> Histogram {
    let bins = counts.len();
    let edges = (0..=bins)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / bins as f64)
        .collect();
    let freq = counts.into_iter().map(|c| c / total as f64).collect();
    Histogram { edges, freq }
}

pub(crate) fn check_hist_args(bins: usize, range: (f64, f64)) -> Result<()> {
    if bins < 2 {
        return Err(PcnError::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if !(range.0 < range.1) {
        return Err(PcnError::InvalidRange { lo: range.0, hi: range.1 });
    }
    Ok(())
}

/// Normalized intensity histogram over the masked cells.
pub fn intensity_histogram(v: &Volume, mask: &BinaryMask, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    check_hist_args(bins, range)?;
    let mut counts = vec![0.0; bins];
    let n = masked_counts(v, mask, bins, range, &mut counts)?;
    if n == 0 {
        return Err(PcnError::EmptyRegion("histogram mask selects no cells".into()));
    }
    Ok(histogram_from_counts(counts, n, range))
}

/// Plug-in Shannon entropies in bits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub joint: f64,
    pub arterial: f64,
    pub venous: f64,
}

fn entropy_bits(counts: impl Iterator<Item = f64>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum()
}

/// Marginal and joint (cell-pair) entropies of two equally shaped volumes,
/// discretized into `bins` equal-width bins over the HU window.
pub fn entropy_report(x_a: &Volume, x_v: &Volume, bins: usize) -> Result<EntropyReport> {
    if x_a.shape() != x_v.shape() {
        return Err(PcnError::ShapeMismatch("entropy_report needs equally shaped volumes".into()));
    }
    if bins < 2 {
        return Err(PcnError::Config(format!("entropy needs at least 2 bins, got {bins}")));
    }
    let mut ca = vec![0.0; bins];
    let mut cv = vec![0.0; bins];
    let mut cj = vec![0.0; bins * bins];
    for (&a, &v) in x_a.data.iter().zip(&x_v.data) {
        let ia = bin_index(a, HU_MIN, HU_MAX, bins);
        let iv = bin_index(v, HU_MIN, HU_MAX, bins);
        ca[ia] += 1.0;
        cv[iv] += 1.0;
        cj[ia * bins + iv] += 1.0;
    }
    let n = x_a.data.len() as f64;
    Ok(EntropyReport {
        joint: entropy_bits(cj.into_iter(), n),
        arterial: entropy_bits(ca.into_iter(), n),
        venous: entropy_bits(cv.into_iter(), n),
    })
}
