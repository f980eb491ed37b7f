//! Two-stage training: a separate stage where segmentation models see only
//! real data while the generators train as a cycle-consistent GAN, then a
//! joint stage on the full objective. Also the one-phase mode with a frozen
//! translator and plain segmentation training used by baselines.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::objective::{
    pcn_loss, seg_slot, translator_loss, BundleArch, LossBreakdown, MeanGrad, ModelBundle, PcnOptions,
    Stage, DISC_A, DISC_V, GEN_AV, GEN_VA, NUM_SLOTS, SEG_A, SEG_V,
};
use crate::seed;
use crate::seg::{seg_loss, SegLossKind, SegModel};
use crate::translate::{translate, Generator};
use crate::types::{Dataset, LabelPhase, PhaseTag, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    TwoPhase,
    OnePhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub separate_iters: u64,
    pub joint_iters: u64,
    pub lr0: f64,
    /// Multiplier on `lr0` for generators and discriminators.
    pub translator_lr_scale: f64,
    /// Further multiplier for the discriminators on top of `translator_lr_scale`.
    pub disc_lr_scale: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub lambda_joint: f64,
    pub lambda_cyc: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub seg_loss: SegLossKind,
    pub literal_cross_term: bool,
    /// Stops segmentation gradients from reaching the generators.
    pub detach_translator: bool,
    /// Keeps generators and discriminators fixed in both stages.
    pub freeze_translator: bool,
    /// Lets the joint stage start from a bundle that has not been separate-trained.
    pub allow_stage_override: bool,
    pub checkpoint_every: u64,
    pub lambda_fuse: f64,
    pub arch: BundleArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            separate_iters: 2000,
            joint_iters: 1000,
            lr0: 1e-3,
            translator_lr_scale: 0.2,
            disc_lr_scale: 1.0,
            lr_decay_factor: 0.8,
            lr_decay_every: 500,
            lambda_joint: 0.8,
            lambda_cyc: 10.0,
            batch_size: 4,
            seed: 0,
            deterministic: true,
            mode: TrainMode::TwoPhase,
            optimizer: OptimizerKind::adam(),
            seg_loss: SegLossKind::L1,
            literal_cross_term: false,
            detach_translator: false,
            freeze_translator: false,
            allow_stage_override: false,
            checkpoint_every: 0,
            lambda_fuse: 0.5,
            arch: BundleArch::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU core: smaller networks, a lighter cycle
    /// weight, a shallower discriminator and no learning-rate decay.
    pub fn desk() -> Self {
        Self {
            translator_lr_scale: 1.0,
            lr_decay_every: 100_000,
            lambda_cyc: 1.0,
            batch_size: 2,
            arch: BundleArch {
                seg: crate::seg::SegArch {
                    base_width: 8,
                    ..Default::default()
                },
                gen: Default::default(),
                disc: crate::translate::DiscArch {
                    base_width: 8,
                    num_downsample: 1,
                },
            },
            ..Self::default()
        }
    }

    /// Checks every field, collecting all violations. Config files must keep
    /// `lambda_joint` strictly inside (0, 1).
    pub fn issues(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if !(self.lambda_joint > 0.0 && self.lambda_joint < 1.0) {
            v.push(("lambda_joint", format!("must lie in (0, 1), got {}", self.lambda_joint)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            v.push(("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if !(self.translator_lr_scale >= 0.0) {
            v.push(("translator_lr_scale", format!("must be >= 0, got {}", self.translator_lr_scale)));
        }
        if !(self.disc_lr_scale >= 0.0) {
            v.push(("disc_lr_scale", format!("must be >= 0, got {}", self.disc_lr_scale)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            v.push(("lr_decay_factor", format!("must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if self.lr_decay_every == 0 {
            v.push(("lr_decay_every", "must be >= 1".into()));
        }
        if !(self.lambda_cyc >= 0.0) {
            v.push(("lambda_cyc", format!("must be >= 0, got {}", self.lambda_cyc)));
        }
        if self.batch_size == 0 {
            v.push(("batch_size", "must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_fuse) {
            v.push(("lambda_fuse", format!("must lie in [0, 1], got {}", self.lambda_fuse)));
        }
        if self.arch.seg.depth < 1 || self.arch.seg.base_width < 4 {
            v.push(("arch.seg.depth", "segmentation needs depth >= 1 and base_width >= 4".into()));
        }
        if self.arch.seg.num_classes < 2 {
            v.push(("arch.seg.num_classes", "must be >= 2".into()));
        }
        if self.arch.gen.base_width == 0 || self.arch.disc.base_width == 0 {
            v.push(("arch.gen.base_width", "generator and discriminator widths must be >= 1".into()));
        }
        v
    }

    /// Programmatic check used by the training functions; unlike `issues`,
    /// it admits the boundary values 0 and 1 for `lambda_joint`.
    fn check_runtime(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_joint) {
            return Err(PcnError::OutOfBounds {
                name: "lambda_joint".into(),
                value: self.lambda_joint,
                lo: 0.0,
                hi: 1.0,
            });
        }
        match self.issues().into_iter().find(|(k, _)| *k != "lambda_joint") {
            Some((k, m)) => Err(PcnError::Config(format!("{k} {m}"))),
            None => Ok(()),
        }
    }

    pub fn hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn pcn_options(&self, lambda: f64) -> PcnOptions {
        PcnOptions {
            lambda,
            lambda_cyc: self.lambda_cyc,
            loss: self.seg_loss,
            literal_cross_term: self.literal_cross_term,
            detach_translator: self.detach_translator,
        }
    }
}

pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let k = (iter / cfg.lr_decay_every.max(1)) as i32;
    cfg.lr0 * cfg.lr_decay_factor.powi(k)
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub stage: Stage,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("iteration,stage,lr,{}\n", LossBreakdown::csv_header());
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e},{}", r.iteration, r.stage.as_str(), r.lr, r.loss.csv_row());
        }
        s
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.rows.extend(other.rows);
    }

    /// Least-squares slope of a column against iteration.
    pub fn slope(&self, f: impl Fn(&LossBreakdown) -> f64) -> Option<f64> {
        if self.rows.len() < 2 {
            return None;
        }
        let n = self.rows.len() as f64;
        let xs: Vec<f64> = self.rows.iter().map(|r| r.iteration as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| f(&r.loss)).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        Some(sxy / sxx)
    }
}

/// Called after every iteration with the updated bundle and the row just logged.
pub type Observer<'a> = &'a mut dyn FnMut(&ModelBundle, &LogRow) -> Result<()>;

/// Draws `n` indices into `len` items, keyed by purpose and global iteration.
fn draw(cfg: &TrainConfig, tag: &str, iter: u64, len: usize, n: usize) -> Vec<usize> {
    let mut rng = seed::stream(cfg.seed, tag, iter);
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

fn batch_tag(p: PhaseTag) -> &'static str {
    match p {
        PhaseTag::Arterial => "batch-A",
        PhaseTag::Venous => "batch-V",
    }
}

fn pick<'a>(pool: &[&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| pool[i]).collect()
}

fn two_phase_pools(data: &Dataset) -> Result<[Vec<&Sample>; 2]> {
    let a = data.samples(PhaseTag::Arterial);
    let v = data.samples(PhaseTag::Venous);
    if a.is_empty() || v.is_empty() {
        return Err(PcnError::InsufficientData(format!(
            "two-phase training needs samples of both phases, got {} arterial and {} venous",
            a.len(),
            v.len()
        )));
    }
    Ok([a, v])
}

fn seg_batch_grad(m: &SegModel, batch: &[&Sample], kind: SegLossKind) -> Result<(f64, Vec<f64>)> {
    let mut acc = MeanGrad::new(m.params.len());
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = seg_loss(m, &s.volume, &s.label, kind)?;
        loss += l;
        acc.add(&g);
    }
    Ok((loss / batch.len() as f64, acc.finish()))
}

fn optimizers(b: &ModelBundle, cfg: &TrainConfig) -> Vec<Optimizer> {
    (0..NUM_SLOTS).map(|s| Optimizer::new(cfg.optimizer, b.params(s).len())).collect()
}

fn slot_lr(slot: usize, lr: f64, cfg: &TrainConfig) -> f64 {
    match slot {
        SEG_A | SEG_V => lr,
        DISC_A | DISC_V => lr * cfg.translator_lr_scale * cfg.disc_lr_scale,
        _ => lr * cfg.translator_lr_scale,
    }
}

/// Separate stage: each segmentation model trains on its own phase's real
/// data; the generators and discriminators train on adversarial and cycle
/// terms with independently drawn unpaired batches.
pub fn train_separate(
    mut b: ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.check_runtime()?;
    let mut log = TrainLog::default();
    if cfg.separate_iters == 0 {
        return Ok((b, log));
    }
    let pools = two_phase_pools(data)?;
    let mut opt = optimizers(&b, cfg);
    for _ in 0..cfg.separate_iters {
        let it = b.iteration;
        let lr = lr_at(it, cfg);
        let mut batches = Vec::with_capacity(2);
        let mut seg_losses = [0.0; 2];
        for (k, p) in PhaseTag::BOTH.into_iter().enumerate() {
            let idx = draw(cfg, batch_tag(p), it, pools[k].len(), cfg.batch_size);
            let batch = pick(&pools[k], &idx);
            let (l, g) = seg_batch_grad(b.seg(p), &batch, cfg.seg_loss)?;
            let s = seg_slot(p);
            opt[s].step(b.params_mut(s), &g, slot_lr(s, lr, cfg));
            seg_losses[k] = l;
            batches.push(batch);
        }
        let mut loss = if cfg.freeze_translator {
            LossBreakdown::zero(1.0, cfg.lambda_cyc)
        } else {
            let out = translator_loss(&b, &batches[0], &batches[1], cfg.lambda_cyc)?;
            for s in [GEN_AV, GEN_VA, DISC_A, DISC_V] {
                opt[s].step(b.params_mut(s), out.grads.slot(s), slot_lr(s, lr, cfg));
            }
            out.breakdown
        };
        loss.seg_real_a = seg_losses[0];
        loss.seg_real_v = seg_losses[1];
        loss.total = loss.recompose();
        b.iteration += 1;
        b.stage = Stage::Separate;
        let row = LogRow {
            iteration: it,
            stage: Stage::Separate,
            lr,
            loss,
        };
        if let Some(f) = observer.as_mut() {
            f(&b, &row)?;
        }
        log.rows.push(row);
    }
    Ok((b, log))
}

/// Joint stage on the full objective with `lambda = cfg.lambda_joint`: a
/// segmentation-and-generator step, then a discriminator step.
pub fn train_joint(
    mut b: ModelBundle,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.check_runtime()?;
    let mut log = TrainLog::default();
    if cfg.joint_iters == 0 {
        return Ok((b, log));
    }
    if !matches!(b.stage, Stage::Separate | Stage::Joint) && !cfg.allow_stage_override {
        return Err(PcnError::StageOrder(format!(
            "joint training needs a separate-trained bundle, found stage {}",
            b.stage.as_str()
        )));
    }
    let pools = two_phase_pools(data)?;
    let opts = cfg.pcn_options(cfg.lambda_joint);
    let mut opt = optimizers(&b, cfg);
    for _ in 0..cfg.joint_iters {
        let it = b.iteration;
        let lr = lr_at(it, cfg);
        let ia = draw(cfg, batch_tag(PhaseTag::Arterial), it, pools[0].len(), cfg.batch_size);
        let iv = draw(cfg, batch_tag(PhaseTag::Venous), it, pools[1].len(), cfg.batch_size);
        let (ba, bv) = (pick(&pools[0], &ia), pick(&pools[1], &iv));
        let out = pcn_loss(&b, &ba, &bv, &opts)?;
        let slots: &[usize] = if cfg.freeze_translator {
            &[SEG_A, SEG_V]
        } else {
            &[SEG_A, SEG_V, GEN_AV, GEN_VA, DISC_A, DISC_V]
        };
        for &s in slots {
            opt[s].step(b.params_mut(s), out.grads.slot(s), slot_lr(s, lr, cfg));
        }
        b.iteration += 1;
        b.stage = Stage::Joint;
        let row = LogRow {
            iteration: it,
            stage: Stage::Joint,
            lr,
            loss: out.breakdown,
        };
        if let Some(f) = observer.as_mut() {
            f(&b, &row)?;
        }
        log.rows.push(row);
    }
    Ok((b, log))
}

/// Plain segmentation training on a fixed pool of samples, which may mix phases.
/// Iterations are numbered from `start_iter` for the learning-rate schedule and
/// batch draws.
pub fn train_seg(
    mut m: SegModel,
    pool: &[&Sample],
    iters: u64,
    start_iter: u64,
    cfg: &TrainConfig,
    tag: &str,
) -> Result<(SegModel, Vec<f64>)> {
    cfg.check_runtime()?;
    if iters > 0 && pool.is_empty() {
        return Err(PcnError::InsufficientData("empty training pool".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, m.params.len());
    let mut losses = Vec::with_capacity(iters as usize);
    for i in 0..iters {
        let it = start_iter + i;
        let idx = draw(cfg, tag, it, pool.len(), cfg.batch_size);
        let (l, g) = seg_batch_grad(&m, &pick(pool, &idx), cfg.seg_loss)?;
        opt.step(&mut m.params, &g, lr_at(it, cfg));
        losses.push(l);
    }
    Ok((m, losses))
}

/// Segmentation models trained in one-phase mode.
#[derive(Clone, Debug, PartialEq)]
pub struct OnePhaseModels {
    /// Model for the data's own phase, trained on real pairs.
    pub native: SegModel,
    /// Model for the other phase, trained on translated images with the source labels.
    pub other: SegModel,
}

/// One-phase training with a frozen translator: the native model trains on
/// real pairs and the other-phase model on `(translate(frozen_gen, x), y)`.
/// Each iteration draws one batch and steps both models on it.
pub fn train_one_phase(
    native: SegModel,
    other: SegModel,
    frozen_gen: &Generator,
    data: &Dataset,
    iters: u64,
    cfg: &TrainConfig,
) -> Result<OnePhaseModels> {
    cfg.check_runtime()?;
    let p = frozen_gen.direction.source;
    let pool = data.samples(p);
    if pool.is_empty() {
        return Err(PcnError::PhaseMismatch {
            expected: p,
            got: p.other(),
        });
    }
    if native.phase != p || other.phase != p.other() {
        return Err(PcnError::PhaseMismatch {
            expected: p,
            got: native.phase,
        });
    }
    let translated: Vec<Sample> = pool
        .iter()
        .map(|s| {
            let mut label = s.label.clone();
            label.phase = LabelPhase::from(p.other());
            Ok(Sample {
                volume: translate(frozen_gen, &s.volume)?,
                label,
                deformation: None,
            })
        })
        .collect::<Result<_>>()?;
    let tpool: Vec<&Sample> = translated.iter().collect();
    let mut models = OnePhaseModels { native, other };
    let mut opt_n = Optimizer::new(cfg.optimizer, models.native.params.len());
    let mut opt_o = Optimizer::new(cfg.optimizer, models.other.params.len());
    for it in 0..iters {
        let lr = lr_at(it, cfg);
        let idx = draw(cfg, "batch-one-phase", it, pool.len(), cfg.batch_size);
        let (_, g) = seg_batch_grad(&models.native, &pick(&pool, &idx), cfg.seg_loss)?;
        opt_n.step(&mut models.native.params, &g, lr);
        let (_, g) = seg_batch_grad(&models.other, &pick(&tpool, &idx), cfg.seg_loss)?;
        opt_o.step(&mut models.other.params, &g, lr);
    }
    Ok(models)
}

/// Runs both stages from a fresh bundle.
pub fn train_two_stage(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    let grid = data
        .grid()
        .ok_or_else(|| PcnError::InsufficientData("empty dataset".into()))?;
    let b = ModelBundle::init(cfg.arch, grid, cfg.seed)?;
    let (b, mut log) = train_separate(b, data, cfg, None)?;
    let (b, l2) = train_joint(b, data, cfg, None)?;
    log.extend(l2);
    Ok((b, log))
}

/// Trains only the translator pair with adversarial and cycle terms, leaving
/// segmentation models untouched.
pub fn train_translators(mut b: ModelBundle, data: &Dataset, iters: u64, cfg: &TrainConfig) -> Result<ModelBundle> {
    cfg.check_runtime()?;
    let pools = two_phase_pools(data)?;
    let mut opt = optimizers(&b, cfg);
    for _ in 0..iters {
        let it = b.iteration;
        let lr = lr_at(it, cfg);
        let ia = draw(cfg, batch_tag(PhaseTag::Arterial), it, pools[0].len(), cfg.batch_size);
        let iv = draw(cfg, batch_tag(PhaseTag::Venous), it, pools[1].len(), cfg.batch_size);
        let out = translator_loss(&b, &pick(&pools[0], &ia), &pick(&pools[1], &iv), cfg.lambda_cyc)?;
        for s in [GEN_AV, GEN_VA, DISC_A, DISC_V] {
            opt[s].step(b.params_mut(s), out.grads.slot(s), slot_lr(s, lr, cfg));
        }
        b.iteration += 1;
    }
    Ok(b)
}
