//! Per-phase segmentation networks: a small U-shaped encoder-decoder with skip
//! connections and a per-pixel softmax head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::nn::{Binding, ConvParams, ParamLayout, Tape, Tensor, Var};
use crate::seed;
use crate::types::{LabelMask, LabelPhase, PhaseTag, Volume};

/// Centre of the HU window; inputs are mapped to `[-1, 1]` as `(hu - 75) / 200`.
pub const HU_CENTER: f64 = 75.0;
pub const HU_HALF_WIDTH: f64 = 200.0;

pub fn normalize_hu(v: f64) -> f64 {
    (v - HU_CENTER) / HU_HALF_WIDTH
}

pub fn denormalize_hu(v: f64) -> f64 {
    v * HU_HALF_WIDTH + HU_CENTER
}

/// Volume as a normalized single-channel tensor.
pub fn volume_tensor(v: &Volume) -> Tensor {
    Tensor::from_vec(1, v.height, v.width, v.data.iter().map(|&x| normalize_hu(x)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArch {
    /// Number of resolution levels; the last one is the bottleneck.
    pub depth: usize,
    pub base_width: usize,
    pub num_classes: u8,
    pub input_channels: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 16,
            num_classes: 4,
            input_channels: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    /// Mean absolute difference between probabilities and the one-hot labels.
    #[default]
    L1,
    SoftDice,
}

#[derive(Clone, Debug)]
struct SegNet {
    enc: Vec<(ConvParams, ConvParams)>,
    dec: Vec<(ConvParams, ConvParams)>,
    head: ConvParams,
    len: usize,
    layout: ParamLayout,
}

impl SegNet {
    fn new(arch: &SegArch) -> Self {
        let mut l = ParamLayout::new();
        let width = |lvl: usize| arch.base_width << lvl;
        let mut enc = Vec::new();
        for lvl in 0..arch.depth {
            let cin = if lvl == 0 { arch.input_channels } else { width(lvl - 1) };
            let a = l.conv(cin, width(lvl), 3);
            let b = l.conv(width(lvl), width(lvl), 3);
            enc.push((a, b));
        }
        let mut dec = Vec::new();
        for lvl in (0..arch.depth.saturating_sub(1)).rev() {
            let a = l.conv(width(lvl + 1) + width(lvl), width(lvl), 3);
            let b = l.conv(width(lvl), width(lvl), 3);
            dec.push((a, b));
        }
        let head = l.conv(width(0), arch.num_classes as usize, 1);
        Self {
            enc,
            dec,
            head,
            len: l.len(),
            layout: l,
        }
    }
}

impl SegArch {
    pub fn param_count(&self) -> usize {
        SegNet::new(self).len
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.depth < 1 || self.base_width < 4 {
            return Err(PcnError::Config(format!(
                "segmentation arch needs depth >= 1 and base_width >= 4, got depth {} width {}",
                self.depth, self.base_width
            )));
        }
        if self.num_classes < 2 || self.input_channels != 1 {
            return Err(PcnError::Config("segmentation arch needs >= 2 classes and one input channel".into()));
        }
        let f = 1usize << (self.depth - 1);
        if grid.0 % f != 0 || grid.1 % f != 0 || grid.0 / f < 2 || grid.1 / f < 2 {
            return Err(PcnError::Config(format!(
                "depth {} is too deep for a {}x{} grid (needs multiples of {f} with a bottleneck of at least 2x2)",
                self.depth, grid.0, grid.1
            )));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities, channel-major `classes × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            height: t.h,
            width: t.w,
            classes: t.c,
            data: t.data.clone(),
        }
    }

    #[inline]
    pub fn prob(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Hard labels; ties go to the lowest class index.
    pub fn argmax(&self, phase: LabelPhase) -> LabelMask {
        let plane = self.height * self.width;
        let mut out = vec![0u8; plane];
        for (p, o) in out.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..self.classes {
                if self.data[c * plane + p] > self.data[best * plane + p] {
                    best = c;
                }
            }
            *o = best as u8;
        }
        LabelMask::new(self.height, self.width, out, self.classes as u8, phase).expect("argmax within class range")
    }

    /// Largest deviation of a cell's probability sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| ((0..self.classes).map(|c| self.data[c * plane + p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub arch: SegArch,
    pub phase: PhaseTag,
    pub params: Vec<f64>,
}

/// Deterministic initialization; fails if the architecture cannot run on `grid`.
pub fn seg_init(arch: SegArch, phase: PhaseTag, grid: (usize, usize), seed: u64) -> Result<SegModel> {
    arch.validate(grid)?;
    let net = SegNet::new(&arch);
    let mut rng = seed::stream(seed, "seg-init", phase as u64);
    let params = net.layout.init(&mut rng, 1.0, &[]);
    let m = SegModel { arch, phase, params };
    let dummy = Tensor::zeros(1, grid.0, grid.1);
    let mut tape = Tape::new();
    let x = tape.constant(dummy);
    m.graph(&mut tape, Binding::frozen(&m.params), x);
    Ok(m)
}

impl SegModel {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Appends the forward pass for a normalized input to `tape`; returns the probability node.
    pub fn graph(&self, tape: &mut Tape, bind: Binding<'_>, x: Var) -> Var {
        let net = SegNet::new(&self.arch);
        let mut skips = Vec::with_capacity(net.enc.len());
        let mut h = x;
        for (lvl, (a, b)) in net.enc.iter().enumerate() {
            if lvl > 0 {
                h = tape.avg_pool2(h);
            }
            h = tape.conv(h, bind, a, 1, 1);
            h = tape.silu(h);
            h = tape.conv(h, bind, b, 1, 1);
            h = tape.silu(h);
            skips.push(h);
        }
        for (i, (a, b)) in net.dec.iter().enumerate() {
            let skip = skips[net.enc.len() - 2 - i];
            let up = tape.upsample2(h);
            h = tape.concat(up, skip);
            h = tape.conv(h, bind, a, 1, 1);
            h = tape.silu(h);
            h = tape.conv(h, bind, b, 1, 1);
            h = tape.silu(h);
        }
        let logits = tape.conv(h, bind, &net.head, 1, 0);
        tape.softmax_channels(logits)
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        self.arch.validate(x.shape())
    }
}

pub fn seg_forward(m: &SegModel, x: &Volume) -> Result<ProbMap> {
    m.check_input(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let p = m.graph(&mut tape, Binding::frozen(&m.params), xv);
    Ok(ProbMap::from_tensor(tape.value(p)))
}

/// Loss node between a probability node and hard labels.
pub fn seg_loss_node(tape: &mut Tape, probs: Var, y: &LabelMask, kind: SegLossKind) -> Var {
    let target = Rc::new(y.one_hot());
    match kind {
        SegLossKind::L1 => tape.l1_target(probs, target),
        SegLossKind::SoftDice => tape.soft_dice(probs, target),
    }
}

fn check_pair(m: &SegModel, x: &Volume, y: &LabelMask) -> Result<()> {
    m.check_input(x)?;
    if x.shape() != y.shape() {
        return Err(PcnError::ShapeMismatch("volume and label grids differ".into()));
    }
    if y.num_classes != m.arch.num_classes {
        return Err(PcnError::ShapeMismatch(format!(
            "label has {} classes, model predicts {}",
            y.num_classes, m.arch.num_classes
        )));
    }
    Ok(())
}

/// Loss value and gradient with respect to the model parameters.
pub fn seg_loss(m: &SegModel, x: &Volume, y: &LabelMask, kind: SegLossKind) -> Result<(f64, Vec<f64>)> {
    check_pair(m, x, y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let p = m.graph(&mut tape, Binding::trainable(0, &m.params), xv);
    let l = seg_loss_node(&mut tape, p, y, kind);
    let mut g = tape.backward(l);
    Ok((tape.value(l).item(), g.take_slot(0).expect("seg params bound")))
}

/// Loss value only.
pub fn seg_loss_value(m: &SegModel, x: &Volume, y: &LabelMask, kind: SegLossKind) -> Result<f64> {
    check_pair(m, x, y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let p = m.graph(&mut tape, Binding::frozen(&m.params), xv);
    let l = seg_loss_node(&mut tape, p, y, kind);
    Ok(tape.value(l).item())
}
