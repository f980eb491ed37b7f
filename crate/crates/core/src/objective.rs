//! The combined training objective: real-data segmentation terms, adversarial
//! terms, generated-data segmentation terms, and cycle consistency.

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::nn::{Binding, Tape, Var};
use crate::seg::{seg_init, seg_loss_node, volume_tensor, SegArch, SegLossKind, SegModel};
use crate::translate::{
    disc_node, gen_adv_node, AdvTerms, DiscArch, Direction, Discriminator, GenArch, Generator,
};
use crate::types::{LabelMask, PhaseTag, Sample, Volume};

pub const SEG_A: usize = 0;
pub const SEG_V: usize = 1;
pub const GEN_AV: usize = 2;
pub const GEN_VA: usize = 3;
pub const DISC_A: usize = 4;
pub const DISC_V: usize = 5;
pub const NUM_SLOTS: usize = 6;

pub fn seg_slot(p: PhaseTag) -> usize {
    match p {
        PhaseTag::Arterial => SEG_A,
        PhaseTag::Venous => SEG_V,
    }
}

/// Slot of the generator reading phase `source`.
pub fn gen_slot(source: PhaseTag) -> usize {
    match source {
        PhaseTag::Arterial => GEN_AV,
        PhaseTag::Venous => GEN_VA,
    }
}

pub fn disc_slot(p: PhaseTag) -> usize {
    match p {
        PhaseTag::Arterial => DISC_A,
        PhaseTag::Venous => DISC_V,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Init,
    Separate,
    Joint,
    OnePhase,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "INIT",
            Stage::Separate => "SEPARATE",
            Stage::Joint => "JOINT",
            Stage::OnePhase => "ONE_PHASE",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "INIT" => Some(Stage::Init),
            "SEPARATE" => Some(Stage::Separate),
            "JOINT" => Some(Stage::Joint),
            "ONE_PHASE" => Some(Stage::OnePhase),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleArch {
    pub seg: SegArch,
    pub gen: GenArch,
    pub disc: DiscArch,
}

/// Both segmentation models, both generators and both discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub seg_a: SegModel,
    pub seg_v: SegModel,
    pub gen_av: Generator,
    pub gen_va: Generator,
    pub disc_a: Discriminator,
    pub disc_v: Discriminator,
    pub stage: Stage,
    /// Global iteration count across all stages run so far.
    pub iteration: u64,
}

impl ModelBundle {
    pub fn init(arch: BundleArch, grid: (usize, usize), seed: u64) -> Result<Self> {
        Ok(Self {
            seg_a: seg_init(arch.seg, PhaseTag::Arterial, grid, seed)?,
            seg_v: seg_init(arch.seg, PhaseTag::Venous, grid, seed)?,
            gen_av: Generator::init(arch.gen, Direction::from_source(PhaseTag::Arterial), grid, seed)?,
            gen_va: Generator::init(arch.gen, Direction::from_source(PhaseTag::Venous), grid, seed)?,
            disc_a: Discriminator::init(arch.disc, PhaseTag::Arterial, seed)?,
            disc_v: Discriminator::init(arch.disc, PhaseTag::Venous, seed)?,
            stage: Stage::Init,
            iteration: 0,
        })
    }

    pub fn arch(&self) -> BundleArch {
        BundleArch {
            seg: self.seg_a.arch,
            gen: self.gen_av.arch,
            disc: self.disc_a.arch,
        }
    }

    pub fn seg(&self, p: PhaseTag) -> &SegModel {
        match p {
            PhaseTag::Arterial => &self.seg_a,
            PhaseTag::Venous => &self.seg_v,
        }
    }

    pub fn seg_mut(&mut self, p: PhaseTag) -> &mut SegModel {
        match p {
            PhaseTag::Arterial => &mut self.seg_a,
            PhaseTag::Venous => &mut self.seg_v,
        }
    }

    /// Generator reading phase `source`.
    pub fn gen(&self, source: PhaseTag) -> &Generator {
        match source {
            PhaseTag::Arterial => &self.gen_av,
            PhaseTag::Venous => &self.gen_va,
        }
    }

    pub fn gen_mut(&mut self, source: PhaseTag) -> &mut Generator {
        match source {
            PhaseTag::Arterial => &mut self.gen_av,
            PhaseTag::Venous => &mut self.gen_va,
        }
    }

    pub fn disc(&self, p: PhaseTag) -> &Discriminator {
        match p {
            PhaseTag::Arterial => &self.disc_a,
            PhaseTag::Venous => &self.disc_v,
        }
    }

    pub fn params(&self, slot: usize) -> &[f64] {
        match slot {
            SEG_A => &self.seg_a.params,
            SEG_V => &self.seg_v.params,
            GEN_AV => &self.gen_av.params,
            GEN_VA => &self.gen_va.params,
            DISC_A => &self.disc_a.params,
            DISC_V => &self.disc_v.params,
            _ => panic!("no parameter slot {slot}"),
        }
    }

    pub fn params_mut(&mut self, slot: usize) -> &mut Vec<f64> {
        match slot {
            SEG_A => &mut self.seg_a.params,
            SEG_V => &mut self.seg_v.params,
            GEN_AV => &mut self.gen_av.params,
            GEN_VA => &mut self.gen_va.params,
            DISC_A => &mut self.disc_a.params,
            DISC_V => &mut self.disc_v.params,
            _ => panic!("no parameter slot {slot}"),
        }
    }

    /// The same models with the roles of the two phases exchanged.
    pub fn swap_phases(&self) -> Self {
        let mut seg_a = self.seg_v.clone();
        let mut seg_v = self.seg_a.clone();
        seg_a.phase = PhaseTag::Arterial;
        seg_v.phase = PhaseTag::Venous;
        let mut gen_av = self.gen_va.clone();
        let mut gen_va = self.gen_av.clone();
        gen_av.direction = Direction::from_source(PhaseTag::Arterial);
        gen_va.direction = Direction::from_source(PhaseTag::Venous);
        let mut disc_a = self.disc_v.clone();
        let mut disc_v = self.disc_a.clone();
        disc_a.phase = PhaseTag::Arterial;
        disc_v.phase = PhaseTag::Venous;
        Self {
            seg_a,
            seg_v,
            gen_av,
            gen_va,
            disc_a,
            disc_v,
            stage: self.stage,
            iteration: self.iteration,
        }
    }
}

/// Per-batch values of every loss component. Component fields are batch means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "seg_real_A")]
    pub seg_real_a: f64,
    #[serde(rename = "seg_real_V")]
    pub seg_real_v: f64,
    #[serde(rename = "adv_AtoV")]
    pub adv_a_to_v: f64,
    #[serde(rename = "adv_VtoA")]
    pub adv_v_to_a: f64,
    #[serde(rename = "seg_gen_A")]
    pub seg_gen_a: f64,
    #[serde(rename = "seg_gen_V")]
    pub seg_gen_v: f64,
    pub cycle: f64,
    pub lambda: f64,
    pub lambda_cyc: f64,
    pub total: f64,
    /// Discriminator objectives; not part of `total`.
    #[serde(rename = "disc_A")]
    pub disc_a: f64,
    #[serde(rename = "disc_V")]
    pub disc_v: f64,
}

impl LossBreakdown {
    /// All components zero, for steps in which a term is not evaluated.
    pub fn zero(lambda: f64, lambda_cyc: f64) -> Self {
        Self {
            seg_real_a: 0.0,
            seg_real_v: 0.0,
            adv_a_to_v: 0.0,
            adv_v_to_a: 0.0,
            seg_gen_a: 0.0,
            seg_gen_v: 0.0,
            cycle: 0.0,
            lambda,
            lambda_cyc,
            total: 0.0,
            disc_a: 0.0,
            disc_v: 0.0,
        }
    }

    /// Weighted sum of the stored components, arranged so that swapping the
    /// phase roles gives a bitwise identical result.
    pub fn recompose(&self) -> f64 {
        self.lambda * (self.seg_real_a + self.seg_real_v)
            + (1.0 - self.lambda) * (self.seg_gen_a + self.seg_gen_v)
            + (self.adv_a_to_v + self.adv_v_to_a)
            + self.lambda_cyc * self.cycle
    }

    pub fn csv_header() -> &'static str {
        "seg_real_A,seg_real_V,adv_AtoV,adv_VtoA,seg_gen_A,seg_gen_V,cycle,lambda,lambda_cyc,total,disc_A,disc_V"
    }

    pub fn csv_row(&self) -> String {
        [
            self.seg_real_a,
            self.seg_real_v,
            self.adv_a_to_v,
            self.adv_v_to_a,
            self.seg_gen_a,
            self.seg_gen_v,
            self.cycle,
            self.lambda,
            self.lambda_cyc,
            self.total,
            self.disc_a,
            self.disc_v,
        ]
        .iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcnOptions {
    pub lambda: f64,
    pub lambda_cyc: f64,
    pub loss: SegLossKind,
    /// Feed the arterial-styled output of the venous-to-arterial generator to
    /// the venous model, as the objective is literally written.
    pub literal_cross_term: bool,
    /// Block segmentation gradients from reaching the generators.
    pub detach_translator: bool,
}

impl Default for PcnOptions {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda_cyc: 10.0,
            loss: SegLossKind::L1,
            literal_cross_term: false,
            detach_translator: false,
        }
    }
}

/// Gradients for the six parameter sets, indexed by slot.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleGrads(pub [Vec<f64>; NUM_SLOTS]);

impl BundleGrads {
    pub fn zeros(b: &ModelBundle) -> Self {
        Self(std::array::from_fn(|s| vec![0.0; b.params(s).len()]))
    }

    pub fn slot(&self, s: usize) -> &[f64] {
        &self.0[s]
    }
}

/// Sums per-sample gradients in order, then divides by the count.
#[derive(Clone, Debug)]
pub(crate) struct MeanGrad {
    sum: Vec<f64>,
    n: usize,
}

impl MeanGrad {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            n: 0,
        }
    }

    pub(crate) fn add(&mut self, g: &[f64]) {
        for (s, v) in self.sum.iter_mut().zip(g) {
            *s += v;
        }
        self.n += 1;
    }

    pub(crate) fn finish(mut self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.sum.iter_mut().for_each(|v| *v /= n);
        self.sum
    }
}

fn check_sample(s: &Sample, phase: PhaseTag, what: &str) -> Result<()> {
    if s.volume.phase != phase {
        return Err(PcnError::PhaseMismatch {
            expected: phase,
            got: s.volume.phase,
        });
    }
    if s.volume.shape() != s.label.shape() {
        return Err(PcnError::ShapeMismatch(format!("{what}: volume and label grids differ")));
    }
    Ok(())
}

fn check_bundle(b: &ModelBundle) -> Result<()> {
    for p in PhaseTag::BOTH {
        let want = [b.seg(p).phase, b.disc(p).phase, b.gen(p).direction.source];
        if want.iter().any(|&t| t != p) || b.gen(p).direction.target != p.other() {
            return Err(PcnError::PhaseMismatch {
                expected: p,
                got: p.other(),
            });
        }
    }
    Ok(())
}

/// Result of the per-direction generated-data objective.
#[derive(Clone, Debug, PartialEq)]
pub struct P2pResult {
    pub adv: AdvTerms,
    pub seg_gen: f64,
    /// Gradient of `seg_gen` with respect to the target-phase segmentation model.
    pub grad_seg: Vec<f64>,
    /// Gradient of `seg_gen` with respect to the generator.
    pub grad_gen_seg: Vec<f64>,
    /// Gradient of `adv.gen_term` with respect to the generator.
    pub grad_gen_adv: Vec<f64>,
    /// Gradient of `adv.disc_term` with respect to the discriminator.
    pub grad_disc: Vec<f64>,
}

/// Translates `x_src`, scores it against `reals`, and segments it with the
/// target-phase model against the source label.
pub fn p2p_loss(
    g: &Generator,
    f_target: &SegModel,
    d: &Discriminator,
    x_src: &Volume,
    y_src: &LabelMask,
    reals: &[&Volume],
    kind: SegLossKind,
) -> Result<P2pResult> {
    let tgt = g.direction.target;
    if x_src.phase != g.direction.source {
        return Err(PcnError::PhaseMismatch {
            expected: g.direction.source,
            got: x_src.phase,
        });
    }
    for got in [f_target.phase, d.phase] {
        if got != tgt {
            return Err(PcnError::PhaseMismatch { expected: tgt, got });
        }
    }
    if reals.is_empty() {
        return Err(PcnError::InsufficientData("empty real batch".into()));
    }
    if let Some(r) = reals.iter().find(|r| r.phase != tgt) {
        return Err(PcnError::PhaseMismatch {
            expected: tgt,
            got: r.phase,
        });
    }
    if x_src.shape() != y_src.shape() {
        return Err(PcnError::ShapeMismatch("source volume and label grids differ".into()));
    }
    g.arch.validate(x_src.shape())?;
    f_target.arch.validate(x_src.shape())?;

    let mut tape = Tape::new();
    let x = tape.constant(volume_tensor(x_src));
    let fake = g.graph(&mut tape, Binding::trainable(0, &g.params), x);
    let probs = f_target.graph(&mut tape, Binding::trainable(1, &f_target.params), fake);
    let seg = seg_loss_node(&mut tape, probs, y_src, kind);
    let adv = gen_adv_node(&mut tape, d, fake);
    let mut gs = tape.backward(seg);
    let mut ga = tape.backward(adv);
    let seg_gen = tape.value(seg).item();
    let gen_term = tape.value(adv).item();

    let fake_t = tape.value(fake).clone();
    let mut dt = Tape::new();
    let bind = Binding::trainable(0, &d.params);
    let fv = dt.constant(fake_t);
    let sf = d.graph(&mut dt, bind, fv);
    let lf = dt.squared_to_const(sf, 0.0);
    let wr = 1.0 / reals.len() as f64;
    let mut terms = Vec::with_capacity(reals.len() + 1);
    for r in reals {
        let rv = dt.constant(volume_tensor(r));
        let s = d.graph(&mut dt, bind, rv);
        terms.push((dt.squared_to_const(s, 1.0), wr));
    }
    terms.push((lf, 1.0));
    let dl = dt.weighted_sum(&terms);
    let mut gd = dt.backward(dl);

    Ok(P2pResult {
        adv: AdvTerms {
            gen_term,
            disc_term: dt.value(dl).item(),
        },
        seg_gen,
        grad_seg: gs.take_slot(1).expect("seg bound"),
        grad_gen_seg: gs.take_slot(0).expect("gen bound"),
        grad_gen_adv: ga.take_slot(0).expect("gen bound"),
        grad_disc: gd.take_slot(0).expect("disc bound"),
    })
}

/// Loss components and gradients for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PcnOutput {
    pub breakdown: LossBreakdown,
    /// Gradients of `total` for the segmentation models and generators, and of
    /// the discriminator objectives for the discriminators.
    pub grads: BundleGrads,
}

struct SegTerms {
    sra: Var,
    srv: Var,
    sga: Var,
    sgv: Var,
}

struct PairTerms {
    seg: Option<SegTerms>,
    adv_av: Var,
    adv_va: Var,
    cyc_a: Var,
    cyc_v: Var,
    fake_a: Var,
    fake_v: Var,
}

fn build_pair(tape: &mut Tape, b: &ModelBundle, a: &Sample, v: &Sample, o: Option<&PcnOptions>) -> PairTerms {
    let xa = tape.constant(volume_tensor(&a.volume));
    let xv = tape.constant(volume_tensor(&v.volume));
    let bav = Binding::trainable(GEN_AV, &b.gen_av.params);
    let bva = Binding::trainable(GEN_VA, &b.gen_va.params);

    let fake_v = b.gen_av.graph(tape, bav, xa);
    let fake_a = b.gen_va.graph(tape, bva, xv);
    let adv_av = gen_adv_node(tape, &b.disc_v, fake_v);
    let adv_va = gen_adv_node(tape, &b.disc_a, fake_a);

    let seg = o.map(|o| {
        let bsa = Binding::trainable(SEG_A, &b.seg_a.params);
        let bsv = Binding::trainable(SEG_V, &b.seg_v.params);
        let pa = b.seg_a.graph(tape, bsa, xa);
        let sra = seg_loss_node(tape, pa, &a.label, o.loss);
        let pv = b.seg_v.graph(tape, bsv, xv);
        let srv = seg_loss_node(tape, pv, &v.label, o.loss);
        let (in_v, in_a) = if o.detach_translator {
            (tape.detach(fake_v), tape.detach(fake_a))
        } else {
            (fake_v, fake_a)
        };
        let pgv = b.seg_v.graph(tape, bsv, in_v);
        let sgv = seg_loss_node(tape, pgv, &a.label, o.loss);
        let pga = if o.literal_cross_term {
            b.seg_v.graph(tape, bsv, in_a)
        } else {
            b.seg_a.graph(tape, bsa, in_a)
        };
        let sga = seg_loss_node(tape, pga, &v.label, o.loss);
        SegTerms { sra, srv, sga, sgv }
    });

    let back_a = b.gen_va.graph(tape, bva, fake_v);
    let cyc_a = tape.l1_pair(back_a, xa);
    let back_v = b.gen_av.graph(tape, bav, fake_a);
    let cyc_v = tape.l1_pair(back_v, xv);

    PairTerms {
        seg,
        adv_av,
        adv_va,
        cyc_a,
        cyc_v,
        fake_a,
        fake_v,
    }
}

fn check_batch(b: &ModelBundle, arterial: &[&Sample], venous: &[&Sample], lambda_cyc: f64) -> Result<()> {
    if !(lambda_cyc >= 0.0) {
        return Err(PcnError::Config(format!("lambda_cyc must be >= 0, got {lambda_cyc}")));
    }
    if arterial.is_empty() || arterial.len() != venous.len() {
        return Err(PcnError::InsufficientData(format!(
            "need equally sized nonempty phase batches, got {} and {}",
            arterial.len(),
            venous.len()
        )));
    }
    check_bundle(b)?;
    for (a, v) in arterial.iter().zip(venous) {
        check_sample(a, PhaseTag::Arterial, "arterial sample")?;
        check_sample(v, PhaseTag::Venous, "venous sample")?;
        b.seg_a.arch.validate(a.volume.shape())?;
        b.gen_av.arch.validate(a.volume.shape())?;
        if a.volume.shape() != v.volume.shape() {
            return Err(PcnError::ShapeMismatch("phase grids differ".into()));
        }
    }
    Ok(())
}

fn run_batch(b: &ModelBundle, arterial: &[&Sample], venous: &[&Sample], lambda_cyc: f64, o: Option<&PcnOptions>) -> PcnOutput {
    let lambda = o.map_or(1.0, |o| o.lambda);
    let w_real = lambda;
    let w_gen = 1.0 - lambda;
    let mut means = [0.0f64; 10];
    let mut acc: Vec<MeanGrad> = (0..NUM_SLOTS).map(|s| MeanGrad::new(b.params(s).len())).collect();
    let active: &[usize] = if o.is_some() {
        &[SEG_A, SEG_V, GEN_AV, GEN_VA]
    } else {
        &[GEN_AV, GEN_VA]
    };

    for (a, v) in arterial.iter().zip(venous) {
        let mut tape = Tape::new();
        let t = build_pair(&mut tape, b, a, v, o);
        let mut terms = Vec::with_capacity(8);
        if let Some(s) = &t.seg {
            terms.extend([(s.sra, w_real), (s.srv, w_real), (s.sga, w_gen), (s.sgv, w_gen)]);
        }
        terms.extend([(t.adv_av, 1.0), (t.adv_va, 1.0), (t.cyc_a, lambda_cyc), (t.cyc_v, lambda_cyc)]);
        let total = tape.weighted_sum(&terms);
        let mut gr = tape.backward(total);
        for &s in active {
            let g = gr.take_slot(s).expect("slot bound");
            acc[s].add(&g);
        }
        if let Some(s) = &t.seg {
            for (m, var) in [(0, s.sra), (1, s.srv), (4, s.sga), (5, s.sgv)] {
                means[m] += tape.value(var).item();
            }
        }
        for (m, var) in [(2, t.adv_av), (3, t.adv_va), (6, t.cyc_a), (7, t.cyc_v)] {
            means[m] += tape.value(var).item();
        }

        let mut dt = Tape::new();
        let ra = dt.constant(volume_tensor(&a.volume));
        let rv = dt.constant(volume_tensor(&v.volume));
        let fa = dt.constant(tape.value(t.fake_a).clone());
        let fv = dt.constant(tape.value(t.fake_v).clone());
        let da = disc_node(&mut dt, &b.disc_a, Binding::trainable(DISC_A, &b.disc_a.params), ra, fa);
        let dv = disc_node(&mut dt, &b.disc_v, Binding::trainable(DISC_V, &b.disc_v.params), rv, fv);
        let dsum = dt.weighted_sum(&[(da, 1.0), (dv, 1.0)]);
        let mut dg = dt.backward(dsum);
        for s in [DISC_A, DISC_V] {
            let g = dg.take_slot(s).expect("slot bound");
            acc[s].add(&g);
        }
        means[8] += dt.value(da).item();
        means[9] += dt.value(dv).item();
    }

    let n = arterial.len() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    let mut out = LossBreakdown {
        seg_real_a: means[0],
        seg_real_v: means[1],
        adv_a_to_v: means[2],
        adv_v_to_a: means[3],
        seg_gen_a: means[4],
        seg_gen_v: means[5],
        cycle: means[6] + means[7],
        lambda,
        lambda_cyc,
        total: 0.0,
        disc_a: means[8],
        disc_v: means[9],
    };
    out.total = out.recompose();
    let mut it = acc.into_iter().map(MeanGrad::finish);
    let grads = BundleGrads(std::array::from_fn(|_| it.next().expect("six slots")));
    PcnOutput { breakdown: out, grads }
}

/// Evaluates the full objective on `arterial[i]`, `venous[i]` pairs.
///
/// The two lists are drawn independently; pairing by index carries no
/// anatomical correspondence.
pub fn pcn_loss(b: &ModelBundle, arterial: &[&Sample], venous: &[&Sample], o: &PcnOptions) -> Result<PcnOutput> {
    if !(0.0..=1.0).contains(&o.lambda) {
        return Err(PcnError::OutOfBounds {
            name: "lambda".into(),
            value: o.lambda,
            lo: 0.0,
            hi: 1.0,
        });
    }
    check_batch(b, arterial, venous, o.lambda_cyc)?;
    Ok(run_batch(b, arterial, venous, o.lambda_cyc, Some(o)))
}

/// Translator-only objective (adversarial and cycle terms) used while the
/// segmentation models train on real data alone. Segmentation components of
/// the breakdown are reported as zero and their gradients are zero.
pub fn translator_loss(b: &ModelBundle, arterial: &[&Sample], venous: &[&Sample], lambda_cyc: f64) -> Result<PcnOutput> {
    check_batch(b, arterial, venous, lambda_cyc)?;
    Ok(run_batch(b, arterial, venous, lambda_cyc, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomConfig};

    fn micro_arch() -> BundleArch {
        BundleArch {
            seg: SegArch {
                depth: 2,
                base_width: 4,
                num_classes: 4,
                input_channels: 1,
            },
            gen: GenArch {
                num_res_blocks: 1,
                base_width: 2,
            },
            disc: DiscArch { base_width: 2, num_downsample: 2 },
        }
    }

    fn data() -> crate::types::Dataset {
        let cfg = PhantomConfig::default().with_grid(16);
        generate_dataset(&cfg, 2, 5).unwrap()
    }

    #[test]
    fn total_recomposes_and_components_are_nonnegative() {
        let d = data();
        let b = ModelBundle::init(micro_arch(), (16, 16), 1).unwrap();
        let a = d.samples(PhaseTag::Arterial);
        let v = d.samples(PhaseTag::Venous);
        let out = pcn_loss(&b, &a, &v, &PcnOptions::default()).unwrap();
        let l = out.breakdown;
        for c in [l.seg_real_a, l.seg_real_v, l.adv_a_to_v, l.adv_v_to_a, l.seg_gen_a, l.seg_gen_v, l.cycle] {
            assert!(c >= 0.0);
        }
        assert_eq!(l.total, l.recompose());
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        let d = data();
        let b = ModelBundle::init(micro_arch(), (16, 16), 1).unwrap();
        let a = d.samples(PhaseTag::Arterial);
        let v = d.samples(PhaseTag::Venous);
        for lambda in [-0.1, 1.5, f64::NAN] {
            let o = PcnOptions { lambda, ..Default::default() };
            assert!(matches!(pcn_loss(&b, &a, &v, &o), Err(PcnError::OutOfBounds { .. })));
        }
        assert!(pcn_loss(&b, &a, &v[..1], &PcnOptions::default()).is_err());
        assert!(pcn_loss(&b, &v, &a, &PcnOptions::default()).is_err());
    }

    #[test]
    fn swap_twice_is_identity() {
        let b = ModelBundle::init(micro_arch(), (16, 16), 3).unwrap();
        assert_eq!(b.swap_phases().swap_phases(), b);
    }

    #[test]
    fn mean_grad_divides_after_summing() {
        let mut m = MeanGrad::new(2);
        m.add(&[1.0, 2.0]);
        m.add(&[3.0, 5.0]);
        assert_eq!(m.finish(), vec![2.0, 3.5]);
    }
}
