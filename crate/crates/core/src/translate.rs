//! Phase-to-phase generators, patch discriminators, and the adversarial and
//! cycle distances between translated and real images.
//!
//! Generators work in normalized intensity units and predict a residual on
//! top of their input; translated volumes are clamped back into the HU window. The residual head is
//! zero-initialized, so a fresh generator is the identity map.

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};
use crate::nn::{Binding, ConvParams, ParamLayout, Tape, Tensor, Var};
use crate::seed;
use crate::seg::{denormalize_hu, volume_tensor};
use crate::types::{PhaseTag, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenArch {
    pub num_res_blocks: usize,
    pub base_width: usize,
}

impl Default for GenArch {
    fn default() -> Self {
        Self {
            num_res_blocks: 3,
            base_width: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscArch {
    pub base_width: usize,
    /// Number of stride-2 layers; 1, 2 and 3 give receptive fields of 16, 34
    /// and 70 cells.
    pub num_downsample: usize,
}

impl Default for DiscArch {
    fn default() -> Self {
        Self {
            base_width: 8,
            num_downsample: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Direction {
    pub source: PhaseTag,
    pub target: PhaseTag,
}

impl Direction {
    pub fn from_source(source: PhaseTag) -> Self {
        Self {
            source,
            target: source.other(),
        }
    }
}

struct GenNet {
    stem: ConvParams,
    down: [ConvParams; 2],
    res: Vec<(ConvParams, ConvParams)>,
    up: [ConvParams; 2],
    head: ConvParams,
    layout: ParamLayout,
}

impl GenNet {
    fn new(a: &GenArch) -> Self {
        let w = a.base_width;
        let mut l = ParamLayout::new();
        let stem = l.conv(1, w, 3);
        let down = [l.conv(w, 2 * w, 3), l.conv(2 * w, 4 * w, 3)];
        let res = (0..a.num_res_blocks)
            .map(|_| (l.conv(4 * w, 4 * w, 3), l.conv(4 * w, 4 * w, 3)))
            .collect();
        // Up convs and the head read their input concatenated with the
        // encoder features at the same resolution.
        let up = [l.conv(4 * w, 2 * w, 3), l.conv(4 * w, w, 3)];
        let head = l.conv(2 * w, 1, 3);
        Self {
            stem,
            down,
            res,
            up,
            head,
            layout: l,
        }
    }

    fn head_index(&self) -> usize {
        self.layout.convs.len() - 1
    }
}

const LEAKY_SLOPE: f64 = 0.2;

const MAX_DISC_MULT: usize = 8;

struct DiscNet {
    /// (params, stride) per layer.
    convs: Vec<(ConvParams, usize)>,
    layout: ParamLayout,
}

impl DiscNet {
    fn new(a: &DiscArch) -> Self {
        let w = a.base_width;
        let mut l = ParamLayout::new();
        let mut convs = vec![(l.conv(1, w, 4), 2)];
        let mut cin = w;
        for i in 1..=a.num_downsample {
            let cout = w * (1 << i).min(MAX_DISC_MULT);
            let stride = if i < a.num_downsample { 2 } else { 1 };
            convs.push((l.conv(cin, cout, 4), stride));
            cin = cout;
        }
        convs.push((l.conv(cin, 1, 4), 1));
        Self { convs, layout: l }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub arch: GenArch,
    pub direction: Direction,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub arch: DiscArch,
    pub phase: PhaseTag,
    pub params: Vec<f64>,
}

impl GenArch {
    pub fn param_count(&self) -> usize {
        GenNet::new(self).layout.len()
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if self.base_width < 1 {
            return Err(PcnError::Config("generator base_width must be >= 1".into()));
        }
        if grid.0 % 4 != 0 || grid.1 % 4 != 0 {
            return Err(PcnError::Config(format!(
                "generator needs grid sides divisible by 4, got {}x{}",
                grid.0, grid.1
            )));
        }
        Ok(())
    }
}

impl DiscArch {
    pub fn param_count(&self) -> usize {
        DiscNet::new(self).layout.len()
    }

    /// Side lengths of the patch score grid for an input grid.
    pub fn patch_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        let strides: Vec<usize> = DiscNet::new(self).convs.iter().map(|c| c.1).collect();
        let f = |mut s: usize| {
            for &st in &strides {
                s = (s + 2 - 4) / st + 1;
            }
            s
        };
        (f(grid.0), f(grid.1))
    }
}

impl Generator {
    pub fn init(arch: GenArch, direction: Direction, grid: (usize, usize), seed: u64) -> Result<Self> {
        arch.validate(grid)?;
        if direction.source == direction.target {
            return Err(PcnError::Config("generator direction must change phase".into()));
        }
        let net = GenNet::new(&arch);
        let mut rng = seed::stream(seed, "gen-init", direction.source as u64);
        let params = net.layout.init(&mut rng, 1.0, &[net.head_index()]);
        Ok(Self {
            arch,
            direction,
            params,
        })
    }

    /// Translation of a normalized input node, in normalized units. The graph
    /// output is not clamped, so out-of-window values keep a gradient during
    /// training; `translate` clamps when producing a volume.
    pub fn graph(&self, tape: &mut Tape, bind: Binding<'_>, x: Var) -> Var {
        let net = GenNet::new(&self.arch);
        let mut h = tape.conv(x, bind, &net.stem, 1, 1);
        h = tape.silu(h);
        let mut skips = Vec::with_capacity(2);
        for d in &net.down {
            skips.push(h);
            h = tape.conv(h, bind, d, 2, 1);
            h = tape.silu(h);
        }
        for (a, b) in &net.res {
            let r = tape.conv(h, bind, a, 1, 1);
            let r = tape.silu(r);
            let r = tape.conv(r, bind, b, 1, 1);
            h = tape.add(h, r);
        }
        for u in &net.up {
            h = tape.upsample2(h);
            h = tape.conv(h, bind, u, 1, 1);
            h = tape.silu(h);
            let s = skips.pop().expect("one skip per up level");
            h = tape.concat(h, s);
        }
        let r = tape.conv(h, bind, &net.head, 1, 1);
        tape.add(x, r)
    }
}

impl Discriminator {
    pub fn init(arch: DiscArch, phase: PhaseTag, seed: u64) -> Result<Self> {
        if arch.base_width < 1 || arch.num_downsample < 1 {
            return Err(PcnError::Config("discriminator needs base_width >= 1 and num_downsample >= 1".into()));
        }
        let net = DiscNet::new(&arch);
        let mut rng = seed::stream(seed, "disc-init", phase as u64);
        let params = net.layout.init(&mut rng, 1.0, &[]);
        Ok(Self { arch, phase, params })
    }

    /// Patch realness scores for a normalized input node.
    pub fn graph(&self, tape: &mut Tape, bind: Binding<'_>, x: Var) -> Var {
        let net = DiscNet::new(&self.arch);
        let mut h = x;
        for (i, (c, s)) in net.convs.iter().enumerate() {
            h = tape.conv(h, bind, c, *s, 1);
            if i + 1 < net.convs.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    pub fn scores(&self, x: &Volume) -> Result<Tensor> {
        if x.phase != self.phase {
            return Err(PcnError::PhaseMismatch {
                expected: self.phase,
                got: x.phase,
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(volume_tensor(x));
        let s = self.graph(&mut tape, Binding::frozen(&self.params), xv);
        Ok(tape.value(s).clone())
    }
}

fn tensor_to_volume(t: &Tensor, phase: PhaseTag, case_id: &str) -> Result<Volume> {
    let data = t.data.iter().map(|&v| denormalize_hu(v).clamp(crate::HU_MIN, crate::HU_MAX)).collect();
    Volume::new(t.h, t.w, data, phase, case_id)
}

/// Applies a generator to a volume of its source phase.
pub fn translate(g: &Generator, x: &Volume) -> Result<Volume> {
    if x.phase != g.direction.source {
        return Err(PcnError::PhaseMismatch {
            expected: g.direction.source,
            got: x.phase,
        });
    }
    g.arch.validate(x.shape())?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let out = g.graph(&mut tape, Binding::frozen(&g.params), xv);
    let mut v = tensor_to_volume(tape.value(out), g.direction.target, &x.case_id)?;
    v.spacing = x.spacing;
    Ok(v)
}

/// Least-squares adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTerms {
    /// `mean (D(fake) - 1)^2`, minimized by the generator.
    pub gen_term: f64,
    /// `mean (D(real) - 1)^2 + mean D(fake)^2`, minimized by the discriminator.
    pub disc_term: f64,
}

fn mean_sq(scores: &[Tensor], target: f64) -> f64 {
    let per: Vec<f64> = scores
        .iter()
        .map(|s| s.data.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / s.len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

/// Least-squares GAN terms from precomputed patch scores.
pub fn lsgan_terms(real_scores: &[Tensor], fake_scores: &[Tensor]) -> Result<AdvTerms> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(PcnError::InsufficientData("adversarial distance needs real and fake scores".into()));
    }
    Ok(AdvTerms {
        gen_term: mean_sq(fake_scores, 1.0),
        disc_term: mean_sq(real_scores, 1.0) + mean_sq(fake_scores, 0.0),
    })
}

/// Adversarial distance between one generated volume and a batch of reals of the same phase.
pub fn adversarial_distance(d: &Discriminator, fake: &Volume, reals: &[&Volume]) -> Result<AdvTerms> {
    if reals.is_empty() {
        return Err(PcnError::InsufficientData("empty real batch".into()));
    }
    let fake_s = d.scores(fake)?;
    let real_s = reals.iter().map(|r| d.scores(r)).collect::<Result<Vec<_>>>()?;
    lsgan_terms(&real_s, &[fake_s])
}

/// Generator-side adversarial node: `mean (D(fake) - 1)^2` with `D` frozen.
pub fn gen_adv_node(tape: &mut Tape, d: &Discriminator, fake: Var) -> Var {
    let s = d.graph(tape, Binding::frozen(&d.params), fake);
    tape.squared_to_const(s, 1.0)
}

/// Discriminator-side node for one real and one (already detached) fake.
pub fn disc_node(tape: &mut Tape, d: &Discriminator, bind: Binding<'_>, real: Var, fake: Var) -> Var {
    let sr = d.graph(tape, bind, real);
    let lr = tape.squared_to_const(sr, 1.0);
    let sf = d.graph(tape, bind, fake);
    let lf = tape.squared_to_const(sf, 0.0);
    tape.weighted_sum(&[(lr, 1.0), (lf, 1.0)])
}

/// `gen_term` of translating `x_src` and its gradient with respect to the generator.
pub fn adversarial_gen_grad(g: &Generator, d: &Discriminator, x_src: &Volume) -> Result<(f64, Vec<f64>)> {
    check_src(g, x_src)?;
    if d.phase != g.direction.target {
        return Err(PcnError::PhaseMismatch {
            expected: g.direction.target,
            got: d.phase,
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(volume_tensor(x_src));
    let fake = g.graph(&mut tape, Binding::trainable(0, &g.params), x);
    let l = gen_adv_node(&mut tape, d, fake);
    let mut gr = tape.backward(l);
    Ok((tape.value(l).item(), gr.take_slot(0).expect("generator bound")))
}

/// `disc_term` for one fake and a batch of reals, with its gradient for the discriminator.
pub fn adversarial_disc_grad(d: &Discriminator, fake: &Volume, reals: &[&Volume]) -> Result<(f64, Vec<f64>)> {
    if reals.is_empty() {
        return Err(PcnError::InsufficientData("empty real batch".into()));
    }
    for v in reals.iter().copied().chain(std::iter::once(fake)) {
        if v.phase != d.phase {
            return Err(PcnError::PhaseMismatch {
                expected: d.phase,
                got: v.phase,
            });
        }
    }
    let mut tape = Tape::new();
    let bind = Binding::trainable(0, &d.params);
    let mut terms = Vec::new();
    let wr = 1.0 / reals.len() as f64;
    for r in reals {
        let rv = tape.constant(volume_tensor(r));
        let s = d.graph(&mut tape, bind, rv);
        terms.push((tape.squared_to_const(s, 1.0), wr));
    }
    let fv = tape.constant(volume_tensor(fake));
    let s = d.graph(&mut tape, bind, fv);
    terms.push((tape.squared_to_const(s, 0.0), 1.0));
    let l = tape.weighted_sum(&terms);
    let mut gr = tape.backward(l);
    Ok((tape.value(l).item(), gr.take_slot(0).expect("discriminator bound")))
}

fn check_src(g: &Generator, x: &Volume) -> Result<()> {
    if x.phase != g.direction.source {
        return Err(PcnError::PhaseMismatch {
            expected: g.direction.source,
            got: x.phase,
        });
    }
    g.arch.validate(x.shape())
}

fn check_cycle(g_ab: &Generator, g_ba: &Generator, x: &Volume) -> Result<()> {
    check_src(g_ab, x)?;
    if g_ba.direction.source != g_ab.direction.target || g_ba.direction.target != g_ab.direction.source {
        return Err(PcnError::PhaseMismatch {
            expected: g_ab.direction.target,
            got: g_ba.direction.source,
        });
    }
    Ok(())
}

/// Cycle node: mean L1 between a normalized input and its round trip.
pub fn cycle_node(tape: &mut Tape, g_ab: &Generator, b_ab: Binding<'_>, g_ba: &Generator, b_ba: Binding<'_>, x: Var) -> Var {
    let f = g_ab.graph(tape, b_ab, x);
    let back = g_ba.graph(tape, b_ba, f);
    tape.l1_pair(back, x)
}

/// Mean L1 between `x` and `g_ba(g_ab(x))`, measured in normalized intensity units (HU / 200).
pub fn cycle_loss(g_ab: &Generator, g_ba: &Generator, x: &Volume) -> Result<f64> {
    check_cycle(g_ab, g_ba, x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let l = cycle_node(&mut tape, g_ab, Binding::frozen(&g_ab.params), g_ba, Binding::frozen(&g_ba.params), xv);
    Ok(tape.value(l).item())
}

/// Cycle loss with gradients for both generators.
pub fn cycle_loss_grad(g_ab: &Generator, g_ba: &Generator, x: &Volume) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_cycle(g_ab, g_ba, x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(volume_tensor(x));
    let l = cycle_node(
        &mut tape,
        g_ab,
        Binding::trainable(0, &g_ab.params),
        g_ba,
        Binding::trainable(1, &g_ba.params),
        xv,
    );
    let mut gr = tape.backward(l);
    Ok((
        tape.value(l).item(),
        gr.take_slot(0).expect("g_ab bound"),
        gr.take_slot(1).expect("g_ba bound"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(phase: PhaseTag, side: usize, f: impl Fn(usize) -> f64) -> Volume {
        Volume::new(side, side, (0..side * side).map(f).collect(), phase, "c").unwrap()
    }

    #[test]
    fn fresh_generator_is_identity_and_cycle_is_zero() {
        let g_ab = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Arterial), (16, 16), 1).unwrap();
        let g_ba = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Venous), (16, 16), 1).unwrap();
        let x = vol(PhaseTag::Arterial, 16, |i| (i as f64 * 0.7).sin() * 150.0 + 50.0);
        let x = crate::types::clamp_default(&x);
        let y = translate(&g_ab, &x).unwrap();
        assert_eq!(y.phase, PhaseTag::Venous);
        assert_eq!(y.shape(), x.shape());
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(cycle_loss(&g_ab, &g_ba, &x).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_cycle_is_offset() {
        let mut g_ab = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Arterial), (16, 16), 1).unwrap();
        let g_ba = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Venous), (16, 16), 1).unwrap();
        let head = GenNet::new(&g_ab.arch).head;
        let c = 0.05;
        g_ab.params[head.b_off] = c;
        let x = vol(PhaseTag::Arterial, 16, |i| ((i as f64 * 0.3).cos() * 0.8) * 200.0 + 75.0);
        let l = cycle_loss(&g_ab, &g_ba, &x).unwrap();
        assert!((l - c).abs() < 1e-12, "{l}");
    }

    #[test]
    fn translate_checks_phase_and_range() {
        let mut g = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Venous), (16, 16), 2).unwrap();
        let x = vol(PhaseTag::Arterial, 16, |_| 0.0);
        assert!(matches!(translate(&g, &x), Err(PcnError::PhaseMismatch { .. })));
        let head = GenNet::new(&g.arch).head;
        g.params[head.b_off] = 5.0;
        let x = vol(PhaseTag::Venous, 16, |i| i as f64);
        let y = translate(&g, &x).unwrap();
        assert!(y.data.iter().all(|&v| (crate::HU_MIN..=crate::HU_MAX).contains(&v)));
        assert_eq!(y.data[0], crate::HU_MAX);
    }

    #[test]
    fn lsgan_closed_forms() {
        let ones = Tensor::from_vec(1, 2, 2, vec![1.0; 4]);
        let zeros = Tensor::from_vec(1, 2, 2, vec![0.0; 4]);
        let t = lsgan_terms(&[ones.clone()], &[zeros]).unwrap();
        assert_eq!((t.disc_term, t.gen_term), (0.0, 1.0));
        let half = Tensor::from_vec(1, 2, 2, vec![0.5; 4]);
        let t = lsgan_terms(&[half.clone(), half.clone()], &[half]).unwrap();
        assert_eq!((t.disc_term, t.gen_term), (0.5, 0.25));
        assert!(lsgan_terms(&[], &[ones]).is_err());
    }

    #[test]
    fn constant_discriminator_through_full_path() {
        let mut d = Discriminator::init(DiscArch::default(), PhaseTag::Venous, 0).unwrap();
        let net = DiscNet::new(&d.arch);
        d.params.iter_mut().for_each(|p| *p = 0.0);
        d.params[net.convs[3].0.b_off] = 0.5;
        let real = vol(PhaseTag::Venous, 16, |i| i as f64);
        let fake = vol(PhaseTag::Venous, 16, |i| -(i as f64));
        let t = adversarial_distance(&d, &fake, &[&real]).unwrap();
        assert_eq!((t.disc_term, t.gen_term), (0.5, 0.25));
        assert!(adversarial_distance(&d, &fake, &[]).is_err());
        let wrong = vol(PhaseTag::Arterial, 16, |_| 0.0);
        assert!(adversarial_distance(&d, &wrong, &[&real]).is_err());
    }

    #[test]
    fn patch_grid_is_not_scalar() {
        let d = DiscArch::default();
        assert_eq!(d.patch_grid((64, 64)), (14, 14));
        assert_eq!(d.patch_grid((32, 32)), (6, 6));
        let disc = Discriminator::init(d, PhaseTag::Arterial, 0).unwrap();
        let s = disc.scores(&vol(PhaseTag::Arterial, 32, |_| 0.0)).unwrap();
        assert_eq!((s.h, s.w), (6, 6));
        let shallow = DiscArch {
            num_downsample: 1,
            ..d
        };
        assert_eq!(shallow.patch_grid((32, 32)), (14, 14));
        let deep = DiscArch {
            num_downsample: 3,
            ..d
        };
        assert_eq!(deep.patch_grid((64, 64)), (6, 6));
        let disc = Discriminator::init(shallow, PhaseTag::Arterial, 0).unwrap();
        let s = disc.scores(&vol(PhaseTag::Arterial, 32, |_| 0.0)).unwrap();
        assert_eq!((s.h, s.w), (14, 14));
    }

    #[test]
    fn cycle_direction_mismatch() {
        let g1 = Generator::init(GenArch::default(), Direction::from_source(PhaseTag::Arterial), (16, 16), 1).unwrap();
        let x = vol(PhaseTag::Arterial, 16, |_| 0.0);
        assert!(cycle_loss(&g1, &g1, &x).is_err());
    }
}
