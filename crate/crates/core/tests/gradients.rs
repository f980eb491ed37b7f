//! Finite-difference checks of every analytic gradient on micro models.

use pcn::gradcheck::{check_directions, max_rel_err};
use pcn::objective::*;
use pcn::seg::{seg_init, seg_loss, SegArch, SegLossKind};
use pcn::translate::*;
use pcn::types::{LabelMask, LabelPhase, PhaseTag, Sample, Volume};
use rand::Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SIDE: usize = 16;

fn micro() -> BundleArch {
    BundleArch {
        seg: SegArch {
            depth: 2,
            base_width: 4,
            num_classes: 3,
            input_channels: 1,
        },
        gen: GenArch {
            num_res_blocks: 1,
            base_width: 2,
        },
        disc: DiscArch { base_width: 2, num_downsample: 2 },
    }
}

fn volume(phase: PhaseTag, seed: u64) -> Volume {
    let mut rng = pcn::seed::stream(seed, "vol", phase as u64);
    let data = (0..SIDE * SIDE).map(|_| rng.gen_range(-100.0..250.0)).collect();
    Volume::new(SIDE, SIDE, data, phase, "g").unwrap()
}

fn labels(phase: PhaseTag, seed: u64) -> LabelMask {
    let mut rng = pcn::seed::stream(seed, "lab", phase as u64);
    let data = (0..SIDE * SIDE).map(|_| rng.gen_range(0..3u8)).collect();
    LabelMask::new(SIDE, SIDE, data, 3, LabelPhase::from(phase)).unwrap()
}

fn sample(phase: PhaseTag, seed: u64) -> Sample {
    Sample {
        volume: volume(phase, seed),
        label: labels(phase, seed),
        deformation: None,
    }
}

/// A bundle whose generators are not the identity map.
fn bundle(seed: u64) -> ModelBundle {
    let mut b = ModelBundle::init(micro(), (SIDE, SIDE), seed).unwrap();
    let mut rng = pcn::seed::stream(seed, "jitter", 0);
    for s in [GEN_AV, GEN_VA] {
        for p in b.params_mut(s).iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
    }
    b
}

#[test]
fn micro_models_are_small() {
    let a = micro();
    assert!(a.seg.param_count() <= 5000);
    assert!(a.gen.param_count() <= 5000);
    assert!(a.disc.param_count() <= 5000);
}

#[test]
fn seg_loss_gradient() {
    for kind in [SegLossKind::L1, SegLossKind::SoftDice] {
        let m = seg_init(micro().seg, PhaseTag::Arterial, (SIDE, SIDE), 3).unwrap();
        let x = volume(PhaseTag::Arterial, 3);
        let y = labels(PhaseTag::Arterial, 3);
        let (_, g) = seg_loss(&m, &x, &y, kind).unwrap();
        let mut f = |p: &[f64]| {
            let mut mm = m.clone();
            mm.params.copy_from_slice(p);
            seg_loss(&mm, &x, &y, kind).unwrap().0
        };
        let e = max_rel_err(&check_directions(&mut f, &m.params, &g, 20, EPS, 1));
        assert!(e < TOL, "{kind:?}: {e}");
    }
}

#[test]
fn adversarial_gradients() {
    let b = bundle(5);
    let x = volume(PhaseTag::Arterial, 5);
    let (_, g) = adversarial_gen_grad(&b.gen_av, &b.disc_v, &x).unwrap();
    let mut f = |p: &[f64]| {
        let mut gg = b.gen_av.clone();
        gg.params.copy_from_slice(p);
        adversarial_gen_grad(&gg, &b.disc_v, &x).unwrap().0
    };
    let e = max_rel_err(&check_directions(&mut f, &b.gen_av.params, &g, 10, EPS, 2));
    assert!(e < TOL, "generator: {e}");

    let fake = translate(&b.gen_av, &x).unwrap();
    let r1 = volume(PhaseTag::Venous, 6);
    let r2 = volume(PhaseTag::Venous, 7);
    let (v, g) = adversarial_disc_grad(&b.disc_v, &fake, &[&r1, &r2]).unwrap();
    let t = adversarial_distance(&b.disc_v, &fake, &[&r1, &r2]).unwrap();
    assert!((v - t.disc_term).abs() < 1e-12);
    let mut f = |p: &[f64]| {
        let mut d = b.disc_v.clone();
        d.params.copy_from_slice(p);
        adversarial_distance(&d, &fake, &[&r1, &r2]).unwrap().disc_term
    };
    let e = max_rel_err(&check_directions(&mut f, &b.disc_v.params, &g, 10, EPS, 3));
    assert!(e < TOL, "discriminator: {e}");
}

#[test]
fn cycle_gradient() {
    let b = bundle(8);
    let x = volume(PhaseTag::Venous, 8);
    let (_, g_ab, g_ba) = cycle_loss_grad(&b.gen_va, &b.gen_av, &x).unwrap();
    let mut f = |p: &[f64]| {
        let mut g = b.gen_va.clone();
        g.params.copy_from_slice(p);
        cycle_loss(&g, &b.gen_av, &x).unwrap()
    };
    let e = max_rel_err(&check_directions(&mut f, &b.gen_va.params, &g_ab, 10, EPS, 4));
    assert!(e < TOL, "first generator: {e}");
    let mut f = |p: &[f64]| {
        let mut g = b.gen_av.clone();
        g.params.copy_from_slice(p);
        cycle_loss(&b.gen_va, &g, &x).unwrap()
    };
    let e = max_rel_err(&check_directions(&mut f, &b.gen_av.params, &g_ba, 10, EPS, 5));
    assert!(e < TOL, "second generator: {e}");
}

#[test]
fn p2p_gradients_reach_segmenter_and_generator() {
    let b = bundle(9);
    let s = sample(PhaseTag::Arterial, 9);
    let real = volume(PhaseTag::Venous, 10);
    let kind = SegLossKind::L1;
    let r = p2p_loss(&b.gen_av, &b.seg_v, &b.disc_v, &s.volume, &s.label, &[&real], kind).unwrap();
    let eval = |g: &Generator, m: &pcn::seg::SegModel| {
        p2p_loss(g, m, &b.disc_v, &s.volume, &s.label, &[&real], kind).unwrap()
    };
    let mut f = |p: &[f64]| {
        let mut m = b.seg_v.clone();
        m.params.copy_from_slice(p);
        eval(&b.gen_av, &m).seg_gen
    };
    let e = max_rel_err(&check_directions(&mut f, &b.seg_v.params, &r.grad_seg, 10, EPS, 6));
    assert!(e < TOL, "seg_gen wrt segmenter: {e}");
    let mut f = |p: &[f64]| {
        let mut g = b.gen_av.clone();
        g.params.copy_from_slice(p);
        eval(&g, &b.seg_v).seg_gen
    };
    let e = max_rel_err(&check_directions(&mut f, &b.gen_av.params, &r.grad_gen_seg, 10, EPS, 7));
    assert!(e < TOL, "seg_gen wrt generator: {e}");
    let mut f = |p: &[f64]| {
        let mut g = b.gen_av.clone();
        g.params.copy_from_slice(p);
        eval(&g, &b.seg_v).adv.gen_term
    };
    let e = max_rel_err(&check_directions(&mut f, &b.gen_av.params, &r.grad_gen_adv, 10, EPS, 8));
    assert!(e < TOL, "gen_term wrt generator: {e}");
    let mut f = |p: &[f64]| {
        let mut d = b.disc_v.clone();
        d.params.copy_from_slice(p);
        p2p_loss(&b.gen_av, &b.seg_v, &d, &s.volume, &s.label, &[&real], kind).unwrap().adv.disc_term
    };
    let e = max_rel_err(&check_directions(&mut f, &b.disc_v.params, &r.grad_disc, 10, EPS, 9));
    assert!(e < TOL, "disc_term wrt discriminator: {e}");
}

#[test]
fn pcn_loss_gradients_for_all_parameter_sets() {
    let b = bundle(11);
    let a = [sample(PhaseTag::Arterial, 11), sample(PhaseTag::Arterial, 12)];
    let v = [sample(PhaseTag::Venous, 13), sample(PhaseTag::Venous, 14)];
    let ar: Vec<&Sample> = a.iter().collect();
    let vr: Vec<&Sample> = v.iter().collect();
    for literal_cross_term in [false, true] {
        let o = PcnOptions {
            lambda: 0.6,
            literal_cross_term,
            ..Default::default()
        };
        let out = pcn_loss(&b, &ar, &vr, &o).unwrap();
        for slot in 0..NUM_SLOTS {
            let disc = slot == DISC_A || slot == DISC_V;
            let mut f = |p: &[f64]| {
                let mut bb = b.clone();
                bb.params_mut(slot).copy_from_slice(p);
                let l = pcn_loss(&bb, &ar, &vr, &o).unwrap().breakdown;
                if disc {
                    l.disc_a + l.disc_v
                } else {
                    l.total
                }
            };
            let e = max_rel_err(&check_directions(&mut f, b.params(slot), out.grads.slot(slot), 10, EPS, 20 + slot as u64));
            assert!(e < TOL, "slot {slot} strict={literal_cross_term}: {e}");
        }
    }
}
