//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Positional arguments select criteria by
//! number, e.g. `cargo test --test acceptance -- 1 3 10`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pcn::eval::translation_histograms;
use pcn::experiments::*;
use pcn::gradcheck::{check_directions, max_rel_err};
use pcn::objective::*;
use pcn::phantom::{entropy_report, generate_dataset, PhantomConfig, CLASS_ORGAN};
use pcn::seg::{seg_loss, seg_loss_value, SegArch, SegLossKind};
use pcn::trainer::{train_joint, train_separate, TrainConfig};
use pcn::translate::*;
use pcn::types::{dsc, BinaryMask, LabelPhase, PhaseTag, Sample, HU_MAX, HU_MIN};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t: Instant, budget: Duration, what: &str) -> Result<(), String> {
    if t.elapsed() <= budget {
        Ok(())
    } else {
        Err(format!("{what} took {:.1}s, budget {:.0}s", t.elapsed().as_secs_f64(), budget.as_secs_f64()))
    }
}

// ---- 1: metric oracle ----

fn dsc_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = pcn::seed::stream(2024, "dsc-oracle", 0);
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(pb)).collect();
        let sa: BTreeSet<usize> = (0..h * w).filter(|&k| a[k]).collect();
        let sb: BTreeSet<usize> = (0..h * w).filter(|&k| b[k]).collect();
        let want = if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
        };
        let got = dsc(
            &BinaryMask { height: h, width: w, data: a },
            &BinaryMask { height: h, width: w, data: b },
        )
        .map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("pair {i}: dsc {got} vs oracle {want}"));
        }
    }
    within(t, Duration::from_secs(10), "1000 pairs")?;
    Ok(format!("1000 pairs exact in {:.2}s", t.elapsed().as_secs_f64()))
}

// ---- shared micro fixtures for 2 and 3 ----

const SIDE: usize = 16;

fn micro() -> BundleArch {
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
        disc: DiscArch { base_width: 2, num_downsample: 1 },
    }
}

fn micro_bundle(seed: u64) -> ModelBundle {
    let mut b = ModelBundle::init(micro(), (SIDE, SIDE), seed).unwrap();
    let mut rng = pcn::seed::stream(seed, "jitter", 0);
    for s in [GEN_AV, GEN_VA] {
        for p in b.params_mut(s).iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
    }
    b
}

fn micro_batch(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let d = generate_dataset(&PhantomConfig::default().with_grid(SIDE), 3, seed).unwrap();
    let a = d.samples(PhaseTag::Arterial).into_iter().cloned().collect();
    let mut v: Vec<Sample> = d.samples(PhaseTag::Venous).into_iter().cloned().collect();
    v.rotate_left(1);
    (a, v)
}

fn refs(s: &[Sample]) -> Vec<&Sample> {
    s.iter().collect()
}

// ---- 2: gradients ----

const EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;

fn fd(params: &[f64], grad: &[f64], seed: u64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    max_rel_err(&check_directions(f, params, grad, 10, EPS, seed))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let b = micro_bundle(7);
    for s in 0..NUM_SLOTS {
        if b.params(s).len() > 5000 {
            return Err(format!("slot {s} has {} params", b.params(s).len()));
        }
    }
    let (a, v) = micro_batch(7);
    let (x, y, xv) = (&a[0].volume, &a[0].label, &v[0].volume);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    for kind in [SegLossKind::L1, SegLossKind::SoftDice] {
        let (_, g) = seg_loss(&b.seg_a, x, y, kind).unwrap();
        let e = fd(&b.seg_a.params, &g, 1, &mut |p| {
            let mut m = b.seg_a.clone();
            m.params.copy_from_slice(p);
            seg_loss_value(&m, x, y, kind).unwrap()
        });
        errs.push(("seg_loss", e));
    }

    let fake = translate(&b.gen_av, x).unwrap();
    let (_, g) = adversarial_disc_grad(&b.disc_v, &fake, &[xv]).unwrap();
    errs.push((
        "adversarial_distance (disc)",
        fd(&b.disc_v.params, &g, 2, &mut |p| {
            let mut d = b.disc_v.clone();
            d.params.copy_from_slice(p);
            adversarial_distance(&d, &fake, &[xv]).unwrap().disc_term
        }),
    ));
    let (_, g) = adversarial_gen_grad(&b.gen_av, &b.disc_v, x).unwrap();
    errs.push((
        "adversarial_distance (gen)",
        fd(&b.gen_av.params, &g, 3, &mut |p| {
            let mut gg = b.gen_av.clone();
            gg.params.copy_from_slice(p);
            adversarial_gen_grad(&gg, &b.disc_v, x).unwrap().0
        }),
    ));

    let (_, g1, g2) = cycle_loss_grad(&b.gen_av, &b.gen_va, x).unwrap();
    errs.push((
        "cycle_loss",
        fd(&b.gen_av.params, &g1, 4, &mut |p| {
            let mut g = b.gen_av.clone();
            g.params.copy_from_slice(p);
            cycle_loss(&g, &b.gen_va, x).unwrap()
        })
        .max(fd(&b.gen_va.params, &g2, 5, &mut |p| {
            let mut g = b.gen_va.clone();
            g.params.copy_from_slice(p);
            cycle_loss(&b.gen_av, &g, x).unwrap()
        })),
    ));

    let kind = SegLossKind::L1;
    let r = p2p_loss(&b.gen_av, &b.seg_v, &b.disc_v, x, y, &[xv], kind).unwrap();
    let e_seg = fd(&b.seg_v.params, &r.grad_seg, 6, &mut |p| {
        let mut m = b.seg_v.clone();
        m.params.copy_from_slice(p);
        p2p_loss(&b.gen_av, &m, &b.disc_v, x, y, &[xv], kind).unwrap().seg_gen
    });
    let e_gen = fd(&b.gen_av.params, &r.grad_gen_seg, 7, &mut |p| {
        let mut g = b.gen_av.clone();
        g.params.copy_from_slice(p);
        p2p_loss(&g, &b.seg_v, &b.disc_v, x, y, &[xv], kind).unwrap().seg_gen
    });
    errs.push(("p2p_loss", e_seg.max(e_gen)));

    let o = PcnOptions {
        lambda: 0.6,
        ..Default::default()
    };
    let (ar, vr) = (refs(&a), refs(&v));
    let out = pcn_loss(&b, &ar, &vr, &o).unwrap();
    let mut worst = 0.0f64;
    for slot in 0..NUM_SLOTS {
        let disc = slot == DISC_A || slot == DISC_V;
        worst = worst.max(fd(b.params(slot), out.grads.slot(slot), 20 + slot as u64, &mut |p| {
            let mut bb = b.clone();
            bb.params_mut(slot).copy_from_slice(p);
            let l = pcn_loss(&bb, &ar, &vr, &o).unwrap().breakdown;
            if disc {
                l.disc_a + l.disc_v
            } else {
                l.total
            }
        }));
    }
    errs.push(("pcn_loss", worst));

    let summary: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let bad: Vec<&(&str, f64)> = errs.iter().filter(|(_, e)| !(*e < GRAD_TOL)).collect();
    within(t, Duration::from_secs(120), "gradient suite")?;
    check(bad.is_empty(), format!("max rel err: {}", summary.join(", ")))
}

// ---- 3: structural identities ----

fn relabel(s: &Sample, p: PhaseTag) -> Sample {
    let mut t = s.clone();
    t.volume.phase = p;
    t.label.phase = LabelPhase::from(p);
    t
}

fn identities() -> Outcome {
    let b = micro_bundle(9);
    let (a, v) = micro_batch(9);
    let (ar, vr) = (refs(&a), refs(&v));
    let with = |lambda: f64| PcnOptions {
        lambda,
        lambda_cyc: 10.0,
        ..Default::default()
    };

    let out = pcn_loss(&b, &ar, &vr, &with(1.0)).unwrap();
    for (slot, m, samples) in [(SEG_A, &b.seg_a, &a), (SEG_V, &b.seg_v, &v)] {
        let mut sum = vec![0.0; m.params.len()];
        for s in samples {
            let (_, g) = seg_loss(m, &s.volume, &s.label, SegLossKind::L1).unwrap();
            sum.iter_mut().zip(&g).for_each(|(acc, x)| *acc += x);
        }
        let mean: Vec<f64> = sum.iter().map(|x| x / samples.len() as f64).collect();
        if out.grads.slot(slot) != mean.as_slice() {
            return Err(format!("lambda=1 segmenter gradient of slot {slot} differs from the real-data terms"));
        }
    }

    let l = pcn_loss(&b, &ar, &vr, &with(0.7)).unwrap().breakdown;
    let sa: Vec<Sample> = v.iter().map(|s| relabel(s, PhaseTag::Arterial)).collect();
    let sv: Vec<Sample> = a.iter().map(|s| relabel(s, PhaseTag::Venous)).collect();
    let ls = pcn_loss(&b.swap_phases(), &refs(&sa), &refs(&sv), &with(0.7)).unwrap().breakdown;
    if ls.total != l.total {
        return Err(format!("phase swap changed the total: {} vs {}", ls.total, l.total));
    }

    let t = |lambda| pcn_loss(&b, &ar, &vr, &with(lambda)).unwrap().breakdown.total;
    let (t0, t5, t1) = (t(0.0), t(0.5), t(1.0));
    let affine = (t5 - 0.5 * (t0 + t1)).abs();
    if affine > 1e-9 * t5.abs().max(1.0) {
        return Err(format!("not affine in lambda: residual {affine:e}"));
    }

    let l = pcn_loss(&b, &ar, &vr, &with(0.5)).unwrap().breakdown;
    let n = a.len() as f64;
    let mut expect = 0.0;
    for (x, y) in a.iter().zip(&v) {
        let kind = SegLossKind::L1;
        let p = p2p_loss(&b.gen_av, &b.seg_v, &b.disc_v, &x.volume, &x.label, &[&y.volume], kind).unwrap();
        let q = p2p_loss(&b.gen_va, &b.seg_a, &b.disc_a, &y.volume, &y.label, &[&x.volume], kind).unwrap();
        expect += 0.5 * seg_loss_value(&b.seg_a, &x.volume, &x.label, kind).unwrap()
            + 0.5 * seg_loss_value(&b.seg_v, &y.volume, &y.label, kind).unwrap()
            + 0.5 * (p.seg_gen + q.seg_gen)
            + p.adv.gen_term
            + q.adv.gen_term
            + 10.0 * (cycle_loss(&b.gen_av, &b.gen_va, &x.volume).unwrap() + cycle_loss(&b.gen_va, &b.gen_av, &y.volume).unwrap());
    }
    expect /= n;
    let gap = (l.total - expect).abs();
    check(
        gap < 1e-9,
        format!("lambda=1 bitwise, swap bitwise, affine residual {affine:.1e}, decomposition gap {gap:.1e}"),
    )
}

// ---- 4: entropy ----

fn entropy() -> Outcome {
    let d = generate_dataset(&PhantomConfig::default(), 50, 4).map_err(|e| e.to_string())?;
    let mut slack = f64::INFINITY;
    for c in d.cases() {
        let (a, v) = (c.arterial.as_ref().unwrap(), c.venous.as_ref().unwrap());
        let e = entropy_report(&a.volume, &v.volume, 8).map_err(|e| e.to_string())?;
        let s = e.joint - e.arterial.max(e.venous);
        if s < -1e-9 {
            return Err(format!("{}: joint {} < max marginal", c.case_id, e.joint));
        }
        slack = slack.min(s);
    }
    Ok(format!("50 cases, smallest joint - max marginal {slack:.4} bits"))
}

// ---- 5: translation fidelity ----

fn translation() -> Outcome {
    let t = Instant::now();
    let phantom = PhantomConfig::default();
    let train = generate_dataset(&phantom, 50, 5).map_err(|e| e.to_string())?;
    let test = generate_dataset(&phantom, 20, 5005).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        separate_iters: 1000,
        joint_iters: 200,
        seed: 5,
        ..TrainConfig::desk()
    };
    let b = ModelBundle::init(cfg.arch, (phantom.height, phantom.width), cfg.seed).unwrap();
    let (b, _) = train_separate(b, &train, &cfg, None).map_err(|e| e.to_string())?;
    let (b, _) = train_joint(b, &train, &cfg, None).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for g in [&b.gen_av, &b.gen_va] {
        let h = translation_histograms(g, &test, CLASS_ORGAN, 40, (HU_MIN, HU_MAX)).map_err(|e| e.to_string())?;
        ok &= h.peak_distance <= 15.0 && h.l1 <= 0.6;
        parts.push(format!("{}->{}: peak {:.1} HU, L1 {:.3}", g.direction.source.as_str(), g.direction.target.as_str(), h.peak_distance, h.l1));
    }
    within(t, Duration::from_secs(20 * 60), "training")?;
    check(ok, format!("{} ({:.0}s)", parts.join("; "), t.elapsed().as_secs_f64()))
}

// ---- 6 to 9: the weak-phase study ----

fn study_grid() -> ExperimentGrid {
    ExperimentGrid {
        base: TrainConfig {
            separate_iters: 600,
            joint_iters: 300,
            seg_loss: SegLossKind::SoftDice,
            ..TrainConfig::desk()
        },
        class: "mean".into(),
        ..Default::default()
    }
}

struct Study {
    result: SuiteResult,
    grid: ExperimentGrid,
    elapsed: Duration,
}

fn study() -> Result<&'static Study, String> {
    static S: OnceLock<Result<Study, String>> = OnceLock::new();
    S.get_or_init(|| {
        let t = Instant::now();
        let grid = study_grid();
        let data: Vec<SeedData> = grid
            .seeds
            .iter()
            .map(|&s| prepare_seed(&grid, s))
            .collect::<pcn::Result<_>>()
            .map_err(|e| e.to_string())?;
        let result = run_suite(&grid, &data, &mut OutputDir::default()).map_err(|e| e.to_string())?;
        Ok(Study {
            result,
            grid,
            elapsed: t.elapsed(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn table(runs: &[VariantRun], s: &Study) -> Result<ComparisonTable, String> {
    ComparisonTable::from_runs(runs, s.grid.target, &s.grid.class).map_err(|e| e.to_string())
}

fn row<'a>(t: &'a ComparisonTable, name: &str) -> Result<&'a ComparisonRow, String> {
    t.row(name).ok_or_else(|| format!("no row {name}"))
}

fn collaboration_gain() -> Outcome {
    let s = study()?;
    let pcn = row(&s.result.ablation.table, PCN_2)?.mean;
    let mixed = &s.result.mixed.as_ref().ok_or("mixed baseline missing")?.1;
    let base = row(mixed, MIX_A_ONLY)?.mean;
    let gain = pcn - base;
    within_study(s)?;
    check(
        gain >= 0.03,
        format!("PCN fused {pcn:.4} vs single-phase {base:.4}, gain {gain:+.4} ({:.0}s for the study)", s.elapsed.as_secs_f64()),
    )
}

fn within_study(s: &Study) -> Result<(), String> {
    if s.elapsed <= Duration::from_secs(30 * 60) {
        Ok(())
    } else {
        Err(format!("study took {:.0}s, budget 1800s", s.elapsed.as_secs_f64()))
    }
}

fn ablation_order() -> Outcome {
    let s = study()?;
    let t = &s.result.ablation.table;
    let (p2, u1) = (row(t, PCN_2)?.mean, row(t, UDA_1)?.mean);
    let all: Vec<String> = t.rows.iter().map(|r| format!("{} {:.4}", r.name, r.mean)).collect();
    check(p2 - u1 >= 0.02, format!("{}; PCN-2 - UDA-1 {:+.4}", all.join(", "), p2 - u1))
}

fn augmentation_control() -> Outcome {
    let s = study()?;
    let pcn = row(&s.result.ablation.table, PCN_2)?.mean;
    let mixed = &s.result.mixed.as_ref().ok_or("mixed baseline missing")?.1;
    let best = mixed
        .rows
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or("empty mixed table")?;
    check(
        pcn >= best.mean - 0.005,
        format!("PCN fused {pcn:.4} vs best mixed {} {:.4}", best.name, best.mean),
    )
}

fn onephase_transfer() -> Outcome {
    let s = study()?;
    let runs = &s.result.onephase.as_ref().ok_or("one-phase transfer missing")?.0;
    let t = table(runs, s)?;
    let (b, p) = (row(&t, "baseline")?, row(&t, "PCN one-phase")?);
    check(
        p.mean >= b.mean - 0.01 && p.mean_min_case >= b.mean_min_case - 0.01,
        format!(
            "mean {:.4} vs baseline {:.4}; min-case {:.4} vs {:.4}",
            p.mean, b.mean, p.mean_min_case, b.mean_min_case
        ),
    )
}

// ---- 10: reproducibility ----

const PIPELINE_INI: &str = "\
[phantom]
preset = default
height = 24
width = 24

[dataset]
cases = 8
seed = 17

[train]
separate_iters = 20
joint_iters = 10
batch_size = 2
lambda_cyc = 1
seed = 17
checkpoint_every = 10

[train.arch.seg]
depth = 2
base_width = 4

[train.arch.gen]
num_res_blocks = 1
base_width = 4

[train.arch.disc]
base_width = 4
num_downsample = 1
";

fn pcn(args: &[&Path]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pcn"))
        .args(args)
        .env("PCN_DETERMINISTIC", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("pcn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path, config: &Path) -> Result<(Vec<u8>, String), String> {
    let (data, run, report) = (root.join("data"), root.join("run"), root.join("report.json"));
    let p = |s: &'static str| Path::new(s);
    pcn(&[p("phantom-gen"), p("--config"), config, p("--out"), &data])?;
    pcn(&[p("train"), p("--config"), config, p("--data"), &data, p("--out"), &run])?;
    pcn(&[p("eval"), p("--run"), &run, p("--data"), &data, p("--out"), &report])?;
    let rep = std::fs::read(&report).map_err(|e| e.to_string())?;
    let ckpt = std::fs::read(run.join("model.ckpt")).map_err(|e| e.to_string())?;
    Ok((rep, pcn::io::sha256_hex(&ckpt)))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("pipeline.ini");
    std::fs::write(&config, PIPELINE_INI).map_err(|e| e.to_string())?;
    let (r1, c1) = pipeline(&dir.path().join("first"), &config)?;
    let (r2, c2) = pipeline(&dir.path().join("second"), &config)?;
    check(
        r1 == r2 && c1 == c2,
        format!("reports equal: {}, checkpoint sha256 {} / {}", r1 == r2, &c1[..12], &c2[..12]),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "metric oracle", dsc_oracle),
    (2, "gradient suite", gradients),
    (3, "objective identities", identities),
    (4, "entropy inequality", entropy),
    (5, "translation fidelity", translation),
    (6, "collaboration gain", collaboration_gain),
    (7, "ablation ordering", ablation_order),
    (8, "augmentation control", augmentation_control),
    (9, "one-phase transfer", onephase_transfer),
    (10, "reproducibility", reproducibility),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({secs:.1}s) {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
