//! The CLI subcommands as library functions. Each one writes into a run
//! directory of its own and finishes with a manifest.
//!
//! Layout of a training run directory:
//!
//! ```text
//! config.json  train_log.csv  model.ckpt  checkpoints/  manifest.json
//! eval/   report.json  per_case.csv  histograms.json  panels.json  panels/  manifest.json
//! plots/  *.png  manifest.json
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_bundle, load_bundle, CheckpointMeta};
use crate::config::PcnConfig;
use crate::error::{PcnError, Result};
use crate::eval::{
    evaluate, predict_phase, translation_histograms, Branches, EvalOptions, HistogramComparison,
    MetricsReport, METHOD_FUSED,
};
use crate::experiments::{prepare_seed, run_suite, seed_data_from, ComparisonTable, ExperimentGrid, OutputDir, SeedData};
use crate::io::{decode_mask, decode_volume, encode_mask, encode_volume, load_dataset, save_dataset, sha256_hex, write_atomic, DATASET_MANIFEST};
use crate::manifest::{read_manifest, RunDir, RunManifest};
use crate::objective::{ModelBundle, Stage};
use crate::phantom::generate_dataset;
use crate::plot::{histogram_overlay, segmentation_panel};
use crate::seg::seg_init;
use crate::trainer::{train_joint, train_one_phase, train_separate, LogRow, TrainConfig, TrainLog, TrainMode};
use crate::types::{Dataset, PhaseTag, HU_MAX, HU_MIN};

pub const MANIFEST: &str = "manifest.json";
pub const MODEL: &str = "model.ckpt";
pub const EVAL_DIR: &str = "eval";
pub const PLOT_DIR: &str = "plots";
const HIST_BINS: usize = 40;
const PANEL_SCALE: usize = 4;

fn load_config(path: &Path) -> Result<PcnConfig> {
    let mut cfg = PcnConfig::from_path(path)?;
    cfg.apply_env();
    Ok(cfg)
}

/// `pcn phantom-gen`: generates the configured phantom dataset into `out`.
pub fn phantom_gen(config: &Path, out: &Path) -> Result<RunManifest> {
    let cfg = load_config(config)?;
    let mut run = RunDir::create(out, "phantom-gen")?;
    run.add_input(config)?;
    run.set_config(&cfg, vec![cfg.dataset.seed], cfg.train.deterministic)?;
    let data = generate_dataset(&cfg.phantom, cfg.dataset.cases, cfg.dataset.seed)?;
    save_dataset(&data, out, Some((&cfg.phantom, cfg.dataset.seed)))?;
    run.record(&out.join(DATASET_MANIFEST))?;
    run.finish(MANIFEST)
}

fn checkpoint_meta(cfg: &TrainConfig, log: &TrainLog) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        log_tail: log.rows.last().map(|r| r.loss),
    }
}

fn single_phase(data: &Dataset) -> Result<PhaseTag> {
    let c = data.counts();
    match (c.arterial > 0, c.venous > 0) {
        (true, false) => Ok(PhaseTag::Arterial),
        (false, true) => Ok(PhaseTag::Venous),
        _ => Err(PcnError::Config("one-phase training expects data with exactly one phase".into())),
    }
}

/// One-phase training packed into a bundle: the native and other-phase
/// segmentation models plus the donor generator. The remaining translator
/// slots keep their initial values and are never used.
fn train_one_phase_bundle(data: &Dataset, cfg: &TrainConfig, donor: &Path) -> Result<ModelBundle> {
    if !donor.exists() {
        return Err(PcnError::Prerequisite(format!("donor checkpoint {} not found", donor.display())));
    }
    let p = single_phase(data)?;
    let grid = data
        .grid()
        .ok_or_else(|| PcnError::InsufficientData("empty dataset".into()))?;
    let (donor, _) = load_bundle(donor)?;
    let g = donor.gen(p).clone();
    let mut b = ModelBundle::init(cfg.arch, grid, cfg.seed)?;
    if g.arch != cfg.arch.gen {
        return Err(PcnError::Config("donor generator arch differs from train.arch.gen".into()));
    }
    let native = seg_init(cfg.arch.seg, p, grid, cfg.seed)?;
    let other = seg_init(cfg.arch.seg, p.other(), grid, cfg.seed)?;
    let iters = cfg.separate_iters + cfg.joint_iters;
    let m = train_one_phase(native, other, &g, data, iters, cfg)?;
    *b.seg_mut(p) = m.native;
    *b.seg_mut(p.other()) = m.other;
    *b.gen_mut(p) = g;
    b.stage = Stage::Joint;
    b.iteration = iters;
    Ok(b)
}

/// `pcn train`: two-stage training, or one-phase training with `donor`.
pub fn train(config: &Path, data_dir: &Path, out: &Path, donor: Option<&Path>) -> Result<RunManifest> {
    let cfg = load_config(config)?;
    let tc = cfg.train.clone();
    let (data, _) = load_dataset(data_dir)?;
    let mut run = RunDir::create(out, "train")?;
    run.add_input(config)?;
    run.add_input(&data_dir.join(DATASET_MANIFEST))?;
    run.set_config(&cfg, vec![tc.seed], tc.deterministic)?;
    run.write("config.json", cfg.to_json()?.as_bytes())?;

    let (bundle, log) = match tc.mode {
        TrainMode::OnePhase => {
            let donor = donor.ok_or_else(|| {
                PcnError::Prerequisite("one-phase mode needs --donor <bundle checkpoint>".into())
            })?;
            run.add_input(donor)?;
            (train_one_phase_bundle(&data, &tc, donor)?, TrainLog::default())
        }
        TrainMode::TwoPhase => {
            if donor.is_some() {
                run.warn("--donor is ignored in two-phase mode");
            }
            let grid = data
                .grid()
                .ok_or_else(|| PcnError::InsufficientData("empty dataset".into()))?;
            let b = ModelBundle::init(tc.arch, grid, tc.seed)?;
            let every = tc.checkpoint_every;
            let mut saved: Vec<(String, Vec<u8>)> = Vec::new();
            let mut observe = |b: &ModelBundle, row: &LogRow| -> Result<()> {
                if every > 0 && (row.iteration + 1) % every == 0 {
                    let meta = CheckpointMeta {
                        seed: tc.seed,
                        config_hash: tc.hash(),
                        log_tail: Some(row.loss),
                    };
                    saved.push((format!("checkpoints/iter-{:06}.ckpt", row.iteration + 1), encode_bundle(b, &meta)?));
                }
                Ok(())
            };
            let (b, mut log) = train_separate(b, &data, &tc, Some(&mut observe))?;
            let (b, l2) = train_joint(b, &data, &tc, Some(&mut observe))?;
            log.extend(l2);
            for (name, bytes) in saved {
                run.write(&name, &bytes)?;
            }
            (b, log)
        }
    };
    run.write("train_log.csv", log.to_csv().as_bytes())?;
    run.write(MODEL, &encode_bundle(&bundle, &checkpoint_meta(&tc, &log))?)?;
    run.finish(MANIFEST)
}

/// Histogram comparison for one translation direction and class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub source: PhaseTag,
    pub target: PhaseTag,
    pub class: u8,
    pub comparison: HistogramComparison,
}

/// One stored segmentation panel: best, median or worst case of a phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub phase: PhaseTag,
    pub rank: String,
    pub case_id: String,
    pub score: f64,
    /// Directory below `eval/` holding input.vol, single.mask, fused.mask and truth.mask.
    pub dir: String,
}

fn present_phases(data: &Dataset) -> Vec<PhaseTag> {
    let c = data.counts();
    PhaseTag::BOTH
        .into_iter()
        .filter(|p| match p {
            PhaseTag::Arterial => c.arterial > 0,
            PhaseTag::Venous => c.venous > 0,
        })
        .collect()
}

/// `pcn eval`: scores the run's final model on `data` and stores what `plot` needs.
pub fn eval(run_dir: &Path, data_dir: &Path, out: &Path) -> Result<RunManifest> {
    let model = run_dir.join(MODEL);
    if !model.exists() {
        return Err(PcnError::Prerequisite(format!(
            "{} has no {MODEL}; run `pcn train` first",
            run_dir.display()
        )));
    }
    if out.exists() {
        return Err(PcnError::Config(format!("{} already exists; refusing to overwrite", out.display())));
    }
    let cfg: PcnConfig = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json"))?)?;
    let (data, _) = load_dataset(data_dir)?;
    let (bundle, _) = load_bundle(&model)?;
    let mut run = RunDir::open(run_dir, "eval")?;
    if run.join(EVAL_DIR).exists() {
        return Err(PcnError::Config(format!(
            "{} already holds evaluation outputs; run directories are append-only",
            run_dir.display()
        )));
    }
    run.add_input(&model)?;
    run.add_input(&data_dir.join(DATASET_MANIFEST))?;
    run.set_config(&cfg, vec![cfg.train.seed], cfg.train.deterministic)?;
    let opts = EvalOptions {
        lambda_fuse: cfg.train.lambda_fuse,
        ..EvalOptions::default()
    };

    let mut report = MetricsReport::default();
    let mut panels = Vec::new();
    for p in present_phases(&data) {
        let br = Branches::from_bundle(&bundle, p);
        let r = evaluate(br, &data, p, &opts)?;
        let preds = predict_phase(br, &data, p, &opts)?;
        let mut ranked: Vec<(f64, usize)> = r
            .per_case
            .iter()
            .filter(|c| c.method == METHOD_FUSED)
            .map(|c| (c.mean, preds.iter().position(|pr| pr.case_id == c.case_id).expect("same cases")))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let picks = [("best", 0), ("median", ranked.len() / 2), ("worst", ranked.len() - 1)];
        for (rank, at) in picks {
            let (score, i) = ranked[at];
            let pr = &preds[i];
            let case = data
                .cases()
                .iter()
                .find(|c| c.case_id == pr.case_id)
                .and_then(|c| c.phase(p))
                .expect("predicted cases come from the data");
            let dir = format!("panels/{}-{rank}", lower(p));
            run.write(&format!("{EVAL_DIR}/{dir}/input.vol"), &encode_volume(&case.volume))?;
            run.write(&format!("{EVAL_DIR}/{dir}/single.mask"), &encode_mask(&pr.single))?;
            run.write(&format!("{EVAL_DIR}/{dir}/fused.mask"), &encode_mask(pr.fused.as_ref().expect("bundle branches fuse")))?;
            run.write(&format!("{EVAL_DIR}/{dir}/truth.mask"), &encode_mask(&case.label))?;
            panels.push(PanelEntry {
                phase: p,
                rank: rank.into(),
                case_id: pr.case_id.clone(),
                score,
                dir,
            });
        }
        report = report.merge(r);
    }
    // Content hashes rather than paths, so identical runs give identical reports.
    report.provenance = format!(
        "model sha256:{}; dataset sha256:{}",
        sha256_hex(&fs::read(&model)?),
        sha256_hex(&fs::read(data_dir.join(DATASET_MANIFEST))?)
    );

    let mut hists = Vec::new();
    for src in PhaseTag::BOTH {
        let g = bundle.gen(src);
        for class in 1..bundle.arch().seg.num_classes as u8 {
            match translation_histograms(g, &data, class, HIST_BINS, (HU_MIN, HU_MAX)) {
                Ok(comparison) => hists.push(HistogramEntry {
                    source: src,
                    target: src.other(),
                    class,
                    comparison,
                }),
                Err(PcnError::EmptyRegion(m)) => run.warn(format!("no histogram for {src} class {class}: {m}")),
                Err(e) => return Err(e),
            }
        }
    }

    let body = serde_json::to_string_pretty(&report)?;
    run.write(&format!("{EVAL_DIR}/report.json"), body.as_bytes())?;
    run.write(&format!("{EVAL_DIR}/per_case.csv"), report.per_case_csv().as_bytes())?;
    run.write(&format!("{EVAL_DIR}/histograms.json"), serde_json::to_string_pretty(&hists)?.as_bytes())?;
    run.write(&format!("{EVAL_DIR}/panels.json"), serde_json::to_string_pretty(&panels)?.as_bytes())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(out, body.as_bytes())?;
    run.finish(&format!("{EVAL_DIR}/{MANIFEST}"))
}

fn lower(p: PhaseTag) -> String {
    p.as_str().to_ascii_lowercase()
}

fn read_eval<T: for<'de> Deserialize<'de>>(run_dir: &Path, name: &str) -> Result<T> {
    let p = run_dir.join(EVAL_DIR).join(name);
    if !p.exists() {
        return Err(PcnError::Prerequisite(format!(
            "{} not found; run `pcn eval` on this run first",
            p.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

/// `pcn plot`: histogram overlays and segmentation panels from stored eval outputs.
pub fn plot(run_dir: &Path) -> Result<RunManifest> {
    let hists: Vec<HistogramEntry> = read_eval(run_dir, "histograms.json")?;
    let panels: Vec<PanelEntry> = read_eval(run_dir, "panels.json")?;
    let mut run = RunDir::open(run_dir, "plot")?;
    if run.join(PLOT_DIR).exists() {
        return Err(PcnError::Config(format!("{} already holds plots", run_dir.display())));
    }
    run.add_input(&run_dir.join(EVAL_DIR).join(MANIFEST))?;
    let cfg: PcnConfig = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json"))?)?;
    run.set_config(&cfg, vec![cfg.train.seed], cfg.train.deterministic)?;
    for h in &hists {
        let name = format!("{PLOT_DIR}/hist-{}-to-{}-class{}.png", lower(h.source), lower(h.target), h.class);
        run.write(&name, &histogram_overlay(&h.comparison)?)?;
    }
    for p in &panels {
        let dir = run_dir.join(EVAL_DIR).join(&p.dir);
        let vol = decode_volume(&fs::read(dir.join("input.vol"))?, &dir.join("input.vol"))?;
        let masks = ["single", "fused", "truth"]
            .iter()
            .map(|m| {
                let path = dir.join(format!("{m}.mask"));
                decode_mask(&fs::read(&path)?, &path)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = masks.iter().collect();
        let name = format!("{PLOT_DIR}/panel-{}-{}.png", lower(p.phase), p.rank);
        run.write(&name, &segmentation_panel(&vol, &refs, PANEL_SCALE)?)?;
    }
    run.finish(&format!("{PLOT_DIR}/{MANIFEST}"))
}

/// `pcn ablate`: runs every study the grid enables. Without `data`, each seed
/// generates its own phantom dataset from the grid's preset.
pub fn ablate(grid_path: &Path, data_dir: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(grid_path)
        .map_err(|e| PcnError::Prerequisite(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let mut grid = ExperimentGrid::from_json(&text)?;
    if std::env::var("PCN_DETERMINISTIC").is_ok_and(|v| v.trim() == "1") {
        grid.base.deterministic = true;
    }
    let mut run = RunDir::create(out, "ablate")?;
    run.add_input(grid_path)?;
    run.set_config(&grid, grid.seeds.clone(), grid.base.deterministic)?;
    run.write("grid.json", serde_json::to_string_pretty(&grid)?.as_bytes())?;
    let data: Vec<SeedData> = match data_dir {
        Some(d) => {
            let (ds, _) = load_dataset(d)?;
            run.add_input(&d.join(DATASET_MANIFEST))?;
            grid.seeds.iter().map(|&s| seed_data_from(&ds, &grid, s)).collect::<Result<_>>()?
        }
        None => grid.seeds.iter().map(|&s| prepare_seed(&grid, s)).collect::<Result<_>>()?,
    };
    let mut od = OutputDir::new(Some(out.to_path_buf()));
    run_suite(&grid, &data, &mut od)?;
    for p in &od.written {
        run.record(p)?;
    }
    run.finish(MANIFEST)
}

fn table_text(title: &str, t: &ComparisonTable) -> String {
    let mut s = format!("{title} ({} phase, class {})\n", t.phase, t.class);
    s.push_str(&format!("  {:<16} {:>7} {:>8} {:>8} {:>9}\n", "name", "method", "mean", "spread", "min-case"));
    for r in &t.rows {
        s.push_str(&format!(
            "  {:<16} {:>7} {:>8.4} {:>8.4} {:>9.4}\n",
            r.name, r.method, r.mean, r.spread, r.mean_min_case
        ));
    }
    s
}

/// `pcn report`: a plain-text summary of whatever a run or ablation directory holds.
pub fn report(dir: &Path) -> Result<String> {
    let m = read_manifest(&dir.join(MANIFEST))?;
    let mut s = format!("{} ({} command, config {})\n", dir.display(), m.command, &m.config_hash[..12.min(m.config_hash.len())]);
    for w in &m.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    let mut found = false;
    for (stem, title) in [("ablation", "Ablation"), ("mixed", "Mixed-data baselines"), ("onephase", "One-phase transfer")] {
        let p = dir.join(format!("{stem}.json"));
        if p.exists() {
            let t: ComparisonTable = serde_json::from_str(&fs::read_to_string(p)?)?;
            s.push_str(&table_text(title, &t));
            found = true;
        }
    }
    let p = dir.join(EVAL_DIR).join("report.json");
    if p.exists() {
        let r: MetricsReport = serde_json::from_str(&fs::read_to_string(p)?)?;
        s.push_str(&format!("  {:<7} {:<9} {:>5} {:>8} {:>8} {:>8}\n", "method", "phase", "class", "average", "max", "min"));
        for row in &r.summary {
            s.push_str(&format!(
                "  {:<7} {:<9} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
                row.method,
                row.phase.to_string(),
                row.class,
                row.average,
                row.max,
                row.min
            ));
        }
        found = true;
    }
    if !found {
        s.push_str(&format!("{} outputs listed, no tables or evaluation report yet\n", m.outputs.len()));
    }
    Ok(s)
}
