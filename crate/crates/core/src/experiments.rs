//! Comparative studies on phantom data: training-strategy ablations, mixed-data
//! segmentation baselines, and one-phase transfer with a borrowed translator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::{load_bundle, save_bundle, CheckpointMeta};
use crate::config::{train_overrides, PhantomPreset};
use crate::error::{PcnError, Result};
use crate::eval::{evaluate, Branches, EvalOptions, MetricsReport, METHOD_FUSED, METHOD_SINGLE};
use crate::io::{sha256_hex, write_atomic};
use crate::objective::ModelBundle;
use crate::phantom::generate_dataset;
use crate::seed;
use crate::seg::seg_init;
use crate::trainer::{train_joint, train_one_phase, train_separate, train_seg, TrainConfig, TrainLog};
use crate::translate::Generator;
use crate::types::{split_folds, Dataset, PhaseTag, Sample};

/// Where a frozen translator pair comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Donor {
    /// The named variant's run on the next seed of the grid, so the donor
    /// never saw the recipient's phantom cases.
    Variant { name: String },
    /// A bundle checkpoint on disk.
    Checkpoint { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TranslatorMode {
    /// Translators trained alongside the segmentation models.
    Trained,
    /// Two-phase training with a fixed donor translator pair.
    Frozen { donor: Donor },
    /// One-phase training on the target phase with a fixed donor generator.
    OnePhase { donor: Donor },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `TrainConfig` fields replaced for this variant.
    #[serde(default)]
    pub overrides: Map<String, Value>,
    pub translator: TranslatorMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Phantom preset name, see [`PhantomPreset`].
    pub preset: String,
    pub grid: usize,
    /// Cases generated per seed, split into `folds` folds.
    pub cases: usize,
    pub folds: usize,
    /// The held-out fold.
    pub test_fold: usize,
    /// Phase whose segmentation is compared.
    pub target: PhaseTag,
    /// Summary key the tables compare: a class number or `"mean"`.
    pub class: String,
    pub base: TrainConfig,
    pub eval: EvalOptions,
    /// Also run the four mixed-data segmentation baselines.
    pub mixed_baseline: bool,
    /// Also run one-phase transfer on the target phase, borrowing generators
    /// from this trained variant's run on the next seed.
    pub onephase_donor: Option<String>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            variants: standard_variants(),
            seeds: vec![1, 2, 3],
            preset: "weak_arterial".into(),
            grid: 32,
            cases: 75,
            folds: 3,
            test_fold: 0,
            target: PhaseTag::Arterial,
            class: "1".into(),
            base: TrainConfig::default(),
            eval: EvalOptions::default(),
            mixed_baseline: true,
            onephase_donor: Some(PCN_2.into()),
        }
    }
}

pub const PCN_2: &str = "PCN-2";
pub const PCN_1: &str = "PCN-1";
pub const UDA_2: &str = "UDA-2";
pub const UDA_1: &str = "UDA-1";

/// The four training strategies: joint PCN, PCN with a borrowed PCN
/// translator on one phase, adversarial-only translator with lambda held at 1,
/// and joint segmentation training with a borrowed adversarial-only translator.
pub fn standard_variants() -> Vec<Variant> {
    let uda: Map<String, Value> = [
        ("lambda_joint".to_string(), Value::from(1.0)),
        ("detach_translator".to_string(), Value::from(true)),
    ]
    .into_iter()
    .collect();
    vec![
        Variant {
            name: PCN_2.into(),
            overrides: Map::new(),
            translator: TranslatorMode::Trained,
        },
        Variant {
            name: PCN_1.into(),
            overrides: Map::new(),
            translator: TranslatorMode::OnePhase {
                donor: Donor::Variant { name: PCN_2.into() },
            },
        },
        Variant {
            name: UDA_2.into(),
            overrides: uda,
            translator: TranslatorMode::Trained,
        },
        Variant {
            name: UDA_1.into(),
            overrides: Map::new(),
            translator: TranslatorMode::Frozen {
                donor: Donor::Variant { name: UDA_2.into() },
            },
        },
    ]
}

impl ExperimentGrid {
    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn preset(&self) -> Result<PhantomPreset> {
        PhantomPreset::parse(&self.preset).ok_or_else(|| {
            PcnError::Config(format!(
                "unknown preset {:?}; expected one of {}",
                self.preset,
                PhantomPreset::NAMES.join(", ")
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PcnError::Config("experiment grid needs at least one seed".into()));
        }
        let mut names = BTreeSet::new();
        for v in &self.variants {
            if !names.insert(v.name.as_str()) {
                return Err(PcnError::Config(format!("variant name {:?} is not unique", v.name)));
            }
        }
        let mut donors: Vec<(&str, &str)> = Vec::new();
        if let Some(d) = &self.onephase_donor {
            donors.push(("one-phase transfer", d));
        }
        for v in &self.variants {
            let donor = match &v.translator {
                TranslatorMode::Trained => continue,
                TranslatorMode::Frozen { donor } | TranslatorMode::OnePhase { donor } => donor,
            };
            if let Donor::Variant { name } = donor {
                donors.push((&v.name, name));
            }
        }
        for (user, name) in donors {
            let ok = self
                .variants
                .iter()
                .any(|d| d.name == name && d.translator == TranslatorMode::Trained);
            if !ok {
                return Err(PcnError::Prerequisite(format!(
                    "{user} needs donor variant {name}, which is missing or not trained"
                )));
            }
            if self.seeds.len() < 2 {
                return Err(PcnError::Prerequisite(format!(
                    "{user} borrows from another seed's run and needs at least two seeds"
                )));
            }
        }
        self.preset()?;
        if self.test_fold >= self.folds {
            return Err(PcnError::Config(format!("test_fold {} >= folds {}", self.test_fold, self.folds)));
        }
        for v in &self.variants {
            self.variant_config(v, self.seeds[0])?;
        }
        Ok(())
    }

    fn variant_config(&self, v: &Variant, seed: u64) -> Result<TrainConfig> {
        let mut cfg = train_overrides(&self.base, &v.overrides)?;
        cfg.seed = seed;
        if matches!(v.translator, TranslatorMode::Frozen { .. }) {
            cfg.freeze_translator = true;
        }
        Ok(cfg)
    }
}

/// Training and held-out data for one seed.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    /// Hash of the fold assignment, equal for every consumer of this split.
    pub split_hash: String,
}

pub fn prepare_seed(grid: &ExperimentGrid, seed: u64) -> Result<SeedData> {
    let cfg = grid.preset()?.config().with_grid(grid.grid);
    let data = generate_dataset(&cfg, grid.cases, seed::derive(seed, "experiment-data", 0))?;
    seed_data_from(&data, grid, seed)
}

/// Splits an existing two-phase dataset for one seed instead of generating one.
pub fn seed_data_from(data: &Dataset, grid: &ExperimentGrid, seed: u64) -> Result<SeedData> {
    let split = split_folds(data, grid.folds, seed)?;
    let (train, test) = split.train_test(grid.test_fold);
    Ok(SeedData {
        seed,
        train: data.subset(&train),
        test: data.subset(&test),
        split_hash: sha256_hex(split.to_json()?.as_bytes()),
    })
}

/// Outcome of one variant on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub split_hash: String,
    /// Method whose score the comparison uses.
    pub method: String,
    pub report: MetricsReport,
}

impl VariantRun {
    /// Mean and worst-case score for `class` on `phase`.
    pub fn score(&self, phase: PhaseTag, class: &str) -> Option<(f64, f64)> {
        self.report.row(&self.method, phase, class).map(|r| (r.average, r.min))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    /// Per-seed minimum-case score.
    pub per_seed_min: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub spread: f64,
    pub mean_min_case: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub phase: PhaseTag,
    pub class: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,method,phase,class,seeds,mean,spread,mean_min_case,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                r.name,
                r.method,
                self.phase,
                self.class,
                r.seeds.len(),
                r.mean,
                r.spread,
                r.mean_min_case,
                per.join(";")
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aggregates runs by name, in first-seen order.
    pub fn from_runs(runs: &[VariantRun], phase: PhaseTag, class: &str) -> Result<Self> {
        let mut order: Vec<(&str, &str)> = Vec::new();
        for r in runs {
            if !order.iter().any(|(n, _)| *n == r.variant) {
                order.push((&r.variant, &r.method));
            }
        }
        let mut rows = Vec::new();
        for (name, method) in order {
            let mut row = ComparisonRow {
                name: name.into(),
                method: method.into(),
                seeds: Vec::new(),
                per_seed: Vec::new(),
                per_seed_min: Vec::new(),
                mean: 0.0,
                spread: 0.0,
                mean_min_case: 0.0,
            };
            for r in runs.iter().filter(|r| r.variant == name) {
                let (avg, min) = r.score(phase, class).ok_or_else(|| {
                    PcnError::InsufficientData(format!("run {name} seed {} has no {phase} class {class} score", r.seed))
                })?;
                row.seeds.push(r.seed);
                row.per_seed.push(avg);
                row.per_seed_min.push(min);
            }
            let n = row.per_seed.len() as f64;
            row.mean = row.per_seed.iter().sum::<f64>() / n;
            row.mean_min_case = row.per_seed_min.iter().sum::<f64>() / n;
            row.spread = if n > 1.0 {
                (row.per_seed.iter().map(|v| (v - row.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(row);
        }
        Ok(Self {
            phase,
            class: class.into(),
            rows,
        })
    }
}

/// Output directory handling: every run writes into a directory of its own
/// that must not exist yet.
#[derive(Clone, Debug, Default)]
pub struct OutputDir {
    root: Option<PathBuf>,
    pub written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self {
            root,
            written: Vec::new(),
        }
    }

    fn run_dir(&self, name: &str, seed: u64) -> Result<Option<PathBuf>> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let dir = root.join(name).join(format!("seed-{seed}"));
        if dir.exists() {
            return Err(PcnError::Config(format!(
                "{} already exists; run directories are never overwritten",
                dir.display()
            )));
        }
        fs::create_dir_all(&dir)?;
        Ok(Some(dir))
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn record(&mut self, name: &str, seed: u64, run: &VariantRun, bundle: Option<(&ModelBundle, &TrainConfig)>, log: Option<&TrainLog>) -> Result<()> {
        let Some(dir) = self.run_dir(name, seed)? else {
            return Ok(());
        };
        self.write(dir.join("report.json"), serde_json::to_string_pretty(run)?.as_bytes())?;
        self.write(dir.join("per_case.csv"), run.report.per_case_csv().as_bytes())?;
        if let Some(log) = log {
            self.write(dir.join("train_log.csv"), log.to_csv().as_bytes())?;
        }
        if let Some((b, cfg)) = bundle {
            let meta = CheckpointMeta {
                seed,
                config_hash: cfg.hash(),
                log_tail: log.and_then(|l| l.rows.last()).map(|r| r.loss),
            };
            let p = dir.join("bundle.ckpt");
            save_bundle(&p, b, &meta)?;
            self.written.push(p);
        }
        Ok(())
    }

    pub fn write_table(&mut self, stem: &str, t: &ComparisonTable) -> Result<()> {
        if let Some(root) = self.root.clone() {
            fs::create_dir_all(&root)?;
            for (ext, body) in [("csv", t.to_csv()), ("json", t.to_json()?)] {
                let p = root.join(format!("{stem}.{ext}"));
                if p.exists() {
                    return Err(PcnError::Config(format!("{} already exists", p.display())));
                }
                self.write(p, body.as_bytes())?;
            }
        }
        Ok(())
    }
}

/// Everything an ablation suite produced.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub runs: Vec<VariantRun>,
    pub table: ComparisonTable,
    /// Trained bundles by (variant, seed).
    pub bundles: BTreeMap<(String, u64), ModelBundle>,
}

fn two_stage(b: ModelBundle, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    let (b, mut log) = train_separate(b, data, cfg, None)?;
    let (b, l2) = train_joint(b, data, cfg, None)?;
    log.extend(l2);
    Ok((b, log))
}

fn fresh_bundle(data: &Dataset, cfg: &TrainConfig) -> Result<ModelBundle> {
    let grid = data
        .grid()
        .ok_or_else(|| PcnError::InsufficientData("empty training set".into()))?;
    ModelBundle::init(cfg.arch, grid, cfg.seed)
}

/// Trains and evaluates every variant on every seed. Trained variants run
/// first so that frozen variants can borrow their translators.
pub fn run_ablation_suite(grid: &ExperimentGrid, data: &[SeedData], out: &mut OutputDir) -> Result<AblationResult> {
    grid.validate()?;
    if data.len() != grid.seeds.len() || data.iter().zip(&grid.seeds).any(|(d, s)| d.seed != *s) {
        return Err(PcnError::Config("seed data does not match the grid's seed list".into()));
    }
    let mut bundles: BTreeMap<(String, u64), ModelBundle> = BTreeMap::new();
    let mut runs: BTreeMap<(String, u64), VariantRun> = BTreeMap::new();
    let (trained, borrowed): (Vec<&Variant>, Vec<&Variant>) =
        grid.variants.iter().partition(|v| v.translator == TranslatorMode::Trained);

    for v in &trained {
        for sd in data {
            let cfg = grid.variant_config(v, sd.seed)?;
            let (b, log) = two_stage(fresh_bundle(&sd.train, &cfg)?, &sd.train, &cfg)?;
            let report = evaluate(Branches::from_bundle(&b, grid.target), &sd.test, grid.target, &grid.eval)?;
            let run = VariantRun {
                variant: v.name.clone(),
                seed: sd.seed,
                split_hash: sd.split_hash.clone(),
                method: METHOD_FUSED.into(),
                report,
            };
            out.record(&v.name, sd.seed, &run, Some((&b, &cfg)), Some(&log))?;
            runs.insert((v.name.clone(), sd.seed), run);
            bundles.insert((v.name.clone(), sd.seed), b);
        }
    }

    for v in &borrowed {
        for (i, sd) in data.iter().enumerate() {
            let cfg = grid.variant_config(v, sd.seed)?;
            let (donor, one_phase) = match &v.translator {
                TranslatorMode::Frozen { donor } => (donor, false),
                TranslatorMode::OnePhase { donor } => (donor, true),
                TranslatorMode::Trained => unreachable!("partitioned"),
            };
            let donor_bundle = match donor {
                Donor::Variant { name } => {
                    let s = data[(i + 1) % data.len()].seed;
                    bundles
                        .get(&(name.clone(), s))
                        .cloned()
                        .ok_or_else(|| PcnError::Prerequisite(format!("donor run {name} seed {s} missing")))?
                }
                Donor::Checkpoint { path } => {
                    if !path.exists() {
                        return Err(PcnError::Prerequisite(format!("donor checkpoint {} not found", path.display())));
                    }
                    load_bundle(path)?.0
                }
            };
            let (run, bundle, log) = if one_phase {
                let single = sd.train.drop_phase(grid.target.other());
                let t = run_onephase(&donor_bundle.gen(grid.target).clone(), &single, &sd.test, &cfg, &grid.eval)?;
                (
                    VariantRun {
                        variant: v.name.clone(),
                        seed: sd.seed,
                        split_hash: sd.split_hash.clone(),
                        method: METHOD_FUSED.into(),
                        report: t.report,
                    },
                    None,
                    None,
                )
            } else {
                let mut b = fresh_bundle(&sd.train, &cfg)?;
                b.gen_av = donor_bundle.gen_av.clone();
                b.gen_va = donor_bundle.gen_va.clone();
                let (b, log) = two_stage(b, &sd.train, &cfg)?;
                let report = evaluate(Branches::from_bundle(&b, grid.target), &sd.test, grid.target, &grid.eval)?;
                (
                    VariantRun {
                        variant: v.name.clone(),
                        seed: sd.seed,
                        split_hash: sd.split_hash.clone(),
                        method: METHOD_FUSED.into(),
                        report,
                    },
                    Some(b),
                    Some(log),
                )
            };
            out.record(&v.name, sd.seed, &run, bundle.as_ref().map(|b| (b, &cfg)), log.as_ref())?;
            runs.insert((v.name.clone(), sd.seed), run);
            if let Some(b) = bundle {
                bundles.insert((v.name.clone(), sd.seed), b);
            }
        }
    }

    let ordered: Vec<VariantRun> = grid
        .variants
        .iter()
        .flat_map(|v| data.iter().map(move |sd| (v.name.clone(), sd.seed)))
        .map(|k| runs.remove(&k).expect("every variant ran on every seed"))
        .collect();
    let table = ComparisonTable::from_runs(&ordered, grid.target, &grid.class)?;
    out.write_table("ablation", &table)?;
    Ok(AblationResult {
        runs: ordered,
        table,
        bundles,
    })
}

/// The four mixed-data training sets.
pub const MIX_A_ONLY: &str = "A-only";
pub const MIX_V_ONLY: &str = "V-only";
pub const MIX_HALF: &str = "half-half";
pub const MIX_ALL: &str = "all";

/// Pool sizes used by the mixed-data baselines, recorded for bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSizes {
    pub name: String,
    pub arterial: usize,
    pub venous: usize,
}

/// Trains one segmentation model per training-set composition and scores each
/// on both phases with its single branch. `cases` is the number of training
/// cases drawn per phase; "half-half" takes the first half of them from the
/// arterial phase and the rest from the venous phase.
pub fn run_mixed_data_baseline(
    train: &Dataset,
    test: &Dataset,
    cases: usize,
    iters: u64,
    cfg: &TrainConfig,
    split_hash: &str,
) -> Result<(Vec<VariantRun>, Vec<MixSizes>)> {
    if cases == 0 || cases > train.len() {
        return Err(PcnError::InsufficientData(format!(
            "requested {cases} cases per phase from a training set of {}",
            train.len()
        )));
    }
    let grid = train
        .grid()
        .ok_or_else(|| PcnError::InsufficientData("empty training set".into()))?;
    let ids: Vec<String> = {
        let mut v = train.case_ids();
        v.sort();
        v.truncate(cases);
        v
    };
    let phase_pool = |p: PhaseTag, range: std::ops::Range<usize>| -> Vec<&Sample> {
        range.filter_map(|i| train.cases().iter().find(|c| c.case_id == ids[i])?.phase(p)).collect()
    };
    let half = cases / 2;
    let sets: Vec<(&str, Vec<&Sample>, usize, usize)> = vec![
        (MIX_A_ONLY, phase_pool(PhaseTag::Arterial, 0..cases), cases, 0),
        (MIX_V_ONLY, phase_pool(PhaseTag::Venous, 0..cases), 0, cases),
        (
            MIX_HALF,
            [phase_pool(PhaseTag::Arterial, 0..half), phase_pool(PhaseTag::Venous, half..cases)].concat(),
            half,
            cases - half,
        ),
        (
            MIX_ALL,
            [phase_pool(PhaseTag::Arterial, 0..cases), phase_pool(PhaseTag::Venous, 0..cases)].concat(),
            cases,
            cases,
        ),
    ];
    let mut runs = Vec::new();
    let mut sizes = Vec::new();
    for (name, pool, na, nv) in sets {
        if pool.len() != na + nv {
            return Err(PcnError::InsufficientData(format!("{name}: some cases lack a phase")));
        }
        // The model's phase tag only labels its outputs; it accepts either phase.
        let m = seg_init(cfg.arch.seg, PhaseTag::Arterial, grid, cfg.seed)?;
        let (m, _) = train_seg(m, &pool, iters, 0, cfg, &format!("mixed-{name}"))?;
        let mut report = MetricsReport::default();
        for p in PhaseTag::BOTH {
            let mut mp = m.clone();
            mp.phase = p;
            report = report.merge(evaluate(Branches::single(&mp), test, p, &EvalOptions::default())?);
        }
        runs.push(VariantRun {
            variant: name.into(),
            seed: cfg.seed,
            split_hash: split_hash.into(),
            method: METHOD_SINGLE.into(),
            report,
        });
        sizes.push(MixSizes {
            name: name.into(),
            arterial: na,
            venous: nv,
        });
    }
    Ok((runs, sizes))
}

/// Baseline and one-phase PCN scores from a single one-phase training run.
#[derive(Clone, Debug, PartialEq)]
pub struct OnePhaseOutcome {
    /// Holds both methods: `single` is the native-only baseline, `fused` adds
    /// the translated branch.
    pub report: MetricsReport,
}

/// One-phase training with a frozen generator. The baseline is the native
/// model of the same run, so both methods share data, folds and draws.
pub fn run_onephase(
    donor: &Generator,
    single_phase: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    eval: &EvalOptions,
) -> Result<OnePhaseOutcome> {
    let p = donor.direction.source;
    let counts = single_phase.counts();
    let other_count = match p {
        PhaseTag::Arterial => counts.venous,
        PhaseTag::Venous => counts.arterial,
    };
    if other_count > 0 {
        return Err(PcnError::Config("one-phase transfer expects a single-phase dataset".into()));
    }
    let grid = single_phase
        .grid()
        .ok_or_else(|| PcnError::InsufficientData("empty training set".into()))?;
    let native = seg_init(cfg.arch.seg, p, grid, cfg.seed)?;
    let other = seg_init(cfg.arch.seg, p.other(), grid, cfg.seed)?;
    let iters = cfg.separate_iters + cfg.joint_iters;
    let m = train_one_phase(native, other, donor, single_phase, iters, cfg)?;
    let br = Branches {
        native: &m.native,
        translated: Some((&m.other, donor)),
    };
    Ok(OnePhaseOutcome {
        report: evaluate(br, test, p, eval)?,
    })
}

/// Runs one-phase transfer for each seed with the donor generator supplied
/// per seed and tabulates avg/max/min for the baseline and PCN.
pub fn run_onephase_transfer(
    donors: &[Generator],
    data: &[SeedData],
    base: &TrainConfig,
    eval: &EvalOptions,
    class: &str,
    out: &mut OutputDir,
) -> Result<(Vec<VariantRun>, ComparisonTable)> {
    if donors.len() != data.len() || donors.is_empty() {
        return Err(PcnError::Config("need one donor generator per seed".into()));
    }
    let p = donors[0].direction.source;
    if donors.iter().any(|g| g.direction.source != p) {
        return Err(PcnError::Config("donor generators disagree on source phase".into()));
    }
    let mut runs = Vec::new();
    for (g, sd) in donors.iter().zip(data) {
        let single = sd.train.drop_phase(p.other());
        let test = sd.test.drop_phase(p.other());
        let cfg = TrainConfig {
            seed: sd.seed,
            ..base.clone()
        };
        let o = run_onephase(g, &single, &test, &cfg, eval)?;
        for (name, method) in [("baseline", METHOD_SINGLE), ("PCN one-phase", METHOD_FUSED)] {
            let run = VariantRun {
                variant: name.into(),
                seed: sd.seed,
                split_hash: sd.split_hash.clone(),
                method: method.into(),
                report: o.report.clone(),
            };
            out.record(&format!("onephase-{}", method), sd.seed, &run, None, None)?;
            runs.push(run);
        }
    }
    let table = ComparisonTable::from_runs(&runs, p, class)?;
    out.write_table("onephase", &table)?;
    Ok((runs, table))
}

/// Tables of every study a grid asks for.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub ablation: AblationResult,
    pub mixed: Option<(Vec<VariantRun>, ComparisonTable)>,
    pub onephase: Option<(Vec<VariantRun>, ComparisonTable)>,
}

/// Runs the ablation suite, then the mixed-data baselines and one-phase
/// transfer when the grid enables them. The baselines get the same iteration
/// budget as a two-stage run and use every training case.
pub fn run_suite(grid: &ExperimentGrid, data: &[SeedData], out: &mut OutputDir) -> Result<SuiteResult> {
    let ablation = run_ablation_suite(grid, data, out)?;
    let mixed = if grid.mixed_baseline {
        let mut runs = Vec::new();
        for sd in data {
            let cfg = TrainConfig {
                seed: sd.seed,
                ..grid.base.clone()
            };
            let iters = cfg.separate_iters + cfg.joint_iters;
            let (rs, _) = run_mixed_data_baseline(&sd.train, &sd.test, sd.train.len(), iters, &cfg, &sd.split_hash)?;
            for r in &rs {
                out.record(&format!("mixed-{}", r.variant), sd.seed, r, None, None)?;
            }
            runs.extend(rs);
        }
        let table = ComparisonTable::from_runs(&runs, grid.target, &grid.class)?;
        out.write_table("mixed", &table)?;
        Some((runs, table))
    } else {
        None
    };
    let onephase = match &grid.onephase_donor {
        Some(name) => {
            let donors: Vec<Generator> = (0..data.len())
                .map(|i| {
                    let s = data[(i + 1) % data.len()].seed;
                    ablation
                        .bundles
                        .get(&(name.clone(), s))
                        .map(|b| b.gen(grid.target).clone())
                        .ok_or_else(|| PcnError::Prerequisite(format!("donor run {name} seed {s} missing")))
                })
                .collect::<Result<_>>()?;
            Some(run_onephase_transfer(&donors, data, &grid.base, &grid.eval, &grid.class, out)?)
        }
        None => None,
    };
    Ok(SuiteResult {
        ablation,
        mixed,
        onephase,
    })
}

/// Reads back a run written by [`OutputDir`].
pub fn read_run(dir: &Path) -> Result<VariantRun> {
    let p = dir.join("report.json");
    if !p.exists() {
        return Err(PcnError::Prerequisite(format!("{} not found", p.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::BundleArch;
    use crate::seg::SegArch;
    use crate::translate::{DiscArch, GenArch};

    fn tiny_grid() -> ExperimentGrid {
        ExperimentGrid {
            variants: vec![standard_variants().remove(0)],
            seeds: vec![5],
            grid: 16,
            cases: 6,
            folds: 3,
            base: TrainConfig {
                separate_iters: 2,
                joint_iters: 2,
                batch_size: 1,
                arch: BundleArch {
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
                    disc: DiscArch {
                        base_width: 2,
                        num_downsample: 1,
                    },
                },
                ..Default::default()
            },
            mixed_baseline: false,
            onephase_donor: None,
            ..Default::default()
        }
    }

    #[test]
    fn one_variant_one_seed_gives_one_row() {
        let g = tiny_grid();
        let data = vec![prepare_seed(&g, 5).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::new(Some(dir.path().join("out")));
        let r = run_ablation_suite(&g, &data, &mut out).unwrap();
        assert_eq!(r.table.rows.len(), 1);
        assert_eq!(r.table.rows[0].per_seed.len(), 1);
        assert!(dir.path().join("out/PCN-2/seed-5/bundle.ckpt").exists());
        assert!(dir.path().join("out/ablation.csv").exists());
        // Append-only: a second suite into the same directory is refused.
        assert!(run_ablation_suite(&g, &data, &mut out).is_err());
    }

    #[test]
    fn suite_runs_every_study() {
        let mut g = tiny_grid();
        g.seeds = vec![5, 6];
        g.mixed_baseline = true;
        g.onephase_donor = Some(PCN_2.into());
        let data: Vec<SeedData> = g.seeds.iter().map(|&s| prepare_seed(&g, s).unwrap()).collect();
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::new(Some(dir.path().to_path_buf()));
        let r = run_suite(&g, &data, &mut out).unwrap();
        assert_eq!(r.mixed.unwrap().1.rows.len(), 4);
        let (runs, table) = r.onephase.unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(table.rows.len(), 2);
        for stem in ["ablation", "mixed", "onephase"] {
            assert!(dir.path().join(format!("{stem}.json")).exists());
        }
        g.seeds = vec![5];
        assert!(matches!(g.validate(), Err(PcnError::Prerequisite(_))));
    }

    #[test]
    fn grid_validation() {
        let mut g = ExperimentGrid::default();
        assert!(g.validate().is_ok());
        g.seeds = vec![1];
        assert!(matches!(g.validate(), Err(PcnError::Prerequisite(_))));
        g.seeds.clear();
        assert!(g.validate().is_err());
        let mut g = ExperimentGrid::default();
        g.variants.push(g.variants[0].clone());
        assert!(g.validate().is_err());
        let mut g = ExperimentGrid::default();
        g.variants.remove(2);
        assert!(matches!(g.validate(), Err(PcnError::Prerequisite(_))));
    }

    #[test]
    fn missing_donor_checkpoint_is_an_error() {
        let mut g = tiny_grid();
        g.variants = vec![Variant {
            name: "frozen".into(),
            overrides: Map::new(),
            translator: TranslatorMode::Frozen {
                donor: Donor::Checkpoint {
                    path: "/nonexistent/donor.ckpt".into(),
                },
            },
        }];
        let data = vec![prepare_seed(&g, 5).unwrap()];
        let r = run_ablation_suite(&g, &data, &mut OutputDir::default());
        assert!(matches!(r, Err(PcnError::Prerequisite(_))));
    }

    #[test]
    fn mixed_sizes_and_errors() {
        let g = tiny_grid();
        let sd = prepare_seed(&g, 5).unwrap();
        let n = sd.train.len();
        assert!(run_mixed_data_baseline(&sd.train, &sd.test, n + 1, 1, &g.base, "h").is_err());
        let (runs, sizes) = run_mixed_data_baseline(&sd.train, &sd.test, n, 1, &g.base, "h").unwrap();
        assert_eq!(runs.len(), 4);
        let all = sizes.iter().find(|s| s.name == MIX_ALL).unwrap();
        assert_eq!(all.arterial + all.venous, 2 * n);
        let half = sizes.iter().find(|s| s.name == MIX_HALF).unwrap();
        assert_eq!(half.arterial + half.venous, n);
        for r in &runs {
            assert!(r.score(PhaseTag::Arterial, "1").is_some());
            assert!(r.score(PhaseTag::Venous, "1").is_some());
        }
    }

    #[test]
    fn table_statistics() {
        let mk = |seed: u64, v: f64| {
            let mut report = MetricsReport::default();
            report.per_case.push(crate::eval::CaseScore {
                case_id: "c".into(),
                phase: PhaseTag::Arterial,
                method: METHOD_FUSED.into(),
                dsc: vec![v],
                mean: v,
            });
            report.summarize();
            VariantRun {
                variant: "x".into(),
                seed,
                split_hash: String::new(),
                method: METHOD_FUSED.into(),
                report,
            }
        };
        let t = ComparisonTable::from_runs(&[mk(1, 0.5), mk(2, 0.7)], PhaseTag::Arterial, "1").unwrap();
        let r = t.row("x").unwrap();
        assert!((r.mean - 0.6).abs() < 1e-12);
        assert!((r.spread - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.to_csv().lines().count(), 2);
    }
}
