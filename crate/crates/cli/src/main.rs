mod layout;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ikd_mil::checkpoint::{Checkpoint, StageTag};
use ikd_mil::config::{parse_config, RunConfig};
use ikd_mil::data::{generate_synthetic_dataset, ingest_patch_folder, read_manifest, SplitRole};
use ikd_mil::engine::{
    fit_fusion_weights, run_iterative_distillation, run_stage_one, run_stage_two, train_mil_stage, History, STATE_FILE,
};
use ikd_mil::losses::KdStructure;
use ikd_mil::metrics::evaluate_dataset;
use ikd_mil::{DatasetF32, Error, SegModelF32};
use layout::{exists, synth_dir, RunLayout};
use log::info;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "ikd-mil", version, about = "Weakly-supervised segmentation: MIL teacher training and iterative fusion-knowledge distillation")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, value_name = "NAME", default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets.
    GenerateData {
        /// Regenerate even if the dataset already exists.
        #[arg(long)]
        force: bool,
    },
    /// Stage one: MIL training with naive masks.
    TrainMil,
    /// Fit the fusion weights of the stage-one checkpoint.
    FitFusion,
    /// Stage two: iterative fusion-knowledge distillation.
    Distill,
    /// Score a checkpoint on the test set.
    Evaluate {
        /// Defaults to the best distilled student of the run.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Plot best-per-period validation curves from run or ablation directories.
    Report {
        #[arg(required = true, value_name = "DIR")]
        inputs: Vec<PathBuf>,
        /// Output directory for SVGs and curve CSV (default `<run>/report`).
        #[arg(long, value_name = "DIR")]
        output: Option<PathBuf>,
    },
    /// Scripted ablations with repeated seeds.
    Ablate {
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        sweep: Sweep,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Structure,
    Switch,
    A,
    All,
}

const A_SWEEP: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 1.0, 5.0];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        bail!("unknown device `{}`; only `cpu` is supported", cli.device);
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenerateData { force } => generate_data(&cfg, *force),
        Command::TrainMil => train_mil(&cfg),
        Command::FitFusion => fit_fusion(&cfg),
        Command::Distill => distill(&cfg),
        Command::Evaluate { checkpoint } => evaluate(&cfg, checkpoint.as_deref()),
        Command::Report { inputs, output } => {
            let out = output.clone().unwrap_or_else(|| cfg.run_dir().join("report"));
            let series = report::collect_series(inputs)?;
            for p in report::write_report(&series, &out, &cfg.run_name)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Ablate { sweep, repeats } => ablate(&cfg, *sweep, *repeats),
    }
}

fn missing(path: &Path, hint: &str) -> anyhow::Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        hint: hint.to_string(),
    }
    .into()
}

fn generate_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let root = synth_dir(cfg);
    for (split, spec) in [("train", &cfg.synth), ("test", &cfg.test_synth)] {
        let dir = root.join(split);
        if exists(&dir.join("manifest.csv")) && !force {
            info!("{} exists; keeping it (use --force to regenerate)", dir.display());
            continue;
        }
        let data: DatasetF32 = generate_synthetic_dataset(spec)?;
        data.write_folder(&dir)?;
        info!("wrote {} patches to {}", data.len(), dir.display());
    }
    println!("{}", root.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, role: SplitRole) -> Result<DatasetF32> {
    let (configured, name) = match role {
        SplitRole::Train => (&cfg.data.train_dir, "train"),
        SplitRole::Test => (&cfg.data.test_dir, "test"),
    };
    let dir = configured.clone().unwrap_or_else(|| synth_dir(cfg).join(name));
    let manifest = dir.join("manifest.csv");
    if !exists(&manifest) {
        return Err(missing(
            &manifest,
            &format!("run `ikd-mil generate-data` first or set `data.{name}_dir` to a patch folder with a manifest"),
        ));
    }
    let records = read_manifest(&manifest)?;
    let (data, report) = ingest_patch_folder(&dir, &cfg.filter, &records, role)?;
    info!(
        "{name}: {} kept of {} files ({} background-dropped, {} unreadable)",
        report.kept, report.files_seen, report.dropped_background, report.skipped_unreadable
    );
    Ok(data)
}

fn train_val(cfg: &RunConfig) -> Result<(DatasetF32, DatasetF32)> {
    let data = load_split(cfg, SplitRole::Train)?;
    Ok(data.split(cfg.train.val_fraction, cfg.train.seed)?)
}

fn load_model(path: &Path, hint: &str) -> Result<SegModelF32> {
    if !exists(path) {
        return Err(missing(path, hint));
    }
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn train_mil(cfg: &RunConfig) -> Result<()> {
    let layout = RunLayout::of(cfg);
    cfg.write_echo(&layout.root)?;
    let (train, val) = train_val(cfg)?;
    let settings = cfg.settings();
    let mut model = SegModelF32::build(&cfg.backbone, cfg.train.seed)?;
    let mut history = History::default();
    let ckpt = train_mil_stage(&mut model, &train, Some(&val), &settings, &mut history)?;
    let path = layout.mil_checkpoint();
    ckpt.save(&path)?;
    std::fs::create_dir_all(layout.stage1())?;
    history.write_csv(&layout.stage1_history())?;
    println!("{}", path.display());
    Ok(())
}

fn fit_fusion(cfg: &RunConfig) -> Result<()> {
    let layout = RunLayout::of(cfg);
    let mut model = load_model(&layout.mil_checkpoint(), "run `ikd-mil train-mil` first")?;
    cfg.write_echo(&layout.root)?;
    let (train, _) = train_val(cfg)?;
    let mut history = if exists(&layout.stage1_history()) {
        History::read_csv(&layout.stage1_history())?
    } else {
        History::default()
    };
    history.records.retain(|r| r.stage != "fusion");
    let weights = fit_fusion_weights(&mut model, &train, &cfg.settings(), &mut history)?;
    info!("fusion weights {:?}", weights.weights());
    let path = layout.teacher_checkpoint();
    Checkpoint::from_model(&model, StageTag::Mil).save(&path)?;
    history.write_csv(&layout.stage1_history())?;
    println!("{}", path.display());
    Ok(())
}

fn distill(cfg: &RunConfig) -> Result<()> {
    let layout = RunLayout::of(cfg);
    let teacher = load_model(&layout.teacher_checkpoint(), "run `ikd-mil fit-fusion` first")?;
    cfg.write_echo(&layout.root)?;
    let (train, val) = train_val(cfg)?;
    let dir = layout.distill();
    std::fs::create_dir_all(&dir)?;
    let mut history = History::default();
    let outcome = run_iterative_distillation(&teacher, &train, &val, &cfg.settings(), Some(&dir), &mut history)?;
    history.write_csv(&layout.distill_history())?;
    std::fs::write(layout.cycles(), serde_json::to_string_pretty(&outcome.reports)?)?;
    Checkpoint::from_model(&outcome.best_model, StageTag::DistillCycle(outcome.best_cycle)).save(&layout.best_student())?;
    info!(
        "best validation F1 {:.4} at cycle {} epoch {}",
        outcome.best_f1, outcome.best_cycle, outcome.best_epoch
    );
    println!("{}", layout.best_student().display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let layout = RunLayout::of(cfg);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| layout.best_student());
    let model = load_model(&path, "run `ikd-mil distill` first or pass --checkpoint")?;
    let test = load_split(cfg, SplitRole::Test)?;
    let report = evaluate_dataset(&model, &test, &cfg.metrics)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let dir = layout.eval();
    std::fs::create_dir_all(&dir)?;
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    report.write_summary(&dir.join(format!("{stem}.txt")))?;
    println!("{}", report.summary_line());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ArmResult {
    sweep: String,
    arm: String,
    repeat: usize,
    seed: u64,
    best_val_f1: f64,
    best_cycle: usize,
    best_epoch: usize,
    teacher_test_f1: f64,
    teacher_test_iou: f64,
    student_test_f1: f64,
    student_test_iou: f64,
    student_test_hd_pos: Option<f64>,
}

/// Sweep name, arm name and the config edit that selects the arm.
type Arm = (&'static str, String, Box<dyn Fn(&mut RunConfig)>);

fn arms(sweep: Sweep) -> Vec<Arm> {
    let mut out: Vec<Arm> = Vec::new();
    if matches!(sweep, Sweep::Structure | Sweep::All) {
        for s in [KdStructure::Fusion, KdStructure::A, KdStructure::B] {
            out.push(("structure", s.to_string(), Box::new(move |c| c.train.distill_structure = s)));
        }
    }
    if matches!(sweep, Sweep::Switch | Sweep::All) {
        for on in [true, false] {
            let name = if on { "switch-on" } else { "switch-off" };
            out.push(("switch", name.into(), Box::new(move |c| c.train.role_switch = on)));
        }
    }
    if matches!(sweep, Sweep::A | Sweep::All) {
        for a in A_SWEEP {
            out.push(("a", format!("a-{a}"), Box::new(move |c| c.train.a = a)));
        }
    }
    out
}

fn ablate(cfg: &RunConfig, sweep: Sweep, repeats: usize) -> Result<()> {
    if repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let root = RunLayout::of(cfg).root.join("ablate");
    cfg.write_echo(&root)?;
    let data = load_split(cfg, SplitRole::Train)?;
    let test = load_split(cfg, SplitRole::Test)?;
    let arms = arms(sweep);
    let mut results = Vec::new();
    for rep in 0..repeats {
        let seed = cfg.train.seed + rep as u64;
        let mut base = cfg.clone();
        base.train.seed = seed;
        let (train, val) = data.split(base.train.val_fraction, seed)?;
        // stage one depends only on the seed, so every arm shares it
        let teacher_path = root.join("stage1").join(format!("rep-{rep}")).join("teacher.json");
        let stage_one = if exists(&teacher_path) {
            ikd_mil::engine::StageOne {
                teacher: Checkpoint::load(&teacher_path)?.to_model()?,
                history: History::default(),
            }
        } else {
            let s = run_stage_one(&base.backbone, &train, Some(&val), &base.settings())?;
            Checkpoint::from_model(&s.teacher, StageTag::Mil).save(&teacher_path)?;
            s.history.write_csv(&teacher_path.with_file_name("history.csv"))?;
            s
        };
        for (sweep_name, arm, apply) in &arms {
            let mut arm_cfg = base.clone();
            apply(&mut arm_cfg);
            arm_cfg.validate()?;
            let run = root.join(sweep_name).join(arm).join(format!("rep-{rep}"));
            let layout = RunLayout::new(run.clone());
            arm_cfg.write_echo(&run)?;
            info!("ablation {sweep_name}/{arm} repeat {rep} (seed {seed})");
            std::fs::create_dir_all(layout.distill())?;
            let out = run_stage_two(&stage_one, &train, &val, &test, &arm_cfg.settings(), Some(&layout.distill()))?;
            let distill_only = History {
                records: out.history.records.iter().filter(|r| r.stage == "distill").cloned().collect(),
            };
            distill_only.write_csv(&layout.distill_history())?;
            std::fs::write(layout.cycles(), serde_json::to_string_pretty(&out.distill.reports)?)?;
            std::fs::create_dir_all(layout.eval())?;
            out.student_test.write_csv(&layout.eval().join("student.csv"))?;
            out.teacher_test.write_csv(&layout.eval().join("teacher.csv"))?;
            let _ = std::fs::remove_file(layout.distill().join(STATE_FILE));
            results.push(ArmResult {
                sweep: sweep_name.to_string(),
                arm: arm.clone(),
                repeat: rep,
                seed,
                best_val_f1: out.distill.best_f1,
                best_cycle: out.distill.best_cycle,
                best_epoch: out.distill.best_epoch,
                teacher_test_f1: out.teacher_test.mean_f1,
                teacher_test_iou: out.teacher_test.mean_iou,
                student_test_f1: out.student_test.mean_f1,
                student_test_iou: out.student_test.mean_iou,
                student_test_hd_pos: out.student_test.mean_hd_pos,
            });
        }
    }
    let summary = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary)?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush()?;
    for sweep_name in ["structure", "switch", "a"] {
        let dir = root.join(sweep_name);
        if dir.is_dir() {
            let series = report::collect_series(std::slice::from_ref(&dir))?;
            report::write_report(&series, &dir.join("report"), &format!("{} ablation", sweep_name))?;
        }
    }
    print_arm_table(&results);
    println!("{}", summary.display());
    Ok(())
}

fn print_arm_table(results: &[ArmResult]) {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in results {
        let k = (r.sweep.clone(), r.arm.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (sweep, arm) in keys {
        let rows: Vec<&ArmResult> = results.iter().filter(|r| r.sweep == sweep && r.arm == arm).collect();
        let f1: Vec<f64> = rows.iter().map(|r| r.student_test_f1).collect();
        let iou: Vec<f64> = rows.iter().map(|r| r.student_test_iou).collect();
        let (mf, sf) = mean_std(&f1);
        let (mi, si) = mean_std(&iou);
        println!(
            "{sweep:>9} {arm:<11} test F1 {:.2} ± {:.2}  IoU {:.2} ± {:.2}  (n={})",
            mf * 100.0,
            sf * 100.0,
            mi * 100.0,
            si * 100.0,
            rows.len()
        );
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}
