//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `IKD_ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::Lcg;
use ikd_mil::config::{parse_config, RunConfig};
use ikd_mil::data::{
    generate_synthetic_dataset, ingest_patch_folder, write_manifest, Dataset, FilterSpec, ManifestRecord, SplitRole,
};
use ikd_mil::engine::{
    distillation_cycle, run_iterative_distillation, run_stage_one, run_stage_two, History, Settings, StageOne,
};
use ikd_mil::losses::{
    kd_loss, kd_loss_grad, naive_mask, soft_dice_grad, soft_dice_loss, structured_kd_loss_grad, student_loss_grad,
    student_total_loss, teacher_loss, teacher_loss_grad, wce_loss, wce_loss_grad, KdStructure, Label, LossConfig,
};
use ikd_mil::metrics::{confusion, evaluate_dataset, f1_score, hausdorff_distance, iou_score};
use ikd_mil::model::{swap_parameters, MultiScaleOutput, SegModel};
use ikd_mil::optim::{Adam, AdamConfig};
use ikd_mil::tensor::ProbMap;

type Check = fn(&mut Ctx) -> Result<String, String>;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let only: Option<Vec<usize>> = std::env::var("IKD_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());

    let checks: [(&str, Check); 9] = [
        ("loss oracles", c1_loss_oracles),
        ("gradient checks", c2_gradients),
        ("frozen teacher and switch invariants", c3_switch_invariants),
        ("metric oracles", c4_metric_oracles),
        ("end-to-end IoU gain", c5_iou_gain),
        ("switch ablation", c6_switch),
        ("structure ablation", c7_structure),
        ("a sweep", c8_a_sweep),
        ("determinism and hygiene", c9_hygiene),
    ];
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            println!("SKIP {n} {name}");
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panic".into())));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {n} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

#[derive(Default)]
struct Ctx {
    desk: Option<Vec<SeedRuns>>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_map(rng: &mut Lcg, n: usize, lo: f64, hi: f64) -> ProbMap<f64> {
    ProbMap::new(n, n, (0..n * n).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

fn random_output(rng: &mut Lcg, n: usize, blocks: usize, lo: f64, hi: f64) -> MultiScaleOutput<f64> {
    MultiScaleOutput {
        per_block: (0..blocks).map(|_| random_map(rng, n, lo, hi)).collect(),
        fused: random_map(rng, n, lo, hi),
    }
}

fn label(rng: &mut Lcg) -> Label {
    if rng.below(2) == 1 {
        Label::Tumor
    } else {
        Label::Normal
    }
}

fn blocks_of(out: &MultiScaleOutput<f64>) -> Vec<Vec<f64>> {
    out.per_block.iter().map(|m| m.values.clone()).collect()
}

fn c1_loss_oracles(_: &mut Ctx) -> Result<String, String> {
    let cfg = LossConfig {
        a: 0.25,
        ..LossConfig::default()
    };
    let mut rng = Lcg(0x5eed);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, lib: f64, oracle: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max((lib - oracle).abs());
    };
    for _ in 0..100 {
        let p = random_map(&mut rng, 8, 0.0, 1.0);
        let t = random_map(&mut rng, 8, 0.0, 1.0);
        note("dice", soft_dice_loss(&p, &t, cfg.dice_epsilon).unwrap(), common::dice(&p.values, &t.values, cfg.dice_epsilon));
    }
    for _ in 0..100 {
        let out = random_output(&mut rng, 8, 3, 0.0, 1.0);
        let y = label(&mut rng);
        let lib = teacher_loss(&out, &naive_mask(y, 8, 8), y, &cfg).unwrap();
        note("teacher", lib, common::teacher(&out.fused.values, &blocks_of(&out), y.is_tumor(), cfg.dice_epsilon));
    }
    for _ in 0..100 {
        let out = random_output(&mut rng, 8, 3, 0.0, 1.0);
        let tf = random_map(&mut rng, 8, 0.0, 1.0);
        let y = label(&mut rng);
        let lib = kd_loss(&out, &tf, y, &cfg).unwrap();
        note("kd", lib, common::kd(&out.fused.values, &blocks_of(&out), &tf.values, y.is_tumor(), cfg.dice_epsilon));
    }
    for _ in 0..100 {
        let s = random_map(&mut rng, 8, 0.0, 1.0);
        let t = random_map(&mut rng, 8, 0.0, 1.0);
        note("wce", wce_loss(&s, &t, &cfg).unwrap(), common::wce(&s.values, &t.values, cfg.log_epsilon));
    }
    for _ in 0..100 {
        let out = random_output(&mut rng, 8, 3, 0.0, 1.0);
        let tf = random_map(&mut rng, 8, 0.0, 1.0);
        let y = label(&mut rng);
        let a = rng.range(0.0, 5.0);
        let c = LossConfig { a, ..cfg.clone() };
        let lib = student_total_loss(&out, &tf, y, &c).unwrap();
        let oracle = common::student_total(
            &out.fused.values,
            &blocks_of(&out),
            &tf.values,
            y.is_tumor(),
            a,
            c.dice_epsilon,
            c.log_epsilon,
        );
        note("student_total", lib, oracle);
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    ensure(max <= 1e-6, || format!("max abs error {max:.3e} > 1e-6: {worst:?}"))?;
    Ok(format!("5 x 100 cases, max abs error {max:.2e}"))
}

/// Flattens an output as fused, then blocks in order.
fn flatten(out: &MultiScaleOutput<f64>) -> Vec<f64> {
    let mut v = out.fused.values.clone();
    for m in &out.per_block {
        v.extend(&m.values);
    }
    v
}

fn unflatten(v: &[f64], n: usize, blocks: usize) -> MultiScaleOutput<f64> {
    let px = n * n;
    let map = |k: usize| ProbMap::new(n, n, v[k * px..(k + 1) * px].to_vec()).unwrap();
    MultiScaleOutput {
        fused: map(0),
        per_block: (1..=blocks).map(map).collect(),
    }
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `x`; the denominator is floored at 1e-8.
fn fd_error(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

fn c2_gradients(_: &mut Ctx) -> Result<String, String> {
    let n = 4;
    let blocks = 3;
    let cfg = LossConfig::default();
    let mut rng = Lcg(0x9ad);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut note = |name: String, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for case in 0..20 {
        let y = if case % 2 == 0 { Label::Tumor } else { Label::Normal };
        let tag = |s: &str| format!("{s}/y={}", y.as_u8());

        let p = random_map(&mut rng, n, 0.05, 0.95);
        let t = random_map(&mut rng, n, 0.05, 0.95);
        let (_, g) = soft_dice_grad(&p, &t, cfg.dice_epsilon).unwrap();
        note("dice".into(), fd_error(&p.values, &g, |v| {
            soft_dice_loss(&ProbMap::new(n, n, v.to_vec()).unwrap(), &t, cfg.dice_epsilon).unwrap()
        }));

        let out = random_output(&mut rng, n, blocks, 0.05, 0.95);
        let x = flatten(&out);
        let naive = naive_mask(y, n, n);
        let (_, g) = teacher_loss_grad(&out, &naive, y, &cfg).unwrap();
        let ga = [g.fused.clone(), g.per_block.concat()].concat();
        note(tag("teacher"), fd_error(&x, &ga, |v| teacher_loss(&unflatten(v, n, blocks), &naive, y, &cfg).unwrap()));

        let teacher = random_output(&mut rng, n, blocks, 0.05, 0.95);
        let (_, g) = kd_loss_grad(&out, &teacher.fused, y, &cfg).unwrap();
        let ga = [g.fused.clone(), g.per_block.concat()].concat();
        note(tag("kd"), fd_error(&x, &ga, |v| kd_loss(&unflatten(v, n, blocks), &teacher.fused, y, &cfg).unwrap()));

        for structure in [KdStructure::A, KdStructure::B] {
            let (_, g) = structured_kd_loss_grad(&out, &teacher, y, structure, &cfg).unwrap();
            let ga = [g.fused.clone(), g.per_block.concat()].concat();
            note(tag(&format!("kd-{structure}")), fd_error(&x, &ga, |v| {
                structured_kd_loss_grad(&unflatten(v, n, blocks), &teacher, y, structure, &cfg).unwrap().0
            }));
        }

        let (_, g) = wce_loss_grad(&out.fused, &teacher.fused, &cfg).unwrap();
        note("wce".into(), fd_error(&out.fused.values, &g, |v| {
            wce_loss(&ProbMap::new(n, n, v.to_vec()).unwrap(), &teacher.fused, &cfg).unwrap()
        }));

        for structure in [KdStructure::Fusion, KdStructure::A, KdStructure::B] {
            let (_, g) = student_loss_grad(&out, &teacher, y, structure, &cfg).unwrap();
            let ga = [g.fused.clone(), g.per_block.concat()].concat();
            note(tag(&format!("student-{structure}")), fd_error(&x, &ga, |v| {
                student_loss_grad(&unflatten(v, n, blocks), &teacher, y, structure, &cfg).unwrap().0.total
            }));
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    ensure(max < 1e-4, || format!("max relative error {max:.3e} >= 1e-4: {worst:?}"))?;
    Ok(format!("{} loss variants x 20 cases, max relative error {max:.2e}", worst.len()))
}

fn tiny_config() -> RunConfig {
    parse_config(&workspace_root().join("configs").join("smoke.toml")).unwrap()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("..").join("..")
}

fn bits(m: &SegModel<f32>) -> Vec<u32> {
    m.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect()
}

fn c3_switch_invariants(_: &mut Ctx) -> Result<String, String> {
    let cfg = tiny_config();
    let s = cfg.settings();
    let data: Dataset<f32> = generate_synthetic_dataset(&cfg.synth).unwrap();
    let (train, val) = data.split(s.train.val_fraction, s.train.seed).unwrap();
    let one = run_stage_one(&cfg.backbone, &train, None, &s).unwrap();

    // manual cycles, checking the teacher at every epoch boundary
    let mut teacher = one.teacher.clone();
    let mut student = one.teacher.clone();
    let mut boundaries = 0;
    let mut epoch = 1;
    for cycle in 1..=3 {
        let frozen = teacher.checksum();
        let mut opt = Adam::new(AdamConfig::new(s.train.learning_rate, s.train.weight_decay));
        for _ in 0..s.train.switch_period_epochs {
            distillation_cycle(&teacher, &mut student, &train, &val, &s, &mut opt, cycle, epoch, 1, &mut History::default())
                .unwrap();
            epoch += 1;
            boundaries += 1;
            ensure(teacher.checksum() == frozen, || format!("teacher moved in cycle {cycle}"))?;
        }
        let (old_t, old_s) = (bits(&teacher), bits(&student));
        swap_parameters(&mut teacher, &mut student).unwrap();
        ensure(bits(&teacher) == old_s && bits(&student) == old_t, || format!("swap after cycle {cycle} inexact"))?;
    }

    let (a0, b0) = (bits(&teacher), bits(&student));
    swap_parameters(&mut teacher, &mut student).unwrap();
    swap_parameters(&mut teacher, &mut student).unwrap();
    ensure(bits(&teacher) == a0 && bits(&student) == b0, || "double swap did not restore".into())?;

    // the same contracts through the scheduler
    let mut sw = s.clone();
    sw.train.total_distill_epochs = 3 * sw.train.switch_period_epochs;
    let out = run_iterative_distillation(&one.teacher, &train, &val, &sw, None, &mut History::default()).unwrap();
    ensure(out.reports[0].teacher_checksum == one.teacher.checksum(), || "first teacher is not stage one".into())?;
    for w in out.reports.windows(2) {
        ensure(w[0].switched && w[1].teacher_checksum == w[0].student_checksum, || {
            format!("cycle {} teacher is not the prior student", w[1].cycle)
        })?;
    }
    let mut fixed = sw.clone();
    fixed.train.role_switch = false;
    let out = run_iterative_distillation(&one.teacher, &train, &val, &fixed, None, &mut History::default()).unwrap();
    ensure(
        out.reports.iter().all(|r| r.teacher_checksum == one.teacher.checksum()) && out.teacher.checksum() == one.teacher.checksum(),
        || "teacher changed without switching".into(),
    )?;
    Ok(format!("{boundaries} epoch boundaries, 3 swaps, double swap and scheduler checks exact"))
}

fn c4_metric_oracles(_: &mut Ctx) -> Result<String, String> {
    let mut rng = Lcg(0x3e7);
    let mut identity_cases = 0;
    let mut worst_identity = 0.0f64;
    for case in 0..200 {
        let h = 1 + rng.below(32);
        let w = 1 + rng.below(32);
        let (dp, dg) = (rng.range(0.0, 0.6), rng.range(0.0, 0.6));
        let pred = rng.mask(h, w, dp);
        let gt = rng.mask(h, w, dg);
        let (tp, fp, fn_) = confusion(&pred, &gt).unwrap();
        ensure((tp, fp, fn_) == common::counts(&pred, &gt), || format!("case {case}: confusion counts differ"))?;
        let f1 = f1_score(&pred, &gt).unwrap();
        let iou = iou_score(&pred, &gt).unwrap();
        ensure(f1 == common::f1(&pred, &gt), || format!("case {case}: f1 {f1} vs {}", common::f1(&pred, &gt)))?;
        ensure(iou == common::iou(&pred, &gt), || format!("case {case}: iou {iou} vs {}", common::iou(&pred, &gt)))?;
        let hd = hausdorff_distance(&pred, &gt).unwrap();
        let brute = common::hausdorff(&pred, &gt);
        ensure(hd == brute, || format!("case {case} ({h}x{w}): hd {hd:?} vs brute force {brute:?}"))?;
        if tp > 0 {
            identity_cases += 1;
            worst_identity = worst_identity.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
        }
    }
    ensure(worst_identity <= 1e-12, || format!("F1/IoU identity off by {worst_identity:.3e}"))?;
    ensure(identity_cases >= 100, || format!("only {identity_cases} non-degenerate cases"))?;
    Ok(format!("200 masks exact, identity on {identity_cases} cases within {worst_identity:.1e}"))
}

#[derive(Debug, Clone)]
struct ArmResult {
    student_f1: f64,
    student_iou: f64,
    best_val_f1: f64,
    cycle_best: Vec<f64>,
}

struct SeedRuns {
    seed: u64,
    teacher_iou: f64,
    arms: BTreeMap<&'static str, ArmResult>,
}

const ARMS: [&str; 5] = ["fusion", "no-switch", "a", "b", "a=5"];

fn arm_settings(base: &Settings, arm: &str) -> Settings {
    let mut s = base.clone();
    match arm {
        "no-switch" => s.train.role_switch = false,
        "a" => s.train.distill_structure = KdStructure::A,
        "b" => s.train.distill_structure = KdStructure::B,
        "a=5" => s.train.a = 5.0,
        _ => {}
    }
    Settings::new(s.train, s.loss, s.metrics)
}

fn desk(ctx: &mut Ctx) -> &[SeedRuns] {
    ctx.desk.get_or_insert_with(|| {
        let cfg = parse_config(&workspace_root().join("configs").join("desk.toml")).unwrap();
        let data: Dataset<f32> = generate_synthetic_dataset(&cfg.synth).unwrap();
        let test: Dataset<f32> = generate_synthetic_dataset(&cfg.test_synth).unwrap();
        (0..3)
            .map(|seed| {
                let t0 = Instant::now();
                let mut base = cfg.settings();
                base.train.seed = seed;
                let (train, val) = data.split(base.train.val_fraction, seed).unwrap();
                let one = run_stage_one(&cfg.backbone, &train, None, &base).unwrap();
                let teacher = evaluate_dataset(&one.teacher, &test, &base.metrics).unwrap();
                let mut arms = BTreeMap::new();
                for arm in ARMS {
                    let s = arm_settings(&base, arm);
                    let two = run_stage_two(&one, &train, &val, &test, &s, None).unwrap();
                    let r = ArmResult {
                        student_f1: two.student_test.mean_f1,
                        student_iou: two.student_test.mean_iou,
                        best_val_f1: two.distill.best_f1,
                        cycle_best: two.distill.reports.iter().map(|r| r.best_f1).collect(),
                    };
                    eprintln!(
                        "  seed {seed} {arm:>9}: test f1 {:.4} iou {:.4} | best val f1 {:.4} | cycles {:?}",
                        r.student_f1,
                        r.student_iou,
                        r.best_val_f1,
                        r.cycle_best.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
                    );
                    arms.insert(arm, r);
                }
                eprintln!(
                    "  seed {seed} teacher: test f1 {:.4} iou {:.4} ({:.0}s)",
                    teacher.mean_f1,
                    teacher.mean_iou,
                    t0.elapsed().as_secs_f64()
                );
                SeedRuns {
                    seed,
                    teacher_iou: teacher.mean_iou,
                    arms,
                }
            })
            .collect()
    })
}

fn mean<'a>(runs: &'a [SeedRuns], f: impl Fn(&'a SeedRuns) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn arm_mean(runs: &[SeedRuns], arm: &str, f: impl Fn(&ArmResult) -> f64) -> f64 {
    mean(runs, |r| f(&r.arms[arm]))
}

fn c5_iou_gain(ctx: &mut Ctx) -> Result<String, String> {
    let runs = desk(ctx);
    let gains: Vec<f64> = runs.iter().map(|r| r.arms["fusion"].student_iou - r.teacher_iou).collect();
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let worst = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let detail = format!(
        "teacher IoU {:.2} -> student {:.2}, gain {:+.2} points (worst repeat {:+.2})",
        100.0 * mean(runs, |r| r.teacher_iou),
        100.0 * arm_mean(runs, "fusion", |a| a.student_iou),
        100.0 * mean_gain,
        100.0 * worst
    );
    ensure(mean_gain >= 0.01 && worst >= -0.005, || detail.clone())?;
    Ok(detail)
}

fn c6_switch(ctx: &mut Ctx) -> Result<String, String> {
    let runs = desk(ctx);
    let on = arm_mean(runs, "fusion", |a| a.student_f1);
    let off = arm_mean(runs, "no-switch", |a| a.student_f1);
    let mut detail = format!("final F1 switch {:.2} vs no switch {:.2}", 100.0 * on, 100.0 * off);
    let mut monotone = Vec::new();
    for r in runs {
        let c = &r.arms["fusion"].cycle_best;
        if c.len() >= 2 {
            monotone.push((r.seed, c[1] - c[0]));
        }
    }
    detail += &format!(
        "; cycle 1 -> 2 best F1 change {}",
        monotone
            .iter()
            .map(|(s, d)| format!("seed {s}: {:+.2}", 100.0 * d))
            .collect::<Vec<_>>()
            .join(", ")
    );
    ensure(on >= off, || detail.clone())?;
    ensure(monotone.iter().all(|(_, d)| *d >= -0.005), || format!("{detail}; cycle improvement below -0.5 points"))?;
    Ok(detail)
}

fn c7_structure(ctx: &mut Ctx) -> Result<String, String> {
    let runs = desk(ctx);
    let f = arm_mean(runs, "fusion", |a| a.best_val_f1);
    let a = arm_mean(runs, "a", |a| a.best_val_f1);
    let b = arm_mean(runs, "b", |a| a.best_val_f1);
    let detail = format!("best val F1 fusion {:.2}, (a) {:.2}, (b) {:.2}", 100.0 * f, 100.0 * a, 100.0 * b);
    ensure(f >= a && f >= b, || detail.clone())?;
    Ok(detail)
}

fn c8_a_sweep(ctx: &mut Ctx) -> Result<String, String> {
    let runs = desk(ctx);
    let low = arm_mean(runs, "fusion", |a| a.student_f1);
    let high = arm_mean(runs, "a=5", |a| a.student_f1);
    let detail = format!("final F1 at a=0.25 {:.2} vs a=5 {:.2}", 100.0 * low, 100.0 * high);
    ensure(low > high, || detail.clone())?;
    Ok(detail)
}

fn metric_csvs(cfg: &RunConfig, dir: &Path) -> Vec<Vec<u8>> {
    let s = cfg.settings();
    let data: Dataset<f32> = generate_synthetic_dataset(&cfg.synth).unwrap();
    let test: Dataset<f32> = generate_synthetic_dataset(&cfg.test_synth).unwrap();
    let (train, val) = data.split(s.train.val_fraction, s.train.seed).unwrap();
    let one: StageOne<f32> = run_stage_one(&cfg.backbone, &train, Some(&val), &s).unwrap();
    let two = run_stage_two(&one, &train, &val, &test, &s, None).unwrap();
    let files = [dir.join("history.csv"), dir.join("teacher.csv"), dir.join("student.csv")];
    two.history.write_csv(&files[0]).unwrap();
    two.teacher_test.write_csv(&files[1]).unwrap();
    two.student_test.write_csv(&files[2]).unwrap();
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

fn compile_probe(dir: &Path, name: &str, body: &str) -> Result<(bool, String), String> {
    let deps = std::env::current_exe().map_err(|e| e.to_string())?.parent().unwrap().to_path_buf();
    let mut rlibs: Vec<PathBuf> = std::fs::read_dir(&deps)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            n.starts_with("libikd_mil-") && n.ends_with(".rlib")
        })
        .collect();
    rlibs.sort_by_key(|p| std::cmp::Reverse(p.metadata().and_then(|m| m.modified()).ok()));
    let src = dir.join(format!("{name}.rs"));
    std::fs::write(&src, body).map_err(|e| e.to_string())?;
    let rustc = std::env::var("RUSTC").unwrap_or_else(|_| "rustc".into());
    let mut last = String::from("no ikd_mil rlib found");
    for rlib in rlibs {
        let out = Command::new(&rustc)
            .args(["--edition", "2021", "--crate-type", "lib", "--emit", "metadata", "--crate-name", name])
            .arg("--out-dir")
            .arg(dir)
            .arg("-L")
            .arg(format!("dependency={}", deps.display()))
            .arg("--extern")
            .arg(format!("ikd_mil={}", rlib.display()))
            .arg(&src)
            .output()
            .map_err(|e| format!("cannot run {rustc}: {e}"))?;
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        if out.status.success() || !stderr.contains("E0460") && !stderr.contains("E0463") && !stderr.contains("E0514") {
            return Ok((out.status.success(), stderr));
        }
        last = stderr;
    }
    Err(last)
}

fn write_png(path: &Path, rgb: impl Fn(u32, u32) -> [u8; 3]) {
    let img = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb(rgb(x, y)));
    img.save(path).unwrap();
}

fn c9_hygiene(_: &mut Ctx) -> Result<String, String> {
    let cfg = tiny_config();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let first = metric_csvs(&cfg, d1.path());
    let second = metric_csvs(&cfg, d2.path());
    ensure(first == second, || "repeated run produced different metric CSVs".into())?;

    let dir = tempfile::tempdir().unwrap();
    let (ok, err) = compile_probe(
        dir.path(),
        "control",
        "pub fn peek(v: &ikd_mil::data::TrainingView<'_, f32>) -> u8 { v.get(0).label.as_u8() }\n",
    )?;
    ensure(ok, || format!("control snippet failed to compile: {err}"))?;
    let (ok, err) = compile_probe(
        dir.path(),
        "leak",
        "pub fn peek(v: &ikd_mil::data::TrainingView<'_, f32>) -> bool { v.get(0).gt_mask.is_some() }\n",
    )?;
    ensure(!ok && err.contains("gt_mask"), || format!("training view exposed gt_mask: {err}"))?;

    let fixture = tempfile::tempdir().unwrap();
    let mut rng = Lcg(7);
    let mut records = Vec::new();
    for i in 0..10 {
        let name = format!("patch_{i:02}.png");
        if i % 3 == 0 && i < 9 {
            write_png(&fixture.path().join(&name), |_, _| [250, 250, 250]);
        } else {
            let noise: Vec<u8> = (0..32 * 32 * 3).map(|_| 60 + rng.below(150) as u8).collect();
            write_png(&fixture.path().join(&name), |x, y| {
                let k = ((y * 32 + x) * 3) as usize;
                [noise[k], noise[k + 1], noise[k + 2]]
            });
        }
        records.push(ManifestRecord {
            path: name,
            label: (i % 2) as u8,
            mask: None,
        });
    }
    write_manifest(&fixture.path().join("manifest.csv"), &records).unwrap();
    let filter = FilterSpec {
        target_size: 16,
        ..FilterSpec::default()
    };
    let (ds, report) = ingest_patch_folder::<f32>(fixture.path(), &filter, &records, SplitRole::Train).unwrap();
    ensure(ds.len() == 7 && report.dropped_background == 3, || format!("kept {} of 10: {report:?}", ds.len()))?;
    Ok(format!(
        "{} identical CSVs, gt_mask unreachable from training view, fixture kept {} of 10",
        first.len(),
        ds.len()
    ))
}
