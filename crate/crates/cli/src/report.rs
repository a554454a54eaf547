//! Best-per-period curves with mean ± std error bars across repeats.

use anyhow::{bail, Context, Result};
use ikd_mil::engine::{EpochRecord, History};
use plotters::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One curve: a named arm and the distillation histories of its repeats.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub repeats: Vec<Vec<EpochRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub series: String,
    pub cycle: usize,
    pub epoch: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub repeats: usize,
}

fn history_of(run: &Path) -> Option<PathBuf> {
    let p = run.join("distill").join("history.csv");
    p.is_file().then_some(p)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn load(path: &Path) -> Result<Vec<EpochRecord>> {
    let h = History::read_csv(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(h.records.into_iter().filter(|r| r.stage == "distill").collect())
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Collects series from run directories or ablation directories. A run
/// directory holds `distill/history.csv`; an ablation directory holds one
/// subdirectory per arm, each with `rep-*` run directories.
pub fn collect_series(inputs: &[PathBuf]) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    for input in inputs {
        if let Some(h) = history_of(input) {
            series.push(Series {
                name: name_of(input),
                repeats: vec![load(&h)?],
            });
            continue;
        }
        if !input.is_dir() {
            bail!("{} is not a run or ablation directory", input.display());
        }
        for arm in sorted_subdirs(input)? {
            let mut repeats = Vec::new();
            for rep in sorted_subdirs(&arm)? {
                if let Some(h) = history_of(&rep) {
                    repeats.push(load(&h)?);
                }
            }
            if !repeats.is_empty() {
                series.push(Series {
                    name: name_of(&arm),
                    repeats,
                });
            }
        }
    }
    if series.is_empty() {
        bail!(
            "no distillation histories found under {}; run `ikd-mil distill` or `ikd-mil ablate` first",
            inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        );
    }
    Ok(series)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Best validation F1/IoU of every switch period (cycle), averaged over
/// repeats. Cycles missing from some repeat average over those present.
pub fn curve(series: &Series) -> Vec<CurvePoint> {
    // cycle -> per repeat (best f1, iou at that epoch, last epoch)
    let mut per_cycle: BTreeMap<usize, Vec<(f64, f64, usize)>> = BTreeMap::new();
    for rep in &series.repeats {
        let mut best: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in rep {
            let (Some(f1), Some(iou)) = (r.val_f1, r.val_iou) else { continue };
            let e = best.entry(r.cycle).or_insert((f64::NEG_INFINITY, 0.0, 0));
            if f1 > e.0 {
                e.0 = f1;
                e.1 = iou;
            }
            e.2 = e.2.max(r.epoch);
        }
        for (c, v) in best {
            per_cycle.entry(c).or_default().push(v);
        }
    }
    per_cycle
        .into_iter()
        .map(|(cycle, v)| {
            let (mean_f1, std_f1) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
            let (mean_iou, std_iou) = mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>());
            CurvePoint {
                series: series.name.clone(),
                cycle,
                epoch: v.iter().map(|x| x.2).max().unwrap_or(0),
                mean_f1,
                std_f1,
                mean_iou,
                std_iou,
                repeats: v.len(),
            }
        })
        .collect()
}

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

/// Draws one SVG per metric and writes the plotted points as CSV.
pub fn write_report(series: &[Series], out_dir: &Path, title: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let curves: Vec<Vec<CurvePoint>> = series.iter().map(curve).collect();
    let csv_path = out_dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for p in curves.iter().flatten() {
        w.serialize(p)?;
    }
    w.flush()?;
    let mut written = vec![csv_path];
    for metric in ["f1", "iou"] {
        let path = out_dir.join(format!("best_{metric}.svg"));
        plot(&curves, &path, title, metric)?;
        written.push(path);
    }
    Ok(written)
}

fn plot(curves: &[Vec<CurvePoint>], path: &Path, title: &str, metric: &str) -> Result<()> {
    let get = |p: &CurvePoint| if metric == "f1" { (p.mean_f1, p.std_f1) } else { (p.mean_iou, p.std_iou) };
    let pts = || curves.iter().flatten();
    let x_max = pts().map(|p| p.epoch).max().unwrap_or(1).max(1) as f64;
    let y_lo = pts().map(|p| get(p).0 - get(p).1).fold(f64::INFINITY, f64::min);
    let y_hi = pts().map(|p| get(p).0 + get(p).1).fold(f64::NEG_INFINITY, f64::max);
    let (y_lo, y_hi) = if y_lo.is_finite() { (y_lo, y_hi) } else { (0.0, 1.0) };
    let pad = ((y_hi - y_lo) * 0.1).max(0.01);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max * 1.05, (y_lo - pad).max(0.0)..(y_hi + pad).min(1.0))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(format!("best validation {} per period", metric.to_uppercase()))
        .draw()?;
    for (i, c) in curves.iter().enumerate() {
        let Some(first) = c.first() else { continue };
        let color = COLORS[i % COLORS.len()];
        let xy: Vec<(f64, f64)> = c.iter().map(|p| (p.epoch as f64, get(p).0)).collect();
        chart
            .draw_series(LineSeries::new(xy, color.stroke_width(2)))?
            .label(first.series.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart.draw_series(c.iter().map(|p| {
            let (m, s) = get(p);
            ErrorBar::new_vertical(p.epoch as f64, m - s, m, m + s, color.filled(), 8)
        }))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()?;
    root.present()?;
    Ok(())
}
