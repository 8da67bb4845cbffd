//! Config-driven experiment harness: JSON-declared incremental runs and
//! ablation grids, CSV reports, and deterministic SVG charts.

use crate::condenser::{CondenseConfig, PromptMode, Strategy};
use crate::datagen::{generate_dataset, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::incremental::{average_accuracy, StageReport, StageRunner, TaskSplit, TrainConfig};
use crate::memory::{format_mb, MemoryConfig};
use crate::model::DEFAULT_SHIFT_FOLD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const STAGES_CSV_HEADER: &str = "stage,seen_classes,acc_cnn,acc_nme,memory_mb";

/// Per-class memory budget section of the config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub videos_per_class: u32,
}

impl Default for MemorySection {
    fn default() -> Self {
        MemorySection { videos_per_class: 3 }
    }
}

/// One declarative experiment: dataset, split, training, condensing and
/// memory settings plus the output location and seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: SynthSpec,
    pub split: TaskSplit,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub condense: CondenseConfig,
    #[serde(default)]
    pub memory: MemorySection,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_seed_override()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate(self.data.num_classes)?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.condense.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        Ok(())
    }

    /// `CONDENSA_SEED` (a single seed or a comma-separated list) replaces
    /// the config's seed list when set.
    pub fn apply_seed_override(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("CONDENSA_SEED") {
            let seeds: std::result::Result<Vec<u64>, _> =
                raw.split(',').map(|s| s.trim().parse::<u64>()).collect();
            self.seeds = seeds
                .map_err(|_| Error::Config(format!("CONDENSA_SEED must be comma-separated integers, got {:?}", raw)))?;
            if self.seeds.is_empty() {
                return Err(Error::Config("CONDENSA_SEED is empty".into()));
            }
        }
        Ok(())
    }

    fn memory_config(&self) -> MemoryConfig {
        let frames_per_exemplar = match self.condense.strategy {
            Strategy::All => self.data.frames as u32,
            _ => 1,
        };
        MemoryConfig { frames_per_exemplar, videos_per_class: self.memory.videos_per_class }
    }
}

/// All stage reports of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<StageReport>,
}

impl SeedRun {
    pub fn avg_cnn(&self) -> f64 {
        average_accuracy(&self.reports.iter().map(|r| r.acc_cnn).collect::<Vec<_>>())
    }

    pub fn avg_nme(&self) -> f64 {
        average_accuracy(&self.reports.iter().map(|r| r.acc_nme).collect::<Vec<_>>())
    }
}

/// Run every stage for every seed. Seeds run in parallel; results come back
/// in seed order, so outputs are deterministic.
pub fn run_seeds(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let mut runner = StageRunner::new(
                cfg.data.channels,
                DEFAULT_SHIFT_FOLD,
                cfg.split.clone(),
                cfg.memory_config(),
                seed,
            )?;
            let mut reports = Vec::with_capacity(cfg.split.stages.len());
            for k in 1..=cfg.split.stages.len() {
                reports.push(runner.run_stage(k, dataset, &cfg.train, &cfg.condense)?);
            }
            Ok(SeedRun { seed, reports })
        })
        .collect()
}

fn fmt_acc(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{:.6}", v)
    }
}

/// Sample mean and standard deviation (0 for a single value, NaN-propagating).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn stages_csv(runs: &[SeedRun]) -> String {
    let mut out = String::from(STAGES_CSV_HEADER);
    out.push('\n');
    for run in runs {
        for r in &run.reports {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage,
                r.seen_classes,
                fmt_acc(r.acc_cnn),
                fmt_acc(r.acc_nme),
                format!("{:.6}", r.memory_mb),
            ));
        }
    }
    out
}

pub fn summary_csv(runs: &[SeedRun]) -> String {
    let cnn: Vec<f64> = runs.iter().map(|r| r.avg_cnn()).collect();
    let nme: Vec<f64> = runs.iter().map(|r| r.avg_nme()).collect();
    let (cm, cs) = mean_std(&cnn);
    let (nm, ns) = mean_std(&nme);
    format!(
        "metric,mean,std\navg_acc_cnn,{},{}\navg_acc_nme,{},{}\n",
        fmt_acc(cm),
        fmt_acc(cs),
        fmt_acc(nm),
        fmt_acc(ns)
    )
}

pub fn memory_csv(cfg: &ExperimentConfig) -> String {
    let mem = cfg.memory_config();
    let frames = u64::from(mem.frames_per_exemplar) * u64::from(mem.videos_per_class);
    let (bytes, _) = crate::memory::memory_bytes(
        frames,
        cfg.data.height as u64,
        cfg.data.width as u64,
        cfg.data.channels as u64,
    );
    format!(
        "frames,videos,bytes,mb\n{},{},{},{}\n",
        frames,
        mem.videos_per_class,
        bytes,
        format_mb(bytes)
    )
}

/// Run an experiment end to end and write `stages.csv`, `summary.csv`,
/// `memory.csv` and `accuracy_vs_budget.svg` into its output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    let dataset = generate_dataset(&cfg.data)?;
    let runs = run_seeds(cfg, &dataset)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("stages.csv"), stages_csv(&runs))?;
    std::fs::write(cfg.output_dir.join("summary.csv"), summary_csv(&runs))?;
    std::fs::write(cfg.output_dir.join("memory.csv"), memory_csv(cfg))?;

    // Accuracy against the growing memory budget, averaged over seeds.
    let stages = cfg.split.stages.len();
    let xs: Vec<f64> = (0..stages).map(|i| runs[0].reports[i].memory_mb).collect();
    let cnn: Vec<f64> = (0..stages)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r.reports[i].acc_cnn).collect();
            mean_std(&vals).0
        })
        .collect();
    let mut series = vec![("acc_cnn".to_string(), cnn)];
    let nme: Vec<f64> = (0..stages)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| r.reports[i].acc_nme).collect();
            mean_std(&vals).0
        })
        .collect();
    if nme.iter().all(|v| v.is_finite()) {
        series.push(("acc_nme".to_string(), nme));
    }
    let svg = svg_line_chart("memory_mb", &xs, &series)?;
    std::fs::write(cfg.output_dir.join("accuracy_vs_budget.svg"), svg)?;
    Ok(runs)
}

// ── ablation grids ───────────────────────────────────────────────────

/// Grid axes. Every present axis must be non-empty; the cells are the
/// cartesian product in the declared field order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub strategy: Option<Vec<Strategy>>,
    pub prompt_mode: Option<Vec<PromptMode>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub frames: Option<Vec<usize>>,
    pub videos_per_class: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub base: ExperimentConfig,
    pub axes: AblationAxes,
}

impl AblationGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: AblationGrid =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        grid.base.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut grid = Self::from_json(&text)?;
        grid.base.apply_seed_override()?;
        Ok(grid)
    }
}

/// One grid cell: the axis assignments actually applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub labels: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

fn enumerate_cells(grid: &AblationGrid) -> Result<Vec<AblationCell>> {
    let a = &grid.axes;
    let axes_present = [
        a.strategy.is_some(),
        a.prompt_mode.is_some(),
        a.alpha.is_some(),
        a.beta.is_some(),
        a.gamma.is_some(),
        a.eta.is_some(),
        a.frames.is_some(),
        a.videos_per_class.is_some(),
    ];
    if !axes_present.iter().any(|&p| p) {
        return Err(Error::Domain("ablation grid has no axes".into()));
    }
    let check_nonempty = |name: &str, len: usize| -> Result<()> {
        if len == 0 {
            Err(Error::Domain(format!("ablation axis {} is empty", name)))
        } else {
            Ok(())
        }
    };
    if let Some(v) = &a.strategy {
        check_nonempty("strategy", v.len())?;
    }
    if let Some(v) = &a.prompt_mode {
        check_nonempty("prompt_mode", v.len())?;
    }
    for (name, v) in [("alpha", &a.alpha), ("beta", &a.beta), ("gamma", &a.gamma), ("eta", &a.eta)] {
        if let Some(v) = v {
            check_nonempty(name, v.len())?;
        }
    }
    if let Some(v) = &a.frames {
        check_nonempty("frames", v.len())?;
    }
    if let Some(v) = &a.videos_per_class {
        check_nonempty("videos_per_class", v.len())?;
    }

    let mut cells = vec![AblationCell { labels: Vec::new(), config: grid.base.clone() }];
    let product = |cells: Vec<AblationCell>,
                   name: &str,
                   values: Vec<(String, Box<dyn Fn(&mut ExperimentConfig)>)>|
     -> Vec<AblationCell> {
        let mut out = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for (label, apply) in &values {
                let mut next = cell.clone();
                apply(&mut next.config);
                next.labels.push((name.to_string(), label.clone()));
                out.push(next);
            }
        }
        out
    };

    if let Some(vals) = &a.strategy {
        let values = vals
            .iter()
            .map(|&s| {
                let label = serde_json::to_value(s).unwrap().as_str().unwrap().to_string();
                (label, Box::new(move |c: &mut ExperimentConfig| c.condense.strategy = s) as _)
            })
            .collect();
        cells = product(cells, "strategy", values);
    }
    if let Some(vals) = &a.prompt_mode {
        let values = vals
            .iter()
            .map(|&p| {
                let label = serde_json::to_value(p).unwrap().as_str().unwrap().to_string();
                (label, Box::new(move |c: &mut ExperimentConfig| c.condense.prompt_mode = p) as _)
            })
            .collect();
        cells = product(cells, "prompt_mode", values);
    }
    macro_rules! weight_axis {
        ($field:ident) => {
            if let Some(vals) = &a.$field {
                let values = vals
                    .iter()
                    .map(|&w| {
                        (
                            format!("{}", w),
                            Box::new(move |c: &mut ExperimentConfig| c.condense.loss_weights.$field = w) as _,
                        )
                    })
                    .collect();
                cells = product(cells, stringify!($field), values);
            }
        };
    }
    weight_axis!(alpha);
    weight_axis!(beta);
    weight_axis!(gamma);
    weight_axis!(eta);
    if let Some(vals) = &a.frames {
        let values = vals
            .iter()
            .map(|&t| {
                (format!("{}", t), Box::new(move |c: &mut ExperimentConfig| c.data.frames = t) as _)
            })
            .collect();
        cells = product(cells, "frames", values);
    }
    if let Some(vals) = &a.videos_per_class {
        let values = vals
            .iter()
            .map(|&v| {
                (
                    format!("{}", v),
                    Box::new(move |c: &mut ExperimentConfig| c.memory.videos_per_class = v) as _,
                )
            })
            .collect();
        cells = product(cells, "videos_per_class", values);
    }
    Ok(cells)
}

/// One result row of an ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub labels: Vec<(String, String)>,
    pub cnn_mean: f64,
    pub cnn_std: f64,
    pub nme_mean: f64,
    pub nme_std: f64,
}

/// Evaluate every grid cell: mean ± std of average accuracy over the base
/// config's seeds, one row per cell.
pub fn run_ablation(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let cells = enumerate_cells(grid)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let dataset = generate_dataset(&cell.config.data)?;
        let runs = run_seeds(&cell.config, &dataset)?;
        let cnn: Vec<f64> = runs.iter().map(|r| r.avg_cnn()).collect();
        let nme: Vec<f64> = runs.iter().map(|r| r.avg_nme()).collect();
        let (cm, cs) = mean_std(&cnn);
        let (nm, ns) = mean_std(&nme);
        rows.push(AblationRow {
            labels: cell.labels.clone(),
            cnn_mean: cm,
            cnn_std: cs,
            nme_mean: nm,
            nme_std: ns,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        for (name, _) in &first.labels {
            out.push_str(name);
            out.push(',');
        }
    }
    out.push_str("acc_cnn_mean,acc_cnn_std,acc_nme_mean,acc_nme_std\n");
    for row in rows {
        for (_, v) in &row.labels {
            out.push_str(v);
            out.push(',');
        }
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_acc(row.cnn_mean),
            fmt_acc(row.cnn_std),
            fmt_acc(row.nme_mean),
            fmt_acc(row.nme_std)
        ));
    }
    out
}

/// Run an ablation grid and write `ablation.csv` into the base config's
/// output directory.
pub fn run_ablation_to_dir(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(grid)?;
    std::fs::create_dir_all(&grid.base.output_dir)?;
    std::fs::write(grid.base.output_dir.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}

// ── CSV plotting ─────────────────────────────────────────────────────

/// Parsed numeric CSV.
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Domain("CSV file is empty".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
        .collect();
    Ok(CsvTable { header, rows })
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{}` not found (have {:?})", name, self.header)))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, cells)| {
                let cell = cells.get(idx).map(String::as_str).unwrap_or("");
                cell.parse::<f64>().map_err(|_| {
                    Error::Domain(format!(
                        "non-numeric value {:?} at row {}, column `{}`",
                        cell,
                        row + 2,
                        name
                    ))
                })
            })
            .collect()
    }
}

/// Render a CSV as a line chart: one polyline per y column, axes labeled by
/// column name, byte-deterministic for fixed input.
pub fn emit_plot(csv_path: &Path, x_col: &str, y_cols: &[String], out_svg: &Path) -> Result<()> {
    let table = parse_csv(&std::fs::read_to_string(csv_path)?)?;
    let xs = table.column(x_col)?;
    let mut series = Vec::new();
    for y in y_cols {
        series.push((y.clone(), table.column(y)?));
    }
    let svg = svg_line_chart(x_col, &xs, &series)?;
    if let Some(parent) = out_svg.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_svg, svg)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt_tick(v: f64) -> String {
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Self-contained SVG line chart over shared x values.
pub fn svg_line_chart(x_label: &str, xs: &[f64], series: &[(String, Vec<f64>)]) -> Result<String> {
    if xs.is_empty() || series.is_empty() {
        return Err(Error::Domain("plot needs at least one point and one series".into()));
    }
    for (name, ys) in series {
        if ys.len() != xs.len() {
            return Err(Error::Dim(format!(
                "series {} has {} points, x has {}",
                name,
                ys.len(),
                xs.len()
            )));
        }
        if ys.iter().chain(xs).any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("series {} contains non-finite values", name)));
        }
    }
    let (width, height) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 60.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in xs {
        x_min = x_min.min(v);
        x_max = x_max.max(v);
    }
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, ys) in series {
        for &v in ys {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |v: f64| ml + (v - x_min) / (x_max - x_min) * pw;
    let sy = |v: f64| mt + ph - (v - y_min) / (y_max - y_min) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = width,
        h = height
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        ml, mt + ph, ml + pw, mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        ml, mt, ml, mt + ph
    ));
    // ticks
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * f64::from(i) / 4.0;
        let px = sx(fx);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            px, mt + ph, px, mt + ph + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            px, mt + ph + 20.0, fmt_tick(fx)
        ));
        let fy = y_min + (y_max - y_min) * f64::from(i) / 4.0;
        let py = sy(fy);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            ml - 5.0, py, ml, py
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            ml - 8.0, py + 4.0, fmt_tick(fy)
        ));
    }
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        height - 15.0,
        x_label
    ));
    let y_label = series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ");
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    ));
    // series polylines and legend
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"{}\">{}</text>\n",
            ml + pw - 120.0,
            mt + 16.0 * (i as f64 + 1.0),
            color,
            name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
