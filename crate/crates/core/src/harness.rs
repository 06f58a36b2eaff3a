//! Experiment orchestration: configs, seeded repeats, reports, tables,
//! plots and ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::binary;
use crate::data::{sample_few_shot, Dataset, Split};
use crate::error::{MuseError, Result};
use crate::kb::{ingest_kb, HashingEncoder, KnowledgeBase, RetrievalStrategy, TextEncoder};
use crate::metrics::Metrics;
use crate::model::ModelKind;
use crate::train::{evaluate, train, Optimization, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderChoice {
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to the dataset manifest.
    pub dataset: PathBuf,
    /// Knowledge-base directory; defaults to the one named by the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_base: Option<PathBuf>,
    /// Encoder for raw-text-only knowledge-base categories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderChoice>,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Repeat `i` uses seed `seed + i` for both sampling and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_model() -> ModelKind {
    ModelKind::Muse
}

fn default_shots() -> Vec<usize> {
    vec![4, 8, 16]
}

fn default_repeats() -> usize {
    10
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(dataset: PathBuf) -> Self {
        Self {
            dataset,
            knowledge_base: None,
            encoder: None,
            model: default_model(),
            train: TrainConfig::default(),
            shots: default_shots(),
            repeats: default_repeats(),
            seed: 0,
            output: default_output(),
        }
    }

    /// Parses a config document after applying `key=value` overrides
    /// (dotted keys, JSON values, bare strings allowed).
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value)
            .map_err(|e| MuseError::config(format!("invalid experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let value: Value = binary::read_json(path).map_err(|e| match e {
            MuseError::Json { path, source } => MuseError::config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        Self::from_value(value, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(MuseError::config("shots must be a non-empty list of positive counts"));
        }
        if self.repeats == 0 {
            return Err(MuseError::config("repeats must be at least 1"));
        }
        self.train.validate()
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

/// Sets a dotted key in a JSON object, creating intermediate objects.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| MuseError::config(format!("override {assignment} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(MuseError::config(format!("override key {key:?} is malformed")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(MuseError::config(format!("override {key}: {part} is not inside an object")));
        }
        let map = cur.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cur = map.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Git-style content hash: every input is hashed as `blob <len>\0<bytes>`,
/// then the sorted `(name, blob hash)` list is hashed as a tree.
pub fn input_hash(dataset: &Dataset, kb: Option<&KnowledgeBase>) -> String {
    fn blob(bytes: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(bytes);
        hex(&h.finalize())
    }
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    let manifest = serde_json::to_vec(&dataset.manifest).expect("manifest serialises");
    entries.insert("manifest.json".into(), blob(&manifest));
    for bag in &dataset.bags {
        let bytes: Vec<u8> = bag.features.iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.insert(format!("bags/{}", bag.slide_id), blob(&bytes));
    }
    if let Ok(Some(e)) = dataset.class_embeddings() {
        let bytes: Vec<u8> = e.iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.insert("class_embeddings".into(), blob(&bytes));
    }
    if let Some(kb) = kb {
        for (name, bank) in kb.class_names.iter().zip(&kb.banks) {
            let bytes: Vec<u8> = bank.iter().flat_map(|v| v.to_le_bytes()).collect();
            entries.insert(format!("kb/{name}"), blob(&bytes));
        }
    }
    let mut tree = Sha256::new();
    for (name, hash) in &entries {
        tree.update(format!("{hash} {name}\n").as_bytes());
    }
    hex(&tree.finalize())
}

impl ExperimentConfig {
    /// Whether this config trains with knowledge-base views.
    pub fn needs_kb(&self) -> bool {
        self.model == ModelKind::Muse && self.train.smmo
    }
}

/// Ingests the knowledge base named by the config, or by the manifest.
pub fn load_knowledge_base(config: &ExperimentConfig, dataset: &Dataset) -> Result<KnowledgeBase> {
    let dir = config.knowledge_base.clone().or_else(|| dataset.knowledge_base_dir()).ok_or_else(|| {
        MuseError::config("knowledge-base views are enabled but no knowledge base is configured")
    })?;
    let hashing = HashingEncoder { d: dataset.manifest.d };
    let encoder: Option<&dyn TextEncoder> = match config.encoder {
        Some(EncoderChoice::Hashing) => Some(&hashing),
        None => None,
    };
    ingest_kb(&dir, &dataset.manifest.class_names, dataset.manifest.d, encoder)
}

/// Loads the dataset and, when the model trains with knowledge-base views,
/// the knowledge base.
pub fn load_inputs(config: &ExperimentConfig) -> Result<(Dataset, Option<KnowledgeBase>)> {
    let dataset = Dataset::load(&config.dataset)?;
    let kb = if config.needs_kb() { Some(load_knowledge_base(config, &dataset)?) } else { None };
    Ok((dataset, kb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub optimizer_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatFailure {
    pub repeat: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotReport {
    pub shots: usize,
    pub repeats: Vec<RepeatResult>,
    pub failures: Vec<RepeatFailure>,
    pub acc: Option<Stat>,
    /// Over the repeats where AUC is defined.
    pub auc: Option<Stat>,
    pub f1: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: ModelKind,
    pub results: Vec<ShotReport>,
    pub partial: bool,
    pub config_fingerprint: String,
    pub input_hash: String,
}

impl ShotReport {
    fn summarise(shots: usize, repeats: Vec<RepeatResult>, failures: Vec<RepeatFailure>) -> Self {
        let col = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Vec<f64> {
            repeats.iter().filter_map(|r| f(&r.metrics)).collect()
        };
        Self {
            shots,
            acc: mean_std(&col(&|m| Some(m.acc))),
            auc: mean_std(&col(&|m| m.auc)),
            f1: mean_std(&col(&|m| Some(m.f1))),
            repeats,
            failures,
        }
    }
}

/// Every repeat of every shot count: sample a few-shot subset, train, and
/// score the fixed test split.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    kb: Option<&KnowledgeBase>,
) -> Result<Report> {
    config.validate()?;
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(MuseError::data("the test split is empty"));
    }
    let mut results = Vec::with_capacity(config.shots.len());
    for &k in &config.shots {
        let mut repeats = Vec::with_capacity(config.repeats);
        let mut failures = Vec::new();
        for i in 0..config.repeats {
            let seed = config.seed + i as u64;
            let attempt = (|| -> Result<RepeatResult> {
                let subset = sample_few_shot(&dataset.manifest, k, seed)?;
                let tc = TrainConfig { seed, ..config.train.clone() };
                let out = train(dataset, &subset, kb, config.model, &tc)?;
                let eval = evaluate(&out.state.network, &test)?;
                Ok(RepeatResult {
                    repeat: i,
                    seed,
                    metrics: eval.metrics,
                    best_epoch: out.log.best_epoch,
                    optimizer_steps: out.log.total_steps,
                })
            })();
            match attempt {
                Ok(r) => {
                    log::info!("{} k={k} repeat {i}: acc {:.4}", config.model, r.metrics.acc);
                    repeats.push(r);
                }
                Err(e) if e.is_config() => return Err(e),
                Err(e) => {
                    log::warn!("{} k={k} repeat {i} (seed {seed}) failed: {e}", config.model);
                    failures.push(RepeatFailure { repeat: i, seed, error: e.to_string() });
                }
            }
        }
        results.push(ShotReport::summarise(k, repeats, failures));
    }
    let partial = results.iter().any(|r| !r.failures.is_empty());
    Ok(Report {
        model: config.model,
        results,
        partial,
        config_fingerprint: config.fingerprint(),
        input_hash: input_hash(dataset, kb),
    })
}

fn pct(stat: Option<Stat>) -> String {
    stat.map_or_else(|| "n/a".to_string(), |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std))
}

/// Plain-text table in percent.
pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}{}", report.model, if report.partial { " (partial)" } else { "" });
    let _ = writeln!(out, "{:>5} | {:>7} | {:>15} | {:>15} | {:>15}", "shots", "repeats", "ACC", "AUC", "F1");
    for r in &report.results {
        let _ = writeln!(
            out,
            "{:>5} | {:>7} | {:>15} | {:>15} | {:>15}",
            r.shots,
            r.repeats.len(),
            pct(r.acc),
            pct(r.auc),
            pct(r.f1)
        );
    }
    for r in &report.results {
        for f in &r.failures {
            let _ =
                writeln!(out, "failed: shots {} repeat {} seed {}: {}", r.shots, f.repeat, f.seed, f.error);
        }
    }
    out
}

type Series = (&'static str, plotters::style::RGBColor, fn(&ShotReport) -> Option<Stat>);

/// Metric-vs-shots line plot (ACC, AUC, F1 in percent) as an SVG file.
pub fn plot_report(report: &Report, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| MuseError::io(parent, e))?;
    }
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
        root.fill(&WHITE)?;
        let max_k = report.results.iter().map(|r| r.shots).max().unwrap_or(1) as f64;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{} — metric vs shots", report.model), ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0.0..max_k + 1.0, 0.0..100.0)?;
        chart.configure_mesh().x_desc("shots per class").y_desc("%").draw()?;
        let series: [Series; 3] =
            [("ACC", BLUE, |r| r.acc), ("AUC", RED, |r| r.auc), ("F1", GREEN, |r| r.f1)];
        for (name, color, get) in series {
            let pts: Vec<(f64, f64)> = report
                .results
                .iter()
                .filter_map(|r| get(r).map(|s| (r.shots as f64, 100.0 * s.mean)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| MuseError::internal(format!("plotting {} failed: {e}", path.display())))
}

/// Writes `report.json`, `report.txt` and `metrics_vs_shots.svg` under `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    binary::write_json(&dir.join("report.json"), report)?;
    binary::write_bytes(&dir.join("report.txt"), render_table(report).as_bytes())?;
    plot_report(report, &dir.join("metrics_vs_shots.svg"))
}

/// Rows of Table 2: which components are on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Components {
    #[serde(rename = "bm")]
    Bm,
    #[serde(rename = "bm+ti")]
    BmTi,
    #[serde(rename = "bm+ti+sfse")]
    BmTiSfse,
    #[serde(rename = "bm+ti+smmo")]
    BmTiSmmo,
    #[serde(rename = "full")]
    Full,
}

impl Components {
    pub const ALL: [Components; 5] = [Self::Bm, Self::BmTi, Self::BmTiSfse, Self::BmTiSmmo, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bm => "bm",
            Self::BmTi => "bm+ti",
            Self::BmTiSfse => "bm+ti+sfse",
            Self::BmTiSmmo => "bm+ti+smmo",
            Self::Full => "full",
        }
    }

    /// Model kind plus (sfse, smmo).
    pub fn setting(self) -> (ModelKind, bool, bool) {
        match self {
            Self::Bm => (ModelKind::AttnMil, false, false),
            Self::BmTi => (ModelKind::BmTi, false, false),
            Self::BmTiSfse => (ModelKind::Muse, true, false),
            Self::BmTiSmmo => (ModelKind::Muse, false, true),
            Self::Full => (ModelKind::Muse, true, true),
        }
    }
}

/// Named axes of an ablation grid; each lists the values to sweep. The grid
/// is the Cartesian product of the non-empty axes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub components: Vec<Components>,
    pub retrieval: Vec<RetrievalStrategy>,
    pub optimization: Vec<Optimization>,
    pub m: Vec<usize>,
    pub experts: Vec<usize>,
    pub top_percent: Vec<f64>,
}

pub const M_VALUES: [usize; 3] = [10, 20, 80];
pub const EXPERT_VALUES: [usize; 3] = [4, 8, 16];
pub const TOP_PERCENT_VALUES: [f64; 4] = [10.0, 20.0, 50.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub label: String,
    pub config: ExperimentConfig,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.m.iter().find(|m| !M_VALUES.contains(m)) {
            return Err(MuseError::config(format!("m axis value {m} not in {M_VALUES:?}")));
        }
        if let Some(r) = self.experts.iter().find(|r| !EXPERT_VALUES.contains(r)) {
            return Err(MuseError::config(format!("experts axis value {r} not in {EXPERT_VALUES:?}")));
        }
        if let Some(r) = self.top_percent.iter().find(|r| !TOP_PERCENT_VALUES.contains(r)) {
            return Err(MuseError::config(format!(
                "top_percent axis value {r} not in {TOP_PERCENT_VALUES:?}"
            )));
        }
        if self.components.is_empty()
            && self.retrieval.is_empty()
            && self.optimization.is_empty()
            && self.m.is_empty()
            && self.experts.is_empty()
            && self.top_percent.is_empty()
        {
            return Err(MuseError::config("ablation grid has no axes"));
        }
        Ok(())
    }

    /// One config per grid cell, in a fixed order.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<AblationCell>> {
        self.validate()?;
        base.validate()?;
        type Apply = Box<dyn Fn(&mut ExperimentConfig)>;
        let mut axes: Vec<Vec<(String, Apply)>> = Vec::new();
        if !self.components.is_empty() {
            axes.push(
                self.components
                    .iter()
                    .map(|&c| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| {
                            let (kind, sfse, smmo) = c.setting();
                            cfg.model = kind;
                            cfg.train.sfse = sfse;
                            cfg.train.smmo = smmo;
                        });
                        (format!("components={}", c.name()), f)
                    })
                    .collect(),
            );
        }
        if !self.retrieval.is_empty() {
            axes.push(
                self.retrieval
                    .iter()
                    .map(|&r| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| cfg.train.retrieval = r);
                        let name = serde_json::to_value(r).expect("serialises");
                        (format!("retrieval={}", name.as_str().unwrap_or_default()), f)
                    })
                    .collect(),
            );
        }
        if !self.optimization.is_empty() {
            axes.push(
                self.optimization
                    .iter()
                    .map(|&o| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| cfg.train.optimization = o);
                        let name = serde_json::to_value(o).expect("serialises");
                        (format!("optimization={}", name.as_str().unwrap_or_default()), f)
                    })
                    .collect(),
            );
        }
        if !self.m.is_empty() {
            axes.push(
                self.m
                    .iter()
                    .map(|&m| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| cfg.train.m = m);
                        (format!("m={m}"), f)
                    })
                    .collect(),
            );
        }
        if !self.experts.is_empty() {
            axes.push(
                self.experts
                    .iter()
                    .map(|&r| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| cfg.train.experts = r);
                        (format!("experts={r}"), f)
                    })
                    .collect(),
            );
        }
        if !self.top_percent.is_empty() {
            axes.push(
                self.top_percent
                    .iter()
                    .map(|&r| {
                        let f: Apply = Box::new(move |cfg: &mut ExperimentConfig| cfg.train.top_percent = r);
                        (format!("top_percent={r}"), f)
                    })
                    .collect(),
            );
        }

        let mut cells = vec![(Vec::<String>::new(), base.clone())];
        for axis in &axes {
            let mut next = Vec::with_capacity(cells.len() * axis.len());
            for (labels, cfg) in &cells {
                for (label, apply) in axis {
                    let mut cfg = cfg.clone();
                    apply(&mut cfg);
                    let mut labels = labels.clone();
                    labels.push(label.clone());
                    next.push((labels, cfg));
                }
            }
            cells = next;
        }
        cells
            .into_iter()
            .map(|(labels, config)| {
                config.validate()?;
                Ok(AblationCell { label: labels.join(","), config })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub report: Report,
}

/// Runs every cell of `grid` over `base`. `kb` must be present when any cell
/// trains with knowledge-base views.
pub fn ablate(
    grid: &AblationGrid,
    base: &ExperimentConfig,
    dataset: &Dataset,
    kb: Option<&KnowledgeBase>,
) -> Result<Vec<AblationEntry>> {
    let cells = grid.cells(base)?;
    if kb.is_none() && cells.iter().any(|c| c.config.needs_kb()) {
        return Err(MuseError::config(
            "some cells use knowledge-base views but no knowledge base was loaded",
        ));
    }
    cells
        .into_iter()
        .map(|cell| {
            log::info!("ablation cell {}", cell.label);
            let report = run_experiment(&cell.config, dataset, kb)?;
            Ok(AblationEntry { label: cell.label, report })
        })
        .collect()
}

/// Comparison table: one row per cell and shot count.
pub fn render_ablation(entries: &[AblationEntry]) -> String {
    let width = entries.iter().map(|e| e.label.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ =
        writeln!(out, "{:<width$} | {:>5} | {:>15} | {:>15} | {:>15}", "cell", "shots", "ACC", "AUC", "F1");
    for e in entries {
        for r in &e.report.results {
            let _ = writeln!(
                out,
                "{:<width$} | {:>5} | {:>15} | {:>15} | {:>15}{}",
                e.label,
                r.shots,
                pct(r.acc),
                pct(r.auc),
                pct(r.f1),
                if r.failures.is_empty() { "" } else { " (partial)" }
            );
        }
    }
    out
}

/// JSON Schema for [`ExperimentConfig`].
pub const EXPERIMENT_SCHEMA: &str = include_str!("experiment.schema.json");
