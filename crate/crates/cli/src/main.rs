use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use muse_core::data::binary;
use muse_core::harness::{
    self, ablate, load_inputs, load_knowledge_base, render_ablation, render_table, run_experiment,
    write_report, AblationEntry, AblationGrid, ExperimentConfig,
};
use muse_core::kb::{ingest_kb, HashingEncoder, TextEncoder};
use muse_core::train::{evaluate, train, TrainConfig};
use muse_core::{
    load_checkpoint, sample_few_shot, save_checkpoint, Dataset, MuseError, Report, Split, SyntheticSpec,
};

#[derive(Parser)]
#[command(name = "muse", version, about = "Few-shot slide classification over patch-feature bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, class embeddings and knowledge base.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// JSON synthetic spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override a spec key, e.g. --set d=32.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Ingest a knowledge-base directory and write encoded banks.
    BuildKb {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding <class>.texts.json and/or <class>.bank.bin files.
        #[arg(long)]
        input: PathBuf,
        /// Output directory (defaults to the input directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Encoder for categories that only have raw text.
        #[arg(long, value_parser = ["hashing"])]
        encoder: Option<String>,
    },
    /// Train one model on one few-shot subset and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shots per class (defaults to the first entry of `shots`).
        #[arg(long)]
        shots: Option<usize>,
        /// Output directory for checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a split; never reads the knowledge base.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Write per-slide predictions here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded repeats over every shot count; writes report JSON, table and plot.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run an ablation grid over a base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// JSON object mapping axis names to value lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-render the table and plot of a stored report or ablation.
    Report {
        /// report.json or ablation.json
        #[arg(long)]
        input: PathBuf,
        /// Directory for the rendered files (defaults to the input's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the experiment config JSON schema.
    Schema,
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    MuseError::config(msg).into()
}

fn read_value(path: &Path) -> Result<Value> {
    binary::read_json::<Value>(path).map_err(|e| match e {
        MuseError::Json { path, source } => config_err(format!("{}: {source}", path.display())),
        other => other.into(),
    })
}

fn gen_synthetic(out: &Path, spec: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut value = match spec {
        Some(p) => read_value(p)?,
        None => json!({}),
    };
    for o in overrides {
        harness::apply_override(&mut value, o)?;
    }
    let spec: SyntheticSpec =
        serde_json::from_value(value).map_err(|e| config_err(format!("invalid synthetic spec: {e}")))?;
    let data = muse_core::gen_synthetic(&spec, out)?;
    println!(
        "wrote {} bags, {} classes, knowledge base of {} texts per class to {}",
        data.bags.len(),
        data.manifest.num_classes(),
        spec.texts_per_category,
        out.display()
    );
    Ok(())
}

fn build_kb(manifest: &Path, input: &Path, out: Option<&Path>, encoder: Option<&str>) -> Result<()> {
    let manifest = muse_core::DatasetManifest::load(manifest)?;
    let hashing = HashingEncoder { d: manifest.d };
    let enc: Option<&dyn TextEncoder> = encoder.map(|_| &hashing as &dyn TextEncoder);
    let kb = ingest_kb(input, &manifest.class_names, manifest.d, enc)?;
    let out = out.unwrap_or(input);
    kb.save(out)?;
    for (name, bank) in kb.class_names.iter().zip(&kb.banks) {
        println!("{name}: {} entries", bank.nrows());
    }
    println!("wrote banks to {}", out.display());
    Ok(())
}

fn train_one(config: &Path, overrides: &[String], shots: Option<usize>, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let k = shots.unwrap_or(cfg.shots[0]);
    let (dataset, kb) = load_inputs(&cfg)?;
    let subset = sample_few_shot(&dataset.manifest, k, cfg.seed)?;
    let tc = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let outcome = train(&dataset, &subset, kb.as_ref(), cfg.model, &tc)?;
    save_checkpoint(&outcome.state, &out.join("checkpoint"))?;
    outcome.log.write_jsonl(&out.join("train_log.jsonl"))?;
    binary::write_json(&out.join("subset.json"), &subset)?;
    binary::write_json(&out.join("config.json"), &cfg)?;
    println!(
        "trained {} on {} slides: {} optimizer steps, best epoch {} of {}",
        cfg.model,
        subset.len(),
        outcome.log.total_steps,
        outcome.log.best_epoch,
        outcome.state.epoch
    );
    for w in &outcome.log.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let dataset = Dataset::load(manifest)?;
    if state.class_names != dataset.manifest.class_names {
        return Err(MuseError::data("checkpoint class names differ from the manifest").into());
    }
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let bags = dataset.split(split);
    let e = evaluate(&state.network, &bags)?;
    let auc = e.metrics.auc.map_or("n/a".to_string(), |a| format!("{:.4}", a));
    println!("acc {:.4} auc {auc} f1 {:.4} on {} slides", e.metrics.acc, e.metrics.f1, bags.len());
    if let Some(path) = out {
        let rows: Vec<Value> = e
            .slide_ids
            .iter()
            .zip(&e.predictions)
            .zip(&e.scores)
            .zip(&e.labels)
            .map(|(((id, p), s), l)| json!({"slide_id": id, "label": l, "prediction": p, "scores": s}))
            .collect();
        binary::write_json(path, &json!({"metrics": e.metrics, "predictions": rows}))?;
    }
    Ok(())
}

fn run(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let (dataset, kb) = load_inputs(&cfg)?;
    let report = run_experiment(&cfg, &dataset, kb.as_ref())?;
    write_report(&report, &cfg.output)?;
    binary::write_json(&cfg.output.join("config.json"), &cfg)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn run_ablation(config: &Path, grid: &Path, overrides: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let grid: AblationGrid = serde_json::from_value(read_value(grid)?)
        .map_err(|e| config_err(format!("invalid ablation grid: {e}")))?;
    let cells = grid.cells(&cfg)?;
    let dataset = Dataset::load(&cfg.dataset)?;
    let kb = if cells.iter().any(|c| c.config.needs_kb()) {
        Some(load_knowledge_base(&cfg, &dataset)?)
    } else {
        None
    };
    let entries = ablate(&grid, &cfg, &dataset, kb.as_ref())?;
    for e in &entries {
        write_report(&e.report, &cfg.output.join(e.label.replace([',', '=', '+'], "_")))?;
    }
    binary::write_json(&cfg.output.join("ablation.json"), &entries)?;
    let table = render_ablation(&entries);
    binary::write_bytes(&cfg.output.join("ablation.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn report(input: &Path, out: Option<&Path>) -> Result<()> {
    let value = read_value(input)?;
    let dir =
        out.map(Path::to_path_buf).or_else(|| input.parent().map(Path::to_path_buf)).unwrap_or_default();
    if value.is_array() {
        let entries: Vec<AblationEntry> =
            serde_json::from_value(value).map_err(|e| config_err(format!("not an ablation file: {e}")))?;
        let table = render_ablation(&entries);
        binary::write_bytes(&dir.join("ablation.txt"), table.as_bytes())?;
        print!("{table}");
    } else {
        let report: Report =
            serde_json::from_value(value).map_err(|e| config_err(format!("not a report file: {e}")))?;
        write_report(&report, &dir)?;
        print!("{}", render_table(&report));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { out, spec, overrides } => gen_synthetic(&out, spec.as_deref(), &overrides),
        Command::BuildKb { manifest, input, out, encoder } => {
            build_kb(&manifest, &input, out.as_deref(), encoder.as_deref())
        }
        Command::Train { config, overrides, shots, out } => train_one(&config, &overrides, shots, &out),
        Command::Eval { checkpoint, manifest, split, out } => {
            eval(&checkpoint, &manifest, &split, out.as_deref())
        }
        Command::Run { config, overrides } => run(&config, &overrides),
        Command::Ablate { config, grid, overrides } => run_ablation(&config, &grid, &overrides),
        Command::Report { input, out } => report(&input, out.as_deref()),
        Command::Schema => {
            print!("{}", harness::EXPERIMENT_SCHEMA);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().filter_map(|e| e.downcast_ref::<MuseError>()).any(MuseError::is_config);
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
