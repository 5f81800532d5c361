//! Command-line front-end: builds dFCN files, generates synthetic cohorts,
//! cross-validates the classifier and inspects trained checkpoints.

mod config;
mod output;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dcacrn::dfcn::{
    build_dfcn, load_dataset, load_timeseries, manifest_class_names, read_dfcn, write_dataset, write_dfcn, DfcnTensor, LabelMap,
    ScanMeta, DATASET_MANIFEST,
};
use dcacrn::experiment::{
    cross_validate, evaluate_metrics, extract_attention, extract_features, feature_ttest, predict, roc_csv, roc_curve,
    synth_generate, SynthSpec,
};
use dcacrn::model::{ModelConfig, ModelParams};
use dcacrn::{Error, ErrorKind, Result};
use serde::Serialize;

pub use config::{resolve, Overrides, Resolved, RunConfig};
pub use output::OutDir;

#[derive(Parser, Debug)]
#[command(name = "dcacrn", version, about = "dFCN attention classifier toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a scan CSV, or every scan of a dataset directory, into .dfcn files
    BuildDfcn {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Write a synthetic labelled dataset with planted correlation blocks
    Synth,
    /// Cross-validate on a dataset and write manifests and checkpoints
    Train,
    /// Score a checkpoint on a dataset
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Export per-channel attention heatmaps for one scan
    Attn {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// A .dfcn file or a scan CSV
        #[arg(long, value_name = "PATH")]
        scan: PathBuf,
    },
    /// Rank learned sequence features by two-sample t-test
    Ttest {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config | ErrorKind::Usage => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match parse_and_validate(&cli).and_then(|cfg| dispatch(&cli.command, cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves the effective configuration for `cli`. The seed is required by
/// the commands that draw random numbers.
pub fn parse_and_validate(cli: &Cli) -> Result<Resolved> {
    resolve(&cli.flags, matches!(cli.command, Command::Synth | Command::Train))
}

pub fn dispatch(command: &Command, cfg: Resolved) -> Result<()> {
    match command {
        Command::BuildDfcn { input } => cmd_build_dfcn(&cfg, input),
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
        Command::Attn { checkpoint, scan } => cmd_attn(&cfg, checkpoint, scan),
        Command::Ttest { checkpoint } => cmd_ttest(&cfg, checkpoint),
    }
}

fn json(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn require_data(cfg: &Resolved) -> Result<&Path> {
    cfg.run
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("key `data`: a dataset directory is required (--data DIR)".into()))
}

fn labels_for(cfg: &Resolved, dir: &Path) -> Result<LabelMap> {
    match &cfg.run.classes {
        Some(names) => LabelMap::new(names.clone()),
        None => LabelMap::new(manifest_class_names(dir)?),
    }
}

fn load_dfcn_dataset(cfg: &Resolved, dir: &Path) -> Result<(Vec<DfcnTensor>, LabelMap)> {
    let labels = labels_for(cfg, dir)?;
    let scans = load_dataset(dir, &labels)?;
    let data = scans
        .iter()
        .map(|ts| build_dfcn(ts, &cfg.run.window))
        .collect::<Result<Vec<_>>>()?;
    Ok((data, labels))
}

/// Model configuration saved next to a checkpoint.
fn checkpoint_model(checkpoint: &Path) -> Result<ModelConfig> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join("model.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Usage(format!("cannot read {} next to the checkpoint: {e}", path.display())))?;
    let model: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

fn check_extents(model: &ModelConfig, scan: &DfcnTensor) -> Result<()> {
    if scan.regions != model.regions || scan.windows != model.windows {
        return Err(Error::Data(format!(
            "scan {} has {} windows of {} regions; the checkpoint expects {} of {}",
            scan.scan_id, scan.windows, scan.regions, model.windows, model.regions
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DfcnEntry {
    subject_id: String,
    scan_id: String,
    file: String,
    windows: usize,
    regions: usize,
    degenerate: bool,
}

fn dfcn_file_name(scan_id: &str) -> String {
    let safe: String = scan_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.dfcn")
}

fn cmd_build_dfcn(cfg: &Resolved, input: &Path) -> Result<()> {
    let series = if input.is_dir() {
        load_dataset(input, &labels_for(cfg, input)?)?
    } else {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("scan").to_string();
        let meta = ScanMeta {
            subject_id: stem.clone(),
            scan_id: stem,
            label: 0,
        };
        vec![load_timeseries(input, &meta)?]
    };
    let out = OutDir::open(&cfg.out)?;
    let mut entries = Vec::with_capacity(series.len());
    for ts in &series {
        let t = build_dfcn(ts, &cfg.run.window)?;
        let file = dfcn_file_name(&t.scan_id);
        write_dfcn(&out.path(&file)?, &t)?;
        println!("{file}: T = {}, N = {}", t.windows, t.regions);
        entries.push(DfcnEntry {
            subject_id: t.subject_id.clone(),
            scan_id: t.scan_id.clone(),
            file,
            windows: t.windows,
            regions: t.regions,
            degenerate: t.degenerate,
        });
    }
    out.write("dfcn.json", json(&serde_json::json!({ "window": cfg.run.window, "scans": entries }))?)?;
    out.commit()?;
    Ok(())
}

fn cmd_synth(cfg: &Resolved) -> Result<()> {
    let spec = match &cfg.run.synth {
        Some(s) => SynthSpec {
            seed: cfg.seed,
            ..s.clone()
        },
        None => SynthSpec::benchmark(cfg.seed),
    };
    let scans = synth_generate(&spec)?;
    let labels = spec.label_map()?;
    let out = OutDir::open(&cfg.out)?;
    write_dataset(out.staging(), &scans, &labels)?;
    out.write("synth.json", json(&spec)?)?;
    out.commit()?;
    println!(
        "wrote {} scans of {} regions to {}",
        scans.len(),
        spec.regions,
        cfg.out.join(DATASET_MANIFEST).display()
    );
    Ok(())
}

fn cmd_train(mut cfg: Resolved) -> Result<()> {
    let dir = require_data(&cfg)?.to_path_buf();
    let (data, labels) = load_dfcn_dataset(&cfg, &dir)?;
    cfg.run.classes = Some(labels.names().to_vec());
    let first = &data[0];
    if let Some(bad) = data.iter().find(|s| s.regions != first.regions || s.windows != first.windows) {
        return Err(Error::Data(format!(
            "scan {} has {} windows of {} regions but scan {} has {} of {}",
            bad.scan_id, bad.windows, bad.regions, first.scan_id, first.windows, first.regions
        )));
    }
    cfg.fit_extent("regions", first.regions)?;
    cfg.fit_extent("windows", first.windows)?;
    cfg.fit_extent("num_classes", labels.len())?;
    cfg.run.model.validate()?;
    if cfg.run.positive_class >= labels.len() {
        return Err(Error::Config(format!(
            "key `positive_class`: {} is not a class index below {}",
            cfg.run.positive_class,
            labels.len()
        )));
    }

    let out = OutDir::open(&cfg.out)?;
    let outcome = cross_validate(&data, &cfg.experiment())?;
    let echo = cfg.echo();
    let (manifest, files) = outcome.artifacts(echo.clone())?;
    for (name, contents) in &files {
        out.write(name, contents)?;
    }
    for r in &outcome.folds {
        r.params.save(&out.path(&format!("fold{}.ckpt", r.fold))?)?;
    }
    out.write("model.json", json(&cfg.run.model)?)?;
    out.write("config.json", json(&echo)?)?;
    out.commit()?;

    let s = &manifest.summary;
    println!(
        "{} folds, {} parameters: accuracy {:.4} ± {:.4}",
        manifest.folds.len(),
        manifest.parameter_count.total,
        s.accuracy.mean,
        s.accuracy.std
    );
    if let Some(auc) = s.auc {
        println!("auc {:.4} ± {:.4}", auc.mean, auc.std);
    }
    Ok(())
}

fn cmd_eval(cfg: &Resolved, checkpoint: &Path) -> Result<()> {
    let model = checkpoint_model(checkpoint)?;
    let params = ModelParams::load(checkpoint, &model)?;
    let dir = require_data(cfg)?;
    let (data, _) = load_dfcn_dataset(cfg, dir)?;
    for s in &data {
        check_extents(&model, s)?;
    }
    let refs: Vec<&DfcnTensor> = data.iter().collect();
    let positive = cfg.run.positive_class;
    let metrics = evaluate_metrics(&params, &refs, positive)?;
    let out = OutDir::open(&cfg.out)?;
    out.write("metrics.json", json(&metrics)?)?;
    if metrics.auc.is_some() {
        let probs = predict(&params, &refs)?;
        let scores: Vec<f64> = probs.iter().map(|p| p[positive]).collect();
        let truth: Vec<usize> = data.iter().map(|s| usize::from(s.label == positive)).collect();
        out.write("roc.csv", roc_csv(&roc_curve(&scores, &truth)?))?;
    }
    out.commit()?;
    println!("accuracy {:.4} on {} scans", metrics.accuracy, data.len());
    if let Some(auc) = metrics.auc {
        println!("auc {auc:.4}");
    }
    Ok(())
}

fn cmd_attn(cfg: &Resolved, checkpoint: &Path, scan: &Path) -> Result<()> {
    let model = checkpoint_model(checkpoint)?;
    if !model.dca_enabled {
        return Err(Error::Usage(format!(
            "{} was trained without the attention layer; there are no attention scores to export",
            checkpoint.display()
        )));
    }
    let params = ModelParams::load(checkpoint, &model)?;
    let (tensor, names) = if scan.extension().is_some_and(|e| e == "dfcn") {
        (read_dfcn(scan)?, None)
    } else {
        let stem = scan.file_stem().and_then(|s| s.to_str()).unwrap_or("scan").to_string();
        let meta = ScanMeta {
            subject_id: stem.clone(),
            scan_id: stem,
            label: 0,
        };
        let ts = load_timeseries(scan, &meta)?;
        (build_dfcn(&ts, &cfg.run.window)?, Some(ts.region_names.clone()))
    };
    check_extents(&model, &tensor)?;
    let scores = extract_attention(&params, &tensor)?;
    let out = OutDir::open(&cfg.out)?;
    let written = scores.export(out.staging(), names.as_deref())?;
    out.commit()?;
    println!("exported {} attention maps for {}", written.len() / 2, tensor.scan_id);
    Ok(())
}

fn cmd_ttest(cfg: &Resolved, checkpoint: &Path) -> Result<()> {
    let model = checkpoint_model(checkpoint)?;
    let params = ModelParams::load(checkpoint, &model)?;
    let dir = require_data(cfg)?;
    let (data, labels) = load_dfcn_dataset(cfg, dir)?;
    for s in &data {
        check_extents(&model, s)?;
    }
    let positive = cfg.run.positive_class;
    if positive == 0 || positive >= labels.len() {
        return Err(Error::Config(format!(
            "key `positive_class`: must name a class other than {} (index 0)",
            labels.name(0)
        )));
    }
    let group = |label: usize| -> Vec<&DfcnTensor> { data.iter().filter(|s| s.label == label).collect() };
    let a = extract_features(&params, &group(0))?;
    let b = extract_features(&params, &group(positive))?;
    let report = feature_ttest(&a, &b)?;
    let out = OutDir::open(&cfg.out)?;
    out.write("ttest.csv", report.to_csv())?;
    out.commit()?;
    let significant = report.features.iter().filter(|f| f.p < 0.05).count();
    println!(
        "{} features, {} with p < 0.05 ({} vs {})",
        report.features.len(),
        significant,
        labels.name(0),
        labels.name(positive)
    );
    Ok(())
}
