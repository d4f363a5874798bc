use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fusion_core::checkpoint::load_checkpoint;
use fusion_core::gradcheck::{finite_diff_check, GradCheckOptions};
use fusion_core::metrics::{MetricRecord, MetricReport};
use fusion_core::training::ablation::{ablation_table, run_ablation};
use fusion_core::training::{synthetic_dataset, train, Dataset, Pair, EARLY_STOP_METRIC};
use fusion_core::{FusionModel, Tensor};

use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::images;

/// Side length of the gradient-check input.
pub const GRADCHECK_SIZE: usize = 8;

fn load_pairs(dir: &Path) -> Result<Dataset> {
    let degraded_dir = dir.join("degraded");
    let clean_dir = dir.join("clean");
    let inputs = images::list_pngs(&degraded_dir)?;
    if inputs.is_empty() {
        return Err(CliError::usage(format!("no PNG files in {}", degraded_dir.display())));
    }
    let mut pairs = Vec::with_capacity(inputs.len());
    let mut missing = Vec::new();
    for path in inputs {
        let name = images::file_name(&path);
        let target = clean_dir.join(&name);
        if !target.is_file() {
            missing.push(name);
            continue;
        }
        let degraded = images::load(&path)?;
        let clean = images::load(&target)?;
        if degraded.shape() != clean.shape() {
            return Err(CliError::usage(format!(
                "{name}: degraded {:?} and clean {:?} differ in size",
                degraded.shape(),
                clean.shape()
            )));
        }
        pairs.push(Pair { name, degraded, clean });
    }
    if !missing.is_empty() {
        return Err(CliError::usage(format!("no clean reference for: {}", missing.join(", "))));
    }
    Ok(Dataset::new(pairs))
}

/// Loads or generates the data and splits off the validation set.
fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let all = match &cfg.data {
        DataSource::Synthetic { count, size } => synthetic_dataset(*count, *size, cfg.seed)?,
        DataSource::Directory(dir) => load_pairs(dir)?,
    };
    if cfg.val_fraction == 0.0 || all.len() < 2 {
        return Ok((all, Dataset::default()));
    }
    Ok(all.split(cfg.val_fraction, cfg.seed)?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    println!("config: {cfg}");
    println!("early stopping on {EARLY_STOP_METRIC} (stands in for LPIPS)");
    let (train_set, val) = datasets(cfg)?;
    let mut model = FusionModel::new(cfg.model_config()?, cfg.seed)?;
    println!(
        "data: {} training / {} validation pairs; model: {} parameters",
        train_set.len(),
        val.len(),
        model.num_parameters()
    );
    let train_cfg = cfg.train_config();
    let report = train(&mut model, &train_set, &val, &train_cfg)?;
    let history = cfg.out.join("history.txt");
    fs::write(&history, report.history.to_text()).map_err(|e| CliError::io(&history, e))?;
    println!("parameters: {}", model.num_parameters());
    println!(
        "best epoch {} of {}: val_l1 {:.6}, val PSNR {} dB{}",
        report.best_epoch,
        report.history.epochs.len(),
        report.best_val_l1,
        report.best_val_psnr,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint: {}", train_cfg.checkpoint.expect("always set").display());
    println!("history: {}", history.display());
    Ok(())
}

/// Writes the echo and the table to `out` as well as `<out dir>/ablation.txt`.
pub fn cmd_ablate(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    cfg.validate()?;
    let stdout_err = |e| CliError::io("<output>", e);
    writeln!(out, "config: {cfg}").map_err(stdout_err)?;
    let (train_set, val) = datasets(cfg)?;
    log::info!("every preset uses model seed {} and shuffle seed {}", cfg.seed, cfg.seed);
    let mut train_cfg = cfg.train_config();
    train_cfg.checkpoint = None;
    let rows = run_ablation(cfg.width()?, cfg.seed, &train_set, &val, &train_cfg);
    let table = ablation_table(&rows);
    write!(out, "{table}").map_err(stdout_err)?;
    let path = cfg.out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
    let failed: Vec<&str> = rows.iter().filter(|r| r.outcome.is_err()).map(|r| r.preset).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("presets failed: {}", failed.join(", "))))
    }
}

pub struct EnhanceArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub resize: Option<u32>,
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let inputs = if args.input.is_dir() {
        images::list_pngs(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        return Err(CliError::usage(format!("input {} not found", args.input.display())));
    };
    if inputs.is_empty() {
        return Err(CliError::usage(format!("no PNG files in {}", args.input.display())));
    }
    if args.resize == Some(0) {
        return Err(CliError::usage("--resize must be positive"));
    }
    fs::create_dir_all(&args.output).map_err(|e| CliError::io(&args.output, e))?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;

    let mut failures = 0;
    for path in &inputs {
        let out = args.output.join(images::file_name(path));
        let result = images::load_rgb(path).and_then(|img| {
            let img = match args.resize {
                Some(s) => images::resize(&img, s),
                None => img,
            };
            let enhanced = model.forward(&images::to_tensor(&img))?;
            images::save(&out, &enhanced)
        });
        match result {
            Ok(()) => println!("{} -> {}", path.display(), out.display()),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures == inputs.len() {
        return Err(CliError::Failed(format!("all {failures} image(s) failed")));
    }
    Ok(())
}

pub struct EvalArgs {
    pub enhanced: PathBuf,
    pub reference: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    for dir in std::iter::once(&args.enhanced).chain(&args.reference) {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} is not a directory", dir.display())));
        }
    }
    let files = images::list_pngs(&args.enhanced)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no PNG files in {}", args.enhanced.display())));
    }
    if let Some(reference) = &args.reference {
        let names: BTreeSet<String> = files.iter().map(|p| images::file_name(p)).collect();
        let refs: BTreeSet<String> = images::list_pngs(reference)?.iter().map(|p| images::file_name(p)).collect();
        let unmatched: Vec<&String> = names.symmetric_difference(&refs).collect();
        if !unmatched.is_empty() {
            for name in &unmatched {
                eprintln!("unmatched: {name}");
            }
            return Err(CliError::usage(format!("{} file name(s) without a counterpart", unmatched.len())));
        }
    }

    let mut report = MetricReport::default();
    for path in &files {
        let name = images::file_name(path);
        let enhanced = images::load(path)?;
        let reference: Option<Tensor> = match &args.reference {
            Some(dir) => Some(images::load(&dir.join(&name))?),
            None => None,
        };
        let record = MetricRecord::evaluate(name.clone(), &enhanced, reference.as_ref())
            .map_err(|e| CliError::usage(format!("{name}: {e}")))?;
        report.push(record);
    }
    let csv = report.to_csv();
    match &args.csv {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| CliError::io(path, e))?;
            println!("metrics: {}", path.display());
        }
        None => print!("{csv}"),
    }
    print!("{}", report.summary_text());
    Ok(())
}

pub struct GradcheckArgs {
    pub preset: String,
    pub ablation: String,
    pub seed: u64,
    pub corrupt: Option<String>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut cfg = RunConfig {
        preset: args.preset.clone(),
        ablation_name: args.ablation.clone(),
        ..RunConfig::default()
    };
    cfg.seed = args.seed;
    let mut model = FusionModel::new(cfg.model_config()?, args.seed)?;
    if let Some(name) = &args.corrupt {
        if model.params().id_of(name).is_none() {
            return Err(CliError::usage(format!("no parameter named `{name}`")));
        }
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(args.seed);
    let shape = [3, GRADCHECK_SIZE, GRADCHECK_SIZE];
    let input = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let target = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
    let opts = GradCheckOptions {
        seed: args.seed,
        corrupt: args.corrupt.clone(),
        ..Default::default()
    };
    let report = finite_diff_check(
        &mut model,
        &input,
        |tape, out| {
            let t = tape.constant(target.clone());
            let d = tape.sub(out, t)?;
            let a = tape.abs(d)?;
            tape.mean(a)
        },
        &opts,
    )?;
    let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
    println!("{:<width$}  {:>4}  {:>2}  {:<9}  status", "parameter", "n", "k", "rel_err");
    for e in &report.entries {
        println!(
            "{:<width$}  {:>4}  {:>2}  {:.3e}  {}",
            e.name,
            e.checked,
            e.skipped,
            e.max_rel_error,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    println!("worst relative error {:.3e} (tolerance {:e})", report.worst(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", report.failures().join(", "))))
    }
}
