//! `ssft`: command-line driver for the spectral-spatial fusion classifier.
//!
//! Subcommands: `synth` (generate a synthetic dataset), `train`, `eval`,
//! `ablate` (branch/aux comparison table), `augment` (apply one transform),
//! and `export-features` (per-sample embeddings as CSV). All structured
//! output is JSON (CSV for tables/embeddings); every run echoes its resolved
//! configuration. Exit codes: 0 success, 2 config/validation error,
//! 3 runtime/numeric failure.

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssft_core::augment::{AugmentKind, AugmentSpec};
use ssft_core::checkpoint::load_checkpoint;
use ssft_core::cube::{fit_band_stats, load_cube, normalize, save_cube, BandStats, Split};
use ssft_core::model::{param_count_closed_form, FeatureTap, SsftConfig};
use ssft_core::synth::{synth_dataset, SynthSpec};
use ssft_core::train::{evaluate, export_features_csv, run, LoadedDataset, TrainConfig};
use ssft_core::{Error, Result, SsftParams};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ssft", version, about = "spectral-spatial fusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hyperspectral dataset
    Synth {
        /// Output directory for cubes and manifest.json
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 20)]
        per_class: usize,
        /// Cube extents as H W C
        #[arg(long, num_args = 3, value_names = ["H", "W", "C"], default_values_t = [32, 32, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the dataset described by a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list
        #[arg(long = "seed-list", num_args = 1..)]
        seed_list: Option<Vec<u64>>,
        /// Directory for checkpoints and epoch logs
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Train ablation variants and emit a variant x metric CSV
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Disable one branch (spectral or spatial)
        #[arg(long)]
        disable: Option<String>,
        /// Force auxiliary heads on or off
        #[arg(long)]
        aux: Option<String>,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one augmentation kind with p = 1
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-sample pooled features from one tap as CSV
    ExportFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "fused")]
        tap: String,
        #[arg(long)]
        out: PathBuf,
    },
}

// ---- run configuration file ----

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    /// Path to a dataset manifest (relative paths resolve against it)
    manifest: Option<PathBuf>,
    /// Inline synthetic dataset spec (alternative to `manifest`)
    synth: Option<SynthSpec>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    data: DataSection,
    model: SsftConfig,
    train: TrainConfig,
    augment: Vec<AugmentSpec>,
}

impl RunConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "data section must set either manifest or synth, not both".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "data section must set manifest or synth".into(),
            )),
            _ => {
                self.model.validate()?;
                self.train.validate()?;
                if !self.train.augment.is_empty() && !self.augment.is_empty() {
                    return Err(Error::InvalidConfig(
                        "augmentations belong in the top-level augment list, \
                         not in both augment and train.augment"
                            .into(),
                    ));
                }
                for spec in &self.augment {
                    spec.validate()?;
                }
                Ok(())
            }
        }
    }

    fn load_dataset(&self) -> Result<LoadedDataset> {
        match (&self.data.manifest, &self.data.synth) {
            (Some(path), None) => LoadedDataset::load(path),
            (None, Some(spec)) => {
                let ds = synth_dataset(spec)?;
                LoadedDataset::from_memory(ds.manifest, ds.cubes)
            }
            _ => unreachable!("validated on load"),
        }
    }

    /// Training config with the top-level augment list folded in.
    fn train_config(&self, seed_list: Option<Vec<u64>>) -> TrainConfig {
        let mut tc = self.train.clone();
        if !self.augment.is_empty() {
            tc.augment = self.augment.clone();
        }
        if let Some(seeds) = seed_list {
            tc.seeds = seeds;
        }
        tc
    }
}

// ---- subcommands ----

fn cmd_synth(out: &Path, classes: usize, per_class: usize, size: &[usize], seed: u64) -> Result<()> {
    let spec = SynthSpec {
        classes,
        per_class,
        height: size[0],
        width: size[1],
        bands: size[2],
        seed,
        ..SynthSpec::default()
    };
    let ds = synth_dataset(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (entry, cube) in ds.manifest.samples.iter().zip(&ds.cubes) {
        save_cube(cube, out.join(&entry.path))?;
    }
    let manifest_path = out.join("manifest.json");
    ds.manifest.save(&manifest_path)?;
    println!(
        "{}",
        serde_json::json!({
            "resolved_config": spec,
            "manifest": manifest_path,
            "samples": ds.manifest.samples.len(),
        })
    );
    Ok(())
}

fn cmd_train(config_path: &Path, seed_list: Option<Vec<u64>>, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    let tc = cfg.train_config(seed_list);
    let dataset = cfg.load_dataset()?;
    let report = run(&dataset, &cfg.model, &tc, out)?;
    let resolved = RunConfigFile {
        train: tc,
        ..cfg
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "resolved_config": resolved,
            "report": report,
        }))
        .expect("report serializes")
    );
    Ok(())
}

/// Load a checkpoint plus the band stats it was trained with; older
/// checkpoints without embedded stats fall back to refitting on the train
/// split.
fn checkpoint_with_stats(
    path: &Path,
    dataset: &LoadedDataset,
) -> Result<(SsftParams, SsftConfig, BandStats)> {
    let (params, config, stats) = load_checkpoint(path)?;
    let stats = match stats {
        Some(s) => s,
        None => {
            let train: Vec<_> = dataset
                .manifest
                .indices_of(Split::Train)
                .into_iter()
                .map(|i| &dataset.cubes[i])
                .collect();
            fit_band_stats(&train)?
        }
    };
    Ok((params, config, stats))
}

fn cmd_eval(config_path: &Path, checkpoint: &Path, split: &str, batch: usize) -> Result<()> {
    if batch < 1 {
        return Err(Error::InvalidConfig("batch must be >= 1".into()));
    }
    let split: Split = split.parse()?;
    let cfg = RunConfigFile::load(config_path)?;
    let dataset = cfg.load_dataset()?;
    let (params, model_config, stats) = checkpoint_with_stats(checkpoint, &dataset)?;
    let normed = dataset
        .cubes
        .iter()
        .map(|c| normalize(c, &stats))
        .collect::<Result<Vec<_>>>()?;
    let metric = evaluate(&params, &model_config, &dataset, &normed, split, batch)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "resolved_config": { "model": model_config, "data": cfg.data },
            "checkpoint": checkpoint,
            "split": split,
            "task": dataset.manifest.task,
            "metric": metric,
        }))
        .expect("report serializes")
    );
    Ok(())
}

fn disabled_variant(model: &SsftConfig, branch: &str) -> Result<(String, SsftConfig)> {
    let mut m = model.clone();
    match branch {
        "spectral" => m.branch_mask.spectral = false,
        "spatial" => m.branch_mask.spatial = false,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown branch {:?}; valid branches: spectral, spatial",
                other
            )))
        }
    }
    // a config with one branch already off would end up with none
    m.validate()?;
    Ok((format!("no_{branch}"), m))
}

fn aux_variant(model: &SsftConfig, setting: &str) -> Result<(String, SsftConfig)> {
    let mut m = model.clone();
    match setting {
        "on" => {
            m.aux_heads = true;
            if m.lambda_aux == 0.0 {
                m.lambda_aux = SsftConfig::default().lambda_aux;
            }
        }
        "off" => {
            m.aux_heads = false;
            m.lambda_aux = 0.0;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown aux setting {:?}; valid settings: on, off",
                other
            )))
        }
    }
    m.validate()?;
    Ok((format!("aux_{setting}"), m))
}

fn cmd_ablate(
    config_path: &Path,
    disable: Option<&str>,
    aux: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    let tc = cfg.train_config(None);
    let dataset = cfg.load_dataset()?;

    let mut variants: Vec<(String, SsftConfig)> = vec![("full".into(), cfg.model.clone())];
    match (disable, aux) {
        (Some(branch), None) => variants.push(disabled_variant(&cfg.model, branch)?),
        (None, Some(setting)) => variants.push(aux_variant(&cfg.model, setting)?),
        (Some(branch), Some(setting)) => {
            variants.push(disabled_variant(&cfg.model, branch)?);
            variants.push(aux_variant(&cfg.model, setting)?);
        }
        (None, None) => {
            // full sweep
            variants.push(disabled_variant(&cfg.model, "spectral")?);
            variants.push(disabled_variant(&cfg.model, "spatial")?);
            variants.push(aux_variant(&cfg.model, "off")?);
        }
    }

    let mut rows = vec!["variant,test_mean,test_std,param_count".to_string()];
    for (name, model) in &variants {
        let report = run(&dataset, model, &tc, None)?;
        rows.push(format!(
            "{},{},{},{}",
            name,
            report.test_mean,
            report.test_std,
            param_count_closed_form(model)
        ));
    }
    let csv = rows.join("\n") + "\n";
    match out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_augment(input: &Path, op: &str, seed: u64, out: &Path) -> Result<()> {
    let kind: AugmentKind = op.parse()?;
    let cube = load_cube(input)?;
    let spec = AugmentSpec::new(kind, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = ssft_core::augment::augment(&cube, &spec, &mut rng)?;
    save_cube(&result, out)?;
    println!(
        "{}",
        serde_json::json!({
            "resolved_config": spec,
            "seed": seed,
            "in": input,
            "out": out,
        })
    );
    Ok(())
}

fn cmd_export_features(
    config_path: &Path,
    checkpoint: &Path,
    split: &str,
    tap: &str,
    out: &Path,
) -> Result<()> {
    let split: Split = split.parse()?;
    let tap: FeatureTap = tap.parse()?;
    let cfg = RunConfigFile::load(config_path)?;
    let dataset = cfg.load_dataset()?;
    let (params, model_config, stats) = checkpoint_with_stats(checkpoint, &dataset)?;
    export_features_csv(&dataset, &params, &model_config, &stats, tap, split, out)?;
    println!(
        "{}",
        serde_json::json!({
            "resolved_config": { "model": model_config, "split": split, "tap": tap },
            "rows": dataset.manifest.indices_of(split).len(),
            "out": out,
        })
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => cmd_synth(&out, classes, per_class, &size, seed),
        Command::Train {
            config,
            seed_list,
            out,
        } => cmd_train(&config, seed_list, out.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            split,
            batch,
        } => cmd_eval(&config, &checkpoint, &split, batch),
        Command::Ablate {
            config,
            disable,
            aux,
            out,
        } => cmd_ablate(&config, disable.as_deref(), aux.as_deref(), out.as_deref()),
        Command::Augment {
            input,
            op,
            seed,
            out,
        } => cmd_augment(&input, &op, seed, &out),
        Command::ExportFeatures {
            config,
            checkpoint,
            split,
            tap,
            out,
        } => cmd_export_features(&config, &checkpoint, &split, &tap, &out),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_)
        | Error::InvalidData(_)
        | Error::ShapeMismatch(_)
        | Error::Json { .. } => 2,
        Error::Io { .. } | Error::NonFinite(_) | Error::BackwardTwice | Error::Other(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
