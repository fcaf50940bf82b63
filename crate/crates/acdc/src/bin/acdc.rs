//! Command-line interface: training, evaluation, cost accounting, rank
//! analysis, activation maps, parameter sweeps, and manifest replay.
//!
//! Every command that writes files also writes a `manifest.json` capturing
//! the fully resolved settings; `acdc rerun` replays such a manifest into a
//! fresh output directory and reproduces the same artifacts byte for byte.

use acdc::cam::{cam_all_layers, left_mass_fraction, montage, write_pgm, CamStack};
use acdc::cca::{RankMode, DEFAULT_RANK_THRESHOLD};
use acdc::checkpoint::{load_model, save_model, stored_precision};
use acdc::counts::{analyze, CostModel, FlopConvention};
use acdc::data::{default_mnist_dir, load_mnist, synthetic_blobs, synthetic_digits, Dataset};
use acdc::error::{Error, Result};
use acdc::manifest::{load_manifest, save_manifest, DatasetSpec, ManifestCommand, RunManifest};
use acdc::model::{build_model, Model, ModelConfig};
use acdc::presets::{preset, PRESET_NAMES};
use acdc::rank::{collect_activations, rank_experiment, reports_to_csv};
use acdc::scalar::{Precision, Scalar};
use acdc::sharing::{SchemeKind, SharingScheme};
use acdc::train::{evaluate, metrics_to_csv, train, EpochMetrics, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "acdc",
    version,
    about = "Atom-coefficient decomposed convolution toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report parameter counts for a model under a sharing scheme.
    Count(CountArgs),
    /// Report inference cost in FLOPs for a batch of images.
    Flops(FlopsArgs),
    /// Train a model; writes metrics.csv, model.ckpt, and manifest.json.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on a dataset.
    Eval(EvalArgs),
    /// Cross-layer coefficient rank analysis of a trained checkpoint.
    Rank(RankArgs),
    /// Export class activation maps from every decomposed layer.
    Cam(CamArgs),
    /// Train a grid of (m, s, drop-rate) settings and tabulate accuracy.
    Sweep(SweepArgs),
    /// Replay a recorded manifest into a new output directory.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct ModelSelect {
    /// Built-in model name.
    #[arg(long, value_parser = PRESET_NAMES.to_vec(), conflicts_with = "config")]
    model: Option<String>,
    /// TOML model description file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSelect {
    fn resolve(&self) -> Result<ModelConfig> {
        match (&self.model, &self.config) {
            (Some(name), None) => preset(name),
            (None, Some(path)) => ModelConfig::from_toml(&std::fs::read_to_string(path)?),
            _ => Err(Error::config("give exactly one of --model or --config")),
        }
    }
}

#[derive(Args)]
struct SchemeSelect {
    /// Sharing scheme: baseline, net, block, g-net, g-block, g-layer.
    #[arg(long)]
    scheme: String,
    /// Atoms per substructure (required for every scheme except baseline).
    #[arg(long)]
    m: Option<usize>,
    /// Group size: input channels per group, for grouped schemes.
    #[arg(long)]
    s: Option<usize>,
}

impl SchemeSelect {
    fn resolve(&self) -> Result<SharingScheme> {
        let kind = SchemeKind::from_cli_name(&self.scheme)?;
        if kind == SchemeKind::PerLayer {
            if self.m.is_some() || self.s.is_some() {
                return Err(Error::config("baseline takes neither --m nor --s"));
            }
            return Ok(SharingScheme::baseline());
        }
        let m = self
            .m
            .ok_or_else(|| Error::config(format!("scheme {} requires --m", self.scheme)))?;
        SharingScheme::new(kind, m, self.s)
    }
}

#[derive(Args)]
struct DataSelect {
    /// Dataset: auto picks mnist when IDX files exist, else digits.
    #[arg(long, default_value = "auto", value_parser = ["auto", "mnist", "digits", "blobs"])]
    dataset: String,
    /// Directory holding MNIST IDX files (default: $ACDC_MNIST_DIR or data/mnist).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training images to use.
    #[arg(long, default_value_t = 10000)]
    limit: usize,
    /// Held-out images to use.
    #[arg(long, default_value_t = 2000)]
    test_limit: usize,
}

impl DataSelect {
    fn spec(&self, train: bool, model: &ModelConfig, seed: u64) -> Result<DatasetSpec> {
        let dir = self.data.clone().unwrap_or_else(default_mnist_dir);
        let limit = if train { self.limit } else { self.test_limit };
        let split_seed = seed.wrapping_add(if train { 0 } else { 0x5EED });
        let choice = match self.dataset.as_str() {
            "auto" => {
                if dir.join("train-images-idx3-ubyte").exists() {
                    "mnist"
                } else {
                    "digits"
                }
            }
            other => other,
        };
        Ok(match choice {
            "mnist" => DatasetSpec::Mnist {
                dir: dir.display().to_string(),
                train,
                limit,
            },
            "digits" => DatasetSpec::SyntheticDigits {
                n: limit,
                seed: split_seed,
            },
            "blobs" => {
                let [c, h, w] = model.input;
                if c != 1 || h != w {
                    return Err(Error::config(format!(
                        "blobs need a square single-channel input, model takes {c}x{h}x{w}"
                    )));
                }
                DatasetSpec::SyntheticBlobs {
                    n: limit,
                    size: h,
                    seed: split_seed,
                }
            }
            other => return Err(Error::config(format!("unknown dataset `{other}`"))),
        })
    }
}

fn load_from_spec(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Mnist { dir, train, limit } => {
            Ok(load_mnist(Path::new(dir), *train)?.take(*limit))
        }
        DatasetSpec::SyntheticDigits { n, seed } => Ok(synthetic_digits(*n, *seed)),
        DatasetSpec::SyntheticBlobs { n, size, seed } => Ok(synthetic_blobs(*n, *size, *seed)),
    }
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelSelect,
    #[command(flatten)]
    scheme: SchemeSelect,
    /// Directory for report.csv and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    model: ModelSelect,
    #[command(flatten)]
    scheme: SchemeSelect,
    /// Input shape as CxHxW (default: the model's configured input).
    #[arg(long)]
    input: Option<String>,
    /// Images per batch.
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// FLOPs counted per multiply-accumulate.
    #[arg(long, default_value_t = 1)]
    flops_per_mac: u64,
    /// fused-reconstruct (rebuild kernels once per batch) or two-sublayer.
    #[arg(long, default_value = "fused-reconstruct", value_parser = ["fused-reconstruct", "two-sublayer"])]
    cost_model: String,
    /// Directory for report.csv and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSelect,
    #[command(flatten)]
    scheme: SchemeSelect,
    #[command(flatten)]
    data: DataSelect,
    /// Atom-drop probability in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    precision: String,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Skip the held-out split entirely.
    #[arg(long)]
    no_test: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `acdc train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSelect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Directory for eval.csv and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Checkpoint of a model trained without coefficient sharing.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSelect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Singular-value cutoff for the threshold rank mode.
    #[arg(long, default_value_t = DEFAULT_RANK_THRESHOLD)]
    threshold: f64,
    /// Directory for rank_report.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CamArgs {
    /// Checkpoint of a net-scheme model.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataSelect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the image to explain within the held-out split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Class to explain (default: the image's label).
    #[arg(long)]
    class: Option<usize>,
    /// Keep negative map values instead of clipping them at zero.
    #[arg(long)]
    no_clip: bool,
    /// Directory for PGM maps, metadata, and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelSelect,
    /// Sharing scheme applied to every grid point.
    #[arg(long)]
    scheme: String,
    /// Comma-separated atom counts.
    #[arg(long, value_delimiter = ',')]
    m_grid: Vec<usize>,
    /// Comma-separated group sizes; `none` for ungrouped.
    #[arg(long, value_delimiter = ',')]
    s_grid: Vec<String>,
    /// Comma-separated atom-drop rates.
    #[arg(long, value_delimiter = ',', default_value = "0.0")]
    drop_grid: Vec<f64>,
    #[command(flatten)]
    data: DataSelect,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    precision: String,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Output directory for sweep.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    /// manifest.json from a previous run.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_threads() -> Result<()> {
    if let Some(v) = std::env::var_os("ACDC_THREADS") {
        let v = v.to_string_lossy();
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("ACDC_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::config("ACDC_THREADS must be a positive integer"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run() -> Result<()> {
    init_threads()?;
    match Cli::parse().command {
        Command::Count(a) => {
            let cmd = ManifestCommand::Count {
                model: a.model.resolve()?,
                scheme: a.scheme.resolve()?,
            };
            run_command(&cmd, a.out.as_deref())
        }
        Command::Flops(a) => {
            let model = a.model.resolve()?;
            let input = match &a.input {
                Some(text) => parse_input(text)?,
                None => model.input,
            };
            let cmd = ManifestCommand::Flops {
                scheme: a.scheme.resolve()?,
                model,
                input,
                batch: a.batch,
                convention: FlopConvention {
                    flops_per_mac: a.flops_per_mac,
                    cost_model: match a.cost_model.as_str() {
                        "two-sublayer" => CostModel::TwoSublayer,
                        _ => CostModel::FusedReconstruct,
                    },
                },
            };
            run_command(&cmd, a.out.as_deref())
        }
        Command::Train(a) => {
            let model = a.model.resolve()?;
            let train_cfg = TrainConfig {
                epochs: a.epochs,
                batch: a.batch,
                lr: a.lr,
                momentum: a.momentum,
                weight_decay: a.weight_decay,
                seed: a.seed,
            };
            let cmd = ManifestCommand::Train {
                scheme: a.scheme.resolve()?,
                precision: a.precision.parse().map_err(Error::config)?,
                drop_rate: a.drop_rate,
                train: train_cfg,
                dataset: a.data.spec(true, &model, a.seed)?,
                test_dataset: if a.no_test {
                    None
                } else {
                    Some(a.data.spec(false, &model, a.seed)?)
                },
                model,
            };
            run_command(&cmd, Some(&a.out))
        }
        Command::Eval(a) => {
            let model = checkpoint_config(&a.checkpoint)?;
            let cmd = ManifestCommand::Eval {
                checkpoint: a.checkpoint.display().to_string(),
                dataset: a.data.spec(false, &model, a.seed)?,
                batch: a.batch,
            };
            run_command(&cmd, a.out.as_deref())
        }
        Command::Rank(a) => {
            let model = checkpoint_config(&a.checkpoint)?;
            let cmd = ManifestCommand::Rank {
                checkpoint: a.checkpoint.display().to_string(),
                dataset: a.data.spec(false, &model, a.seed)?,
                batch: a.batch,
                threshold: a.threshold,
            };
            run_command(&cmd, Some(&a.out))
        }
        Command::Cam(a) => {
            let model = checkpoint_config(&a.checkpoint)?;
            let mut data = a.data;
            if data.dataset == "auto" {
                data.dataset = "blobs".into();
            }
            let cmd = ManifestCommand::Cam {
                checkpoint: a.checkpoint.display().to_string(),
                dataset: data.spec(false, &model, a.seed)?,
                index: a.index,
                class: a.class,
                clip_negative: !a.no_clip,
            };
            run_command(&cmd, Some(&a.out))
        }
        Command::Sweep(a) => {
            let model = a.model.resolve()?;
            let kind = SchemeKind::from_cli_name(&a.scheme)?;
            if !kind.is_decomposed() {
                return Err(Error::config("sweep needs a decomposed scheme"));
            }
            let s_grid = if a.s_grid.is_empty() {
                vec![None]
            } else {
                a.s_grid
                    .iter()
                    .map(|t| parse_group_size(t))
                    .collect::<Result<_>>()?
            };
            if a.m_grid.is_empty() {
                return Err(Error::config("sweep needs a non-empty --m-grid"));
            }
            let train_cfg = TrainConfig {
                epochs: a.epochs,
                batch: a.batch,
                lr: a.lr,
                momentum: a.momentum,
                weight_decay: a.weight_decay,
                seed: a.seed,
            };
            let cmd = ManifestCommand::Sweep {
                precision: a.precision.parse().map_err(Error::config)?,
                scheme_kind: kind.cli_name().to_string(),
                m_grid: a.m_grid,
                s_grid,
                drop_grid: a.drop_grid,
                train: train_cfg,
                dataset: a.data.spec(true, &model, a.seed)?,
                test_dataset: a.data.spec(false, &model, a.seed)?,
                model,
            };
            run_command(&cmd, Some(&a.out))
        }
        Command::Rerun(a) => {
            let manifest = load_manifest(&a.manifest)?;
            run_command(&manifest.command, Some(&a.out))
        }
    }
}

fn parse_input(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split('x')
        .map(|p| p.parse().map_err(|_| ()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("input must look like 3x64x64, got `{text}`")))?;
    let [c, h, w]: [usize; 3] = parts
        .try_into()
        .map_err(|_| Error::config(format!("input must have three dimensions, got `{text}`")))?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::config("input dimensions must be positive"));
    }
    Ok([c, h, w])
}

fn parse_group_size(text: &str) -> Result<Option<usize>> {
    if text == "none" {
        return Ok(None);
    }
    text.parse()
        .map(Some)
        .map_err(|_| Error::config(format!("group size must be an integer or `none`, got `{text}`")))
}

fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
    // Only the configuration is needed to resolve dataset shapes up front.
    Ok(load_model::<f64>(path)?.config)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Executes one fully resolved command, writing artifacts and the manifest
/// into `out` when given. Rerun calls this with a manifest's command, so
/// everything here must depend only on the resolved settings.
fn run_command(cmd: &ManifestCommand, out: Option<&Path>) -> Result<()> {
    let outputs = match cmd {
        ManifestCommand::Count { model, scheme } => {
            let report = analyze(model, *scheme, None, 1, FlopConvention::default())?;
            print!("{}", report.table());
            println!("TOTAL_PARAMS {}", report.total_params);
            write_report(out, &report.to_csv())?
        }
        ManifestCommand::Flops {
            model,
            scheme,
            input,
            batch,
            convention,
        } => {
            let report = analyze(model, *scheme, Some(*input), *batch, *convention)?;
            print!("{}", report.table());
            println!("TOTAL_FLOPS {}", report.total_flops);
            write_report(out, &report.to_csv())?
        }
        ManifestCommand::Train { precision, .. } => {
            let out = out.ok_or_else(|| Error::config("train needs --out"))?;
            match precision {
                Precision::F64 => run_train::<f64>(cmd, out)?,
                Precision::F32 => run_train::<f32>(cmd, out)?,
            }
            return Ok(());
        }
        ManifestCommand::Eval {
            checkpoint,
            dataset,
            batch,
        } => {
            let ds = load_from_spec(dataset)?;
            let (loss, accuracy) = match stored_precision(Path::new(checkpoint))? {
                Precision::F64 => {
                    let mut model = load_model::<f64>(Path::new(checkpoint))?;
                    evaluate(&mut model, &ds, *batch)?
                }
                Precision::F32 => {
                    let mut model = load_model::<f32>(Path::new(checkpoint))?;
                    evaluate(&mut model, &ds, *batch)?
                }
            };
            println!("EVAL_LOSS {loss:.6}");
            println!("EVAL_ACCURACY {accuracy:.6}");
            let rows = vec![EpochMetrics {
                epoch: 0,
                split: "test".into(),
                loss,
                accuracy,
            }];
            write_named(out, "eval.csv", metrics_to_csv(&rows).as_bytes())?
        }
        ManifestCommand::Rank {
            checkpoint,
            dataset,
            batch,
            threshold,
        } => {
            let out = out.ok_or_else(|| Error::config("rank needs --out"))?;
            let ds = load_from_spec(dataset)?;
            let modes = [RankMode::Entropy, RankMode::Threshold(*threshold)];
            let reports = match stored_precision(Path::new(checkpoint))? {
                Precision::F64 => {
                    let mut model = load_model::<f64>(Path::new(checkpoint))?;
                    let acts = collect_activations(&mut model, &ds, *batch)?;
                    rank_experiment(&model, &acts, &modes)?
                }
                Precision::F32 => {
                    let mut model = load_model::<f32>(Path::new(checkpoint))?;
                    let acts = collect_activations(&mut model, &ds, *batch)?;
                    rank_experiment(&model, &acts, &modes)?
                }
            };
            println!("RANK_OBSERVATIONS {}", reports[0].n_observations);
            for rep in &reports {
                let tag = match rep.mode {
                    RankMode::Entropy => "ENTROPY".to_string(),
                    RankMode::Threshold(_) => "THRESHOLD".to_string(),
                };
                println!(
                    "AVG_SINGLE_{tag} {:.6}\nAVG_CONCAT_{tag} {:.6}\nRATIO_OF_AVERAGES_{tag} {:.6}",
                    rep.avg_single, rep.avg_concat, rep.ratio_of_averages
                );
            }
            write_named(Some(out), "rank_report.csv", reports_to_csv(&reports).as_bytes())?
        }
        ManifestCommand::Cam {
            checkpoint,
            dataset,
            index,
            class,
            clip_negative,
        } => {
            let out = out.ok_or_else(|| Error::config("cam needs --out"))?;
            run_cam(checkpoint, dataset, *index, *class, *clip_negative, out)?
        }
        ManifestCommand::Sweep { .. } => {
            let out = out.ok_or_else(|| Error::config("sweep needs --out"))?;
            run_sweep(cmd, out)?
        }
    };
    if let Some(dir) = out {
        save_manifest(&RunManifest::new(cmd.clone(), outputs), dir)?;
    }
    Ok(())
}

fn write_report(out: Option<&Path>, csv: &str) -> Result<Vec<String>> {
    write_named(out, "report.csv", csv.as_bytes())
}

fn write_named(out: Option<&Path>, name: &str, bytes: &[u8]) -> Result<Vec<String>> {
    let Some(dir) = out else {
        return Ok(Vec::new());
    };
    ensure_out(dir)?;
    std::fs::write(dir.join(name), bytes)?;
    Ok(vec![name.to_string()])
}

fn run_train<T: Scalar>(cmd: &ManifestCommand, out: &Path) -> Result<()> {
    let ManifestCommand::Train {
        model,
        scheme,
        drop_rate,
        train: train_cfg,
        dataset,
        test_dataset,
        ..
    } = cmd
    else {
        unreachable!("run_train called with a non-train command");
    };
    ensure_out(out)?;
    acdc::decomp::validate_drop_rate(*drop_rate)?;
    let train_ds = load_from_spec(dataset)?;
    let test_ds = test_dataset.as_ref().map(load_from_spec).transpose()?;

    let mut net: Model<T> = build_model(model, *scheme, train_cfg.seed)?;
    net.drop_rate = *drop_rate;

    let rows = train(&mut net, &train_ds, test_ds.as_ref(), train_cfg)?;
    for r in &rows {
        println!(
            "epoch {:>3}  {:<5}  loss {:.4}  accuracy {:.4}",
            r.epoch, r.split, r.loss, r.accuracy
        );
    }
    let last_train = rows.iter().rev().find(|r| r.split == "train");
    if let Some(r) = last_train {
        println!("FINAL_TRAIN_ACCURACY {:.6}", r.accuracy);
    }
    if let Some(r) = rows.iter().rev().find(|r| r.split == "test") {
        println!("FINAL_TEST_ACCURACY {:.6}", r.accuracy);
    }

    std::fs::write(out.join("metrics.csv"), metrics_to_csv(&rows))?;
    save_model(&net, &out.join("model.ckpt"))?;
    let outputs = vec!["metrics.csv".to_string(), "model.ckpt".to_string()];
    save_manifest(&RunManifest::new(cmd.clone(), outputs), out)?;
    Ok(())
}

fn run_cam(
    checkpoint: &str,
    dataset: &DatasetSpec,
    index: usize,
    class: Option<usize>,
    clip_negative: bool,
    out: &Path,
) -> Result<Vec<String>> {
    let ds = load_from_spec(dataset)?;
    if index >= ds.len() {
        return Err(Error::config(format!(
            "image index {index} out of range for {} images",
            ds.len()
        )));
    }
    let class_id = class.unwrap_or_else(|| ds.label(index));
    let image: Vec<f64> = ds.image(index).to_vec();

    let stack = match stored_precision(Path::new(checkpoint))? {
        Precision::F64 => cam_stack::<f64>(checkpoint, &ds, index, class_id, clip_negative)?,
        Precision::F32 => cam_stack::<f32>(checkpoint, &ds, index, class_id, clip_negative)?,
    };

    ensure_out(out)?;
    let mut outputs = Vec::new();
    println!("CAM_LAYERS {}", stack.layers.len());
    for layer in &stack.layers {
        let name = format!("cam_layer{}_class{}.pgm", layer.layer, class_id);
        write_pgm(
            &out.join(&name),
            stack.input_w,
            stack.input_h,
            &layer.upsampled,
        )?;
        println!(
            "CAM_LAYER {} LEFT_MASS {:.6}",
            layer.layer,
            left_mass_fraction(&layer.upsampled, stack.input_h, stack.input_w)
        );
        outputs.push(name);
    }
    let (mw, mh, pixels) = montage(&stack, &image);
    let montage_name = format!("cam_montage_class{class_id}.pgm");
    write_pgm(&out.join(&montage_name), mw, mh, &pixels)?;
    outputs.push(montage_name);

    let meta_name = format!("cam_meta_class{class_id}.json");
    let meta = serde_json::json!({
        "class": class_id,
        "index": index,
        "clip_negative": clip_negative,
        "layers": stack.layers.iter().map(|l| serde_json::json!({
            "layer": l.layer,
            "label": l.label,
            "native_h": l.h,
            "native_w": l.w,
            "truncated": l.truncated,
        })).collect::<Vec<_>>(),
    });
    std::fs::write(
        out.join(&meta_name),
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::io(e.to_string()))?,
    )?;
    outputs.push(meta_name);
    Ok(outputs)
}

fn cam_stack<T: Scalar>(
    checkpoint: &str,
    ds: &Dataset,
    index: usize,
    class_id: usize,
    clip_negative: bool,
) -> Result<CamStack> {
    let mut model = load_model::<T>(Path::new(checkpoint))?;
    let per = ds.c * ds.h * ds.w;
    let data: Vec<T> = ds.image(index).iter().map(|&v| T::from_f64(v)).collect();
    let image = acdc::tensor::Tensor::from_vec(&[ds.c, ds.h, ds.w], data)?;
    debug_assert_eq!(per, image.numel());
    cam_all_layers(&mut model, &image, class_id, clip_negative)
}

fn run_sweep(cmd: &ManifestCommand, out: &Path) -> Result<Vec<String>> {
    let ManifestCommand::Sweep {
        model,
        precision,
        scheme_kind,
        m_grid,
        s_grid,
        drop_grid,
        train: train_cfg,
        dataset,
        test_dataset,
    } = cmd
    else {
        unreachable!("run_sweep called with a non-sweep command");
    };
    let kind = SchemeKind::from_cli_name(scheme_kind)?;

    // Validate the whole grid before any training starts.
    let mut combos = Vec::new();
    for &m in m_grid {
        for &s in s_grid {
            let scheme = SharingScheme::new(kind, m, s)?;
            for &p in drop_grid {
                acdc::decomp::validate_drop_rate(p)?;
                combos.push((scheme, p));
            }
        }
    }
    if combos.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    train_cfg.validate()?;

    let train_ds = load_from_spec(dataset)?;
    let test_ds = load_from_spec(test_dataset)?;

    let mut csv = String::from(
        "m,s,drop_rate,final_train_loss,final_train_accuracy,final_test_loss,final_test_accuracy\n",
    );
    for (scheme, p) in combos {
        let rows = match precision {
            Precision::F64 => {
                let mut net: Model<f64> = build_model(model, scheme, train_cfg.seed)?;
                net.drop_rate = p;
                train(&mut net, &train_ds, Some(&test_ds), train_cfg)?
            }
            Precision::F32 => {
                let mut net: Model<f32> = build_model(model, scheme, train_cfg.seed)?;
                net.drop_rate = p;
                train(&mut net, &train_ds, Some(&test_ds), train_cfg)?
            }
        };
        let tr = rows.iter().rev().find(|r| r.split == "train").unwrap();
        let te = rows.iter().rev().find(|r| r.split == "test").unwrap();
        let s_text = scheme.s.map_or("none".to_string(), |s| s.to_string());
        println!(
            "sweep m={} s={} p={}  train_acc {:.4}  test_acc {:.4}",
            scheme.m, s_text, p, tr.accuracy, te.accuracy
        );
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            scheme.m, s_text, p, tr.loss, tr.accuracy, te.loss, te.accuracy
        ));
    }
    ensure_out(out)?;
    std::fs::write(out.join("sweep.csv"), &csv)?;
    println!("SWEEP_ROWS {}", m_grid.len() * s_grid.len() * drop_grid.len());
    Ok(vec!["sweep.csv".to_string()])
}
