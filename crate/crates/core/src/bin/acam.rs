use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use acam::config::RunConfig;
use acam::data::{read_image, synth_generate, Dataset, Split};
use acam::error::{Error, Result};
use acam::eval::{
    ablate_losses, ablate_num_classifiers, ablate_scales, curve_csv, evaluate, export_heatmap, train_from_config,
};
use acam::multiscale::{read_checkpoint, write_checkpoint, LossTerms, MultiScaleModel, PipelineLog};

/// Attention from dense local classifier activations.
///
/// Built-in defaults are sized for the synthetic benchmark (4 classifiers,
/// 15 epochs, lr 0.01, 64 px). The full-size setting (16 classifiers,
/// 40 epochs, lr 1e-4, 448 px) ships as configs/paper.cfg.
#[derive(Parser, Debug)]
#[command(name = "acam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (images plus train/test manifests).
    Synth {
        /// key = value run config; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all scales on a dataset's train split and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root holding train.csv and test.csv.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV log of the crop chosen for every training image at every scale step.
        #[arg(long)]
        crops: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Writes <PREFIX>.csv (accuracy table) and <PREFIX>.txt (summary).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export per-scale attention heatmaps for one image (2 files per scale).
    Attend {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// P5 or P6 input image.
        #[arg(long)]
        image: PathBuf,
        /// Files are named <PREFIX>_scale<s>_raw.pgm and <PREFIX>_scale<s>_overlay.ppm.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Run an ablation and write its table as CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        which: Ablation,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Classifier counts for `--which nclf`.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        n_list: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    /// Local-only, object-only and combined loss.
    Losses,
    /// Number of local classifiers.
    Nclf,
    /// Number of scales in the ensemble.
    Scales,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    println!("# resolved config");
    print!("{}", cfg.to_text());
    println!("# seed {}", cfg.seed);
    Ok(cfg)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn crops_csv(log: &PipelineLog) -> String {
    let mut out = String::from("image,from_scale,top,left,bottom,right,fallback\n");
    for (i, steps) in log.crops.iter().enumerate() {
        for c in steps {
            let w = c.window;
            out.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                c.from_scale, w.top, w.left, w.bottom, w.right, c.fallback
            ));
        }
    }
    out
}

fn check_model(model: &MultiScaleModel, cfg: &RunConfig) -> Result<()> {
    if model.categories() != cfg.categories {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {} categories, config says {}",
            model.categories(),
            cfg.categories
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = synth_generate(&cfg.synth(), &out)?;
            println!("wrote {} train and {} test images to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::Train { config, data, out, crops } => {
            let cfg = load_config(config.as_deref())?;
            let train = Dataset::open(&data)?.load(Split::Train)?;
            let (model, log) = train_from_config(&cfg, &train, LossTerms::BOTH)?;
            for (s, l) in log.scales.iter().enumerate() {
                let last = l.monitor.last().copied().unwrap_or(f64::NAN);
                println!("scale {}: monitor loss {:.6} -> {:.6}", s + 1, l.monitor[0], last);
            }
            write_checkpoint(&out, &model)?;
            if let Some(path) = crops {
                write_text(&path, &crops_csv(&log))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            config,
            model,
            data,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = read_checkpoint(&model, cfg.settings())?;
            check_model(&model, &cfg)?;
            let test = Dataset::open(&data)?.load(Split::Test)?;
            let out = evaluate(&model, &test, &cfg)?;
            print!("{}", out.report.table_csv());
            println!("mean_iou = {}", out.report.mean_iou);
            println!("random_iou = {}", out.report.random_iou);
            if let Some(secs) = out.report.runtime_secs {
                println!("runtime_secs = {secs:.3}");
            }
            if let Some(prefix) = report {
                out.report.write(&prefix)?;
            }
        }
        Command::Attend {
            config,
            model,
            image,
            out_prefix,
        } => {
            let cfg = load_config(config.as_deref())?;
            let model = read_checkpoint(&model, cfg.settings())?;
            check_model(&model, &cfg)?;
            let img = read_image(&image)?;
            let pred = model.predict(&img)?;
            let stem = out_prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for (s, (out, input)) in pred.per_scale.iter().zip(&pred.inputs).enumerate() {
                let raw = out_prefix.with_file_name(format!("{stem}_scale{}_raw.pgm", s + 1));
                let overlay = out_prefix.with_file_name(format!("{stem}_scale{}_overlay.ppm", s + 1));
                export_heatmap(input, &out.artifacts.map, &raw, &overlay)?;
                println!("scale {}: bbox {:?} -> {} {}", s + 1, out.artifacts.bbox, raw.display(), overlay.display());
            }
            println!("label {} probs {:?}", pred.label, pred.probs);
        }
        Command::Ablate {
            config,
            data,
            which,
            out,
            n_list,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::open(&data)?;
            let (train, test) = (ds.load(Split::Train)?, ds.load(Split::Test)?);
            let csv = match which {
                Ablation::Losses => ablate_losses(&cfg, &train, &test)?.to_csv(),
                Ablation::Nclf => curve_csv("n_classifiers", &ablate_num_classifiers(&cfg, &n_list, &train, &test)?),
                Ablation::Scales => {
                    let (model, _) = train_from_config(&cfg, &train, LossTerms::BOTH)?;
                    curve_csv("scales", &ablate_scales(&model, &test)?)
                }
            };
            print!("{csv}");
            write_text(&out, &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
