use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use redt_core::data::SceneConfig;
use redt_core::losses_metrics::LossForm;

use crate::config::RunConfig;
use crate::dataset::{generate_dataset, read_json, GenOptions};
use crate::error::{AppError, AppResult};
use crate::pipeline::{ablate, eval_run, train};
use crate::report::{parse_range_csv, render_svg, text_table, RangeSeries};

#[derive(Debug, Parser)]
#[command(name = "redt", version, about = "Depth-relative windowed transformer: synthetic data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset's test split.
    Eval(EvalArgs),
    /// Train matched runs with and without the depth-relative bias.
    Ablate(AblateArgs),
    /// Plot per-range RMSE CSVs into an SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training samples.
    #[arg(long, default_value_t = 512)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub test_scenes: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 0.15)]
    pub sparsity: f64,
    /// Recorded in the manifest as the default training-label clip.
    #[arg(long)]
    pub dclip: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop training labels deeper than this many meters.
    #[arg(long)]
    pub dclip: Option<f64>,
    /// Freeze the depth-relative bias at zero.
    #[arg(long)]
    pub no_rel_bias: bool,
    #[arg(long, value_parser = ["printed", "conventional"])]
    pub loss_form: Option<String>,
    /// Optimizer steps.
    #[arg(long)]
    pub iters: Option<u64>,
}

impl Overrides {
    pub fn resolve(&self) -> AppResult<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.dclip.is_some() {
            cfg.d_clip = self.dclip;
        }
        if self.no_rel_bias {
            cfg.rel_bias_enabled = false;
        }
        if let Some(f) = &self.loss_form {
            cfg.loss_form = LossForm::parse(f)?;
        }
        if let Some(n) = self.iters {
            cfg.total_iters = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    /// Print the loss every this many steps (0 for silence).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset to evaluate on; defaults to the one the run was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated range edges in meters.
    #[arg(long)]
    pub ranges: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds; one on/off pair is trained per seed.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-range CSV files, one run each.
    pub inputs: Vec<PathBuf>,
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> AppResult<Vec<T>> {
    s.split(',').map(|v| v.trim().parse().map_err(|_| AppError::Usage(format!("bad {what} `{v}` in `{s}`")))).collect()
}

fn parse_size(s: &str) -> AppResult<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| AppError::Usage(format!("size `{s}` is not HEIGHTxWIDTH")))?;
    let p = |v: &str| v.parse::<usize>().map_err(|_| AppError::Usage(format!("size `{s}` is not HEIGHTxWIDTH")));
    Ok((p(h)?, p(w)?))
}

fn series_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) => format!("{}/{stem}", dir.to_string_lossy()),
        None => stem,
    }
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Gen(a) => {
            let (height, width) = parse_size(&a.size)?;
            let opts = GenOptions {
                scene: SceneConfig { height, width, ..SceneConfig::default() },
                train: a.scenes,
                test: a.test_scenes,
                sparsity: a.sparsity,
                d_clip: a.dclip,
                seed: a.seed,
            };
            let m = generate_dataset(&a.out, &opts)?;
            println!("wrote {} train and {} test samples to {}", m.train.len(), m.test.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.run.resolve()?;
            let every = a.log_every;
            let outcome = train(&cfg, &a.out, |s| {
                if every > 0 && (s.iter % every == 0 || s.iter + 1 == cfg.total_iters) {
                    println!("iter {:>5}  lr {:.2e}  loss {:.4}  grad {:.3}", s.iter, s.lr, s.loss, s.grad_norm);
                }
            })?;
            println!("trained {} steps in {:.1}s; run saved to {}", outcome.log.len(), outcome.seconds, a.out.display());
        }
        Command::Eval(a) => {
            let edges = a.ranges.as_deref().map(|r| parse_list::<f64>(r, "range edge")).transpose()?;
            let r = eval_run(&a.run, a.data.as_deref(), edges.as_deref(), &a.out)?;
            println!("rmse {:.4}  abs_rel {:.4}  d1 {:.4}", r.report.rmse, r.report.abs_rel, r.report.delta1);
            for (k, v) in r.per_map_rmse.iter().enumerate() {
                println!("D_{k} rmse {v:.4}");
            }
        }
        Command::Ablate(a) => {
            let cfg = a.run.resolve()?;
            let seeds = parse_list::<u64>(&a.seeds, "seed")?;
            let (_, v) = ablate(&cfg, &seeds, &a.out, |_, _, _| {})?;
            print!("{}", crate::pipeline::verdict_text(v.as_ref()));
        }
        Command::Report(a) => {
            if a.inputs.is_empty() {
                return Err(AppError::Usage("report needs at least one per-range CSV".into()));
            }
            let series = a
                .inputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                    let buckets = parse_range_csv(&text).map_err(|e| AppError::Usage(format!("{}: {e}", p.display())))?;
                    Ok(RangeSeries { label: series_label(p), buckets })
                })
                .collect::<AppResult<Vec<_>>>()?;
            let svg = render_svg(&series)?;
            fs::write(&a.out, svg).map_err(|e| AppError::io(&a.out, e))?;
            print!("{}", text_table(&series));
        }
    }
    Ok(())
}
