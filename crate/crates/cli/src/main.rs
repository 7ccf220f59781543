use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use vspcn::ablation::{parse_rows, run_row, standard_rows, to_csv, TauChoice};
use vspcn::attributes::load_attribute_vectors;
use vspcn::backbone::attention_csv;
use vspcn::checkpoint::Checkpoint;
use vspcn::config::{seed_from_env, RunConfig, KEYS};
use vspcn::data::{synth_gzsl_dataset, GzslDataset, RenderShape, Sample};
use vspcn::eval::{seen_train_accuracy, sweep_table, tau_grid, EvalReport, ScoreTable};
use vspcn::model::Vspcn;
use vspcn::train::{resume, train, TrainFailure};
use vspcn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vspcn",
    version,
    about = "Train and evaluate VSPCN on synthetic GZSL data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Attribute vectors (`name v1 .. vD` per line) replacing the generated
        /// ones; rows are scaled to unit norm.
        #[arg(long)]
        attributes: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.vspc and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Continue from this checkpoint for `epochs` more epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at the configured τ.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate over a grid of τ values.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Train and evaluate one model per toggle configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Extra rows, one `name: component ...` per line.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Skip the eight built-in rows.
        #[arg(long)]
        no_standard: bool,
        /// Report each row at its best-H τ over the grid instead of the fixed τ.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Compare tape gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Check this model instead of a fresh initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Training samples in the checked batch.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Element-wise relative error bound; exit status 1 when exceeded.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Dump every attention matrix of one test image as CSV.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test split to draw the image from.
        #[arg(long, value_parser = ["seen", "unseen"], default_value = "seen")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config file and VSPCN_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    keys: KeyFlags,
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    tau_min: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    tau_max: f64,
    #[arg(long, default_value_t = 41)]
    points: usize,
}

impl GridArgs {
    fn grid(&self) -> Vec<f64> {
        tau_grid(self.tau_min, self.tau_max, self.points)
    }
}

/// One `--key value` flag per config key (seed has its own flag).
#[derive(Default)]
struct KeyFlags(Vec<(&'static str, String)>);

fn mirrored_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().copied().filter(|k| *k != "seed")
}

impl FromArgMatches for KeyFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let pairs = mirrored_keys()
            .filter_map(|k| m.get_one::<String>(k).map(|v| (k, v.clone())))
            .collect();
        Ok(KeyFlags(pairs))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for KeyFlags {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.next_help_heading("Config keys");
        mirrored_keys().fold(cmd, |cmd, k| {
            let mut arg = Arg::new(k)
                .long(k)
                .value_name("VALUE")
                .allow_negative_numbers(true);
            if k.contains('_') {
                arg = arg.visible_alias(k.replace('_', "-"));
            }
            cmd.arg(arg)
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl Common {
    /// Defaults (or `base`) < config file < VSPCN_SEED < flags.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = seed_from_env()? {
            cfg.seed = seed;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for (k, v) in &self.keys.0 {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_file(name)?;
        std::fs::write(&path, contents).map_err(|e| io(&path, e))?;
        Ok(path)
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_data(arg: &DataArg, cfg: &RunConfig) -> Result<GzslDataset> {
    match &arg.data {
        Some(path) => GzslDataset::load(path),
        None => synth_gzsl_dataset(&cfg.data, RenderShape::for_model(&cfg.model), cfg.seed),
    }
}

/// Checkpoint plus the config it runs under and the data it runs on.
fn load_model(common: &Common, data: &DataArg, path: &Path) -> Result<(Vspcn, GzslDataset)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = common.resolve(ckpt.model.config.clone())?;
    let data = load_data(data, &cfg)?;
    ckpt.check_against(&cfg, &data)?;
    let model = Vspcn {
        config: cfg,
        params: ckpt.model.params,
    };
    model.check_dataset(&data)?;
    Ok((model, data))
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::GenData { common, attributes } => {
            let cfg = common.resolve(RunConfig::default())?;
            let mut data = load_data(&DataArg { data: None }, &cfg)?;
            if let Some(path) = attributes {
                data.attributes =
                    load_attribute_vectors(&path, (cfg.data.n_attr, cfg.model.d_model))?
                        .row_normalized();
            }
            let path = common.out_file("dataset.vspd")?;
            data.save(&path)?;
            println!(
                "wrote {} ({} train, {} test seen, {} test unseen)",
                path.display(),
                data.train.len(),
                data.test_seen.len(),
                data.test_unseen.len()
            );
        }
        Cmd::Train {
            common,
            data,
            resume: from,
        } => {
            let (cfg, outcome) = match from {
                Some(path) => {
                    let mut ckpt = Checkpoint::load(&path)?;
                    let cfg = common.resolve(ckpt.model.config.clone())?;
                    let dataset = load_data(&data, &cfg)?;
                    ckpt.check_against(&cfg, &dataset)?;
                    ckpt.model.config = cfg.clone();
                    let epochs = cfg.optim.epochs;
                    (cfg, resume(ckpt, &dataset, epochs).map(|o| (o, dataset)))
                }
                None => {
                    let cfg = common.resolve(RunConfig::default())?;
                    let dataset = load_data(&data, &cfg)?;
                    (cfg.clone(), train(&cfg, &dataset).map(|o| (o, dataset)))
                }
            };
            let (outcome, dataset) = match outcome {
                Ok(x) => x,
                Err(failure) => return Err(report_failure(&common, failure)),
            };
            common.write("train_log.csv", &outcome.log)?;
            let path = common.out_file("checkpoint.vspc")?;
            outcome.checkpoint.save(&path)?;
            let acc = seen_train_accuracy(&outcome.checkpoint.model, &dataset)?;
            match outcome.final_loss {
                Some(l) => println!("epochs {} final loss {l:.6}", outcome.checkpoint.epoch),
                None => println!("epochs {} (no steps)", outcome.checkpoint.epoch),
            }
            println!("seen train accuracy {acc:.2}%");
            println!("wrote {} (seed {})", path.display(), cfg.seed);
        }
        Cmd::Eval {
            common,
            data,
            checkpoint,
        } => {
            let (model, data) = load_model(&common, &data, &checkpoint)?;
            let report = ScoreTable::compute(&model, &data)?
                .report(model.config.tau, model.config.averaging)?;
            common.write(
                "eval.csv",
                format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
            )?;
            common.write("eval.txt", report.to_text())?;
            print!("{}", report.to_text());
        }
        Cmd::SweepTau {
            common,
            data,
            checkpoint,
            grid,
        } => {
            let (model, data) = load_model(&common, &data, &checkpoint)?;
            let table = ScoreTable::compute(&model, &data)?;
            let sweep = sweep_table(&table, &grid.grid(), model.config.averaging)?;
            common.write("tau_sweep.csv", sweep.to_csv())?;
            common.write("tau_sweep.svg", sweep.to_svg())?;
            let best = sweep.best_report();
            println!(
                "best tau {} : U {:.2} S {:.2} H {:.2}",
                best.tau, best.u, best.s, best.h
            );
        }
        Cmd::Ablate {
            common,
            data,
            rows,
            no_standard,
            sweep,
            grid,
        } => {
            let cfg = common.resolve(RunConfig::default())?;
            let dataset = load_data(&data, &cfg)?;
            let mut all = if no_standard {
                Vec::new()
            } else {
                standard_rows()
            };
            if let Some(path) = rows {
                let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
                all.extend(parse_rows(&text)?);
            }
            if all.is_empty() {
                return Err(Error::Config("no ablation rows to run".into()));
            }
            let tau = if sweep {
                TauChoice::Sweep(grid.grid())
            } else {
                TauChoice::Fixed(cfg.tau)
            };
            let mut results = Vec::with_capacity(all.len());
            for row in &all {
                let r = run_row(&cfg, &dataset, row, &tau)?;
                eprintln!(
                    "{:12} H {:6.2} (tau {})",
                    r.row.name, r.report.h, r.report.tau
                );
                results.push(r);
            }
            let path = common.write("ablation.csv", to_csv(&results))?;
            println!("wrote {}", path.display());
        }
        Cmd::Gradcheck {
            common,
            data,
            checkpoint,
            h,
            samples,
            tol,
        } => {
            let (model, dataset) = match checkpoint {
                Some(path) => load_model(&common, &data, &path)?,
                None => {
                    let cfg = common.resolve(RunConfig::default())?;
                    let dataset = load_data(&data, &cfg)?;
                    (Checkpoint::initial(&cfg, &dataset)?.model, dataset)
                }
            };
            if samples == 0 || !(h.is_finite() && h > 0.0) {
                return Err(Error::Config("need samples >= 1 and h > 0".into()));
            }
            let batch: Vec<&Sample> = dataset.train.iter().take(samples).collect();
            let checks = model.gradient_check(&dataset, &batch, h)?;
            let mut csv = String::from("param,max_rel_err,max_abs_err,norm_rel_err,grad_norm\n");
            let mut worst = 0.0f64;
            for c in &checks {
                let _ = writeln!(
                    csv,
                    "{},{:e},{:e},{:e},{:e}",
                    c.name, c.max_rel_err, c.max_abs_err, c.norm_rel_err, c.grad_norm
                );
                println!(
                    "{:24} rel {:.2e}  abs {:.2e}  norm-rel {:.2e}",
                    c.name, c.max_rel_err, c.max_abs_err, c.norm_rel_err
                );
                worst = worst.max(c.max_rel_err);
            }
            common.write("gradcheck.csv", csv)?;
            let ok = worst <= tol;
            println!(
                "max relative error {worst:.3e} ({})",
                if ok { "ok" } else { "above tolerance" }
            );
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::ExportAttn {
            common,
            data,
            checkpoint,
            split,
            index,
        } => {
            let (model, data) = load_model(&common, &data, &checkpoint)?;
            let pool = if split == "seen" {
                &data.test_seen
            } else {
                &data.test_unseen
            };
            let sample = pool.get(index).ok_or_else(|| {
                Error::Config(format!(
                    "{split} test split has {} images, no index {index}",
                    pool.len()
                ))
            })?;
            let records = model.attention(&data, &sample.patches)?;
            let path = common.write("attention.csv", attention_csv(&records))?;
            println!(
                "wrote {} ({} matrices, label {})",
                path.display(),
                records.len(),
                sample.label
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Saves what a failed run left behind and hands back its error.
fn report_failure(common: &Common, failure: TrainFailure) -> Error {
    let TrainFailure {
        error,
        last_good,
        log,
    } = failure;
    if let Err(e) = common.write("train_log.csv", &log) {
        eprintln!("warning: {e}");
    }
    if let Some(ckpt) = last_good.filter(|_| !error.is_config()) {
        match common
            .out_file("last_good.vspc")
            .and_then(|p| ckpt.save(&p).map(|_| p))
        {
            Ok(p) => eprintln!("last good state saved to {}", p.display()),
            Err(e) => eprintln!("warning: {e}"),
        }
    }
    error
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
