use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_shift::config::{RunConfig, CONFIG_ECHO};
use latent_shift::error::{Error, Result};
use latent_shift::eval::{self, METRICS};
use latent_shift::gen::{self, Dataset, GenRecord, OBSERVATIONS};
use latent_shift::hmm::{self, Arhmm, ARHMM_FILE, ENVS_HAT, HMM_TRACE};
use latent_shift::io;
use latent_shift::seqvae::{self, IdeaModel, FORECAST, IDEA_MODEL, LATENTS_HAT, TRACE};

#[derive(Parser, Debug)]
#[command(
    name = "latent-shift",
    version,
    about = "Nonstationary latent recovery and forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (`train/` and `test/` under --out).
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the ARHMM on `<data>/train` and decode `<data>/test`.
    FitHmm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the variational model against a fitted ARHMM.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// ARHMM checkpoint; defaults to `<out>/arhmm.json`.
        #[arg(long)]
        hmm: Option<PathBuf>,
    },
    /// Score a run directory against the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the one recorded in the run.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast every back-to-back window of an observation CSV.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Trained run directory.
        #[arg(long)]
        run: PathBuf,
        /// Input CSV: header row, optional leading `t` column, one column per observed dimension.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Assumption(_) => 3,
        Error::Numeric { .. } => 4,
        Error::Contract(_)
        | Error::Config(_)
        | Error::Unsupported(_)
        | Error::Io { .. }
        | Error::Parse { .. } => 2,
    }
}

struct Ctx {
    cfg: RunConfig,
    quiet: bool,
}

impl Ctx {
    fn new(common: &Common, fallback: Option<&Path>) -> Result<Self> {
        let mut cfg = match (&common.config, fallback) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
            (None, _) => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(Self {
            cfg,
            quiet: common.quiet,
        })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn data_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let d = flag
            .or_else(|| self.cfg.paths.data.clone())
            .ok_or_else(|| {
                Error::Config("no data directory: pass --data or set paths.data".into())
            })?;
        self.cfg.paths.data = Some(d.clone());
        Ok(d)
    }

    fn run_dir(&mut self, flag: Option<PathBuf>) -> Result<PathBuf> {
        let d = flag
            .or_else(|| self.cfg.paths.run.clone())
            .ok_or_else(|| Error::Config("no run directory: pass --out or set paths.run".into()))?;
        self.cfg.paths.run = Some(d.clone());
        Ok(d)
    }

    /// Loads a split if present.
    fn split(&self, data: &Path, name: &str) -> Result<Option<Dataset>> {
        let dir = data.join(name);
        if dir.join(OBSERVATIONS).is_file() {
            Ok(Some(Dataset::load(&dir, self.cfg.windowing())?))
        } else {
            Ok(None)
        }
    }
}

fn cmd_gen(common: Common, out: Option<PathBuf>) -> Result<()> {
    let mut ctx = Ctx::new(&common, None)?;
    let out = ctx.run_dir(out.or_else(|| ctx.cfg.paths.data.clone()))?;
    ctx.cfg.paths.data = Some(out.clone());
    let record = GenRecord {
        seed: ctx.cfg.seed,
        gen: ctx.cfg.gen.clone(),
    };
    let g = gen::generate(&record.gen, record.seed)?;
    gen::write_generated(&out, &record, &g)?;
    ctx.cfg.echo(&out)?;
    ctx.say(format!(
        "generated {} train and {} test steps in {}",
        g.train.x.nrows(),
        g.test.x.nrows(),
        out.display()
    ));
    Ok(())
}

fn cmd_fit_hmm(common: Common, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut ctx = Ctx::new(&common, None)?;
    let data = ctx.data_dir(data)?;
    let out = ctx.run_dir(out)?;
    let train = ctx
        .split(&data, "train")?
        .ok_or_else(|| Error::Config(format!("{} has no train split", data.display())))?;
    let fit = hmm::em_fit(&seqvae::hmm_windows(&train), &ctx.cfg.hmm, ctx.cfg.seed)?;
    io::create_dir(&out)?;
    fit.model.save(&out.join(ARHMM_FILE))?;
    hmm::write_trace(&out.join(HMM_TRACE), &fit)?;
    if let Some(test) = ctx.split(&data, "test")? {
        io::write_labels(
            &out.join(ENVS_HAT),
            &hmm::viterbi(&fit.model, test.x.view())?,
        )?;
    }
    ctx.cfg.echo(&out)?;
    ctx.say(format!(
        "ARHMM fitted: restart {} of {}, loglik {:.6}",
        fit.best_restart,
        fit.traces.len(),
        fit.loglik()
    ));
    Ok(())
}

fn cmd_train(
    common: Common,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    hmm_path: Option<PathBuf>,
) -> Result<()> {
    let mut ctx = Ctx::new(&common, None)?;
    let data = ctx.data_dir(data)?;
    let out = ctx.run_dir(out)?;
    let hmm_path = hmm_path.unwrap_or_else(|| out.join(ARHMM_FILE));
    let hmm = Arhmm::load(&hmm_path)?;
    let train = ctx
        .split(&data, "train")?
        .ok_or_else(|| Error::Config(format!("{} has no train split", data.display())))?;
    let run = seqvae::train_idea(&train, &hmm, ctx.cfg.gen.n_s, &ctx.cfg.train, ctx.cfg.seed)?;
    io::create_dir(&out)?;
    if hmm_path != out.join(ARHMM_FILE) {
        hmm.save(&out.join(ARHMM_FILE))?;
    }
    run.model.save(&out.join(IDEA_MODEL))?;
    seqvae::write_trace(&out.join(TRACE), &run.trace)?;
    if let Some(test) = ctx.split(&data, "test")? {
        let z = seqvae::latents_hat(&run.model, test.x.view())?;
        io::write_series(&out.join(LATENTS_HAT), "z", &z)?;
        let f = seqvae::forecast_series(
            &run.model,
            &hmm,
            test.x.view(),
            ctx.cfg.train.future_envs,
            ctx.cfg.seed,
        )?;
        seqvae::write_forecast(&out.join(FORECAST), &f)?;
    }
    ctx.cfg.echo(&out)?;
    if let (Some(first), Some(last)) = (run.trace.first(), run.trace.last()) {
        ctx.say(format!(
            "trained {} epochs: ELBO per window {:.6} -> {:.6}",
            run.trace.len(),
            first.total,
            last.total
        ));
    }
    Ok(())
}

fn cmd_eval(common: Common, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let out_flag = out.clone();
    let echo = out_flag.as_ref().map(|d| d.join(CONFIG_ECHO));
    let mut ctx = Ctx::new(&common, echo.as_deref())?;
    let out = ctx.run_dir(out)?;
    let data = ctx.data_dir(data)?;
    let r = eval::report(&data.join("test"), &out, &ctx.cfg.eval)?;
    io::write_json(&out.join(METRICS), &r)?;
    ctx.say(format!(
        "MCC combined {:.4} ({:.1} / 100), stationary {:.4}, nonstationary {:.4}",
        r.mcc_all,
        100.0 * r.mcc_all,
        r.mcc_s,
        r.mcc_e
    ));
    if let (Some(acc), Some(mse)) = (r.env_accuracy, r.a_mse) {
        ctx.say(format!(
            "environment accuracy {acc:.4}, transition MSE {mse:.6}"
        ));
    }
    ctx.say(format!(
        "forecast MSE {:.6}, MAE {:.6}",
        r.forecast_mse, r.forecast_mae
    ));
    Ok(())
}

fn cmd_forecast(common: Common, run: PathBuf, input: PathBuf, out: PathBuf) -> Result<()> {
    let ctx = Ctx::new(&common, Some(&run.join(CONFIG_ECHO)))?;
    let model = IdeaModel::load(&run.join(IDEA_MODEL))?;
    let hmm = Arhmm::load(&run.join(ARHMM_FILE))?;
    let (_, x) = io::read_series(&input)?;
    if x.ncols() != model.dims.n() {
        return Err(Error::Contract(format!(
            "{} has {} columns but the model expects {}",
            input.display(),
            x.ncols(),
            model.dims.n()
        )));
    }
    let f = seqvae::forecast_series(
        &model,
        &hmm,
        x.view(),
        ctx.cfg.train.future_envs,
        ctx.cfg.seed,
    )?;
    seqvae::write_forecast(&out, &f)?;
    ctx.say(format!(
        "wrote {} forecast rows to {}",
        f.t.len(),
        out.display()
    ));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { common, out } => cmd_gen(common, out),
        Command::FitHmm { common, data, out } => cmd_fit_hmm(common, data, out),
        Command::Train {
            common,
            data,
            out,
            hmm,
        } => cmd_train(common, data, out, hmm),
        Command::Eval { common, data, out } => cmd_eval(common, data, out),
        Command::Forecast {
            common,
            run,
            data,
            out,
        } => cmd_forecast(common, run, data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
