//! Synthetic nonstationary series: a Markov environment chain drives
//! Gaussian nonstationary latents, a nonlinear transition drives stationary
//! latents, and an invertible network mixes both into observations.

mod assumptions;
mod dataset;
mod markov;
mod system;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use assumptions::{check_assumptions, AssumptionReport, RANK_THRESHOLD};
pub use dataset::{
    Dataset, Windowing, ENVS, GEN_CONFIG, LATENTS_E, LATENTS_S, OBSERVATIONS, TRANSITION,
};
pub(crate) use markov::categorical;
pub use markov::{min_run_length, sample_markov, MarkovSpec};
pub use system::{
    condition_number, mean_separation, mix, sample_nonstationary, sample_stationary, stack_latents,
    GenConfig, TrueSystem, LEAKY_SLOPE, MAX_CONDITION,
};

use crate::error::{Error, Result};
use crate::io;

pub const ASSUMPTIONS: &str = "assumptions.json";

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    System = 0,
    TrainEnvs = 1,
    TrainNonstationary = 2,
    TrainStationary = 3,
    TestEnvs = 4,
    TestNonstationary = 5,
    TestStationary = 6,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Everything needed to regenerate a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenRecord {
    pub seed: u64,
    pub gen: GenConfig,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub system: TrueSystem,
    pub train: Dataset,
    pub test: Dataset,
    pub train_report: AssumptionReport,
    pub test_report: AssumptionReport,
}

fn sample_split(
    sys: &TrueSystem,
    len: usize,
    windowing: Windowing,
    mut envs_rng: ChaCha8Rng,
    mut ns_rng: ChaCha8Rng,
    mut st_rng: ChaCha8Rng,
) -> Result<Dataset> {
    let envs = sample_markov(&sys.markov, len, &mut envs_rng)?;
    let z_e = sample_nonstationary(sys, &envs, &mut ns_rng)?;
    let z_s = sample_stationary(sys, len, &mut st_rng)?;
    let x = mix(sys, &stack_latents(&z_s, &z_e))?;
    let mut d = Dataset::new(x, windowing)?;
    d.envs = Some(envs);
    d.latents_s = Some(z_s);
    d.latents_e = Some(z_e);
    Ok(d)
}

/// Draws a system plus train and test series; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Generated> {
    cfg.validate()?;
    let system = TrueSystem::random(cfg, &mut stream(seed, Stream::System))?;
    let windowing = Windowing {
        window: cfg.window,
        t_split: cfg.t_split,
        stride: cfg.stride,
    };
    let train = sample_split(
        &system,
        cfg.train_len,
        windowing,
        stream(seed, Stream::TrainEnvs),
        stream(seed, Stream::TrainNonstationary),
        stream(seed, Stream::TrainStationary),
    )?;
    let test = sample_split(
        &system,
        cfg.test_len,
        windowing,
        stream(seed, Stream::TestEnvs),
        stream(seed, Stream::TestNonstationary),
        stream(seed, Stream::TestStationary),
    )?;
    let train_report = check_assumptions(&system, train.envs.as_deref().unwrap_or(&[]))?;
    let test_report = check_assumptions(&system, test.envs.as_deref().unwrap_or(&[]))?;
    for (split, report) in [("train", &train_report), ("test", &test_report)] {
        let failed = report.violations();
        if !failed.is_empty() {
            return Err(Error::Assumption(format!(
                "{split} split: {}",
                failed.join(", ")
            )));
        }
    }
    Ok(Generated {
        system,
        train,
        test,
        train_report,
        test_report,
    })
}

/// Writes `train/` and `test/` dataset directories under `out`.
pub fn write_generated(out: &Path, record: &GenRecord, g: &Generated) -> Result<()> {
    for (split, data, report) in [
        ("train", &g.train, &g.train_report),
        ("test", &g.test, &g.test_report),
    ] {
        let dir = out.join(split);
        data.save(&dir)?;
        io::write_matrix(&dir.join(TRANSITION), &g.system.markov.matrix())?;
        io::write_json(&dir.join(GEN_CONFIG), record)?;
        io::write_json(&dir.join(ASSUMPTIONS), report)?;
    }
    Ok(())
}
