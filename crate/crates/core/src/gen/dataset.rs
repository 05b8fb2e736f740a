use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const OBSERVATIONS: &str = "observations.csv";
pub const LATENTS_S: &str = "latents_s.csv";
pub const LATENTS_E: &str = "latents_e.csv";
pub const ENVS: &str = "envs.csv";
pub const TRANSITION: &str = "transition.csv";
pub const GEN_CONFIG: &str = "gen_config.json";

/// How a long series is cut into fixed-length training windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windowing {
    pub window: usize,
    /// Steps of each window that form the lookback; the rest is the horizon.
    pub t_split: usize,
    pub stride: usize,
}

impl Windowing {
    pub fn horizon(&self) -> usize {
        self.window - self.t_split
    }

    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len < self.window {
            return Vec::new();
        }
        (0..=len - self.window)
            .step_by(self.stride.max(1))
            .collect()
    }

    /// Back-to-back windows covering as much of the series as possible.
    pub fn tiling(&self, len: usize) -> Vec<usize> {
        Windowing {
            stride: self.window,
            ..*self
        }
        .starts(len)
    }
}

/// Observations with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub envs: Option<Vec<usize>>,
    pub latents_s: Option<Array2<f64>>,
    pub latents_e: Option<Array2<f64>>,
    pub windowing: Windowing,
}

impl Dataset {
    pub fn new(x: Array2<f64>, windowing: Windowing) -> Result<Self> {
        let d = Self {
            x,
            envs: None,
            latents_s: None,
            latents_e: None,
            windowing,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let w = &self.windowing;
        if !(w.t_split >= 1 && w.t_split < w.window) {
            return Err(Error::contract(format!(
                "t_split = {} must lie inside a window of {}",
                w.t_split, w.window
            )));
        }
        if self.envs.as_ref().is_some_and(|e| e.len() != t) {
            return Err(Error::contract(
                "environment labels and observations differ in length",
            ));
        }
        for (name, z) in [
            ("latents_s", &self.latents_s),
            ("latents_e", &self.latents_e),
        ] {
            if z.as_ref().is_some_and(|z| z.nrows() != t) {
                return Err(Error::contract(format!(
                    "{name} and observations differ in length"
                )));
            }
        }
        Ok(())
    }

    pub fn window_starts(&self) -> Vec<usize> {
        self.windowing.starts(self.len())
    }

    pub fn window(&self, start: usize) -> ArrayView2<'_, f64> {
        self.x.slice(s![start..start + self.windowing.window, ..])
    }

    /// Stationary then nonstationary ground-truth latents side by side.
    pub fn latents(&self) -> Option<Array2<f64>> {
        match (&self.latents_s, &self.latents_e) {
            (Some(s), Some(e)) => Some(super::system::stack_latents(s, e)),
            _ => None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_series(&dir.join(OBSERVATIONS), "x", &self.x)?;
        if let Some(z) = &self.latents_s {
            io::write_series(&dir.join(LATENTS_S), "zs", z)?;
        }
        if let Some(z) = &self.latents_e {
            io::write_series(&dir.join(LATENTS_E), "ze", z)?;
        }
        if let Some(e) = &self.envs {
            io::write_labels(&dir.join(ENVS), e)?;
        }
        Ok(())
    }

    /// Loads `observations.csv` and whichever ground-truth files exist.
    pub fn load(dir: &Path, windowing: Windowing) -> Result<Self> {
        let (_, x) = io::read_series(&dir.join(OBSERVATIONS))?;
        let optional_series = |name: &str| -> Result<Option<Array2<f64>>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(io::read_series(&p)?.1))
            } else {
                Ok(None)
            }
        };
        let envs_path = dir.join(ENVS);
        let d = Self {
            x,
            envs: if envs_path.exists() {
                Some(io::read_labels(&envs_path)?)
            } else {
                None
            },
            latents_s: optional_series(LATENTS_S)?,
            latents_e: optional_series(LATENTS_E)?,
            windowing,
        };
        d.validate()?;
        Ok(d)
    }
}
