//! Config loading: TOML files layered over presets, then command-line overrides.

use std::fs;
use std::path::Path;

use georls::control::ControlConfig;
use georls::manifold::{StiefelPoint, SubspaceBall};
use georls::oracle::random_vector;
use georls::solver::{RobustLsqProblem, Selector, SolverOptions, StepPolicy};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CliResult, Common, Failure};

fn read_table(path: &Path) -> CliResult<toml::Table> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overlay: toml::Table, origin: &Path) -> CliResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Failure::Usage(e.to_string()))?;
    table.extend(overlay);
    table
        .try_into()
        .map_err(|e| Failure::Usage(format!("config {}: {e}", origin.display())))
}

/// The preset named by the file's `system` key (or `default_system`), with
/// the file's keys and then the flags applied on top.
pub fn load_control(common: &Common, default_system: &str) -> CliResult<ControlConfig> {
    let mut cfg = match &common.config {
        None => ControlConfig::preset(default_system)?,
        Some(path) => {
            let table = read_table(path)?;
            let preset = match table.get("system") {
                Some(toml::Value::String(name)) => name.clone(),
                _ => default_system.to_string(),
            };
            let base = ControlConfig::preset(&preset).or_else(|_| ControlConfig::preset(default_system))?;
            layered(&base, table, path)?
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.sigma {
        cfg.sigma = s;
    }
    if let Some(r) = common.rho_deg {
        cfg.rho_deg = r;
    }
    if let Some(g) = common.gamma {
        cfg.gamma = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Center {
    /// `[I_k; 0]`.
    Coordinate,
    /// Haar-random, drawn from the seed.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// `x0 = b`.
    Data,
    Zero,
}

/// A single robust least-squares instance. Defaults are the Gr(37, 70)
/// benchmark instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub n: usize,
    pub k: usize,
    pub rho_deg: f64,
    pub gamma: f64,
    pub mu: f64,
    /// `M` selects the leading `selector_rows` coordinates.
    pub selector_rows: usize,
    pub center: Center,
    /// Data vector; drawn N(0, I) from the seed when absent.
    pub b: Option<Vec<f64>>,
    pub start: Start,
    pub alpha: f64,
    pub tolx: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            n: 70,
            k: 37,
            rho_deg: 22.5,
            gamma: 4.0,
            mu: 0.0,
            selector_rows: 20,
            center: Center::Coordinate,
            b: None,
            start: Start::Zero,
            alpha: 0.1,
            tolx: 1e-6,
            max_iter: 10_000,
            seed: 7,
        }
    }
}

impl SolveConfig {
    pub fn rho(&self) -> f64 {
        self.rho_deg.to_radians().sin()
    }

    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            alpha: self.alpha,
            tolx: self.tolx,
            max_iter: self.max_iter,
            x0: match self.start {
                Start::Data => None,
                Start::Zero => Some(DVector::zeros(self.n)),
            },
            step_policy: StepPolicy::Strict,
            ..Default::default()
        }
    }

    /// Builds the instance, with `center` overriding the configured one.
    pub fn problem(&self, center: Option<&StiefelPoint>) -> CliResult<RobustLsqProblem> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let y_hat = match (center, self.center) {
            (Some(c), _) => c.clone(),
            (None, Center::Coordinate) => StiefelPoint::coordinate(self.n, self.k)?,
            (None, Center::Random) => StiefelPoint::random(self.n, self.k, &mut rng),
        };
        let b = match &self.b {
            Some(v) => DVector::from_column_slice(v),
            None => random_vector(self.n, &mut rng),
        };
        let ball = SubspaceBall::new(y_hat, self.rho())?;
        let selector = Selector::leading(self.selector_rows, self.n)?;
        Ok(RobustLsqProblem::new(ball, b, selector, self.gamma, self.mu)?)
    }
}

pub fn load_solve(common: &Common) -> CliResult<SolveConfig> {
    let mut cfg = match &common.config {
        None => SolveConfig::default(),
        Some(path) => layered(&SolveConfig::default(), read_table(path)?, path)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.rho_deg {
        cfg.rho_deg = r;
    }
    if let Some(g) = common.gamma {
        cfg.gamma = g;
    }
    if common.sigma.is_some() {
        log::warn!("--sigma has no effect on a single solve");
    }
    Ok(cfg)
}

/// Writes `config.toml` into `dir` and echoes it to stderr.
pub fn echo<T: Serialize>(dir: &Path, cfg: &T) -> CliResult<()> {
    let text = toml::to_string(cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), &text)?;
    eprintln!("# effective configuration ({})", dir.join("config.toml").display());
    for line in text.lines() {
        eprintln!("#   {line}");
    }
    Ok(())
}
