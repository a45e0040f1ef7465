//! LTI plants, measurement noise, and the receding-horizon tracking loop
//! built on [`crate::solver::solve`].

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::behavior::{
    behavior_dimension, gpe_check, hankel, identify_subspace, BehaviorEstimate, GpeReport, Trajectory, GPE_TOL,
};
use crate::error::{Error, Result};
use crate::manifold::{chordal_distance, orthonormalize, StiefelPoint, SubspaceBall};
use crate::solver::{project, solve, RobustLsqProblem, Selector, SolverOptions, StepPolicy};

/// Random streams derived from one run seed.
const STREAM_EXCITATION: u64 = 1;
const STREAM_IDENTIFICATION_NOISE: u64 = 2;
const STREAM_CLOSED_LOOP_NOISE: u64 = 3;

/// `x(t+1) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let ok = n > 0
            && a.is_square()
            && b.nrows() == n
            && b.ncols() > 0
            && c.ncols() == n
            && c.nrows() > 0
            && d.shape() == (c.nrows(), b.ncols());
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn q(&self) -> usize {
        self.m() + self.p()
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    pub fn next_state(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Sampled double integrator with step 0.5.
pub fn double_integrator() -> LtiSystem {
    LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.125, 0.5]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::zeros(1, 1),
    )
    .expect("consistent shapes")
}

/// Marginally unstable three-node Laplacian system with fully actuated
/// states and the first state measured.
pub fn laplacian3() -> LtiSystem {
    LtiSystem::new(
        DMatrix::from_row_slice(3, 3, &[1.01, 0.01, 0.0, 0.01, 1.01, 0.01, 0.0, 0.01, 1.01]),
        DMatrix::identity(3, 3),
        DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
        DMatrix::zeros(1, 3),
    )
    .expect("consistent shapes")
}

pub const SYSTEM_NAMES: [&str; 2] = ["double_integrator", "laplacian3"];

pub fn system_by_name(name: &str) -> Result<LtiSystem> {
    match name {
        "double_integrator" => Ok(double_integrator()),
        "laplacian3" => Ok(laplacian3()),
        other => Err(Error::InvalidParameter(format!(
            "unknown system `{other}` (known: {})",
            SYSTEM_NAMES.join(", ")
        ))),
    }
}

/// How the noise-to-signal ratio `sigma` is turned into an absolute noise level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// Noise standard deviation is `sigma` itself.
    #[default]
    Unit,
    /// Noise standard deviation is `sigma` times the RMS of the noiseless
    /// identification output.
    IdentificationRms,
}

/// Additive Gaussian measurement noise `e(t) = sigma · normalizer · ξ(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
    pub normalizer: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64, normalizer: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma = {sigma}")));
        }
        if !(normalizer >= 0.0) || !normalizer.is_finite() {
            return Err(Error::InvalidParameter(format!("normalizer = {normalizer}")));
        }
        Ok(Self {
            sigma,
            seed,
            normalizer,
        })
    }

    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            seed: 0,
            normalizer: 1.0,
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.sigma * self.normalizer
    }

    /// Independent draw sequence for one purpose within a run.
    pub fn sampler(&self, stream: u64) -> NoiseSampler {
        NoiseSampler {
            rng: seeded(self.seed, stream),
            std_dev: self.std_dev(),
        }
    }
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct NoiseSampler {
    rng: ChaCha8Rng,
    std_dev: f64,
}

impl NoiseSampler {
    pub fn sample(&mut self, p: usize) -> DVector<f64> {
        if self.std_dev == 0.0 {
            return DVector::zeros(p);
        }
        let s = self.std_dev;
        DVector::from_iterator(
            p,
            (0..p).map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut self.rng)),
        )
    }
}

/// Result of an open-loop simulation.
#[derive(Clone, Debug)]
pub struct Simulation {
    /// `col(u, y + e)`.
    pub measured: Trajectory,
    /// `col(u, y)`.
    pub noiseless: Trajectory,
    pub final_state: DVector<f64>,
}

/// Runs the plant from `x0` under `inputs` (`m × T`), adding measurement noise.
pub fn simulate(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    noise: &mut NoiseSampler,
) -> Result<Simulation> {
    if x0.len() != sys.n_x() || inputs.nrows() != sys.m() || inputs.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {}, inputs are {}x{}, system has n_x={} m={}",
            x0.len(),
            inputs.nrows(),
            inputs.ncols(),
            sys.n_x(),
            sys.m()
        )));
    }
    let t = inputs.ncols();
    let mut y = DMatrix::zeros(sys.p(), t);
    let mut y_meas = DMatrix::zeros(sys.p(), t);
    let mut x = x0.clone();
    for (j, u) in inputs.column_iter().enumerate() {
        let u = u.into_owned();
        let yt = sys.output(&x, &u);
        y_meas.set_column(j, &(&yt + noise.sample(sys.p())));
        y.set_column(j, &yt);
        x = sys.next_state(&x, &u);
    }
    Ok(Simulation {
        measured: Trajectory::from_io(inputs, &y_meas)?,
        noiseless: Trajectory::from_io(inputs, &y)?,
        final_state: x,
    })
}

/// A plant advanced one sample at a time.
pub struct Plant<'s> {
    sys: &'s LtiSystem,
    state: DVector<f64>,
    noise: NoiseSampler,
}

impl<'s> Plant<'s> {
    pub fn new(sys: &'s LtiSystem, x0: DVector<f64>, noise: NoiseSampler) -> Result<Self> {
        if x0.len() != sys.n_x() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {}, system has n_x={}",
                x0.len(),
                sys.n_x()
            )));
        }
        Ok(Self { sys, state: x0, noise })
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    /// Applies `u`, returns `(measured y, noiseless y)` at the current sample.
    pub fn step(&mut self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let y = self.sys.output(&self.state, u);
        let y_meas = &y + self.noise.sample(self.sys.p());
        self.state = self.sys.next_state(&self.state, u);
        (y_meas, y)
    }
}

/// Plant selection in a config file: a registry name or explicit matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Named(String),
    Explicit {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
    },
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::DimensionMismatch(format!(
            "matrix `{name}` must be a nonempty rectangular list of rows"
        )));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl SystemSpec {
    pub fn build(&self) -> Result<LtiSystem> {
        match self {
            SystemSpec::Named(name) => system_by_name(name),
            SystemSpec::Explicit { a, b, c, d } => LtiSystem::new(
                rows_to_matrix("a", a)?,
                rows_to_matrix("b", b)?,
                rows_to_matrix("c", c)?,
                rows_to_matrix("d", d)?,
            ),
        }
    }
}

/// Everything needed to identify a behavior and run the tracking loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub system: SystemSpec,
    pub t_ini: usize,
    pub t_f: usize,
    /// Closed-loop horizon.
    pub steps: usize,
    /// Identification data length; defaults to `steps`.
    #[serde(default)]
    pub data_len: Option<usize>,
    pub gamma: f64,
    pub rho_deg: f64,
    pub sigma: f64,
    #[serde(default)]
    pub noise_scale: NoiseScale,
    pub alpha: f64,
    pub tolx: f64,
    pub max_iter: usize,
    #[serde(default)]
    pub mu: f64,
    pub seed: u64,
    /// Closed-loop initial state; zero when absent.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Per-sample reference `col(u_ref, y_ref)`; zero when absent.
    #[serde(default)]
    pub w_ref_point: Option<Vec<f64>>,
    /// Diagonal of the per-sample weight; identity when absent.
    #[serde(default)]
    pub weight: Option<Vec<f64>>,
    /// Excitation redraws allowed before giving up on persistency of excitation.
    #[serde(default = "default_gpe_attempts")]
    pub gpe_attempts: usize,
    #[serde(default = "default_gpe_tol")]
    pub gpe_tol: f64,
}

fn default_gpe_attempts() -> usize {
    20
}

fn default_gpe_tol() -> f64 {
    GPE_TOL
}

impl ControlConfig {
    /// Double-integrator tracking of `y = 1`.
    pub fn double_integrator() -> Self {
        Self {
            system: SystemSpec::Named("double_integrator".into()),
            t_ini: 10,
            t_f: 25,
            steps: 115,
            data_len: None,
            gamma: 4.0,
            rho_deg: 1.0,
            sigma: 0.1,
            noise_scale: NoiseScale::Unit,
            alpha: 0.1,
            tolx: 1e-6,
            max_iter: 10_000,
            mu: 0.0,
            seed: 0,
            x0: Some(vec![0.0, 0.0]),
            w_ref_point: Some(vec![0.0, 1.0]),
            weight: None,
            gpe_attempts: default_gpe_attempts(),
            gpe_tol: GPE_TOL,
        }
    }

    /// Laplacian regulation to zero from `x0 = (−1.5, 0, 0)`.
    pub fn laplacian3() -> Self {
        Self {
            system: SystemSpec::Named("laplacian3".into()),
            steps: 150,
            rho_deg: 2.0,
            x0: Some(vec![-1.5, 0.0, 0.0]),
            w_ref_point: Some(vec![0.0; 4]),
            ..Self::double_integrator()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "double_integrator" => Ok(Self::double_integrator()),
            "laplacian3" => Ok(Self::laplacian3()),
            other => Err(Error::InvalidParameter(format!("no preset for `{other}`"))),
        }
    }

    pub fn depth(&self) -> usize {
        self.t_ini + self.t_f
    }

    pub fn rho(&self) -> f64 {
        self.rho_deg.to_radians().sin()
    }

    pub fn data_len(&self) -> usize {
        self.data_len.unwrap_or(self.steps)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            alpha: self.alpha,
            tolx: self.tolx,
            max_iter: self.max_iter,
            lambda_tol: None,
            x0: None,
            step_policy: StepPolicy::Strict,
            record_stationarity: false,
        }
    }

    pub fn x0_for(&self, sys: &LtiSystem) -> Result<DVector<f64>> {
        let x0 = match &self.x0 {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(sys.n_x()),
        };
        if x0.len() != sys.n_x() {
            return Err(Error::DimensionMismatch(format!(
                "x0 has {} entries, system has n_x={}",
                x0.len(),
                sys.n_x()
            )));
        }
        Ok(x0)
    }

    pub fn w_ref_for(&self, sys: &LtiSystem) -> Result<DVector<f64>> {
        let w = match &self.w_ref_point {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(sys.q()),
        };
        if w.len() != sys.q() {
            return Err(Error::DimensionMismatch(format!(
                "w_ref_point has {} entries, system has q={}",
                w.len(),
                sys.q()
            )));
        }
        Ok(w)
    }

    /// Square roots of the weight diagonal, one per signal channel.
    pub fn weight_sqrt(&self, q: usize) -> Result<Option<DVector<f64>>> {
        let Some(w) = &self.weight else {
            return Ok(None);
        };
        if w.len() != q || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight must be {q} positive entries, got {w:?}"
            )));
        }
        if w.iter().all(|&v| v == 1.0) {
            return Ok(None);
        }
        Ok(Some(DVector::from_iterator(q, w.iter().map(|v| v.sqrt()))))
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.system.build()?;
        if self.t_f == 0 {
            return Err(Error::InvalidParameter("t_f must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if !(0.0..=90.0).contains(&self.rho_deg) {
            return Err(Error::InvalidParameter(format!(
                "rho_deg = {} outside [0, 90]",
                self.rho_deg
            )));
        }
        NoiseModel::new(self.sigma, self.seed, 1.0)?;
        if !(self.gamma >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma = {}, mu = {}",
                self.gamma, self.mu
            )));
        }
        if self.gpe_attempts == 0 {
            return Err(Error::InvalidParameter("gpe_attempts must be at least 1".into()));
        }
        self.solver_options().step_size(self.gamma)?;
        self.x0_for(&sys)?;
        self.w_ref_for(&sys)?;
        self.weight_sqrt(sys.q())?;
        Ok(())
    }
}

/// Offline data collection and identification of the restricted behavior.
#[derive(Clone, Debug)]
pub struct Identification {
    pub estimate: BehaviorEstimate,
    pub gpe: GpeReport,
    /// Excitation draws used (1 when the first satisfied GPE).
    pub attempts: usize,
    /// RMS of the noiseless identification output.
    pub output_rms: f64,
    /// Noise applied to the identification data and, by default, the loop.
    pub noise: NoiseModel,
    pub data: Simulation,
}

/// Excites `sys` with i.i.d. standard normal inputs from rest, redrawing until
/// the noiseless Hankel is persistently exciting, then identifies the
/// behavior from the noisy measurements.
pub fn identify(sys: &LtiSystem, cfg: &ControlConfig, sigma: f64) -> Result<Identification> {
    let depth = cfg.depth();
    let k = behavior_dimension(sys.m(), sys.n_x(), depth);
    let t = cfg.data_len();
    let mut last = None;
    for attempt in 0..cfg.gpe_attempts {
        let mut rng = seeded(cfg.seed.wrapping_add(attempt as u64), STREAM_EXCITATION);
        let inputs = DMatrix::from_fn(sys.m(), t, |_, _| StandardNormal.sample(&mut rng));
        let x_rest = DVector::zeros(sys.n_x());
        let clean = simulate(sys, &x_rest, &inputs, &mut NoiseModel::noiseless().sampler(0))?;
        let h = hankel(&clean.noiseless, depth)?;
        let gpe = gpe_check(&h, k, cfg.gpe_tol);
        if !gpe.satisfied {
            debug!("excitation draw {attempt}: Hankel rank {} of {k}", gpe.rank);
            last = Some(gpe);
            continue;
        }
        let y = clean.noiseless.samples().rows(sys.m(), sys.p());
        let output_rms = (y.norm_squared() / y.len() as f64).sqrt();
        let normalizer = match cfg.noise_scale {
            NoiseScale::Unit => 1.0,
            NoiseScale::IdentificationRms => output_rms,
        };
        let noise = NoiseModel::new(sigma, cfg.seed, normalizer)?;
        let data = simulate(sys, &x_rest, &inputs, &mut noise.sampler(STREAM_IDENTIFICATION_NOISE))?;
        let estimate = identify_subspace(&data.measured, depth, k)?;
        return Ok(Identification {
            estimate,
            gpe,
            attempts: attempt + 1,
            output_rms,
            noise,
            data,
        });
    }
    let rank = last.map_or(0, |g| g.rank);
    Err(Error::ExcitationFailed {
        expected: k,
        rank,
        attempts: cfg.gpe_attempts,
    })
}

/// `b = col(w_ini, w_ref, …, w_ref)` and `M = [I 0]` on the first `q·T_ini` rows.
pub fn assemble_problem(
    estimate: &BehaviorEstimate,
    w_ini: &DVector<f64>,
    cfg: &ControlConfig,
) -> Result<RobustLsqProblem> {
    let sys = cfg.system.build()?;
    let q = sys.q();
    let center = weighted_center(estimate, cfg, q)?;
    let scale = cfg.weight_sqrt(q)?;
    assemble_weighted(&center, scale.as_ref(), w_ini, &cfg.w_ref_for(&sys)?, cfg)
}

fn weighted_center(estimate: &BehaviorEstimate, cfg: &ControlConfig, q: usize) -> Result<StiefelPoint> {
    if estimate.depth != cfg.depth() || estimate.subspace.n_amb() != q * cfg.depth() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has depth {} in R^{}, config needs depth {} in R^{}",
            estimate.depth,
            estimate.subspace.n_amb(),
            cfg.depth(),
            q * cfg.depth()
        )));
    }
    match cfg.weight_sqrt(q)? {
        None => Ok(estimate.subspace.clone()),
        Some(s) => {
            let mut y = estimate.subspace.basis().clone();
            for (i, mut row) in y.row_iter_mut().enumerate() {
                row *= s[i % q];
            }
            orthonormalize(&y)
        }
    }
}

fn assemble_weighted(
    center: &StiefelPoint,
    scale: Option<&DVector<f64>>,
    w_ini: &DVector<f64>,
    w_ref: &DVector<f64>,
    cfg: &ControlConfig,
) -> Result<RobustLsqProblem> {
    let q = w_ref.len();
    let n = q * cfg.depth();
    if w_ini.len() != q * cfg.t_ini {
        return Err(Error::DimensionMismatch(format!(
            "w_ini has {}, expected q·T_ini = {}",
            w_ini.len(),
            q * cfg.t_ini
        )));
    }
    let mut b = DVector::zeros(n);
    b.rows_mut(0, w_ini.len()).copy_from(w_ini);
    for j in 0..cfg.t_f {
        b.rows_mut(q * (cfg.t_ini + j), q).copy_from(w_ref);
    }
    if let Some(s) = scale {
        for i in 0..n {
            b[i] *= s[i % q];
        }
    }
    let ball = SubspaceBall::new(center.clone(), cfg.rho())?;
    let selector = Selector::leading(q * cfg.t_ini, n)?;
    RobustLsqProblem::new(ball, b, selector, cfg.gamma, cfg.mu)
}

/// One receding-horizon step.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub u: Vec<f64>,
    /// Measured output (with noise).
    pub y: Vec<f64>,
    /// Noiseless plant output.
    pub y_true: Vec<f64>,
    pub reference: Vec<f64>,
    pub iterations: usize,
    pub lambda: f64,
    pub gradnorm: f64,
    pub converged: bool,
    pub boundary: bool,
    /// Chordal distance of the worst-case subspace from the estimate.
    pub distance: f64,
    /// `‖M·w* − w_ini‖`: how far the optimal trajectory is from the measured past.
    pub consistency: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosedLoopLog {
    pub config: ControlConfig,
    pub noise: NoiseModel,
    pub m: usize,
    pub p: usize,
    pub records: Vec<StepRecord>,
}

impl ClosedLoopLog {
    /// `max |y_true(t) − r(t)|` over `t ≥ from` (1-based), all channels.
    pub fn max_tracking_error(&self, from: usize) -> f64 {
        self.records
            .iter()
            .filter(|r| r.t >= from)
            .flat_map(|r| r.y_true.iter().zip(&r.reference).map(|(y, r)| (y - r).abs()))
            .fold(0.0, f64::max)
    }

    /// First step after which the true output stays within `band` of the reference.
    pub fn settling_step(&self, band: f64) -> Option<usize> {
        let mut settled = None;
        for r in &self.records {
            let inside = r.y_true.iter().zip(&r.reference).all(|(y, r)| (y - r).abs() <= band);
            match (inside, settled) {
                (true, None) => settled = Some(r.t),
                (false, _) => settled = None,
                _ => {}
            }
        }
        settled
    }

    pub fn lambda_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.lambda).collect()
    }

    /// Mean λ* over the first and last quarter of the run.
    pub fn lambda_quarter_means(&self) -> (f64, f64) {
        let l = self.lambda_trace();
        let q = (l.len() / 4).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&l[..q]), mean(&l[l.len() - q..]))
    }
}

/// Closed-loop tracking: warm up `T_ini` samples with zero input, then at each
/// step solve the robust problem warm-started from the previous minimiser and
/// apply the first future input.
pub fn receding_horizon(
    sys: &LtiSystem,
    estimate: &BehaviorEstimate,
    cfg: &ControlConfig,
    noise: &NoiseModel,
) -> Result<ClosedLoopLog> {
    cfg.validate()?;
    let (m, p, q) = (sys.m(), sys.p(), sys.q());
    let center = weighted_center(estimate, cfg, q)?;
    let scale = cfg.weight_sqrt(q)?;
    let w_ref = cfg.w_ref_for(sys)?;
    let reference: Vec<f64> = w_ref.rows(m, p).iter().copied().collect();
    let mut plant = Plant::new(sys, cfg.x0_for(sys)?, noise.sampler(STREAM_CLOSED_LOOP_NOISE))?;

    let mut past: VecDeque<DVector<f64>> = VecDeque::with_capacity(cfg.t_ini + 1);
    let zero_u = DVector::zeros(m);
    for _ in 0..cfg.t_ini {
        let (y, _) = plant.step(&zero_u);
        past.push_back(stack(&zero_u, &y));
    }

    let mut opts = cfg.solver_options();
    let u_at = q * cfg.t_ini;
    let mut records = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let mut w_ini = DVector::zeros(q * cfg.t_ini);
        for (i, w) in past.iter().enumerate() {
            w_ini.rows_mut(i * q, q).copy_from(w);
        }
        let prob = assemble_weighted(&center, scale.as_ref(), &w_ini, &w_ref, cfg)?;
        let res = solve(&prob, &opts)?;
        if !res.converged {
            warn!(
                "step {t}: solver stopped after {} iterations at gradnorm {:e}",
                res.iterations,
                res.gradnorm_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        let mut w_star = res.w_star.clone();
        if let Some(s) = &scale {
            for i in 0..w_star.len() {
                w_star[i] /= s[i % q];
            }
        }
        let u = w_star.rows(u_at, m).into_owned();
        let consistency = (w_star.rows(0, u_at) - &w_ini).norm();
        let (y, y_true) = plant.step(&u);

        records.push(StepRecord {
            t,
            u: u.iter().copied().collect(),
            y: y.iter().copied().collect(),
            y_true: y_true.iter().copied().collect(),
            reference: reference.clone(),
            iterations: res.iterations,
            lambda: res.inner.lambda_star,
            gradnorm: res.gradnorm_trace.last().copied().unwrap_or(0.0),
            converged: res.converged,
            boundary: res.inner.boundary,
            distance: res.inner.distance,
            consistency,
        });

        if cfg.t_ini > 0 {
            past.pop_front();
            past.push_back(stack(&u, &y));
        }
        opts.x0 = Some(res.x_star);
    }

    Ok(ClosedLoopLog {
        config: cfg.clone(),
        noise: *noise,
        m,
        p,
        records,
    })
}

/// Non-robust, noiseless loop: `ρ = 0` and `σ = 0`.
pub fn nominal_controller(sys: &LtiSystem, estimate: &BehaviorEstimate, cfg: &ControlConfig) -> Result<ClosedLoopLog> {
    let nominal = ControlConfig {
        rho_deg: 0.0,
        sigma: 0.0,
        ..cfg.clone()
    };
    receding_horizon(sys, estimate, &nominal, &NoiseModel::noiseless())
}

/// Chordal distance between the identified and the model-based behavior.
pub fn identification_error(sys: &LtiSystem, estimate: &BehaviorEstimate) -> Result<f64> {
    let truth = crate::behavior::restricted_behavior(sys, estimate.depth)?;
    chordal_distance(&estimate.subspace, &truth)
}

fn stack(u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut w = DVector::zeros(u.len() + y.len());
    w.rows_mut(0, u.len()).copy_from(u);
    w.rows_mut(u.len(), y.len()).copy_from(y);
    w
}

/// `P_Ŷ` applied to a stacked trajectory window; exposed for diagnostics.
pub fn behavior_residual(estimate: &BehaviorEstimate, window: &DVector<f64>) -> f64 {
    (window - project(&estimate.subspace, window)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn short(cfg: ControlConfig, steps: usize) -> ControlConfig {
        ControlConfig {
            steps,
            data_len: Some(cfg.data_len()),
            ..cfg
        }
    }

    #[test]
    fn simulate_double_integrator_step() {
        let sys = double_integrator();
        let inputs = DMatrix::from_element(1, 1, 1.0);
        let sim = simulate(
            &sys,
            &DVector::zeros(2),
            &inputs,
            &mut NoiseModel::noiseless().sampler(0),
        )
        .unwrap();
        assert_relative_eq!(sim.final_state, DVector::from_vec(vec![0.125, 0.5]));
        assert_eq!(sim.noiseless.sample(0), DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(sim.measured, sim.noiseless);
    }

    #[test]
    fn zero_input_from_rest_stays_zero() {
        let sys = laplacian3();
        let sim = simulate(
            &sys,
            &DVector::zeros(3),
            &DMatrix::zeros(3, 40),
            &mut NoiseModel::noiseless().sampler(0),
        )
        .unwrap();
        assert!(sim.noiseless.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_free_response_grows() {
        let sys = laplacian3();
        let x0 = DVector::from_vec(vec![-1.5, 0.0, 0.0]);
        let sim = simulate(
            &sys,
            &x0,
            &DMatrix::zeros(3, 50),
            &mut NoiseModel::noiseless().sampler(0),
        )
        .unwrap();
        let y: Vec<f64> = (0..50).map(|t| sim.noiseless.sample(t)[3].abs()).collect();
        assert!(y.windows(2).all(|w| w[1] > w[0]));
        assert!(y[49] > 1.5 * 1.01f64.powi(40));
    }

    #[test]
    fn simulate_rejects_bad_shapes() {
        let sys = double_integrator();
        let mut s = NoiseModel::noiseless().sampler(0);
        assert!(simulate(&sys, &DVector::zeros(3), &DMatrix::zeros(1, 5), &mut s).is_err());
        assert!(simulate(&sys, &DVector::zeros(2), &DMatrix::zeros(2, 5), &mut s).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let a = NoiseModel::new(0.1, 9, 2.0).unwrap();
        assert_relative_eq!(a.std_dev(), 0.2);
        assert_eq!(a.sampler(3).sample(5), a.sampler(3).sample(5));
        assert_ne!(a.sampler(3).sample(5), a.sampler(2).sample(5));
        assert!(NoiseModel::new(-0.1, 0, 1.0).is_err());
    }

    #[test]
    fn assemble_problem_shapes() {
        let sys = double_integrator();
        let cfg = ControlConfig::double_integrator();
        let est = BehaviorEstimate {
            subspace: crate::behavior::restricted_behavior(&sys, cfg.depth()).unwrap(),
            depth: cfg.depth(),
            singular_values: vec![],
        };
        let w_ini = DVector::from_element(20, 0.5);
        let prob = assemble_problem(&est, &w_ini, &cfg).unwrap();
        assert_eq!(prob.b().len(), 70);
        assert_eq!(prob.selector().len(), 20);
        assert_eq!(prob.selector().to_dense().shape(), (20, 70));
        assert_eq!(prob.b().rows(0, 20), w_ini);
        for j in 0..25 {
            assert_eq!(prob.b().rows(20 + 2 * j, 2), DVector::from_vec(vec![0.0, 1.0]));
        }
        assert!(assemble_problem(&est, &DVector::zeros(18), &cfg).is_err());

        let cfg0 = ControlConfig {
            t_ini: 0,
            t_f: 35,
            ..cfg
        };
        let prob0 = assemble_problem(&est, &DVector::zeros(0), &cfg0).unwrap();
        assert!(prob0.selector().is_empty());
        assert_eq!(prob0.b().len(), 70);
    }

    #[test]
    fn weighted_assembly_scales_channels() {
        let sys = double_integrator();
        let cfg = ControlConfig {
            weight: Some(vec![4.0, 1.0]),
            ..ControlConfig::double_integrator()
        };
        let est = BehaviorEstimate {
            subspace: crate::behavior::restricted_behavior(&sys, cfg.depth()).unwrap(),
            depth: cfg.depth(),
            singular_values: vec![],
        };
        let w_ini = DVector::from_element(20, 1.0);
        let prob = assemble_problem(&est, &w_ini, &cfg).unwrap();
        assert_eq!(prob.b()[0], 2.0);
        assert_eq!(prob.b()[1], 1.0);
        assert!(ControlConfig {
            weight: Some(vec![0.0, 1.0]),
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_radius_keeps_the_estimate() {
        let sys = double_integrator();
        let cfg = short(ControlConfig::double_integrator(), 12);
        let id = identify(&sys, &cfg, 0.0).unwrap();
        let log = nominal_controller(&sys, &id.estimate, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.distance <= 1e-8 && r.lambda == 0.0));
    }

    #[test]
    fn closed_loop_log_is_well_formed_and_deterministic() {
        let sys = double_integrator();
        let cfg = short(ControlConfig::double_integrator(), 15);
        let id = identify(&sys, &cfg, cfg.sigma).unwrap();
        assert_eq!(id.attempts, 1);
        let a = receding_horizon(&sys, &id.estimate, &cfg, &id.noise).unwrap();
        assert_eq!(a.records.len(), 15);
        for (i, r) in a.records.iter().enumerate() {
            assert_eq!(r.t, i + 1);
            assert_eq!((r.u.len(), r.y.len(), r.reference.len()), (1, 1, 1));
            assert!(r.lambda >= 0.0);
        }
        let id2 = identify(&sys, &cfg, cfg.sigma).unwrap();
        let b = receding_horizon(&sys, &id2.estimate, &cfg, &id2.noise).unwrap();
        let bits = |l: &ClosedLoopLog| -> Vec<u64> {
            l.records
                .iter()
                .flat_map(|r| r.u.iter().chain(&r.y).chain([&r.lambda]).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn past_mismatch_shrinks_with_gamma() {
        let sys = double_integrator();
        let cfg = ControlConfig::double_integrator();
        let est = BehaviorEstimate {
            subspace: crate::behavior::restricted_behavior(&sys, cfg.depth()).unwrap(),
            depth: cfg.depth(),
            singular_values: vec![],
        };
        let w_ini = DVector::zeros(20);
        let mismatch: Vec<f64> = [1.0, 4.0, 16.0]
            .iter()
            .map(|&gamma| {
                let c = ControlConfig {
                    gamma,
                    rho_deg: 0.0,
                    alpha: 0.9 / (1.0 + gamma),
                    ..cfg.clone()
                };
                let prob = assemble_problem(&est, &w_ini, &c).unwrap();
                let res = solve(&prob, &c.solver_options()).unwrap();
                assert!(res.converged);
                res.w_star.rows(0, 20).norm()
            })
            .collect();
        assert!(mismatch[0] > mismatch[1] && mismatch[1] > mismatch[2], "{mismatch:?}");
    }

    #[test]
    fn config_validation() {
        assert!(ControlConfig::double_integrator().validate().is_ok());
        assert!(ControlConfig::laplacian3().validate().is_ok());
        let bad = ControlConfig {
            alpha: 0.5,
            ..ControlConfig::double_integrator()
        };
        assert!(bad.validate().is_err());
        let bad = ControlConfig {
            x0: Some(vec![0.0]),
            ..ControlConfig::double_integrator()
        };
        assert!(bad.validate().is_err());
        assert!(ControlConfig::preset("pendulum").is_err());
        assert_relative_eq!(ControlConfig::double_integrator().rho(), 1f64.to_radians().sin());
    }
}
