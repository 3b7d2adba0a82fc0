//! Runs the configured checks, computing shared schedules and spectra once.

use polchinski_core::curvature::{
    curvature_schedule, higher_eigenvalue_margin, intertwining_check, ordered_pairs, theorem_margin, CurvatureSchedule,
    SampleSet,
};
use polchinski_core::flow::{conservation_check, heatflow_harness, load_density_table, DensityTable, TailInput};
use polchinski_core::phi4::{hessian_identity_check, phi4_schedules, seeded_fields, Estimator, Phi4SchedulePoint};
use polchinski_core::spectral::{build_generator, spectrum, RICHARDSON_TOLERANCE};
use polchinski_core::{
    CovarianceSchedule, Drift, Error, FlowMeasure, FlowOptions, Grid, PotentialDescriptor, QuadratureRule,
    SpectralResult, TestFunction,
};

use crate::config::{CheckKind, ExperimentConfig, Spacing};
use crate::report::{number, Row, RunReport, Status, Table};
use crate::ConfigError;

/// One-sided slack on theorem and higher-eigenvalue margins.
pub const MARGIN_TOLERANCE: f64 = 1e-4;
/// Slack on `multiscale_margin(t) ≥ λ_t'`.
pub const CRITERION_TOLERANCE: f64 = 1e-6;
/// Slack on `α'(bound) ≥ α'(sampled)`.
pub const ALPHA_BOUND_TOLERANCE: f64 = 1e-8;
/// Intertwining slack plus the grid allowance.
pub const INTERTWINING_TOLERANCE: f64 = 1e-6 + 1e-4;
pub const VARIANCE_MISMATCH_TOLERANCE: f64 = 1e-3;
pub const TAIL_TOLERANCE: f64 = 1e-4;
/// Pointwise tolerance on the energy integrand when it has a closed form.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-6;
pub const MARTINGALE_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-5;
pub const HEAT_MONOTONE_TOLERANCE: f64 = 1e-4;
pub const HEAT_GAUSSIAN_TOLERANCE: f64 = 2e-3;

/// Grid nodes per axis for the variance decomposition.
const VARIANCE_POINTS: usize = 257;
/// Field samples for the Hessian identity.
const IDENTITY_SAMPLES: usize = 10;
const DEFAULT_SEED: u64 = 0;
/// The curvature grid below the first configured time runs log-spaced from
/// `RAMP_START · t₀` to `t₀` with `RAMP_FACTOR · refine` steps.
const RAMP_START: f64 = 1e-4;
const RAMP_FACTOR: usize = 4;

struct Context {
    cfg: ExperimentConfig,
    schedule: CovarianceSchedule,
    v0: PotentialDescriptor,
    q: QuadratureRule,
    times: Vec<f64>,
    drift: Drift,
    seed: u64,
    samples: SampleSet,
    spectra: Option<Result<Vec<SpectralResult>, Error>>,
    curvature: Option<Result<CurvatureSchedule, Error>>,
    phi4_points: Option<Result<Vec<Phi4SchedulePoint>, Error>>,
}

fn error_row(check: CheckKind, e: &Error) -> Row {
    let status = match e {
        Error::EigenNotConverged { .. } | Error::McmcNotConverged { .. } => Status::Unconverged,
        _ => Status::Fail,
    };
    Row::new(check, format!("error: {e}"), f64::NAN).status(status)
}

fn shared_error(e: &Error) -> Error {
    Error::InvalidInput(format!("prerequisite failed: {e}"))
}

/// Times between consecutive grid times, `refine` steps per interval.
fn refined(times: &[f64], refine: usize, spacing: Spacing) -> Vec<f64> {
    let mut out = Vec::with_capacity((times.len() - 1) * refine + 1);
    for w in times.windows(2) {
        for j in 0..refine {
            let f = j as f64 / refine as f64;
            out.push(match spacing {
                _ if j == 0 => w[0],
                Spacing::Log if w[0] > 0.0 => (w[0].ln() + (w[1].ln() - w[0].ln()) * f).exp(),
                _ => w[0] + (w[1] - w[0]) * f,
            });
        }
    }
    out.push(times[times.len() - 1]);
    out
}

fn log_times(first: f64, last: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| (first.ln() + (last.ln() - first.ln()) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
        let dim = cfg.dim()?;
        let samples = SampleSet::standard(dim, cfg.discretization.half_width, seed)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.schedule()?,
            v0: cfg.potential()?,
            q: cfg.quadrature(),
            times: cfg.t_grid.times(),
            drift: cfg.drift()?,
            seed,
            samples,
            spectra: None,
            curvature: None,
            phi4_points: None,
        })
    }

    fn dim(&self) -> usize {
        self.schedule.dim()
    }

    fn flow_options(&self, points: usize) -> FlowOptions {
        FlowOptions {
            sd_multiple: self.cfg.discretization.sd_multiple,
            ..FlowOptions::new(vec![points; self.dim()])
        }
    }

    fn spectra(&mut self) -> Result<&[SpectralResult], Error> {
        if self.spectra.is_none() {
            let opts = self.flow_options(self.cfg.discretization.points);
            let k = self.cfg.discretization.eigen_count;
            let r = self
                .times
                .iter()
                .map(|&t| {
                    let nu = FlowMeasure::new(&self.schedule, &self.v0, t, &self.q, &opts)?;
                    let gen = build_generator(&nu, nu.mobility(), self.drift)?;
                    spectrum(&gen, k)
                })
                .collect();
            self.spectra = Some(r);
        }
        self.spectra.as_ref().unwrap().as_deref().map_err(shared_error)
    }

    fn curvature(&mut self) -> Result<&CurvatureSchedule, Error> {
        if self.curvature.is_none() {
            let refine = self.cfg.discretization.refine;
            let first = self.times[0];
            let mut fine = Vec::new();
            if first > 0.0 {
                // λ_t is integrated from 0 even when the grid starts later.
                fine.push(0.0);
                let ramp = log_times(first * RAMP_START, first, RAMP_FACTOR * refine + 1);
                fine.extend_from_slice(&ramp[..ramp.len() - 1]);
            }
            fine.extend(refined(&self.times, refine, self.cfg.t_grid.spacing));
            self.curvature = Some(curvature_schedule(&self.schedule, &self.v0, &fine, &self.samples, &self.q));
        }
        self.curvature.as_ref().unwrap().as_ref().map_err(shared_error)
    }

    fn phi4_points(&mut self) -> Result<&[Phi4SchedulePoint], Error> {
        if self.phi4_points.is_none() {
            let model = self.cfg.phi4_model().map_err(|e| Error::InvalidInput(e.to_string()))?;
            let positive: Vec<f64> = self.times.iter().copied().filter(|&t| t > 0.0).collect();
            self.phi4_points = Some(phi4_schedules(
                &model,
                &positive,
                &self.samples,
                Estimator::Auto(self.seed),
                &self.q,
            ));
        }
        self.phi4_points.as_ref().unwrap().as_deref().map_err(shared_error)
    }

    fn run(&mut self, check: CheckKind) -> Result<Vec<Row>, Error> {
        match check {
            CheckKind::Spectrum => self.check_spectrum(),
            CheckKind::Theorem => self.check_theorem(),
            CheckKind::HigherK => self.check_higher_k(),
            CheckKind::Intertwining => self.check_intertwining(),
            CheckKind::Variance => self.check_variance(),
            CheckKind::Criterion => self.check_criterion(),
            CheckKind::Phi4Identity => self.check_identity(),
            CheckKind::Heatflow => self.check_heatflow(),
        }
    }

    fn check_spectrum(&mut self) -> Result<Vec<Row>, Error> {
        let mut rows = Vec::new();
        for r in self.spectra()? {
            let status = if r.converged { Status::Pass } else { Status::Unconverged };
            for (k, mu) in r.eigenvalues.iter().enumerate().skip(1) {
                rows.push(Row::new(CheckKind::Spectrum, "mu", *mu).t(r.t).k(k).status(status));
            }
            rows.push(
                Row::new(CheckKind::Spectrum, "richardson-change", r.richardson_change.unwrap_or(f64::NAN))
                    .t(r.t)
                    .at_most(RICHARDSON_TOLERANCE)
                    .status(status),
            );
        }
        Ok(rows)
    }

    fn check_theorem(&mut self) -> Result<Vec<Row>, Error> {
        let trace: Vec<(f64, f64)> = self.spectra()?.iter().map(|r| (r.t, r.poincare_constant)).collect();
        let pairs = ordered_pairs(&self.times);
        let margins = theorem_margin(&trace, self.curvature()?, &pairs)?;
        Ok(margins
            .iter()
            .map(|m| {
                Row::new(CheckKind::Theorem, "margin", m.margin)
                    .s(m.s)
                    .t(m.t)
                    .at_least(MARGIN_TOLERANCE)
            })
            .collect())
    }

    fn check_higher_k(&mut self) -> Result<Vec<Row>, Error> {
        let trace: Vec<(f64, Vec<f64>)> = self.spectra()?.iter().map(|r| (r.t, r.eigenvalues.clone())).collect();
        let k = self.cfg.discretization.eigen_count;
        let pairs = ordered_pairs(&self.times);
        let margins = higher_eigenvalue_margin(&trace, self.curvature()?, &pairs, k)?;
        Ok(margins
            .iter()
            .map(|m| {
                Row::new(CheckKind::HigherK, "margin", m.margin)
                    .s(m.s)
                    .t(m.t)
                    .k(m.k)
                    .at_least(MARGIN_TOLERANCE)
            })
            .collect())
    }

    fn check_intertwining(&mut self) -> Result<Vec<Row>, Error> {
        let d = self.dim();
        let per_axis = match d {
            1 => 161,
            2 => 21,
            _ => 9,
        };
        let grid = Grid::aligned(vec![self.cfg.discretization.half_width; d], vec![per_axis; d])?;
        let times: Vec<f64> = self.times.iter().copied().filter(|&t| t > 0.0).collect();
        self.curvature()?;
        let curv = self.curvature.as_ref().unwrap().as_ref().unwrap();
        let mut rows = Vec::new();
        for c in [-1.0, 0.0, 1.0] {
            let mut center = vec![0.0; d];
            center[0] = c;
            let f = TestFunction::GaussianBump {
                center,
                width: 0.5,
                amplitude: 1.0,
            };
            for &t in &times {
                let r = intertwining_check(&self.schedule, &self.v0, &f, t, curv, &grid, &self.q)?;
                rows.push(
                    Row::new(CheckKind::Intertwining, format!("bump({c})"), r.max_violation)
                        .t(t)
                        .at_most(INTERTWINING_TOLERANCE),
                );
            }
        }
        Ok(rows)
    }

    fn check_variance(&mut self) -> Result<Vec<Row>, Error> {
        let d = self.dim();
        let v = &self.cfg.variance;
        let mut t_grid = vec![0.0];
        t_grid.extend(log_times(1e-4, v.horizon, v.count));
        let curv = curvature_schedule(&self.schedule, &self.v0, &t_grid, &self.samples, &self.q)?;
        let n = curv.t_grid.len();
        let tail = TailInput {
            lambda: curv.lambda_integral[n - 1],
            lambda_prime: curv.lambda_prime[n - 1],
            c0_radius: self.schedule.initial_radius()?,
        };
        let mut axis = vec![0.0; d];
        axis[0] = 1.0;
        let f = TestFunction::Linear(axis);
        let points = self.cfg.discretization.points.min(VARIANCE_POINTS);
        let r = conservation_check(&self.schedule, &self.v0, &f, &t_grid, &self.q, &self.flow_options(points), tail)?;
        let tail_item = if r.t_too_small { "tail (T too small)" } else { "tail" };
        let mut rows = vec![
            Row::new(CheckKind::Variance, "variance", r.variance),
            Row::new(CheckKind::Variance, "integral", r.integral),
            Row::new(CheckKind::Variance, "mismatch", r.mismatch).at_most(VARIANCE_MISMATCH_TOLERANCE),
            Row::new(CheckKind::Variance, tail_item, r.tail).t(v.horizon).at_most(TAIL_TOLERANCE),
            Row::new(CheckKind::Variance, "martingale", r.martingale_deviation).at_most(MARTINGALE_TOLERANCE),
        ];
        if self.v0.is_zero() {
            // P_{0t} fixes linear functions, so the integrand is C_t'[0, 0].
            let mut worst: f64 = 0.0;
            for &(t, e) in &r.integrand {
                worst = worst.max((e - self.schedule.eval(t)?.c_prime[(0, 0)]).abs());
            }
            rows.push(Row::new(CheckKind::Variance, "integrand-error", worst).at_most(CLOSED_FORM_TOLERANCE));
            let exact = self.schedule.c_infinity()[(0, 0)];
            rows.push(
                Row::new(CheckKind::Variance, "variance-error", (r.variance - exact).abs())
                    .at_most(CLOSED_FORM_TOLERANCE),
            );
        }
        Ok(rows)
    }

    fn check_criterion(&mut self) -> Result<Vec<Row>, Error> {
        let mut rows = Vec::new();
        self.curvature()?;
        if self.cfg.is_phi4() {
            let points = self.phi4_points()?.to_vec();
            let curv = self.curvature.as_ref().unwrap().as_ref().unwrap();
            for p in points {
                let margin = curv.lambda_prime_at(p.t)?;
                rows.push(
                    Row::new(CheckKind::Criterion, "admissibility", margin - p.lambda_prime)
                        .t(p.t)
                        .at_least(CRITERION_TOLERANCE),
                );
                rows.push(
                    Row::new(CheckKind::Criterion, "alpha-bound", p.alpha_prime_bound - curv.alpha_prime_at(p.t)?)
                        .t(p.t)
                        .at_least(ALPHA_BOUND_TOLERANCE),
                );
            }
        } else {
            let curv = self.curvature.as_ref().unwrap().as_ref().unwrap();
            for (i, &t) in curv.t_grid.iter().enumerate() {
                if !self.times.iter().any(|&s| (s - t).abs() <= 1e-12 * t.max(1.0)) {
                    continue;
                }
                let a = curv.admissibility(&self.schedule, &self.v0, i, &self.samples, &self.q)?;
                rows.push(
                    Row::new(CheckKind::Criterion, "admissibility", a)
                        .t(t)
                        .at_least(CRITERION_TOLERANCE),
                );
            }
        }
        Ok(rows)
    }

    fn check_identity(&mut self) -> Result<Vec<Row>, Error> {
        let model = self.cfg.phi4_model().map_err(|e| Error::InvalidInput(e.to_string()))?;
        let fields = seeded_fields(model.sites(), IDENTITY_SAMPLES, 1.0, self.seed);
        let mut rows = Vec::new();
        for &t in self.times.iter().filter(|&&t| t > 0.0) {
            let r = hessian_identity_check(&model, t, &fields, &self.q)?;
            rows.push(
                Row::new(CheckKind::Phi4Identity, "max-error", r.max_error)
                    .t(t)
                    .at_most(IDENTITY_TOLERANCE),
            );
        }
        Ok(rows)
    }

    fn check_heatflow(&mut self) -> Result<Vec<Row>, Error> {
        let h = &self.cfg.heatflow;
        let table = heat_input(&h.input)?;
        let s_grid: Vec<f64> = (0..h.s_count)
            .map(|i| h.s_max * i as f64 / (h.s_count - 1) as f64)
            .collect();
        let trace = heatflow_harness(&table, &s_grid, h.points)?;
        let mut rows: Vec<Row> = trace
            .points
            .iter()
            .map(|p| {
                let status = if p.converged { Status::Pass } else { Status::Unconverged };
                Row::new(CheckKind::Heatflow, "poincare", p.poincare).s(p.s).status(status)
            })
            .collect();
        let monotone = Row::new(CheckKind::Heatflow, "max-decrease", trace.max_decrease);
        rows.push(if trace.log_concave {
            monotone.at_most(HEAT_MONOTONE_TOLERANCE)
        } else {
            monotone
        });
        rows.push(
            Row::new(
                CheckKind::Heatflow,
                "two-sided",
                trace.poincare_input - (trace.poincare_unit - 1.0),
            )
            .at_least(HEAT_MONOTONE_TOLERANCE * trace.poincare_input),
        );
        if h.input == "gaussian" {
            let worst = trace
                .points
                .iter()
                .map(|p| (p.poincare - (1.0 + p.s)).abs() / (1.0 + p.s))
                .fold(0.0, f64::max);
            rows.push(Row::new(CheckKind::Heatflow, "gaussian-error", worst).at_most(HEAT_GAUSSIAN_TOLERANCE));
        }
        Ok(rows)
    }

    fn schedule_table(&self) -> Table {
        let Some(Ok(curv)) = &self.curvature else {
            return Table::default();
        };
        let phi4 = match &self.phi4_points {
            Some(Ok(p)) => Some(p.as_slice()),
            _ => None,
        };
        let mut header = vec!["t", "lambda_prime", "alpha_prime", "lambda_int", "alpha_int", "samples_used"];
        if phi4.is_some() {
            header.extend(["chi", "chi_stderr", "sigma_min"]);
        }
        let mut table = Table::new(&header);
        for i in 0..curv.t_grid.len() {
            let t = curv.t_grid[i];
            let mut row = vec![
                number(t),
                number(curv.lambda_prime[i]),
                number(curv.alpha_prime[i]),
                number(curv.lambda_integral[i]),
                number(curv.alpha_integral[i]),
                curv.samples_used[i].to_string(),
            ];
            if let Some(points) = phi4 {
                match points.iter().find(|p| p.t == t) {
                    Some(p) => row.extend([number(p.chi), number(p.chi_stderr), number(p.sigma_min)]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            table.rows.push(row);
        }
        table
    }

    fn spectrum_table(&self) -> Table {
        let Some(Ok(spectra)) = &self.spectra else {
            return Table::default();
        };
        let k = self.cfg.discretization.eigen_count;
        let mut header = vec!["t".to_string()];
        header.extend((0..=k).map(|j| format!("mu_{j}")));
        header.push("converged".into());
        let mut table = Table {
            header,
            rows: Vec::new(),
        };
        for r in spectra {
            let mut row = vec![number(r.t)];
            row.extend(r.eigenvalues.iter().map(|v| number(*v)));
            row.push(r.converged.to_string());
            table.rows.push(row);
        }
        table
    }
}

/// Density table for the heat-flow harness: `uniform` on `[−1, 1]`, a
/// standard `gaussian`, or a two-column file.
pub fn heat_input(input: &str) -> Result<DensityTable, Error> {
    match input {
        "uniform" => {
            let x: Vec<f64> = (0..=400).map(|i| -1.0 + i as f64 / 200.0).collect();
            DensityTable::new(x, vec![0.5; 401])
        }
        "gaussian" => {
            let n = 2401;
            let x: Vec<f64> = (0..n).map(|i| -12.0 + 24.0 * i as f64 / (n - 1) as f64).collect();
            let p = x
                .iter()
                .map(|v| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt())
                .collect();
            DensityTable::new(x, p)
        }
        path => load_density_table(std::path::Path::new(path)),
    }
}

/// Runs every configured check. Module errors become failing rows of the
/// owning check and later checks still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ConfigError> {
    let mut ctx = Context::new(cfg)?;
    let mut rows = Vec::new();
    for check in cfg.check_kinds()? {
        log::info!("running {check}");
        match ctx.run(check) {
            Ok(r) => rows.extend(r),
            Err(e) => {
                log::warn!("{check}: {e}");
                rows.push(error_row(check, &e));
            }
        }
    }
    Ok(RunReport {
        rows,
        schedule: ctx.schedule_table(),
        spectrum: ctx.spectrum_table(),
        config_echo: cfg.to_toml(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
    })
}
