//! Command-line front end: `heatstab <spectrum|verify|simulate>`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, InitialData, InputSignal, ObserverInit};
use crate::elliptic::suggest_alpha;
use crate::error::{Error, Result};
use crate::grid::{assemble_operators, DiscreteOperator, Grid};
use crate::linalg;
use crate::simulate::{self, estimate_decay_rate, SimState, Trace};
use crate::spectral::{compute_eigenbasis_with, gram_reports, select_unstable_count, EigenBasis, EigenOptions};
use crate::synthesis::{synthesize, Design, DesignParams};
use crate::verify::{run_suite, SuiteTolerances};

#[derive(Debug, Parser)]
#[command(name = "heatstab", version, about = "Boundary stabilization and observation of the unstable heat equation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Eigenvalues, unstable-mode count and Γ1 trace Gram matrices.
    Spectrum(CommonArgs),
    /// Synthesize the design and run the identity suite.
    Verify(CommonArgs),
    /// Integrate one scenario, write its CSV trace and print a summary line.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = Scenario::Closed)]
        scenario: Scenario,
        /// Directory receiving `<scenario>.csv`.
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Open,
    Closed,
    Observer,
    OutputFeedback,
}

impl Scenario {
    pub fn file_stem(self) -> &'static str {
        match self {
            Scenario::Open => "open",
            Scenario::Closed => "closed",
            Scenario::Observer => "observer",
            Scenario::OutputFeedback => "output-feedback",
        }
    }
}

/// Grid, operators and eigenbasis shared by every command.
pub struct Problem {
    pub cfg: Config,
    pub grid: Grid,
    pub op: DiscreteOperator,
    pub basis: EigenBasis,
}

impl Problem {
    pub fn build(cfg: Config) -> Result<Self> {
        let grid = Grid::new(cfg.nx, cfg.ny, cfg.lx, cfg.ly, cfg.boundary)?;
        let op = assemble_operators(&grid);
        let opts = EigenOptions { method: cfg.eigen_method, cluster_tol_rel: cfg.cluster_tol, ..Default::default() };
        let start = Instant::now();
        let basis = compute_eigenbasis_with(&op, &grid, cfg.modes, &opts)?;
        log::info!("{} eigenpairs on {} nodes in {:.2?}", cfg.modes, grid.len(), start.elapsed());
        Ok(Self { cfg, grid, op, basis })
    }

    pub fn params(&self) -> DesignParams {
        DesignParams {
            lqr_q: self.cfg.lqr_q,
            lqr_r: self.cfg.lqr_r,
            eps_res: self.cfg.eps_res,
            rank_tol_rel: self.cfg.rank_tol,
            sing_tol: self.cfg.sing_tol,
            cluster_tol_rel: self.cfg.cluster_tol,
            ..DesignParams::new(self.cfg.mu, self.cfg.alpha)
        }
    }

    /// Synthesizes the design; on resonance a nonresonant `α` is suggested on `err`.
    pub fn design(&self, err: &mut dyn Write) -> Result<Design<'_>> {
        let start = Instant::now();
        let d = synthesize(&self.grid, &self.op, &self.basis, self.params()).inspect_err(|e| {
            if let Error::Resonance { .. } = e {
                if let Some(a) = suggest_alpha(&self.basis, self.cfg.mu, self.cfg.alpha) {
                    let _ = writeln!(err, "hint: alpha={a:.6} keeps theta=-alpha-mu between computed eigenvalues");
                }
            }
        })?;
        log::info!("synthesis with N={} in {:.2?}", d.n(), start.elapsed());
        Ok(d)
    }

    pub fn initial_field(&self) -> Result<DVector<f64>> {
        let w = &self.grid.omega_weights;
        let x = match &self.cfg.init {
            InitialData::Phi1 => return Ok(self.basis.phi_vec(0).into_owned()),
            InitialData::Random => linalg::uniform_vector(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed), self.grid.len()),
            InitialData::File(p) => read_field(p, self.grid.len())?,
        };
        let n = linalg::weighted_norm(w, &x);
        Ok(if n > 0.0 { x / n } else { x })
    }

    fn input(&self) -> Box<dyn Fn(f64) -> DVector<f64> + '_> {
        match self.cfg.input {
            InputSignal::Zero => Box::new(move |_| DVector::zeros(self.grid.nx)),
            InputSignal::Sine => {
                let xs = DVector::from_vec(self.grid.gamma1_positions());
                let lx = self.grid.lx;
                Box::new(move |t| {
                    let amp = (2.0 * std::f64::consts::PI * t).sin();
                    xs.map(|x| amp * (std::f64::consts::PI * x / lx).sin())
                })
            }
        }
    }
}

fn read_field(path: &Path, len: usize) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read initial data {}: {e}", path.display())))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad number '{s}' in {}", path.display()))))
        .collect::<Result<_>>()?;
    if values.len() != len {
        return Err(Error::LengthMismatch { expected: len, found: values.len() });
    }
    Ok(DVector::from_vec(values))
}

/// Runs a parsed command; returns the process exit code for completed runs.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Spectrum(c) => cmd_spectrum(&Problem::build(Config::load(c.config.as_deref(), &c.set)?)?, out),
        Command::Verify(c) => cmd_verify(&Problem::build(Config::load(c.config.as_deref(), &c.set)?)?, out, err),
        Command::Simulate { common, scenario, out: dir } => {
            let problem = Problem::build(Config::load(common.config.as_deref(), &common.set)?)?;
            let summary = cmd_simulate(&problem, scenario, err)?;
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}.csv", scenario.file_stem()));
            simulate::write_trace_csv(&summary.trace, std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            writeln!(out, "{}", summary.line())?;
            Ok(0)
        }
    }
}

pub fn cmd_spectrum(p: &Problem, out: &mut dyn Write) -> Result<u8> {
    let cfg = &p.cfg;
    writeln!(out, "grid={}x{} boundary={} lx={} ly={} mu={} modes={}", cfg.nx, cfg.ny, cfg.boundary, cfg.lx, cfg.ly, cfg.mu, cfg.modes)?;
    writeln!(out, "{:>4} {:>16} {:>16}", "j", "lambda", "lambda+mu")?;
    for (j, l) in p.basis.lambdas.iter().enumerate() {
        writeln!(out, "{:>4} {:>16.8} {:>16.8}", j + 1, l, l + cfg.mu)?;
    }
    let sel = select_unstable_count(&p.basis, cfg.mu)?;
    if sel.count == 0 {
        writeln!(out, "N=0, plant stable (margin lambda_1+mu={:.6e})", sel.margin)?;
        return Ok(0);
    }
    writeln!(out, "N={}, margin lambda_{}+mu={:.6e}", sel.count, sel.count + 1, sel.margin)?;
    let cluster_tol = cfg.cluster_tol * p.basis.lambdas[0].abs();
    for g in gram_reports(&p.basis, sel.count, &p.grid, cluster_tol) {
        let modes: Vec<String> = g.group.iter().map(|j| (j + 1).to_string()).collect();
        writeln!(
            out,
            "gram modes={} sigma_min={:.6e} sigma_max={:.6e} sing_tol={:.1e} {}",
            modes.join("+"),
            g.sigma_min,
            g.sigma_max,
            cfg.sing_tol,
            if g.sigma_min >= cfg.sing_tol { "ok" } else { "DEGENERATE" }
        )?;
    }
    Ok(0)
}

pub fn cmd_verify(p: &Problem, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    let d = p.design(err)?;
    writeln!(
        out,
        "N={} theta={:.6} resonance_margin={:.6e} eps_res={:.1e} riccati_residual={:.3e}",
        d.n(),
        d.solver.theta(),
        d.solver.cfg.resonance_margin,
        d.solver.cfg.eps_res,
        d.gains.residual
    )?;
    let tol = SuiteTolerances { seed: p.cfg.seed, ..Default::default() };
    let checks = run_suite(&d, &tol)?;
    for c in &checks {
        writeln!(out, "{c}")?;
    }
    let passed = checks.iter().filter(|c| c.passed).count();
    writeln!(out, "verify: {passed}/{} passed", checks.len())?;
    Ok(if passed == checks.len() { 0 } else { 4 })
}

pub struct SimulationSummary {
    pub scenario: Scenario,
    pub trace: Trace,
    pub abscissa: f64,
    pub fitted_rate: f64,
    pub underflow: bool,
    pub energy_ratio: f64,
    /// Extra `key=value` pairs appended to the summary line.
    pub extra: Vec<(&'static str, f64)>,
}

impl SimulationSummary {
    pub fn line(&self) -> String {
        let mut s = format!(
            "scenario={}, abscissa={:.6e}, fitted_rate={:.6e}, energy_ratio={:.6e}",
            self.scenario.file_stem(),
            self.abscissa,
            self.fitted_rate,
            self.energy_ratio
        );
        if self.underflow {
            s.push_str(", underflow=true");
        }
        for (k, v) in &self.extra {
            s.push_str(&format!(", {k}={v:.6e}"));
        }
        s
    }
}

/// Integrates one scenario. The decay rate and energy ratio refer to the
/// plant for `open`, to `(w, v)` for `closed`, to the estimation error for
/// `observer` and to the whole stacked state for `output-feedback`.
pub fn cmd_simulate(p: &Problem, scenario: Scenario, err: &mut dyn Write) -> Result<SimulationSummary> {
    let cfg = &p.cfg;
    let w0 = p.initial_field()?;
    let nx = p.grid.nx;
    let start = Instant::now();
    let horizon = cfg.tmax.min(1.0);
    let (trace, rate_source, abscissa, mut extra) = match scenario {
        Scenario::Open => {
            let tr = simulate::run_open_loop(&p.op, &p.grid, cfg.mu, &w0, cfg.tmax, cfg.dt)?;
            let open = crate::synthesis::AssembledGenerator::new(
                &p.grid,
                &p.op.laplacian,
                &[("w", crate::synthesis::BlockKind::Field { shift: cfg.mu })],
            );
            let rich = simulate::richardson_estimate(&open, &w0, horizon, cfg.dt)?;
            let energy = tr.energy.clone();
            (tr, energy, p.basis.lambdas[0] + cfg.mu, vec![("richardson_err", rich.error_estimate)])
        }
        Scenario::Closed => {
            let d = p.design(err)?;
            let closed = d.closed_loop()?;
            let tr = simulate::run_closed_loop(&closed, &w0, &DVector::zeros(nx), cfg.tmax, cfg.dt)?;
            let x0 = SimState { w: Some(w0.clone()), ..Default::default() }.stack(&closed)?;
            let rich = simulate::richardson_estimate(&closed, &x0, horizon, cfg.dt)?;
            let energy = tr.energy.clone();
            (tr, energy, closed.spectral_abscissa()?, vec![("richardson_err", rich.error_estimate)])
        }
        Scenario::Observer => {
            let d = p.design(err)?;
            let init = plant_and_observer(&w0, cfg.observer_init, nx);
            let u = p.input();
            let run = simulate::run_observer(&d, u.as_ref(), &init, cfg.tmax, cfg.dt)?;
            let adjoint = d.observer_generator()?;
            let max_error = run.trace.max_energy();
            let energy = run.error_trace.energy.clone();
            (
                run.trace,
                energy,
                adjoint.spectral_abscissa()?,
                vec![("max_error", max_error), ("consistency", run.consistency)],
            )
        }
        Scenario::OutputFeedback => {
            let d = p.design(err)?;
            let init = plant_and_observer(&w0, cfg.observer_init, nx);
            let tr = simulate::run_output_feedback(&d, &init, cfg.tmax, cfg.dt)?;
            // eig = eig(𝒜) ∪ eig(𝒜*) ∪ {-α}
            let abscissa = d
                .closed_loop()?
                .spectral_abscissa()?
                .max(d.observer_generator()?.spectral_abscissa()?)
                .max(-cfg.alpha);
            let energy = tr.energy.clone();
            (tr, energy, abscissa, Vec::new())
        }
    };
    log::info!("{} scenario integrated in {:.2?}", scenario.file_stem(), start.elapsed());
    let fit = estimate_decay_rate(&trace.times, &rate_source, cfg.window)?;
    let energy_ratio = match (rate_source.first(), rate_source.last()) {
        (Some(&a), Some(&b)) if a > 0.0 => b / a,
        _ => f64::NAN,
    };
    extra.insert(0, ("t_final", trace.times.last().copied().unwrap_or(0.0)));
    Ok(SimulationSummary { scenario, trace, abscissa, fitted_rate: fit.rate, underflow: fit.underflow, energy_ratio, extra })
}

fn plant_and_observer(w0: &DVector<f64>, obs: ObserverInit, nx: usize) -> SimState {
    let zero_t = DVector::zeros(nx);
    let w_hat = match obs {
        ObserverInit::Zero => DVector::zeros(w0.len()),
        ObserverInit::Match => w0.clone(),
    };
    SimState {
        w: Some(w0.clone()),
        v: Some(zero_t.clone()),
        p: Some(zero_t.clone()),
        w_hat: Some(w_hat),
        p_hat: Some(zero_t),
        t: 0.0,
    }
}
