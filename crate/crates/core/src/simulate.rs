//! Backward-Euler time integration of the assembled generators, energy
//! traces, decay-rate fitting and CSV output.
//!
//! A generator is `M = D + U Vᵀ` with `D` block diagonal (banded Laplacian
//! blocks and scalar trace blocks) and `U Vᵀ` the stacked couplings. The step
//! matrix `I - dt M` is inverted with the Woodbury identity, so each step costs
//! one banded solve per field block plus a small dense solve of size
//! `rank(U Vᵀ)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};
use crate::grid::{Grid, DiscreteOperator};
use crate::linalg::BandedLu;
use crate::synthesis::{AssembledGenerator, Block, BlockKind, Design};

/// Norms below this count as numerical zero when fitting decay rates.
pub const UNDERFLOW_FLOOR: f64 = 1e-290;

enum BlockSolve {
    Field(usize),
    Trace(f64),
}

/// Cached factorization of `I - dt M` for one generator and one step size.
pub struct Stepper {
    dt: f64,
    blocks: Vec<(Block, BlockSolve)>,
    lus: Vec<BandedLu>,
    /// `V`, dim x r.
    v: DMatrix<f64>,
    /// `(I - dt D)⁻¹ dt U`, dim x r.
    y: DMatrix<f64>,
    cap: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl Stepper {
    pub fn new(gen: &AssembledGenerator, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let mut lus: Vec<BandedLu> = Vec::new();
        let mut shifts: Vec<f64> = Vec::new();
        let mut blocks = Vec::with_capacity(gen.blocks.len());
        for b in &gen.blocks {
            let solve = match b.kind {
                BlockKind::Field { shift } => {
                    let idx = match shifts.iter().position(|&s| s == shift) {
                        Some(i) => i,
                        None => {
                            let lu = BandedLu::from_csr(&gen.laplacian, gen.bandwidth, gen.bandwidth, -dt, 1.0 - dt * shift)
                                .map_err(|e| Error::Singular(format!("step matrix of block '{}': {e}", b.name)))?;
                            lus.push(lu);
                            shifts.push(shift);
                            lus.len() - 1
                        }
                    };
                    BlockSolve::Field(idx)
                }
                BlockKind::Trace { diag } => {
                    let d = 1.0 - dt * diag;
                    if d.abs() <= f64::EPSILON {
                        return Err(Error::Singular(format!(
                            "step matrix of block '{}' is singular: 1/dt = {} equals its eigenvalue",
                            b.name,
                            1.0 / dt
                        )));
                    }
                    BlockSolve::Trace(d)
                }
            };
            blocks.push((b.clone(), solve));
        }

        let dim = gen.dim();
        let r = gen.rank();
        let mut u = DMatrix::zeros(dim, r);
        let mut v = DMatrix::zeros(dim, r);
        let mut col = 0;
        for c in &gen.couplings {
            let (rb, cb) = (&gen.blocks[c.row], &gen.blocks[c.col]);
            let k = c.left.ncols();
            u.view_mut((rb.offset, col), (rb.len, k)).copy_from(&(dt * &c.left));
            v.view_mut((cb.offset, col), (cb.len, k)).copy_from(&c.right);
            col += k;
        }

        let mut stepper = Self { dt, blocks, lus, v, y: DMatrix::zeros(0, 0), cap: None };
        for j in 0..r {
            let mut c = u.column(j).into_owned();
            stepper.solve_diag(&mut c);
            u.set_column(j, &c);
        }
        stepper.y = u;
        if r > 0 {
            let cap = DMatrix::identity(r, r) - stepper.v.tr_mul(&stepper.y);
            let lu = cap.lu();
            if !lu.is_invertible() {
                return Err(Error::Singular("capacitance matrix of the step is singular".into()));
            }
            stepper.cap = Some(lu);
        }
        Ok(stepper)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn solve_diag(&self, x: &mut DVector<f64>) {
        for (b, s) in &self.blocks {
            let mut xb = x.rows_mut(b.offset, b.len);
            match *s {
                BlockSolve::Field(i) => self.lus[i].solve_in_place(xb.as_mut_slice()),
                BlockSolve::Trace(d) => xb /= d,
            }
        }
    }

    /// `x ← (I - dt M)⁻¹ x`.
    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = x.clone();
        self.solve_diag(&mut z);
        if let Some(cap) = &self.cap {
            let c = cap.solve(&self.v.tr_mul(&z)).expect("capacitance factor checked at construction");
            z.gemv(1.0, &self.y, &c, 1.0);
        }
        z
    }

    /// `x ← (I - dt M)⁻¹ (x + dt f)`.
    pub fn step_forced(&self, x: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
        self.step(&(x + self.dt * f))
    }
}

/// One backward-Euler step without caching.
pub fn step(gen: &AssembledGenerator, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    Ok(Stepper::new(gen, dt)?.step(x))
}

/// Per-block initial data; blocks a scenario does not use are ignored and
/// missing ones start at zero.
#[derive(Clone, Debug, Default)]
pub struct SimState {
    pub w: Option<DVector<f64>>,
    pub v: Option<DVector<f64>>,
    pub p: Option<DVector<f64>>,
    pub w_hat: Option<DVector<f64>>,
    pub p_hat: Option<DVector<f64>>,
    pub t: f64,
}

impl SimState {
    fn get(&self, name: &str) -> Option<&DVector<f64>> {
        match name {
            "w" => self.w.as_ref(),
            "v" | "v_hat" => self.v.as_ref(),
            "p" => self.p.as_ref(),
            "w_hat" => self.w_hat.as_ref(),
            "p_hat" => self.p_hat.as_ref(),
            _ => None,
        }
    }

    fn set(&mut self, name: &str, x: DVector<f64>) {
        match name {
            "w" => self.w = Some(x),
            "v" | "v_hat" => self.v = Some(x),
            "p" => self.p = Some(x),
            "w_hat" => self.w_hat = Some(x),
            "p_hat" => self.p_hat = Some(x),
            _ => {}
        }
    }

    pub fn stack(&self, gen: &AssembledGenerator) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(gen.dim());
        for b in &gen.blocks {
            if let Some(src) = self.get(b.name) {
                if src.len() != b.len {
                    return Err(Error::LengthMismatch { expected: b.len, found: src.len() });
                }
                x.rows_mut(b.offset, b.len).copy_from(src);
            }
        }
        Ok(x)
    }

    pub fn unstack(gen: &AssembledGenerator, x: &DVector<f64>, t: f64) -> Self {
        let mut s = SimState { t, ..Default::default() };
        for b in &gen.blocks {
            s.set(b.name, x.rows(b.offset, b.len).into_owned());
        }
        s
    }
}

/// Sampled norms of one run. Columns a scenario does not produce are `None`.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub times: Vec<f64>,
    pub norm_w: Option<Vec<f64>>,
    pub norm_v: Option<Vec<f64>>,
    pub norm_p: Option<Vec<f64>>,
    pub norm_w_err: Option<Vec<f64>>,
    pub norm_p_err: Option<Vec<f64>>,
    /// `outputs[i][k] = y_{i+1}(t_k)`.
    pub outputs: Option<Vec<Vec<f64>>>,
    /// Number of `y_i` columns in the CSV header.
    pub n_outputs: usize,
    /// The quantity whose decay the scenario is about.
    pub energy: Vec<f64>,
    pub final_state: SimState,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn energy_ratio(&self) -> f64 {
        match (self.energy.first(), self.energy.last()) {
            (Some(&a), Some(&b)) if a > 0.0 => b / a,
            _ => f64::NAN,
        }
    }

    pub fn max_energy(&self) -> f64 {
        self.energy.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Energy {
    Total,
    Error,
}

struct Recorder<'a> {
    gen: &'a AssembledGenerator,
    weights: DVector<f64>,
    outputs: Option<&'a DMatrix<f64>>,
    n_outputs: usize,
    energy: Energy,
    trace: Trace,
}

impl<'a> Recorder<'a> {
    fn new(gen: &'a AssembledGenerator, outputs: Option<&'a DMatrix<f64>>, n_outputs: usize, energy: Energy) -> Self {
        let has = |n: &str| gen.block_index(n).is_ok();
        let col = |present: bool| if present { Some(Vec::new()) } else { None };
        let trace = Trace {
            norm_w: col(has("w")),
            norm_v: col(has("v") || has("v_hat")),
            norm_p: col(has("p")),
            norm_w_err: col(has("w_err") || (has("w") && has("w_hat"))),
            norm_p_err: col(has("p_err") || (has("p") && has("p_hat"))),
            outputs: outputs.map(|m| vec![Vec::new(); m.nrows()]),
            n_outputs,
            ..Default::default()
        };
        Self { gen, weights: gen.weights(), outputs, n_outputs, energy, trace }
    }

    fn block(&self, x: &DVector<f64>, name: &str) -> Option<(Block, DVector<f64>)> {
        let b = self.gen.block(name).ok()?;
        Some((b.clone(), x.rows(b.offset, b.len).into_owned()))
    }

    fn norm(&self, b: &Block, x: &DVector<f64>) -> f64 {
        crate::linalg::weighted_norm(&self.weights.rows(b.offset, b.len).into_owned(), x)
    }

    fn block_norm(&self, x: &DVector<f64>, name: &str) -> Option<f64> {
        self.block(x, name).map(|(b, xb)| self.norm(&b, &xb))
    }

    fn diff_norm(&self, x: &DVector<f64>, err: &str, a: &str, b: &str) -> Option<f64> {
        self.block_norm(x, err).or_else(|| {
            let (ba, xa) = self.block(x, a)?;
            let (_, xb) = self.block(x, b)?;
            Some(self.norm(&ba, &(xa - xb)))
        })
    }

    fn record(&mut self, t: f64, x: &DVector<f64>) {
        self.trace.times.push(t);
        let nw = self.block_norm(x, "w");
        let nv = self.block_norm(x, "v").or_else(|| self.block_norm(x, "v_hat"));
        let np = self.block_norm(x, "p");
        let ew = self.diff_norm(x, "w_err", "w", "w_hat");
        let ep = self.diff_norm(x, "p_err", "p", "p_hat");
        for (col, val) in [
            (&mut self.trace.norm_w, nw),
            (&mut self.trace.norm_v, nv),
            (&mut self.trace.norm_p, np),
            (&mut self.trace.norm_w_err, ew),
            (&mut self.trace.norm_p_err, ep),
        ] {
            if let (Some(c), Some(v)) = (col, val) {
                c.push(v);
            }
        }
        if let (Some(map), Some(cols)) = (self.outputs, self.trace.outputs.as_mut()) {
            let b = self.gen.block("p").expect("outputs require a sensor block");
            let y = map * x.rows(b.offset, b.len);
            for (c, v) in cols.iter_mut().zip(y.iter()) {
                c.push(*v);
            }
        }
        let e = match self.energy {
            Energy::Total => self.gen.norm(x),
            Energy::Error => ew.unwrap_or(0.0).hypot(ep.unwrap_or(0.0)),
        };
        self.trace.energy.push(e);
    }

    fn finish(mut self, x: &DVector<f64>, t: f64) -> Trace {
        self.trace.final_state = SimState::unstack(self.gen, x, t);
        debug_assert!(self.trace.outputs.as_ref().is_none_or(|o| o.len() == self.n_outputs));
        self.trace
    }
}

fn step_count(tmax: f64, dt: f64) -> Result<usize> {
    if !(tmax > 0.0 && tmax.is_finite()) {
        return Err(Error::Config(format!("tmax must be positive, got {tmax}")));
    }
    if !(dt > 0.0 && dt <= tmax) {
        return Err(Error::Config(format!("dt must lie in (0, tmax], got {dt}")));
    }
    Ok((tmax / dt).round().max(1.0) as usize)
}

type Forcing<'a> = (&'a DMatrix<f64>, &'a dyn Fn(f64) -> DVector<f64>);

/// Integrates `x' = M x + E u(t)` from `t = 0` over `round(tmax / dt)` steps,
/// calling `observe` at every sample including the initial one.
fn integrate(
    stepper: &Stepper,
    x0: DVector<f64>,
    tmax: f64,
    forcing: Option<Forcing<'_>>,
    mut observe: impl FnMut(f64, &DVector<f64>),
) -> Result<DVector<f64>> {
    let dt = stepper.dt();
    let steps = step_count(tmax, dt)?;
    let mut x = x0;
    observe(0.0, &x);
    for k in 1..=steps {
        let t = k as f64 * dt;
        x = match forcing {
            Some((e, u)) => stepper.step_forced(&x, &(e * u(t))),
            None => stepper.step(&x),
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("state became non-finite at t = {t}")));
        }
        observe(t, &x);
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn run(
    gen: &AssembledGenerator,
    x0: DVector<f64>,
    tmax: f64,
    dt: f64,
    forcing: Option<Forcing<'_>>,
    outputs: Option<&DMatrix<f64>>,
    n_outputs: usize,
    energy: Energy,
) -> Result<Trace> {
    let stepper = Stepper::new(gen, dt)?;
    let mut rec = Recorder::new(gen, outputs, n_outputs, energy);
    let x = integrate(&stepper, x0, tmax, forcing, |t, x| rec.record(t, x))?;
    let t = rec.trace.times.last().copied().unwrap_or(0.0);
    Ok(rec.finish(&x, t))
}

/// `w' = (A + μ) w`.
pub fn run_open_loop(op: &DiscreteOperator, grid: &Grid, mu: f64, w0: &DVector<f64>, tmax: f64, dt: f64) -> Result<Trace> {
    let gen = AssembledGenerator::new(grid, &op.laplacian, &[("w", BlockKind::Field { shift: mu })]);
    let x0 = SimState { w: Some(w0.clone()), ..Default::default() }.stack(&gen)?;
    run(&gen, x0, tmax, dt, None, None, 0, Energy::Total)
}

/// Closed loop on `(w, v)`; the energy is the product-space norm.
pub fn run_closed_loop(closed: &AssembledGenerator, w0: &DVector<f64>, v0: &DVector<f64>, tmax: f64, dt: f64) -> Result<Trace> {
    let x0 = SimState { w: Some(w0.clone()), v: Some(v0.clone()), ..Default::default() }.stack(closed)?;
    run(closed, x0, tmax, dt, None, None, 0, Energy::Total)
}

pub struct ObserverRun {
    /// Plant, sensor and observer, with errors formed as `w - ŵ`, `p - p̂`.
    pub trace: Trace,
    /// The same errors integrated directly with the error generator.
    pub error_trace: Trace,
    /// Max over samples of `‖e_direct - e_subtracted‖ / max(‖x_k‖, ‖e_0‖)`,
    /// where `x_k` is the full stacked state.
    pub consistency: f64,
}

/// Relative tolerance for agreement between the two error trajectories.
pub const OBSERVER_CONSISTENCY_TOL: f64 = 1e-9;

/// Plant with sensor and observer driven by the same input `u(t)` on Γ1. The
/// error system is integrated alongside and must agree with the subtracted
/// errors; otherwise the run fails with a numerical error.
pub fn run_observer(design: &Design<'_>, u: &dyn Fn(f64) -> DVector<f64>, init: &SimState, tmax: f64, dt: f64) -> Result<ObserverRun> {
    let (gen, input) = design.observer_system()?;
    let err_gen = design.observer_generator()?;
    let x0 = init.stack(&gen)?;
    let block = |name: &str| -> Result<DVector<f64>> {
        let b = gen.block(name)?;
        Ok(x0.rows(b.offset, b.len).into_owned())
    };
    let e0 = {
        let mut e = DVector::zeros(err_gen.dim());
        let (bw, bp) = (err_gen.block("w_err")?, err_gen.block("p_err")?);
        e.rows_mut(bw.offset, bw.len).copy_from(&(block("w")? - block("w_hat")?));
        e.rows_mut(bp.offset, bp.len).copy_from(&(block("p")? - block("p_hat")?));
        e
    };
    let outputs = &design.ops.b_v_adj;
    let n = design.n();

    let stepper = Stepper::new(&gen, dt)?;
    let err_stepper = Stepper::new(&err_gen, dt)?;
    let mut rec = Recorder::new(&gen, Some(outputs), n, Energy::Error);
    let mut err_rec = Recorder::new(&err_gen, None, n, Energy::Error);

    let (wo, po) = (gen.block("w")?.clone(), gen.block("p")?.clone());
    let (who, pho) = (gen.block("w_hat")?.clone(), gen.block("p_hat")?.clone());
    let (ewo, epo) = (err_gen.block("w_err")?.clone(), err_gen.block("p_err")?.clone());
    let e0_norm = err_gen.norm(&e0);

    let mut states = Vec::new();
    let x = integrate(&stepper, x0, tmax, Some((&input, u)), |t, x| {
        rec.record(t, x);
        let mut e = DVector::zeros(err_gen.dim());
        e.rows_mut(ewo.offset, ewo.len).copy_from(&(x.rows(wo.offset, wo.len) - x.rows(who.offset, who.len)));
        e.rows_mut(epo.offset, epo.len).copy_from(&(x.rows(po.offset, po.len) - x.rows(pho.offset, pho.len)));
        states.push((e, gen.norm(x)));
    })?;
    let mut k = 0;
    let mut consistency: f64 = 0.0;
    let e = integrate(&err_stepper, e0, tmax, None, |t, e| {
        err_rec.record(t, e);
        let (sub, scale) = &states[k];
        let gap = err_gen.norm(&(e - sub));
        consistency = consistency.max(gap / scale.max(e0_norm).max(f64::MIN_POSITIVE));
        k += 1;
    })?;
    let t = rec.trace.times.last().copied().unwrap_or(0.0);
    let trace = rec.finish(&x, t);
    let error_trace = err_rec.finish(&e, t);
    if consistency > OBSERVER_CONSISTENCY_TOL {
        return Err(Error::Numerical(format!(
            "observer error trajectories disagree: {consistency:.3e} > {OBSERVER_CONSISTENCY_TOL:.0e}"
        )));
    }
    Ok(ObserverRun { trace, error_trace, consistency })
}

/// Plant driven by the feedback evaluated on the observer state; the energy is
/// the norm of the whole stacked state `(w, v̂, p, ŵ, p̂)`.
pub fn run_output_feedback(design: &Design<'_>, init: &SimState, tmax: f64, dt: f64) -> Result<Trace> {
    let gen = design.output_feedback()?;
    let x0 = init.stack(&gen)?;
    run(&gen, x0, tmax, dt, None, Some(&design.ops.b_v_adj), design.n(), Energy::Total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayEstimate {
    /// Negated least-squares slope of `log(norm)`; `+∞` when the tail underflows.
    pub rate: f64,
    pub underflow: bool,
    pub samples: usize,
}

/// Fits `log(norm) ≈ a - rate · t` over the final `window` fraction of samples.
pub fn estimate_decay_rate(times: &[f64], norms: &[f64], window: f64) -> Result<DecayEstimate> {
    if times.len() != norms.len() {
        return Err(Error::LengthMismatch { expected: times.len(), found: norms.len() });
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::Config(format!("decay window must lie in (0, 1], got {window}")));
    }
    let count = ((times.len() as f64) * window).floor() as usize;
    if count < 10 {
        return Err(Error::Config(format!("decay window holds {count} samples, at least 10 are needed")));
    }
    let start = times.len() - count;
    let (t, y) = (&times[start..], &norms[start..]);
    if y.iter().any(|&v| v.is_nan() || v <= UNDERFLOW_FLOOR) {
        return Ok(DecayEstimate { rate: f64::INFINITY, underflow: true, samples: count });
    }
    let m = count as f64;
    let tm = t.iter().sum::<f64>() / m;
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let lm = logs.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (ti, li) in t.iter().zip(&logs) {
        sxy += (ti - tm) * (li - lm);
        sxx += (ti - tm) * (ti - tm);
    }
    if sxx == 0.0 {
        return Err(Error::Numerical("decay window spans zero time".into()));
    }
    Ok(DecayEstimate { rate: -sxy / sxx, underflow: false, samples: count })
}

#[derive(Clone, Copy, Debug)]
pub struct RichardsonReport {
    pub dt: f64,
    pub horizon: f64,
    /// `‖x_dt - x_{dt/2}‖ / ‖x_{dt/2}‖` at the horizon.
    pub coarse_gap: f64,
    /// `‖x_{dt/2} - x_{dt/4}‖ / ‖x_{dt/4}‖` at the horizon.
    pub fine_gap: f64,
    /// `coarse_gap / fine_gap`, close to 2 for a first-order scheme.
    pub ratio: f64,
    /// Estimated relative error of the run at step `dt`.
    pub error_estimate: f64,
}

/// Step-doubling estimate of the time-discretization error at `horizon`.
pub fn richardson_estimate(gen: &AssembledGenerator, x0: &DVector<f64>, horizon: f64, dt: f64) -> Result<RichardsonReport> {
    let finals: Vec<DVector<f64>> = [dt, dt / 2.0, dt / 4.0]
        .iter()
        .map(|&h| integrate(&Stepper::new(gen, h)?, x0.clone(), horizon, None, |_, _| {}))
        .collect::<Result<_>>()?;
    let rel = |a: &DVector<f64>, b: &DVector<f64>| {
        let nb = gen.norm(b);
        if nb > 0.0 { gen.norm(&(a - b)) / nb } else { 0.0 }
    };
    let coarse_gap = rel(&finals[0], &finals[1]);
    let fine_gap = rel(&finals[1], &finals[2]);
    let ratio = if fine_gap > 0.0 { coarse_gap / fine_gap } else { f64::NAN };
    Ok(RichardsonReport { dt, horizon, coarse_gap, fine_gap, ratio, error_estimate: 2.0 * coarse_gap })
}

/// Writes `t,norm_w,norm_v,norm_p,norm_w_err,norm_p_err,y_1..y_N`, one row per
/// sample, with empty cells for columns the scenario does not produce.
pub fn write_trace_csv<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> =
        ["t", "norm_w", "norm_v", "norm_p", "norm_w_err", "norm_p_err"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=trace.n_outputs).map(|i| format!("y_{i}")));
    wtr.write_record(&header)?;
    let cell = |col: &Option<Vec<f64>>, k: usize| col.as_ref().map_or(String::new(), |c| c[k].to_string());
    for k in 0..trace.len() {
        let mut row = vec![
            trace.times[k].to_string(),
            cell(&trace.norm_w, k),
            cell(&trace.norm_v, k),
            cell(&trace.norm_p, k),
            cell(&trace.norm_w_err, k),
            cell(&trace.norm_p_err, k),
        ];
        for i in 0..trace.n_outputs {
            row.push(trace.outputs.as_ref().map_or(String::new(), |o| o[i][k].to_string()));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_operators, BoundaryConfig};
    use crate::linalg;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace_gen(g: &Grid, op: &DiscreteOperator, diag: f64) -> AssembledGenerator {
        AssembledGenerator::new(g, &op.laplacian, &[("v", BlockKind::Trace { diag })])
    }

    #[test]
    fn zero_generator_leaves_state_unchanged() {
        let g = Grid::unit_square(3, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let x = DVector::from_fn(3, |i, _| i as f64 + 0.5);
        assert_eq!(step(&trace_gen(&g, &op, 0.0), &x, 0.1).unwrap(), x);
    }

    #[test]
    fn scalar_decay_matches_hand_formula() {
        let g = Grid::unit_square(3, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let (a, dt) = (2.5, 0.01);
        let x = DVector::from_element(3, 1.0);
        let y = step(&trace_gen(&g, &op, -a), &x, dt).unwrap();
        for v in y.iter() {
            assert!((v - 1.0 / (1.0 + a * dt)).abs() <= 1e-14);
        }
    }

    #[test]
    fn woodbury_step_matches_dense_solve() {
        let g = Grid::unit_square(5, BoundaryConfig::A).unwrap();
        let op = assemble_operators(&g);
        let mut m = AssembledGenerator::new(
            &g,
            &op.laplacian,
            &[("w", BlockKind::Field { shift: 4.0 }), ("v", BlockKind::Trace { diag: -1.0 }), ("u", BlockKind::Field { shift: -2.0 })],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand = |r, c| DMatrix::from_fn(r, c, |_, _| linalg::uniform_vector(&mut rng, 1)[0]);
        m.couple("w", "v", rand(25, 5), rand(5, 5)).unwrap();
        m.couple("v", "u", rand(5, 2), rand(25, 2)).unwrap();
        m.couple("u", "w", rand(25, 3), rand(25, 3)).unwrap();
        let dt = 0.05;
        let x = DVector::from_fn(m.dim(), |i, _| (i as f64).cos());
        let dense = DMatrix::identity(m.dim(), m.dim()) - dt * m.to_dense();
        let expect = dense.lu().solve(&x).unwrap();
        assert_relative_eq!(Stepper::new(&m, dt).unwrap().step(&x), expect, epsilon = 1e-11);
    }

    #[test]
    fn singular_step_is_refused() {
        let g = Grid::unit_square(3, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        assert!(matches!(Stepper::new(&trace_gen(&g, &op, 10.0), 0.1), Err(Error::Singular(_))));
        assert!(matches!(Stepper::new(&trace_gen(&g, &op, 1.0), 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn step_halving_shows_first_order() {
        let g = Grid::unit_square(6, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let gen = AssembledGenerator::new(&g, &op.laplacian, &[("w", BlockKind::Field { shift: 5.0 })]);
        let x0 = g.field_from_fn(|x, y| (std::f64::consts::PI * x).sin() * (1.0 + y)).0;
        let r = richardson_estimate(&gen, &x0, 0.2, 0.01).unwrap();
        assert!((r.ratio - 2.0).abs() < 0.1, "{r:?}");
    }

    #[test]
    fn open_loop_decays_without_shift_and_stays_zero_from_zero() {
        let g = Grid::unit_square(6, BoundaryConfig::B).unwrap();
        let op = assemble_operators(&g);
        let w0 = g.field_from_fn(|x, y| x * (1.0 - x) * (1.0 + y * y)).0;
        let tr = run_open_loop(&op, &g, 0.0, &w0, 0.5, 0.01).unwrap();
        let n = tr.norm_w.as_ref().unwrap();
        assert!(n.windows(2).all(|p| p[1] < p[0]));
        assert!(tr.norm_v.is_none() && tr.norm_p.is_none());
        let z = run_open_loop(&op, &g, 13.0, &DVector::zeros(g.len()), 0.5, 0.01).unwrap();
        assert!(z.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn decay_rate_of_synthetic_traces() {
        let t: Vec<f64> = (0..=2000).map(|k| k as f64 * 0.01).collect();
        let e: Vec<f64> = t.iter().map(|t| (-2.0 * t).exp()).collect();
        assert!((estimate_decay_rate(&t, &e, 0.5).unwrap().rate - 2.0).abs() <= 1e-6);
        let osc: Vec<f64> = t.iter().map(|t| (-t).exp() * (2.0 + (10.0 * t).sin())).collect();
        assert!((estimate_decay_rate(&t, &osc, 1.0).unwrap().rate - 1.0).abs() <= 0.1);
        let flat = vec![3.0; t.len()];
        assert!(estimate_decay_rate(&t, &flat, 0.5).unwrap().rate.abs() <= 1e-9);
        let mut zero = e.clone();
        *zero.last_mut().unwrap() = 0.0;
        let est = estimate_decay_rate(&t, &zero, 0.5).unwrap();
        assert!(est.underflow && est.rate.is_infinite());
        assert!(estimate_decay_rate(&t[..15], &e[..15], 0.5).is_err());
    }

    #[test]
    fn csv_leaves_absent_columns_empty() {
        let tr = Trace {
            times: vec![0.0, 0.5],
            norm_w: Some(vec![1.0, 0.25]),
            n_outputs: 2,
            energy: vec![1.0, 0.25],
            ..Default::default()
        };
        let mut buf = Vec::new();
        write_trace_csv(&tr, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "t,norm_w,norm_v,norm_p,norm_w_err,norm_p_err,y_1,y_2\n0,1,,,,,,\n0.5,0.25,,,,,,\n");
    }
}
