use heatstab::grid::{assemble_operators, BoundaryConfig, DiscreteOperator, Grid};
use heatstab::simulate::{
    estimate_decay_rate, run_closed_loop, run_observer, run_open_loop, run_output_feedback, SimState,
};
use heatstab::spectral::{compute_eigenbasis, EigenBasis};
use heatstab::synthesis::{synthesize, DesignParams};
use nalgebra::DVector;

struct Fixture {
    grid: Grid,
    op: DiscreteOperator,
    basis: EigenBasis,
}

fn fixture(n: usize) -> Fixture {
    let grid = Grid::unit_square(n, BoundaryConfig::B).unwrap();
    let op = assemble_operators(&grid);
    let basis = compute_eigenbasis(&op, &grid, 8).unwrap();
    Fixture { grid, op, basis }
}

#[test]
fn open_loop_log_slope_matches_first_eigenvalue() {
    let f = fixture(12);
    let w0 = f.basis.phi_vec(0).into_owned();
    let tr = run_open_loop(&f.op, &f.grid, 13.0, &w0, 1.0, 1e-3).unwrap();
    let slope = -estimate_decay_rate(&tr.times, &tr.energy, 1.0).unwrap().rate;
    let expected = f.basis.lambdas[0] + 13.0;
    assert!((slope - expected).abs() <= 0.05 * expected, "{slope} vs {expected}");
}

#[test]
fn closed_loop_from_rest_stays_at_rest() {
    let f = fixture(10);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let tr = run_closed_loop(&d.closed_loop().unwrap(), &DVector::zeros(100), &DVector::zeros(10), 0.5, 1e-2).unwrap();
    assert!(tr.energy.iter().all(|&e| e == 0.0));
}

#[test]
fn closed_loop_is_linear_in_initial_data() {
    let f = fixture(10);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let closed = d.closed_loop().unwrap();
    let w0 = f.grid.field_from_fn(|x, y| x * (1.0 - x) * y).0;
    let v0 = DVector::from_fn(10, |i, _| (i as f64 * 0.3).cos());
    let a = run_closed_loop(&closed, &w0, &v0, 1.0, 1e-2).unwrap();
    let b = run_closed_loop(&closed, &(-3.5 * &w0), &(-3.5 * &v0), 1.0, 1e-2).unwrap();
    for (x, y) in a.energy.iter().zip(&b.energy) {
        assert!((3.5 * x - y).abs() <= 1e-10 * y.max(1.0));
    }
    let (wa, wb) = (a.final_state.w.unwrap(), b.final_state.w.unwrap());
    assert!((-3.5 * wa - wb).amax() <= 1e-10);
}

#[test]
fn open_and_closed_loop_contrast() {
    let f = fixture(12);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let w0 = f.basis.phi_vec(0).into_owned();
    let open = run_open_loop(&f.op, &f.grid, 13.0, &w0, 6.0, 1e-3).unwrap();
    let closed = run_closed_loop(&d.closed_loop().unwrap(), &w0, &DVector::zeros(12), 6.0, 1e-3).unwrap();
    assert!(open.energy_ratio() >= 10.0, "{}", open.energy_ratio());
    assert!(closed.energy_ratio() <= 0.1, "{}", closed.energy_ratio());
}

#[test]
fn closed_loop_tail_is_monotone_and_rate_matches_abscissa() {
    let f = fixture(12);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let closed = d.closed_loop().unwrap();
    let abscissa = closed.spectral_abscissa().unwrap();
    let w0 = f.basis.phi_vec(0).into_owned();
    let tr = run_closed_loop(&closed, &w0, &DVector::zeros(12), 8.0, 1e-3).unwrap();
    let half = tr.len() / 2;
    assert!(tr.energy[half..].windows(2).all(|p| p[1] <= p[0]));
    let rate = estimate_decay_rate(&tr.times, &tr.energy, 0.5).unwrap().rate;
    assert!((rate - abscissa.abs()).abs() <= 0.25 * abscissa.abs(), "{rate} vs {abscissa}");
}

#[test]
fn matched_observer_has_no_error_under_any_input() {
    let f = fixture(10);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let w0 = f.basis.phi_vec(0).into_owned();
    let p0 = DVector::from_element(10, 0.2);
    let init = SimState { w: Some(w0.clone()), p: Some(p0.clone()), w_hat: Some(w0), p_hat: Some(p0), ..Default::default() };
    let u = |t: f64| DVector::from_fn(10, |i, _| (t + i as f64).sin());
    let run = run_observer(&d, &u, &init, 1.0, 1e-3).unwrap();
    assert!(run.trace.max_energy() <= 1e-9, "{}", run.trace.max_energy());
    assert!(run.error_trace.max_energy() == 0.0);
    assert_eq!(run.trace.outputs.as_ref().unwrap().len(), d.n());
}

#[test]
fn observer_error_decays_at_the_adjoint_abscissa() {
    let f = fixture(12);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 1.0)).unwrap();
    let abscissa = d.observer_generator().unwrap().spectral_abscissa().unwrap();
    let init = SimState { w_hat: Some(f.grid.field_from_fn(|x, y| (x * y).sqrt()).0), ..Default::default() };
    let run = run_observer(&d, &|_| DVector::zeros(12), &init, 8.0, 1e-3).unwrap();
    let rate = estimate_decay_rate(&run.trace.times, &run.trace.energy, 0.5).unwrap().rate;
    assert!((rate - abscissa.abs()).abs() <= 0.25 * abscissa.abs(), "{rate} vs {abscissa}");
    assert!(run.consistency <= 1e-12);
}

#[test]
fn output_feedback_excites_a_resting_plant_then_decays() {
    let f = fixture(10);
    let d = synthesize(&f.grid, &f.op, &f.basis, DesignParams::new(13.0, 2.0)).unwrap();
    let init = SimState { w_hat: Some(f.basis.phi_vec(0).into_owned()), ..Default::default() };
    let tr = run_output_feedback(&d, &init, 8.0, 1e-3).unwrap();
    let w = tr.norm_w.as_ref().unwrap();
    let peak = w.iter().copied().fold(0.0, f64::max);
    assert_eq!(w[0], 0.0);
    assert!(peak > 1e-3);
    assert!(*w.last().unwrap() < 1e-2 * peak);
    assert!(tr.energy_ratio() <= 1e-3, "{}", tr.energy_ratio());
    assert!(estimate_decay_rate(&tr.times, &tr.energy, 0.5).unwrap().rate > 0.0);
}
