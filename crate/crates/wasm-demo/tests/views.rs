use lactodyn_wasm::{buffer_view, dip_view, phase_view};

#[test]
fn default_dip_shows_dip_overshoot_and_return() {
    let v = dip_view(0.5, 0.3, 0.1, 1e-2).unwrap();
    assert_eq!(v.t.len(), v.x.len());
    assert_eq!(v.t.len(), v.target.len());
    assert!(v.ordered);
    assert!(v.min_x < v.baseline && v.overshoot_max > v.baseline);
    assert!(v.t_min < v.t_overshoot && v.t_overshoot < v.t_return);
}

#[test]
fn no_boost_no_dip() {
    let v = dip_view(0.0, 0.3, 0.1, 1e-2).unwrap();
    // with F flat the raised J only pushes x up
    assert!(v.min_x >= v.baseline - 1e-9);
    assert!(!v.ordered);
}

#[test]
fn bad_control_levels_are_reported() {
    assert!(dip_view(0.5, 0.1, 0.3, 1e-2).is_err());
}

#[test]
fn phase_trajectory_collapses_then_settles() {
    let v = phase_view(0.5, 0.2, 1.0, 3.0, 1e-2).unwrap();
    let (x, y) = (*v.traj_x.last().unwrap(), *v.traj_y.last().unwrap());
    assert!((x - v.eq_x).abs() < 1e-2 * v.eq_x, "{x} vs {}", v.eq_x);
    assert!((y - v.eq_y).abs() < 1e-2 * v.eq_y);
    assert!(v.attraction > 0.0);
    // the equilibrium sits on the plotted manifold
    let i = v.manifold_x.iter().position(|&m| m >= v.eq_x).unwrap();
    let (x0, x1) = (v.manifold_x[i - 1], v.manifold_x[i]);
    let w = (v.eq_x - x0) / (x1 - x0);
    let phi = v.manifold_y[i - 1] * (1.0 - w) + v.manifold_y[i] * w;
    assert!((phi - v.eq_y).abs() < 1e-3);
}

#[test]
fn infeasible_phase_inputs_are_reported() {
    assert!(phase_view(0.5, 5.0, 1.0, 1.0, 1e-2).is_err());
}

#[test]
fn buffering_locks_and_matches_shooting() {
    let v = buffer_view(20.0, 0.5, -1.0, 30).unwrap();
    assert!(v.locked);
    assert_eq!(v.section_x.len(), 31);
    assert!((v.section_x.last().unwrap() - v.fixed_x).abs() <= 1e-6);
    assert!(v.multiplier < 1.0);
    assert!(v.log_displacement.last().unwrap() < &-8.0);
}
