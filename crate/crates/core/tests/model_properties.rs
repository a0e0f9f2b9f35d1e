mod common;

use lactodyn::dynamics::{cotransport, fast_nullcline_g_2d, jacobian_2d, jacobian_4d, rhs_2d, rhs_4d, source_balance_4d};
use lactodyn::equilibria::{equilibrium_2d, equilibrium_4d, linearize_2d};
use lactodyn::manifold::{
    attractiveness_2d, critical_x_2d, fast_quadratic_2d, manifold_point_2d, manifold_point_4d, manifold_residual_2d,
    manifold_residual_4d,
};
use lactodyn::{Control, Params2D, Params4D, Signal, State2D, State4D};
use proptest::prelude::*;

fn pos() -> impl Strategy<Value = f64> {
    (-2.0f64..2.0).prop_map(|e| 10f64.powf(e))
}

fn params_2d() -> impl Strategy<Value = Params2D> {
    (pos(), pos(), pos(), pos(), 1e-3f64..1e-1, 1e-2f64..1.0).prop_map(|(c, k, kprime, l, eps, eps_prime)| Params2D {
        c,
        k,
        kprime,
        l,
        eps,
        eps_prime,
    })
}

fn params_4d() -> impl Strategy<Value = Params4D> {
    (params_2d(), pos(), pos(), pos(), pos(), pos()).prop_map(|(base, c1, c2, ca, kn, ka)| Params4D {
        base,
        c1,
        c2,
        ca,
        kn,
        ka,
    })
}

fn mm(a: f64, k: f64) -> f64 {
    a / (k + a)
}

/// Second, independent transcription of the 4D right-hand side.
fn rhs_4d_oracle(s: [f64; 4], p: &Params4D, j: [f64; 3], f: f64) -> [f64; 4] {
    let b = &p.base;
    let [x, u, v, y] = s;
    let fx = mm(x, b.k);
    let fu = mm(u, p.kn);
    let fv = mm(v, p.ka);
    let fy = mm(y, b.kprime);
    [
        b.eps_prime * (j[0] + p.c1 * (fu - fx) + p.c2 * (fv - fx) - b.c * (fx - fy)),
        b.eps_prime * (j[1] - p.c1 * (fu - fx)),
        b.eps_prime * (j[2] - p.c2 * (fv - fx) - p.ca * (fv - fy)),
        (f * (b.l - y) + b.c * (fx - fy) + p.ca * (fv - fy)) / b.eps,
    ]
}

/// Cancellation error of a central difference with step `h` on a function of size `mag`.
fn roundoff(mag: f64, h: f64) -> f64 {
    4.0 * f64::EPSILON * mag / h
}

/// Sum of the absolute terms making up row `r` of the 2D right-hand side.
fn row_magnitude(r: usize, x: f64, y: f64, f: f64, p: &Params2D) -> f64 {
    let flux = p.c * (mm(x, p.k) + mm(y, p.kprime));
    match r {
        0 => p.eps_prime * (0.3 + x + flux),
        _ => (f * (p.l + y) + flux) / p.eps,
    }
}

fn fd_close(a: f64, fd: f64, rel: f64, noise: f64) -> bool {
    (a - fd).abs() <= rel * a.abs().max(fd.abs()) + noise
}

fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    (a - b).abs() <= rel * (a.abs().max(b.abs()) + scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_2d_matches_central_differences(p in params_2d(), x in pos(), y in pos(), f in pos(), jx in -1.0f64..1.0) {
        let j = Control { signal: Signal::constant(0.3), coupling: jx, x_ref: 1.0 };
        let input = Signal::constant(f);
        let m = jacobian_2d(State2D::new(x, y), &p, jx, f).unwrap();
        let at = |x: f64, y: f64| rhs_2d(0.0, State2D::new(x, y), &p, &j, &input).unwrap();
        let (hx, hy) = (1e-5 * x, 1e-5 * y);
        let f0 = at(x, y).to_vector();
        let dx = (at(x + hx, y).to_vector() - at(x - hx, y).to_vector()) / (2.0 * hx);
        let dy = (at(x, y + hy).to_vector() - at(x, y - hy).to_vector()) / (2.0 * hy);
        for r in 0..2 {
            let mag = row_magnitude(r, x, y, f, &p);
            prop_assert!(fd_close(m[(r, 0)], dx[r], 1e-5, roundoff(mag.max(f0[r].abs()), hx)), "d/dx row {r}: {} vs {}", m[(r, 0)], dx[r]);
            prop_assert!(fd_close(m[(r, 1)], dy[r], 1e-5, roundoff(mag.max(f0[r].abs()), hy)), "d/dy row {r}: {} vs {}", m[(r, 1)], dy[r]);
        }
    }

    #[test]
    fn jacobian_4d_matches_central_differences(p in params_4d(), s in proptest::array::uniform4(pos()), f in pos(), c in proptest::array::uniform3(-1.0f64..1.0)) {
        let m = jacobian_4d(State4D::new(s[0], s[1], s[2], s[3]), &p, c, f).unwrap();
        let controls = c.map(|k| Control { signal: Signal::constant(0.1), coupling: k, x_ref: 1.0 });
        let input = Signal::constant(f);
        let b = &p.base;
        let terms = [
            b.eps_prime * (0.1 + c[0].abs() * (s[0] + 1.0) + p.c1 + p.c2 + b.c),
            b.eps_prime * (0.1 + c[1].abs() * (s[0] + 1.0) + p.c1),
            b.eps_prime * (0.1 + c[2].abs() * (s[0] + 1.0) + p.c2 + p.ca),
            (f * (b.l + s[3]) + b.c + p.ca) / b.eps,
        ];
        for col in 0..4 {
            let h = 1e-5 * s[col];
            let mut sp = s;
            let mut sm = s;
            sp[col] += h;
            sm[col] -= h;
            let fp = rhs_4d(0.0, State4D::new(sp[0], sp[1], sp[2], sp[3]), &p, &controls, &input).unwrap().to_vector();
            let fm = rhs_4d(0.0, State4D::new(sm[0], sm[1], sm[2], sm[3]), &p, &controls, &input).unwrap().to_vector();
            for r in 0..4 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                prop_assert!(fd_close(m[(r, col)], fd, 1e-5, roundoff(terms[r], h)), "entry ({r},{col}): {} vs {fd}", m[(r, col)]);
            }
        }
    }

    #[test]
    fn rhs_4d_matches_oracle(p in params_4d(), s in proptest::array::uniform4(pos()), f in pos(), j in proptest::array::uniform3(0.0f64..2.0)) {
        let controls = j.map(Control::constant);
        let got = rhs_4d(0.0, State4D::new(s[0], s[1], s[2], s[3]), &p, &controls, &Signal::constant(f)).unwrap();
        let want = rhs_4d_oracle(s, &p, j, f);
        for (g, w) in got.to_vector().iter().zip(want) {
            prop_assert!(close(*g, w, 1e-12, 1e-12 / p.base.eps));
        }
    }

    #[test]
    fn flux_is_antisymmetric(a in 0.0f64..100.0, b in 0.0f64..100.0, cmax in pos(), ka in pos(), kb in pos()) {
        let fwd = cotransport(a, b, cmax, ka, kb).unwrap();
        let back = cotransport(b, a, cmax, kb, ka).unwrap();
        prop_assert_eq!(fwd, -back);
    }

    #[test]
    fn weighted_sum_cancels_exchange(p in params_4d(), s in proptest::array::uniform4(pos()), f in pos(), j in proptest::array::uniform3(0.0f64..2.0)) {
        let controls = j.map(Control::constant);
        let d = rhs_4d(0.0, State4D::new(s[0], s[1], s[2], s[3]), &p, &controls, &Signal::constant(f)).unwrap();
        let expected = j[0] + j[1] + j[2] + f * (p.base.l - s[3]);
        let scale = 1.0 + p.base.c + p.c1 + p.c2 + p.ca + f * (p.base.l + s[3]);
        prop_assert!((source_balance_4d(&d, &p) - expected).abs() <= 1e-12 * scale);
    }

    #[test]
    fn x0_increases_with_j_and_falls_with_f(p in params_2d(), frac in 1e-3f64..0.999, f in pos()) {
        // J as a fraction of the largest feasible J: J/C + (L + J/F)/(k' + L + J/F) < 1
        let feasible = |j: f64| j / p.c + (p.l + j / f) / (p.kprime + p.l + j / f) < 1.0;
        let (mut lo, mut hi) = (0.0, p.c);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) { lo = mid } else { hi = mid }
        }
        let j = frac * lo;
        prop_assume!(j > 0.0);
        let x0 = equilibrium_2d(j, f, &p).unwrap().x();
        if let Ok(up) = equilibrium_2d(j * 1.01, f, &p) {
            prop_assert!(up.x() > x0);
        }
        let down = equilibrium_2d(j, f * 1.01, &p).unwrap();
        prop_assert!(down.x() < x0);
    }

    #[test]
    fn stable_node_without_coupling(p in params_2d(), j in pos(), f in pos()) {
        let Ok(r) = equilibrium_2d(j, f, &p) else { return Ok(()) };
        let lin = linearize_2d(r.state_2d(), &p, 0.0, f).unwrap();
        prop_assert!(lin.discriminant > 0.0);
        prop_assert!(lin.eigenvalues.iter().all(|e| e.im == 0.0 && e.re < 0.0));
    }

    #[test]
    fn manifold_branch_is_attracting(p in params_2d(), x in pos(), f in pos()) {
        let q = fast_quadratic_2d(x, f, &p).unwrap();
        prop_assert!(q.discriminant > 0.0);
        let pt = manifold_point_2d(x, f, &p).unwrap();
        let (r1, r2) = q.roots();
        let other = if (r1 - pt.y).abs() < (r2 - pt.y).abs() { r2 } else { r1 };
        prop_assert!(pt.y >= 0.0 && other < 0.0);
        prop_assert!(pt.gprime_y < 0.0);
        let scale = f * (p.l + pt.y) + p.c;
        prop_assert!(manifold_residual_2d(&pt, f, &p).unwrap() <= 1e-12 * scale);
        // above the branch the fast flow points down
        prop_assert!(fast_nullcline_g_2d(x, pt.y * 1.01 + 1e-9, f, &p).unwrap() < 0.0);
    }

    #[test]
    fn manifold_4d_residual_and_sign(p in params_4d(), x in pos(), v in pos(), f in pos()) {
        let pt = manifold_point_4d(x, v, f, &p).unwrap();
        prop_assert!(pt.y >= 0.0 && pt.gprime_y < 0.0 && pt.discriminant > 0.0);
        let scale = f * (p.base.l + pt.y) + p.base.c + p.ca;
        prop_assert!(manifold_residual_4d(&pt, f, &p).unwrap() <= 1e-12 * scale);
    }

}

#[test]
fn attractiveness_limits() {
    let p = Params2D { c: 1.0, k: 1.0, kprime: 1.0, l: 1.0, eps: 0.01, eps_prime: 0.1 };
    assert_eq!(attractiveness_2d(0.0, 1.0, &p), -2.0);
    assert!((attractiveness_2d(1e9, 1.0, &p) + 1.0).abs() < 1e-12);
}

#[test]
fn closed_forms_sit_on_their_manifolds() {
    let p = Params4D::default();
    let r = equilibrium_4d(0.1, 0.05, 0.05, 0.5, &p).unwrap();
    let pt = manifold_point_4d(r.point[0], r.point[2], 0.5, &p).unwrap();
    assert!((pt.y - r.point[3]).abs() <= 1e-12 * r.point[3]);
    let r2 = equilibrium_2d(0.2, 0.5, &p.base).unwrap();
    let pt2 = manifold_point_2d(r2.x(), 0.5, &p.base).unwrap();
    assert!((pt2.y - r2.y()).abs() <= 1e-12 * r2.y());
}

#[test]
fn critical_x_inverts_phi_on_grid() {
    for (c, kp, l) in [(1.0, 1.0, 1.0), (2.0, 0.5, 1.5), (0.5, 2.0, 0.8)] {
        let p = Params2D { c, k: 1.0, kprime: kp, l, eps: 0.01, eps_prime: 0.1 };
        for f in [0.25, 0.5, 0.75, 1.0] {
            for i in 1..=256 {
                let x = 20.0 * f64::from(i) / 256.0;
                let y = manifold_point_2d(x, f, &p).unwrap().y;
                let back = critical_x_2d(y, f, &p).unwrap();
                assert!(back.feasible);
                assert!((back.x - x).abs() <= 1e-10 * x, "x={x} f={f}: {}", back.x);
            }
        }
    }
}
