use msrd_core::grid::{
    discrete_gradients, discrete_laplacian, h_n_bound, h_n_integral, heat_reference, project_pn,
    project_pn_exact, semigroup_apply, semigroup_kernel, spectral_basis, GridFunction, PairField,
};
use msrd_core::model::TrigPoly;
use proptest::prelude::*;

/// Cheap deterministic value stream for fixed-seed vector fixtures.
fn pseudo_values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            // map to [-1, 1)
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

#[test]
fn projection_averages_cells() {
    let ones = project_pn(&|_| 1.0, 5).unwrap();
    assert_eq!(ones.values(), &[1.0; 5]);

    let ramp = project_pn(&|x| x, 2).unwrap();
    assert!((ramp.values()[0] - 0.25).abs() < 1e-12);
    assert!((ramp.values()[1] - 0.75).abs() < 1e-12);

    // projection never exceeds the sup of the projected function
    for n in [2usize, 3, 4, 7, 16] {
        let f = project_pn(&|x| 1.0 + (2.0 * std::f64::consts::PI * x).cos(), n).unwrap();
        assert!(f.sup_norm() <= 2.0 + 1e-12);
    }
}

#[test]
fn projection_exact_and_quadrature_agree() {
    let p = TrigPoly::parse("1 + 0.5*cos(2*pi*x) + 0.25*sin(4*pi*x)").unwrap();
    for n in [2usize, 3, 4, 7, 16] {
        let exact = project_pn_exact(&p, n);
        let quad = project_pn(&|x| p.eval(x), n).unwrap();
        for (a, b) in exact.values().iter().zip(quad.values()) {
            assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
        }
    }
}

#[test]
fn projection_rejects_non_finite_samples() {
    let err = project_pn(&|x| (x - 0.25).ln(), 4);
    assert!(err.is_err());
}

#[test]
fn laplacian_stencil_values() {
    let c = GridFunction::constant(6, 3.5);
    assert_eq!(discrete_laplacian(&c).sup_norm(), 0.0);

    let f = GridFunction::new(vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(discrete_laplacian(&f).values(), &[-32.0, 16.0, 0.0, 16.0]);
}

#[test]
fn laplacian_eigenfunction_n4() {
    let sqrt2 = std::f64::consts::SQRT_2;
    let phi = GridFunction::new(
        (0..4).map(|j| sqrt2 * (std::f64::consts::PI * j as f64 / 2.0).cos()).collect(),
    );
    let lap = discrete_laplacian(&phi);
    for j in 0..4 {
        assert!((lap.values()[j] + 32.0 * phi.values()[j]).abs() < 1e-12);
    }
}

#[test]
fn gradient_values_and_adjointness() {
    let c = GridFunction::constant(3, 2.0);
    let (fwd, bwd) = discrete_gradients(&c);
    assert_eq!(fwd.sup_norm(), 0.0);
    assert_eq!(bwd.sup_norm(), 0.0);

    let f = GridFunction::new(vec![0.0, 1.0]);
    let (fwd, _) = discrete_gradients(&f);
    assert_eq!(fwd.values(), &[2.0, -2.0]);

    // summation by parts on the ring: the forward difference is minus the
    // adjoint of the backward one
    let f = GridFunction::new(pseudo_values(8, 11));
    let g = GridFunction::new(pseudo_values(8, 23));
    let (fwd_f, _) = discrete_gradients(&f);
    let (_, bwd_g) = discrete_gradients(&g);
    assert!((fwd_f.l2_inner(&g) + f.l2_inner(&bwd_g)).abs() < 1e-12);
}

#[test]
fn basis_sizes_and_eigenvalues() {
    let b4 = spectral_basis(4);
    assert_eq!(b4.modes().len(), 4);
    let mut betas: Vec<f64> = b4.modes().iter().map(|e| e.beta).collect();
    betas.sort_by(f64::total_cmp);
    for (got, want) in betas.iter().zip([0.0, 32.0, 32.0, 64.0]) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert_eq!(b4.frequencies(), vec![0, 2, 4]);

    let b3 = spectral_basis(3);
    assert_eq!(b3.modes().len(), 3);
    // beta for m = 2 at three sites: 18 (1 - cos(2 pi / 3)) = 27
    for e in b3.modes().iter().skip(1) {
        assert!((e.beta - 27.0).abs() < 1e-12);
    }

    let b2 = spectral_basis(2);
    assert_eq!(b2.modes().len(), 2);
    assert!((b2.modes()[1].beta - 16.0).abs() < 1e-12);
}

#[test]
fn basis_orthonormal_and_diagonalizes_laplacian() {
    for n in [2usize, 3, 4, 5, 8, 9, 16] {
        let basis = spectral_basis(n);
        assert_eq!(basis.modes().len(), n);
        for (k, ek) in basis.modes().iter().enumerate() {
            for (l, el) in basis.modes().iter().enumerate() {
                let want = if k == l { 1.0 } else { 0.0 };
                assert!(
                    (ek.func.l2_inner(&el.func) - want).abs() < 1e-12,
                    "gram entry ({k},{l}) at n={n}"
                );
            }
            let lap = discrete_laplacian(&ek.func);
            let scale = ek.beta.max(1.0);
            for j in 0..n {
                let resid = lap.values()[j] + ek.beta * ek.func.values()[j];
                assert!(resid.abs() <= 1e-10 * scale, "eigen residual at n={n}, mode {k}");
            }
        }
    }
}

#[test]
fn basis_round_trips_coefficients() {
    for n in [3usize, 4, 8] {
        let basis = spectral_basis(n);
        let f = GridFunction::new(pseudo_values(n, 7 + n as u64));
        let coeffs = basis.coefficients(&f);
        let back = basis.reconstruct(&coeffs);
        for j in 0..n {
            assert!((back.values()[j] - f.values()[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn semigroup_identity_and_constants() {
    let basis = spectral_basis(6);
    let f = GridFunction::new(pseudo_values(6, 3));
    let at0 = semigroup_apply(&basis, 0.0, &f);
    for j in 0..6 {
        assert!((at0.values()[j] - f.values()[j]).abs() < 1e-12);
    }
    let c = GridFunction::constant(6, 0.7);
    for t in [0.001, 0.01, 0.1, 1.0] {
        let out = semigroup_apply(&basis, t, &c);
        for v in out.values() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}

#[test]
fn semigroup_scales_eigenmode() {
    let basis = spectral_basis(4);
    let sqrt2 = std::f64::consts::SQRT_2;
    let phi = GridFunction::new(
        (0..4).map(|j| sqrt2 * (std::f64::consts::PI * j as f64 / 2.0).cos()).collect(),
    );
    let out = semigroup_apply(&basis, 0.01, &phi);
    let scale = (-0.32f64).exp();
    for j in 0..4 {
        assert!((out.values()[j] - scale * phi.values()[j]).abs() < 1e-12);
    }
}

#[test]
fn semigroup_contracts_and_preserves_sign_and_mean() {
    for n in [3usize, 4, 8, 16] {
        let basis = spectral_basis(n);
        let mut vals = pseudo_values(n, 100 + n as u64);
        for v in &mut vals {
            *v = v.abs(); // nonnegative input
        }
        let f = GridFunction::new(vals);
        for t in [0.001, 0.01, 0.1, 1.0] {
            let out = semigroup_apply(&basis, t, &f);
            assert!(out.sup_norm() <= f.sup_norm() + 1e-12);
            assert!(out.l2_norm() <= f.l2_norm() + 1e-12);
            assert!(out.min_value() >= -1e-12, "positivity at n={n}, t={t}");
            let ones = GridFunction::constant(n, 1.0);
            assert!((out.l2_inner(&ones) - f.l2_inner(&ones)).abs() < 1e-12);
        }
    }
}

#[test]
fn semigroup_self_adjoint_and_commutes_with_laplacian() {
    for n in [4usize, 8] {
        let basis = spectral_basis(n);
        let f = GridFunction::new(pseudo_values(n, 5));
        let g = GridFunction::new(pseudo_values(n, 9));
        for t in [0.01, 0.1] {
            let tf = semigroup_apply(&basis, t, &f);
            let tg = semigroup_apply(&basis, t, &g);
            assert!((tf.l2_inner(&g) - f.l2_inner(&tg)).abs() < 1e-10);

            let a = discrete_laplacian(&tf);
            let b = semigroup_apply(&basis, t, &discrete_laplacian(&f));
            for j in 0..n {
                assert!((a.values()[j] - b.values()[j]).abs() < 1e-8);
            }
        }
    }
}

#[test]
#[should_panic]
fn semigroup_rejects_negative_time() {
    let basis = spectral_basis(4);
    let f = GridFunction::constant(4, 1.0);
    let _ = semigroup_apply(&basis, -0.1, &f);
}

#[test]
fn semigroup_symmetric_in_site_pairs() {
    for n in 2usize..=16 {
        let basis = spectral_basis(n);
        for t in [0.01, 0.1] {
            let evolved: Vec<GridFunction> = (0..n)
                .map(|i| semigroup_apply(&basis, t, &GridFunction::indicator(n, i)))
                .collect();
            let kappa = semigroup_kernel(n, t);
            for i in 0..n {
                for j in 0..n {
                    let a = evolved[i].values()[j];
                    let b = evolved[j].values()[i];
                    assert!((a - b).abs() < 1e-10, "symmetry at n={n}, ({i},{j})");
                    let k = kappa[(i + n - j) % n] / n as f64;
                    assert!((a - k).abs() < 1e-12, "kernel at n={n}, ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn heat_reference_values() {
    assert_eq!(heat_reference(0.0, 5), 1.0);
    assert_eq!(heat_reference(2.3, 0), 1.0);
    let r = heat_reference(0.1, 1);
    assert!((r - (-0.4 * std::f64::consts::PI.powi(2)).exp()).abs() < 1e-15);
    assert!((r - 0.019296).abs() < 1e-6);
    assert!((heat_reference(0.1, -1) - r).abs() < 1e-15);
}

#[test]
fn projection_commutes_with_stencil() {
    let p = TrigPoly::parse("1 + 0.5*cos(2*pi*x) + 0.25*sin(2*pi*x)").unwrap();
    for n in [4usize, 8] {
        let nf = n as f64;
        let projected = project_pn_exact(&p, n);
        let a = discrete_laplacian(&projected);
        // stencil applied to the function itself, then projected
        let shifted = |x: f64| {
            nf * nf * (p.eval(x - 1.0 / nf) - 2.0 * p.eval(x) + p.eval(x + 1.0 / nf))
        };
        let b = project_pn(&shifted, n).unwrap();
        for j in 0..n {
            assert!((a.values()[j] - b.values()[j]).abs() < 1e-8, "n={n}, site {j}");
        }
    }
}

#[test]
fn energy_bound_dominates_evolved_indicator() {
    for n in [4usize, 8, 16] {
        let basis = spectral_basis(n);
        for j in [0usize, n / 2] {
            let f = &GridFunction::indicator(n, j) * n as f64;
            for t in [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0] {
                let g = semigroup_apply(&basis, t, &f);
                let (fwd, bwd) = discrete_gradients(&g);
                let ones = GridFunction::constant(n, 1.0);
                let energy = GridFunction::new(
                    (0..n)
                        .map(|i| {
                            fwd.values()[i].powi(2)
                                + bwd.values()[i].powi(2)
                                + g.values()[i].powi(2)
                        })
                        .collect(),
                )
                .l2_inner(&ones);
                let bound = h_n_bound(n, t);
                assert!(
                    energy <= bound * (1.0 + 1e-10),
                    "energy {energy} above bound {bound} at n={n}, t={t}"
                );
            }
        }
    }
}

#[test]
fn energy_bound_integral_grows_linearly_in_sites() {
    // integral of the bound from 0 to t stays below K n + t with one K
    // across all three grid sizes
    let k = 1.5;
    for n in [4usize, 8, 16] {
        for t in [0.25, 0.5, 1.0] {
            let integral = h_n_integral(n, t);
            assert!(
                integral <= k * n as f64 + t,
                "integral {integral} above {k}*{n}+{t}"
            );
            // sanity: the closed form matches a fine Riemann sum
            let steps = 200_000usize;
            let h = t / steps as f64;
            let mut riemann = 0.0;
            for s in 0..steps {
                riemann += h_n_bound(n, (s as f64 + 0.5) * h) * h;
            }
            assert!((integral - riemann).abs() < 1e-3 * integral);
        }
    }
}

#[test]
fn grid_function_accessors_and_norms() {
    let f = GridFunction::new(vec![1.0, -2.0]);
    assert_eq!(f.n(), 2);
    assert_eq!(f.sup_norm(), 2.0);
    assert_eq!(f.at_wrapped(-1), -2.0);
    assert_eq!(f.at_wrapped(2), 1.0);
    assert_eq!(f.at_point(0.25), 1.0);
    assert_eq!(f.at_point(0.75), -2.0);
    assert_eq!(f.at_point(1.25), 1.0);

    let g = GridFunction::new(vec![3.0, 4.0]);
    assert!((f.l2_inner(&g) - (3.0 - 8.0) / 2.0).abs() < 1e-15);

    let sum = &f + &g;
    assert_eq!(sum.values(), &[4.0, 2.0]);
    let diff = &f - &g;
    assert_eq!(diff.values(), &[-2.0, -6.0]);
    let scaled = &f * 2.0;
    assert_eq!(scaled.values(), &[2.0, -4.0]);
}

#[test]
fn pair_field_norm_adds_components() {
    let pf = PairField::new(
        GridFunction::new(vec![1.0, -0.5]),
        GridFunction::new(vec![0.25, 2.0]),
    );
    assert_eq!(pf.n(), 2);
    assert_eq!(pf.norm_supsup(), 3.0);
}

#[test]
#[should_panic]
fn pair_field_rejects_mismatched_grids() {
    let _ = PairField::new(GridFunction::zero(2), GridFunction::zero(3));
}

#[test]
fn csv_and_binary_round_trip() {
    let f = GridFunction::new(vec![1.5, -0.25, 3.0]);
    assert_eq!(f.to_csv(), "site,value\n0,1.5\n1,-0.25\n2,3\n");

    let bytes = f.to_bytes();
    assert_eq!(bytes.len(), 8 + 24);
    let back = GridFunction::from_bytes(&bytes).unwrap();
    assert_eq!(back, f);

    assert!(GridFunction::from_bytes(&bytes[..4]).is_err());
    assert!(GridFunction::from_bytes(&bytes[..20]).is_err());
    let zero_len = 0u64.to_le_bytes();
    assert!(GridFunction::from_bytes(&zero_len).is_err());
}

proptest! {
    #[test]
    fn prop_gradient_adjoint(
        fv in prop::collection::vec(-10.0f64..10.0, 2..20),
        seed in 0u64..1000,
    ) {
        let n = fv.len();
        let f = GridFunction::new(fv);
        let g = GridFunction::new(pseudo_values(n, seed));
        let (fwd_f, _) = discrete_gradients(&f);
        let (_, bwd_g) = discrete_gradients(&g);
        let lhs = fwd_f.l2_inner(&g);
        let rhs = -f.l2_inner(&bwd_g);
        let scale = 1.0 + lhs.abs().max(rhs.abs());
        prop_assert!((lhs - rhs).abs() < 1e-10 * scale);
    }

    #[test]
    fn prop_laplacian_self_adjoint(
        fv in prop::collection::vec(-10.0f64..10.0, 2..20),
        seed in 0u64..1000,
    ) {
        let n = fv.len();
        let f = GridFunction::new(fv);
        let g = GridFunction::new(pseudo_values(n, seed));
        let lhs = discrete_laplacian(&f).l2_inner(&g);
        let rhs = f.l2_inner(&discrete_laplacian(&g));
        let scale = 1.0 + lhs.abs().max(rhs.abs());
        prop_assert!((lhs - rhs).abs() < 1e-10 * scale);
    }

    #[test]
    fn prop_laplacian_conserves_mass(fv in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let n = fv.len();
        let f = GridFunction::new(fv);
        let total: f64 = discrete_laplacian(&f).values().iter().sum();
        prop_assert!(total.abs() < 1e-9 * (n * n) as f64 * (1.0 + f.sup_norm()));
    }

    #[test]
    fn prop_semigroup_contraction_positivity(
        fv in prop::collection::vec(0.0f64..10.0, 2..17),
        t in 0.0f64..2.0,
    ) {
        let n = fv.len();
        let basis = spectral_basis(n);
        let f = GridFunction::new(fv);
        let out = semigroup_apply(&basis, t, &f);
        prop_assert!(out.sup_norm() <= f.sup_norm() * (1.0 + 1e-12) + 1e-12);
        prop_assert!(out.min_value() >= -1e-10 * (1.0 + f.sup_norm()));
    }

    #[test]
    fn prop_binary_round_trip(fv in prop::collection::vec(-1e12f64..1e12, 1..40)) {
        let f = GridFunction::new(fv);
        let back = GridFunction::from_bytes(&f.to_bytes()).unwrap();
        prop_assert_eq!(back, f);
    }
}
