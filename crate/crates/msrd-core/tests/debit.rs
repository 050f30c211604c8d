use msrd_core::debit::{
    debit_f, debit_f1n, debit_g_at, debit_g_projected, debit_g_step, debit_gn, generator_apply,
    square_amplitudes, theta_gate, DebitError, TestFunctional,
};
use msrd_core::grid::{GridFunction, PairField};
use msrd_core::lln::reference_network;
use msrd_core::model::{
    kernel_impl, kernel_weights, parse_network, slow_debit_point, Kernel, NetworkSpec,
    ScalingParams,
};

fn network(toml_body: &str) -> NetworkSpec {
    parse_network(toml_body).unwrap()
}

/// Birth at unit rate, death proportional to C.
fn birth_death() -> NetworkSpec {
    network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "fast_c"
gamma_c = 1
rate = "1"

[[reactions]]
class = "fast_c"
gamma_c = -1
rate = "0.5*uC"

[kernel]
shape = "constant_box"

[initial]
v_c = "2"
v_d = "0"
"#,
    )
}

/// One slow mixed reaction that moves both species across sites.
fn coupled_slow() -> NetworkSpec {
    network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "slow_mixed"
gamma_c = 2
gamma_d = -1
rate = "0.5*uC*uD"

[[reactions]]
class = "slow_d"
gamma_d = 1
rate = "1"

[kernel]
shape = "constant_box"

[initial]
v_c = "1"
v_d = "2"
"#,
    )
}

fn state(u_c: Vec<f64>, u_d: Vec<f64>) -> PairField {
    PairField::new(GridFunction::new(u_c), GridFunction::new(u_d))
}

#[test]
fn fast_drift_matches_hand_sums() {
    let spec = birth_death();
    let u = state(vec![2.0, 2.0, 2.0], vec![0.0; 3]);
    assert_eq!(debit_f(&spec, &u).sup_norm(), 0.0);

    let u0 = state(vec![0.0, 0.0, 0.0], vec![0.0; 3]);
    for v in debit_f(&spec, &u0).values() {
        assert_eq!(*v, 1.0);
    }

    let slow_only = coupled_slow();
    let u = state(vec![1.0, 2.0], vec![3.0, 4.0]);
    assert_eq!(debit_f(&slow_only, &u).sup_norm(), 0.0);
}

#[test]
fn cross_site_c_drift_scales_inversely_with_mu() {
    let spec = coupled_slow();
    let scaling4 = ScalingParams::new(4, 8.0).unwrap();
    let scaling_double = ScalingParams::new(4, 16.0).unwrap();
    let u = state(vec![1.0, 1.5, 2.0, 1.2], vec![2.0, 2.5, 1.8, 2.2]);
    let a = debit_f1n(&spec, &scaling4, &u);
    let b = debit_f1n(&spec, &scaling_double, &u);
    assert!(a.sup_norm() > 0.0);
    // gates stay saturated this deep inside the positive cone, so the
    // explicit 1/mu factor is the only mu dependence
    for j in 0..4 {
        assert!((a.values()[j] - 2.0 * b.values()[j]).abs() < 1e-12);
    }

    // reference network's slow reactions never move C
    let reference = reference_network();
    let r = debit_f1n(&reference, &scaling4, &u);
    assert_eq!(r.sup_norm(), 0.0);
}

#[test]
fn cross_site_c_drift_constant_state_closed_form() {
    let spec = coupled_slow();
    let scaling = ScalingParams::new(4, 10.0).unwrap();
    let u = state(vec![1.0; 4], vec![2.0; 4]);
    let f1 = debit_f1n(&spec, &scaling, &u);
    // rate 0.5*1*2 = 1, gamma_c = 2, kernel row sums 1, gates saturated
    for v in f1.values() {
        assert!((v - 2.0 * 1.0 / 10.0).abs() < 1e-12);
    }
}

#[test]
fn d_drift_reduces_to_point_drift_on_constant_states() {
    let spec = reference_network();
    let scaling = ScalingParams::new(6, 20.0).unwrap();
    let u = state(vec![1.5; 6], vec![2.0; 6]);
    let gn = debit_gn(&spec, &scaling, &u);
    let g = slow_debit_point(&spec, 1.5, 2.0);
    // raised cosine has unit mass, so constant states see exactly g
    for v in gn.values() {
        assert!((v - g).abs() < 1e-12, "{v} vs {g}");
    }

    let fast_only = birth_death();
    assert_eq!(debit_gn(&fast_only, &scaling, &u).sup_norm(), 0.0);
}

#[test]
fn d_drift_vanishes_at_zero_d_for_death_networks() {
    let spec = network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "slow_d"
gamma_d = -1
rate = "0.3*uD"

[kernel]
shape = "constant_box"

[initial]
v_c = "1"
v_d = "1"
"#,
    );
    let scaling = ScalingParams::new(4, 5.0).unwrap();
    let u = state(vec![1.0; 4], vec![0.0; 4]);
    assert_eq!(debit_gn(&spec, &scaling, &u).sup_norm(), 0.0);
}

#[test]
fn continuous_drift_on_constant_states_is_the_point_drift() {
    for kernel in [
        Kernel::ConstantBox,
        Kernel::RaisedCosine,
        Kernel::TableLookup { table: vec![3.0, 2.0, 0.5, 0.5, 2.0] },
    ] {
        let mut spec = reference_network();
        spec.kernel = kernel;
        let mass = kernel_impl(&spec.kernel).mass();
        let g = slow_debit_point(&spec, 1.5, 2.0);

        let u = state(vec![1.5; 5], vec![2.0; 5]);
        let avg = debit_g_step(&spec, &u);
        for v in avg.values() {
            assert!((v - g * mass).abs() < 1e-10, "{v} vs {}", g * mass);
        }

        let pointwise = debit_g_at(&spec, &|_| 1.5, &|_| 2.0, 0.37);
        assert!((pointwise - g * mass).abs() < 1e-8);
    }
}

#[test]
fn continuous_drift_gates_to_zero_without_d() {
    let spec = reference_network();
    let u = state(vec![1.0; 4], vec![0.0; 4]);
    assert_eq!(debit_g_step(&spec, &u).sup_norm(), 0.0);
    assert_eq!(debit_g_at(&spec, &|_| 1.0, &|_| 0.0, 0.2), 0.0);
}

#[test]
fn continuous_drift_quadrature_matches_riemann() {
    let spec = reference_network();
    let v_c = |x: f64| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x).cos();
    let v_d = |x: f64| 2.0 + 0.3 * (2.0 * std::f64::consts::PI * x).sin();
    let kernel = kernel_impl(&spec.kernel);
    for x in [0.0, 0.21, 0.5, 0.83] {
        let got = debit_g_at(&spec, &v_c, &v_d, x);
        let steps = 400_000;
        let mut riemann = 0.0;
        for s in 0..steps {
            let y = (s as f64 + 0.5) / steps as f64;
            riemann += slow_debit_point(&spec, v_c(y), v_d(y)) * kernel.eval(x - y);
        }
        riemann /= steps as f64;
        riemann *= msrd_core::model::theta(v_c(x)) * msrd_core::model::theta(v_d(x));
        assert!((got - riemann).abs() < 1e-8, "x={x}: {got} vs {riemann}");
    }
}

#[test]
fn continuous_drift_is_lipschitz_in_the_state() {
    let spec = reference_network();
    let base_c = |x: f64| 1.2 + 0.4 * (2.0 * std::f64::consts::PI * x).cos();
    let base_d = |x: f64| 2.0 + 0.5 * (2.0 * std::f64::consts::PI * x).sin();
    let mut worst_ratio: f64 = 0.0;
    for delta in [0.05, 0.01, 0.002] {
        let moved_c = move |x: f64| base_c(x) + delta;
        let moved_d = move |x: f64| base_d(x) - delta;
        let mut diff: f64 = 0.0;
        for k in 0..50 {
            let x = k as f64 / 50.0;
            let a = debit_g_at(&spec, &base_c, &base_d, x);
            let b = debit_g_at(&spec, &moved_c, &moved_d, x);
            diff = diff.max((a - b).abs());
        }
        worst_ratio = worst_ratio.max(diff / (2.0 * delta));
    }
    // crude sampled constant; the point is boundedness as delta shrinks
    assert!(worst_ratio < 20.0, "sampled ratio {worst_ratio}");
}

#[test]
fn projected_continuous_drift_matches_cell_quadrature() {
    let spec = reference_network();
    let v_c = |x: f64| 1.5 + 0.2 * (2.0 * std::f64::consts::PI * x).cos();
    let v_d = |_x: f64| 2.0;
    let proj = debit_g_projected(&spec, &v_c, &v_d, 4).unwrap();
    for j in 0..4 {
        let steps = 4000;
        let mut avg = 0.0;
        for s in 0..steps {
            let x = (j as f64 + (s as f64 + 0.5) / steps as f64) / 4.0;
            avg += debit_g_at(&spec, &v_c, &v_d, x);
        }
        avg /= steps as f64;
        assert!((proj.values()[j] - avg).abs() < 1e-7);
    }
}

#[test]
fn gate_values_match_hand_smoothstep() {
    let spec = network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "slow_d"
gamma_d = -1
rate = "uD"

[[reactions]]
class = "slow_d"
gamma_d = 1
rate = "1"

[kernel]
shape = "constant_box"

[initial]
v_c = "1"
v_d = "1"
"#,
    );
    let scaling = ScalingParams::new(2, 1.0).unwrap();
    let weights = kernel_weights(&spec.kernel, &scaling);
    let death = &spec.reactions[0];
    let birth = &spec.reactions[1];

    // well inside: gate saturates
    let u = state(vec![5.0, 5.0], vec![5.0, 5.0]);
    for target in 0..2 {
        assert_eq!(theta_gate(death, &scaling, &weights, &u, target, 0), 1.0);
    }
    // death jump of 1/2 from level 0 gates off
    let u = state(vec![5.0, 5.0], vec![0.0, 5.0]);
    assert_eq!(theta_gate(death, &scaling, &weights, &u, 0, 1), 0.0);
    assert_eq!(theta_gate(death, &scaling, &weights, &u, 1, 1), 1.0);
    // birth jump of 1/2 from level 0 passes half through
    let u = state(vec![5.0, 5.0], vec![0.0, 0.0]);
    for target in 0..2 {
        let g = theta_gate(birth, &scaling, &weights, &u, target, 0);
        assert!((g - 0.5).abs() < 1e-15);
    }
}

#[test]
fn amplitude_fields_frozen_values() {
    let spec = birth_death();
    let scaling = ScalingParams::new(4, 10.0).unwrap();
    let u = state(vec![1.0; 4], vec![0.0; 4]);
    let bundle = square_amplitudes(&spec, &scaling, &u);
    for v in bundle.amp_lap.values() {
        assert_eq!(*v, 64.0);
    }
    // birth contributes 1, death 0.5*1; |gamma| = gamma^2 = 1 for both
    for v in bundle.amp_f.values() {
        assert!((v - 1.5).abs() < 1e-15);
    }
    for v in bundle.amp_f_sq.values() {
        assert!((v - 1.5).abs() < 1e-15);
    }
    assert_eq!(bundle.amp_f1n_sq.sup_norm(), 0.0);
    assert_eq!(bundle.amp_gn_sq.sup_norm(), 0.0);

    // drift assembly: psi_c = laplacian + f + f1n (laplacian of constant = 0)
    for (a, b) in bundle.psi_c.values().iter().zip(bundle.f.values()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn amplitude_fields_vanish_on_dead_state() {
    let spec = network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "fast_c"
gamma_c = -1
rate = "uC"

[[reactions]]
class = "slow_d"
gamma_d = -1
rate = "uD"

[kernel]
shape = "raised_cosine"

[initial]
v_c = "0"
v_d = "0"
"#,
    );
    let scaling = ScalingParams::new(4, 5.0).unwrap();
    let u = state(vec![0.0; 4], vec![0.0; 4]);
    let bundle = square_amplitudes(&spec, &scaling, &u);
    for field in [
        &bundle.f,
        &bundle.f1n,
        &bundle.gn,
        &bundle.g_avg,
        &bundle.psi_c,
        &bundle.psi_d,
        &bundle.amp_lap,
        &bundle.amp_f,
        &bundle.amp_f_sq,
        &bundle.amp_f1n,
        &bundle.amp_f1n_sq,
        &bundle.amp_gn,
        &bundle.amp_gn_sq,
    ] {
        assert_eq!(field.sup_norm(), 0.0);
    }
}

#[test]
fn squared_d_amplitude_respects_kernel_bound() {
    let spec = reference_network();
    let scaling = ScalingParams::new(8, 16.0).unwrap();
    let u = state(
        (0..8).map(|j| 1.0 + 0.1 * j as f64).collect(),
        (0..8).map(|j| 2.0 - 0.05 * j as f64).collect(),
    );
    let bundle = square_amplitudes(&spec, &scaling, &u);
    let weights = kernel_weights(&spec.kernel, &scaling);
    let peak_over_n = kernel_impl(&spec.kernel).peak() / 8.0;
    assert!(weights.max_entry() <= peak_over_n + 1e-12);
    // coarse bound: replace each squared weight by its maximum
    for j in 0..8 {
        let mut rhs = 0.0;
        for s in 0..8 {
            for r in spec.reactions.iter().filter(|r| r.class.is_slow()) {
                let rate = r.rate.eval_unchecked(u.u_c.values()[s], u.u_d.values()[s]);
                let gate = theta_gate(r, &scaling, &weights, &u, j, s);
                rhs += (r.gamma_d as f64 * gate).powi(2) * rate;
            }
        }
        assert!(bundle.amp_gn_sq.values()[j] <= peak_over_n.powi(2) * rhs + 1e-12);
    }
}

#[test]
fn bundle_csv_is_long_format() {
    let spec = birth_death();
    let scaling = ScalingParams::new(2, 4.0).unwrap();
    let u = state(vec![1.0, 2.0], vec![0.0, 0.0]);
    let csv = square_amplitudes(&spec, &scaling, &u).to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "site,field,value");
    assert_eq!(csv.lines().count(), 1 + 13 * 2);
    assert!(csv.contains("0,amp_lap,"));
}

#[test]
fn generator_kills_constants_and_matches_linear_drift() {
    let spec = coupled_slow();
    let scaling = ScalingParams::new(4, 7.0).unwrap();
    let u = state(vec![1.0, 1.5, 0.8, 1.2], vec![2.0, 1.7, 2.4, 0.6]);

    let zero = TestFunctional::Linear {
        w_c: GridFunction::zero(4),
        w_d: GridFunction::zero(4),
    };
    assert_eq!(generator_apply(&spec, &scaling, &u, &zero).unwrap(), 0.0);

    let bundle = square_amplitudes(&spec, &scaling, &u);

    // total C mass: diffusion telescopes away, laplacian pairs to zero
    let mean_c = TestFunctional::Linear {
        w_c: GridFunction::constant(4, 1.0),
        w_d: GridFunction::zero(4),
    };
    let got = generator_apply(&spec, &scaling, &u, &mean_c).unwrap();
    let ones = GridFunction::constant(4, 1.0);
    let want = (&bundle.f + &bundle.f1n).l2_inner(&ones);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");

    // general linear observable sees the full drift pair
    let w_c = GridFunction::new(vec![0.3, -1.0, 2.0, 0.7]);
    let w_d = GridFunction::new(vec![1.0, 0.2, -0.4, 0.9]);
    let lin = TestFunctional::Linear { w_c: w_c.clone(), w_d: w_d.clone() };
    let got = generator_apply(&spec, &scaling, &u, &lin).unwrap();
    let want = bundle.psi_c.l2_inner(&w_c) + bundle.psi_d.l2_inner(&w_d);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn generator_second_order_terms_match_amplitude_fields() {
    // a network exercising every channel kind, on a non-constant state
    let spec = network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "fast_c"
gamma_c = 1
rate = "1"

[[reactions]]
class = "fast_mixed"
gamma_c = -1
rate = "0.25*uC*uD"

[[reactions]]
class = "slow_mixed"
gamma_c = 2
gamma_d = -1
rate = "0.5*uC*uD"

[[reactions]]
class = "slow_d"
gamma_d = 1
rate = "1"

[kernel]
shape = "raised_cosine"

[initial]
v_c = "1"
v_d = "2"
"#,
    );
    let scaling = ScalingParams::new(4, 9.0).unwrap();
    let u = state(vec![1.0, 1.5, 0.8, 1.2], vec![2.0, 1.7, 2.4, 0.6]);
    let bundle = square_amplitudes(&spec, &scaling, &u);
    let n = 4usize;
    let nsq = (n * n) as f64;
    let mu = scaling.mu();

    for j in 0..n {
        let w = GridFunction::indicator(n, j);

        let phi = TestFunctional::QuadraticC { w: w.clone() };
        let gen = generator_apply(&spec, &scaling, &u, &phi).unwrap();
        let first_order = 2.0 * u.u_c.l2_inner(&w) * bundle.psi_c.l2_inner(&w);
        let second = (gen - first_order) * nsq;
        let want = (bundle.amp_lap.values()[j]
            + bundle.amp_f_sq.values()[j]
            + mu * bundle.amp_f1n_sq.values()[j])
            / mu;
        assert!((second - want).abs() < 1e-9 * (1.0 + want.abs()), "site {j}: {second} vs {want}");

        let phi = TestFunctional::QuadraticD { w: w.clone() };
        let gen = generator_apply(&spec, &scaling, &u, &phi).unwrap();
        let first_order = 2.0 * u.u_d.l2_inner(&w) * bundle.psi_d.l2_inner(&w);
        let second = (gen - first_order) * nsq;
        let want = bundle.amp_gn_sq.values()[j];
        assert!((second - want).abs() < 1e-9 * (1.0 + want.abs()), "site {j}: {second} vs {want}");
    }
}

#[test]
fn generator_cross_site_term_is_pure_diffusion_when_slow_leaves_c_alone() {
    let spec = reference_network();
    let scaling = ScalingParams::new(4, 6.0).unwrap();
    let u = state(vec![1.0, 1.5, 0.8, 1.2], vec![2.0, 1.7, 2.4, 0.6]);
    let bundle = square_amplitudes(&spec, &scaling, &u);
    let n = 4usize;
    let nsq = (n * n) as f64;
    let mu = scaling.mu();

    let qv = |j: usize| {
        let w = GridFunction::indicator(n, j);
        let phi = TestFunctional::QuadraticC { w: w.clone() };
        let gen = generator_apply(&spec, &scaling, &u, &phi).unwrap();
        (gen - 2.0 * u.u_c.l2_inner(&w) * bundle.psi_c.l2_inner(&w)) * nsq
    };

    for j in 0..n {
        let k = (j + 1) % n;
        let w = &GridFunction::indicator(n, j) + &GridFunction::indicator(n, k);
        let phi = TestFunctional::QuadraticC { w: w.clone() };
        let gen = generator_apply(&spec, &scaling, &u, &phi).unwrap();
        let pair = (gen - 2.0 * u.u_c.l2_inner(&w) * bundle.psi_c.l2_inner(&w)) * nsq;
        let cross = (pair - qv(j) - qv(k)) / 2.0;
        let want = -nsq / mu * (u.u_c.values()[j] + u.u_c.values()[k]);
        assert!((cross - want).abs() < 1e-9 * (1.0 + want.abs()), "site {j}: {cross} vs {want}");
    }
}

#[test]
fn generator_guard_rejects_huge_systems() {
    let spec = reference_network();
    let scaling = ScalingParams::new(20_000, 10.0).unwrap();
    let u = state(vec![1.0; 20_000], vec![1.0; 20_000]);
    let w = GridFunction::zero(20_000);
    let phi = TestFunctional::QuadraticC { w };
    match generator_apply(&spec, &scaling, &u, &phi) {
        Err(DebitError::ChannelGuard { channels, limit }) => {
            assert!(channels > limit);
        }
        other => panic!("expected the channel guard, got {other:?}"),
    }
}

#[test]
fn fused_drift_amplitudes_match_bundle_fields() {
    use msrd_core::debit::{drift_and_square_amplitudes_into, DriftAmp};

    // same every-channel-kind network and state as the generator test
    let spec = network(
        r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "fast_c"
gamma_c = 1
rate = "1"

[[reactions]]
class = "fast_mixed"
gamma_c = -1
rate = "0.25*uC*uD"

[[reactions]]
class = "slow_mixed"
gamma_c = 2
gamma_d = -1
rate = "0.5*uC*uD"

[[reactions]]
class = "slow_d"
gamma_d = 1
rate = "1"

[kernel]
shape = "raised_cosine"

[initial]
v_c = "1"
v_d = "2"
"#,
    );
    let scaling = ScalingParams::new(4, 9.0).unwrap();
    let weights = kernel_weights(&spec.kernel, &scaling);
    let u = state(vec![1.0, 1.5, 0.8, 1.2], vec![2.0, 1.7, 2.4, 0.6]);
    let bundle = square_amplitudes(&spec, &scaling, &u);

    let mut fused = DriftAmp::zeros(4);
    drift_and_square_amplitudes_into(
        &spec,
        &scaling,
        &weights,
        u.u_c.values(),
        u.u_d.values(),
        &mut fused,
    );

    let close = |got: &[f64], want: &GridFunction, name: &str| {
        for (j, (g, w)) in got.iter().zip(want.values()).enumerate() {
            assert!(
                (g - w).abs() <= 1e-12 * (1.0 + w.abs()),
                "{name}[{j}]: {g} vs {w}"
            );
        }
    };
    close(&fused.psi_c, &bundle.psi_c, "psi_c");
    close(&fused.psi_d, &bundle.psi_d, "psi_d");
    close(&fused.amp_lap, &bundle.amp_lap, "amp_lap");
    close(&fused.amp_f_sq, &bundle.amp_f_sq, "amp_f_sq");
    close(&fused.amp_f1n_sq, &bundle.amp_f1n_sq, "amp_f1n_sq");
    close(&fused.amp_gn_sq, &bundle.amp_gn_sq, "amp_gn_sq");
}
