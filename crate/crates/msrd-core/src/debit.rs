//! Drift and amplitude calculus for the two-species network: the fast
//! on-site drift F, the cross-site corrections F1N (on C) and GN (on D),
//! the continuous convolution drift G, the per-site jump-amplitude fields
//! feeding the martingale compensators, and a brute-force generator oracle
//! for small systems.

use crate::grid::{discrete_laplacian, project_pn, GridError, GridFunction, PairField};
use crate::model::{
    fast_debit_point, kernel_impl, kernel_pair_weights, kernel_weights, theta,
    KernelWeights, NetworkSpec, Reaction, ReactionClass, ScalingParams,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DebitError {
    #[error("generator enumeration guard exceeded: {channels} channels (limit {limit})")]
    ChannelGuard { channels: usize, limit: usize },
    #[error("rate produced a non-finite value at site {site}")]
    NonFiniteRate { site: usize },
}

/// Cutoff factor for a jump sourced at `source` as received at `target`:
/// the product of smoothstep gates on both post-jump target coordinates.
pub fn theta_gate(
    r: &Reaction,
    scaling: &ScalingParams,
    weights: &KernelWeights,
    u: &PairField,
    target: usize,
    source: usize,
) -> f64 {
    let w = weights.at(target, source);
    let c_after = u.u_c.values()[target] + r.gamma_c as f64 / scaling.mu() * w;
    let d_after = u.u_d.values()[target] + r.gamma_d as f64 * w;
    theta(c_after) * theta(d_after)
}

/// Fast on-site drift of C: per-site sum of gamma_c times the fast rates.
pub fn debit_f(spec: &NetworkSpec, u: &PairField) -> GridFunction {
    let n = u.n();
    let values = (0..n)
        .map(|j| fast_debit_point(spec, u.u_c.values()[j], u.u_d.values()[j]))
        .collect();
    GridFunction::new(values)
}

/// Cross-site drift of C from slow mixed reactions: each source site j
/// spreads gamma_c/mu over the kernel weights, gated at every target.
pub fn debit_f1n(spec: &NetworkSpec, scaling: &ScalingParams, u: &PairField) -> GridFunction {
    let n = u.n();
    let weights = kernel_weights(&spec.kernel, scaling);
    let mut values = vec![0.0; n];
    for r in &spec.reactions {
        if r.class != ReactionClass::SlowMixed || r.gamma_c == 0 {
            continue;
        }
        for j in 0..n {
            let rate = r.rate.eval_unchecked(u.u_c.values()[j], u.u_d.values()[j]);
            if rate == 0.0 {
                continue;
            }
            for (i, v) in values.iter_mut().enumerate() {
                *v += r.gamma_c as f64 / scaling.mu()
                    * weights.at(i, j)
                    * theta_gate(r, scaling, &weights, u, i, j)
                    * rate;
            }
        }
    }
    GridFunction::new(values)
}

/// Drift of D: every slow reaction at source j moves gamma_d times the
/// kernel weight at each target, gated there.
pub fn debit_gn(spec: &NetworkSpec, scaling: &ScalingParams, u: &PairField) -> GridFunction {
    let n = u.n();
    let weights = kernel_weights(&spec.kernel, scaling);
    let mut values = vec![0.0; n];
    for r in &spec.reactions {
        if !r.class.is_slow() || r.gamma_d == 0 {
            continue;
        }
        for j in 0..n {
            let rate = r.rate.eval_unchecked(u.u_c.values()[j], u.u_d.values()[j]);
            if rate == 0.0 {
                continue;
            }
            for (i, v) in values.iter_mut().enumerate() {
                *v += r.gamma_d as f64
                    * weights.at(i, j)
                    * theta_gate(r, scaling, &weights, u, i, j)
                    * rate;
            }
        }
    }
    GridFunction::new(values)
}

/// Continuous drift of D for a step state, returned as exact cell averages:
/// value at site i is theta(u_C(i)) theta(u_D(i)) times the pair-averaged
/// convolution of the ungated slow drift with the kernel.
pub fn debit_g_step(spec: &NetworkSpec, u: &PairField) -> GridFunction {
    let n = u.n();
    let w = kernel_pair_weights(&spec.kernel, n);
    let g: Vec<f64> = (0..n)
        .map(|j| crate::model::slow_debit_point(spec, u.u_c.values()[j], u.u_d.values()[j]))
        .collect();
    let values = (0..n)
        .map(|i| {
            let gate = theta(u.u_c.values()[i]) * theta(u.u_d.values()[i]);
            if gate == 0.0 {
                return 0.0;
            }
            // pair weights already carry the cell-average normalization:
            // they sum to the kernel mass over one period
            let conv: f64 = (0..n).map(|s| w[(i + n - s) % n] * g[s]).sum();
            gate * conv
        })
        .collect();
    GridFunction::new(values)
}

/// Pointwise continuous drift of D at x for a closed-form state:
/// theta(v_C(x)) theta(v_D(x)) times the circular convolution of the
/// ungated slow drift with the kernel, by piecewise Gauss quadrature split
/// at kernel discontinuities (absolute tolerance 1e-8 for bounded states).
pub fn debit_g_at(
    spec: &NetworkSpec,
    v_c: &dyn Fn(f64) -> f64,
    v_d: &dyn Fn(f64) -> f64,
    x: f64,
) -> f64 {
    let gate = theta(v_c(x)) * theta(v_d(x));
    if gate == 0.0 {
        return 0.0;
    }
    let kernel = kernel_impl(&spec.kernel);
    // split [0,1] where y -> a(x - y) jumps
    let mut cuts: Vec<f64> = kernel
        .discontinuities()
        .iter()
        .map(|b| (x - b).rem_euclid(1.0))
        .collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    const GL_X: [f64; 4] = [
        -0.8611363115940526,
        -0.33998104358485626,
        0.33998104358485626,
        0.8611363115940526,
    ];
    const GL_W: [f64; 4] = [
        0.34785484513745385,
        0.6521451548625461,
        0.6521451548625461,
        0.34785484513745385,
    ];
    let mut acc = 0.0;
    for pair in cuts.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let panels = ((hi - lo) * 256.0).ceil().max(1.0) as usize;
        let h = (hi - lo) / panels as f64;
        for p in 0..panels {
            let mid = lo + (p as f64 + 0.5) * h;
            for (gx, gw) in GL_X.iter().zip(GL_W) {
                let y = mid + 0.5 * h * gx;
                acc += 0.5
                    * h
                    * gw
                    * crate::model::slow_debit_point(spec, v_c(y), v_d(y))
                    * kernel.eval(x - y);
            }
        }
    }
    gate * acc
}

/// Cell averages of the continuous drift of D for a closed-form state.
pub fn debit_g_projected(
    spec: &NetworkSpec,
    v_c: &dyn Fn(f64) -> f64,
    v_d: &dyn Fn(f64) -> f64,
    n: usize,
) -> Result<GridFunction, GridError> {
    project_pn(&|x| debit_g_at(spec, v_c, v_d, x), n)
}

/// Per-state drift and jump-amplitude fields.
#[derive(Debug, Clone)]
pub struct DebitBundle {
    /// Fast on-site drift of C.
    pub f: GridFunction,
    /// Cross-site drift of C.
    pub f1n: GridFunction,
    /// Drift of D.
    pub gn: GridFunction,
    /// Cell-averaged continuous drift of D.
    pub g_avg: GridFunction,
    /// Full drift of C: Laplacian + f + f1n.
    pub psi_c: GridFunction,
    /// Full drift of D (= gn).
    pub psi_d: GridFunction,
    /// Diffusion amplitude N^2 (u_{j-1} + 2 u_j + u_{j+1}); the first- and
    /// second-power fields share this displayed form.
    pub amp_lap: GridFunction,
    /// Sum of |gamma_c| times fast rates.
    pub amp_f: GridFunction,
    /// Sum of gamma_c^2 times fast rates.
    pub amp_f_sq: GridFunction,
    /// Received first-power amplitude of the cross-site C drift.
    pub amp_f1n: GridFunction,
    /// Received squared amplitude of the cross-site C drift; mu^2 times it
    /// sums rate times squared jump over slow channels.
    pub amp_f1n_sq: GridFunction,
    /// Received first-power amplitude of the D drift.
    pub amp_gn: GridFunction,
    /// Received squared amplitude of the D drift: per-event squared jump on
    /// u_D times rate, summed over slow channels and sources.
    pub amp_gn_sq: GridFunction,
}

impl DebitBundle {
    /// Long-format CSV: site, field, value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,field,value\n");
        let fields: [(&str, &GridFunction); 13] = [
            ("f", &self.f),
            ("f1n", &self.f1n),
            ("gn", &self.gn),
            ("g_avg", &self.g_avg),
            ("psi_c", &self.psi_c),
            ("psi_d", &self.psi_d),
            ("amp_lap", &self.amp_lap),
            ("amp_f", &self.amp_f),
            ("amp_f_sq", &self.amp_f_sq),
            ("amp_f1n", &self.amp_f1n),
            ("amp_f1n_sq", &self.amp_f1n_sq),
            ("amp_gn", &self.amp_gn),
            ("amp_gn_sq", &self.amp_gn_sq),
        ];
        for (name, gf) in fields {
            for (j, v) in gf.values().iter().enumerate() {
                out.push_str(&format!("{j},{name},{v}\n"));
            }
        }
        out
    }
}

/// Evaluate every drift and amplitude field at one state.
pub fn square_amplitudes(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    u: &PairField,
) -> DebitBundle {
    let n = u.n();
    assert_eq!(n, scaling.n(), "state and scaling must agree on the grid");
    let weights = kernel_weights(&spec.kernel, scaling);
    let mu = scaling.mu();

    let f = debit_f(spec, u);
    let f1n = debit_f1n(spec, scaling, u);
    let gn = debit_gn(spec, scaling, u);
    let g_avg = debit_g_step(spec, u);
    let lap = discrete_laplacian(&u.u_c);
    let psi_c = &(&lap + &f) + &f1n;
    let psi_d = gn.clone();

    let nsq = (n * n) as f64;
    let uc = u.u_c.values();
    let amp_lap = GridFunction::new(
        (0..n)
            .map(|j| nsq * (uc[(j + n - 1) % n] + 2.0 * uc[j] + uc[(j + 1) % n]))
            .collect(),
    );

    let mut amp_f = vec![0.0; n];
    let mut amp_f_sq = vec![0.0; n];
    for r in &spec.reactions {
        if !r.class.is_fast() {
            continue;
        }
        let g = r.gamma_c as f64;
        for j in 0..n {
            let rate = r.rate.eval_unchecked(uc[j], u.u_d.values()[j]);
            amp_f[j] += g.abs() * rate;
            amp_f_sq[j] += g * g * rate;
        }
    }

    // received at target j: square the jump each slow channel lands there,
    // weight by the source-site rate
    let mut amp_f1n = vec![0.0; n];
    let mut amp_f1n_sq = vec![0.0; n];
    let mut amp_gn = vec![0.0; n];
    let mut amp_gn_sq = vec![0.0; n];
    for r in &spec.reactions {
        if !r.class.is_slow() {
            continue;
        }
        let gc = r.gamma_c as f64;
        let gd = r.gamma_d as f64;
        for s in 0..n {
            let rate = r.rate.eval_unchecked(uc[s], u.u_d.values()[s]);
            if rate == 0.0 {
                continue;
            }
            for j in 0..n {
                let w = weights.at(j, s);
                let gate = theta_gate(r, scaling, &weights, u, j, s);
                let wg = w * gate;
                if gc != 0.0 {
                    amp_f1n[j] += gc.abs() / mu * wg * rate;
                    amp_f1n_sq[j] += (gc / mu * wg).powi(2) * rate;
                }
                if gd != 0.0 {
                    amp_gn[j] += gd.abs() * wg * rate;
                    amp_gn_sq[j] += (gd * wg).powi(2) * rate;
                }
            }
        }
    }

    DebitBundle {
        f,
        f1n,
        gn,
        g_avg,
        psi_c,
        psi_d,
        amp_lap,
        amp_f: GridFunction::new(amp_f),
        amp_f_sq: GridFunction::new(amp_f_sq),
        amp_f1n: GridFunction::new(amp_f1n),
        amp_f1n_sq: GridFunction::new(amp_f1n_sq),
        amp_gn: GridFunction::new(amp_gn),
        amp_gn_sq: GridFunction::new(amp_gn_sq),
    }
}

/// Reusable buffers for the per-state fields the martingale compensators
/// consume: the two drifts and the squared-amplitude fields. A subset of
/// [`DebitBundle`], evaluated in one fused pass without allocating, for use
/// inside event loops.
#[derive(Debug, Clone)]
pub struct DriftAmp {
    pub psi_c: Vec<f64>,
    pub psi_d: Vec<f64>,
    pub amp_lap: Vec<f64>,
    pub amp_f_sq: Vec<f64>,
    pub amp_f1n_sq: Vec<f64>,
    pub amp_gn_sq: Vec<f64>,
}

impl DriftAmp {
    pub fn zeros(n: usize) -> Self {
        DriftAmp {
            psi_c: vec![0.0; n],
            psi_d: vec![0.0; n],
            amp_lap: vec![0.0; n],
            amp_f_sq: vec![0.0; n],
            amp_f1n_sq: vec![0.0; n],
            amp_gn_sq: vec![0.0; n],
        }
    }
}

/// Fused evaluation of drifts and squared amplitudes into `out`, with the
/// kernel weights precomputed by the caller. Field-by-field equal to the
/// corresponding [`square_amplitudes`] entries.
pub fn drift_and_square_amplitudes_into(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    weights: &KernelWeights,
    uc: &[f64],
    ud: &[f64],
    out: &mut DriftAmp,
) {
    let n = uc.len();
    debug_assert_eq!(n, scaling.n());
    let mu = scaling.mu();
    let nsq = (n * n) as f64;

    for j in 0..n {
        let left = uc[(j + n - 1) % n];
        let right = uc[(j + 1) % n];
        out.psi_c[j] = nsq * (left - 2.0 * uc[j] + right);
        out.amp_lap[j] = nsq * (left + 2.0 * uc[j] + right);
        out.psi_d[j] = 0.0;
        out.amp_f_sq[j] = 0.0;
        out.amp_f1n_sq[j] = 0.0;
        out.amp_gn_sq[j] = 0.0;
    }

    for r in &spec.reactions {
        if r.class.is_fast() {
            let g = r.gamma_c as f64;
            for j in 0..n {
                let rate = r.rate.eval_unchecked(uc[j], ud[j]);
                out.psi_c[j] += g * rate;
                out.amp_f_sq[j] += g * g * rate;
            }
        } else {
            let gc = r.gamma_c as f64;
            let gd = r.gamma_d as f64;
            for s in 0..n {
                let rate = r.rate.eval_unchecked(uc[s], ud[s]);
                if rate == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let w = weights.at(j, s);
                    let gate = theta(uc[j] + gc / mu * w) * theta(ud[j] + gd * w);
                    let wg = w * gate;
                    if gc != 0.0 {
                        out.psi_c[j] += gc / mu * wg * rate;
                        out.amp_f1n_sq[j] += (gc / mu * wg).powi(2) * rate;
                    }
                    if gd != 0.0 {
                        out.psi_d[j] += gd * wg * rate;
                        out.amp_gn_sq[j] += (gd * wg).powi(2) * rate;
                    }
                }
            }
        }
    }
}

/// Linear and quadratic observables for the generator oracle.
#[derive(Debug, Clone)]
pub enum TestFunctional {
    /// <u_C, w_c>_2 + <u_D, w_d>_2.
    Linear { w_c: GridFunction, w_d: GridFunction },
    /// <u_C, w>_2 squared.
    QuadraticC { w: GridFunction },
    /// <u_D, w>_2 squared.
    QuadraticD { w: GridFunction },
}

impl TestFunctional {
    pub fn eval(&self, u: &PairField) -> f64 {
        match self {
            TestFunctional::Linear { w_c, w_d } => {
                u.u_c.l2_inner(w_c) + u.u_d.l2_inner(w_d)
            }
            TestFunctional::QuadraticC { w } => u.u_c.l2_inner(w).powi(2),
            TestFunctional::QuadraticD { w } => u.u_d.l2_inner(w).powi(2),
        }
    }

    /// phi(u + jump) - phi(u) from sparse jump data; exact for this family.
    fn delta(&self, u: &PairField, jump: &ChannelJump) -> f64 {
        match self {
            TestFunctional::Linear { w_c, w_d } => {
                jump.inner_c(w_c) + jump.inner_d(w_d)
            }
            TestFunctional::QuadraticC { w } => {
                let d = jump.inner_c(w);
                2.0 * u.u_c.l2_inner(w) * d + d * d
            }
            TestFunctional::QuadraticD { w } => {
                let d = jump.inner_d(w);
                2.0 * u.u_d.l2_inner(w) * d + d * d
            }
        }
    }
}

enum ChannelJump {
    PointC { j: usize, dc: f64 },
    MoveC { from: usize, to: usize, dc: f64 },
    Slow { jump_c: Vec<f64>, jump_d: Vec<f64> },
}

impl ChannelJump {
    fn inner_c(&self, w: &GridFunction) -> f64 {
        let n = w.n() as f64;
        match self {
            ChannelJump::PointC { j, dc } => dc * w.values()[*j] / n,
            ChannelJump::MoveC { from, to, dc } => {
                dc * (w.values()[*to] - w.values()[*from]) / n
            }
            ChannelJump::Slow { jump_c, .. } => {
                jump_c.iter().zip(w.values()).map(|(a, b)| a * b).sum::<f64>() / n
            }
        }
    }
    fn inner_d(&self, w: &GridFunction) -> f64 {
        match self {
            ChannelJump::Slow { jump_d, .. } => {
                jump_d.iter().zip(w.values()).map(|(a, b)| a * b).sum::<f64>() / w.n() as f64
            }
            _ => 0.0,
        }
    }
}

const CHANNEL_GUARD: usize = 100_000;

/// Generator value at u for the observable: exhaustive sum over every
/// channel of rate times the observable increment. Exact for linear and
/// quadratic observables; guarded against large channel counts.
pub fn generator_apply(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    u: &PairField,
    phi: &TestFunctional,
) -> Result<f64, DebitError> {
    let n = u.n();
    assert_eq!(n, scaling.n());
    let channels = n * (spec.reactions.len() + 2);
    if channels > CHANNEL_GUARD {
        return Err(DebitError::ChannelGuard { channels, limit: CHANNEL_GUARD });
    }
    let weights = kernel_weights(&spec.kernel, scaling);
    let mu = scaling.mu();
    let nsq = (n * n) as f64;
    let uc = u.u_c.values();
    let ud = u.u_d.values();

    let mut acc = 0.0;
    for j in 0..n {
        // diffusion to the right and to the left moves one molecule of C
        let rate_diff = mu * nsq * uc[j];
        if rate_diff > 0.0 && n > 1 {
            for to in [(j + 1) % n, (j + n - 1) % n] {
                let jump = ChannelJump::MoveC { from: j, to, dc: 1.0 / mu };
                acc += rate_diff * phi.delta(u, &jump);
            }
        }
        for r in &spec.reactions {
            match r.class {
                ReactionClass::FastC | ReactionClass::FastMixed => {
                    let rate = mu * r.rate.eval_unchecked(uc[j], ud[j]);
                    if !rate.is_finite() {
                        return Err(DebitError::NonFiniteRate { site: j });
                    }
                    if rate > 0.0 && r.gamma_c != 0 {
                        let jump = ChannelJump::PointC { j, dc: r.gamma_c as f64 / mu };
                        acc += rate * phi.delta(u, &jump);
                    }
                }
                ReactionClass::SlowMixed | ReactionClass::SlowD => {
                    let rate = r.rate.eval_unchecked(uc[j], ud[j]);
                    if !rate.is_finite() {
                        return Err(DebitError::NonFiniteRate { site: j });
                    }
                    if rate > 0.0 {
                        let mut jump_c = vec![0.0; n];
                        let mut jump_d = vec![0.0; n];
                        for i in 0..n {
                            let w = weights.at(i, j);
                            let gate = theta_gate(r, scaling, &weights, u, i, j);
                            jump_c[i] = r.gamma_c as f64 / mu * w * gate;
                            jump_d[i] = r.gamma_d as f64 * w * gate;
                        }
                        let jump = ChannelJump::Slow { jump_c, jump_d };
                        acc += rate * phi.delta(u, &jump);
                    }
                }
            }
        }
    }
    Ok(acc)
}
