//! Ensemble experiments: convergence of the stochastic site process to the
//! deterministic limit across a scaling schedule, and martingale diagnostics.

use crate::grid::{project_pn_exact, GridFunction, PairField};
use crate::limit::{block_average, solve_discrete_limit, LimitError, LimitSolution};
use crate::model::{parse_network, NetworkSpec, ScalingParams};
use crate::ssa::{
    simulate_observed, truncated_simulate_observed, JumpView, MartingaleRecord,
    MartingaleRecorder, PathObserver, SimError, SimOptions, StopRule,
};
use rayon::prelude::*;
use thiserror::Error;

/// Bundled two-species network used by the convergence experiments.
pub const REFERENCE_NETWORK_TOML: &str = include_str!("../assets/reference.toml");

/// The bundled reference network, parsed.
pub fn reference_network() -> NetworkSpec {
    parse_network(REFERENCE_NETWORK_TOML).expect("bundled network parses")
}

#[derive(Debug, Error)]
pub enum LlnError {
    #[error("sweep plan invalid: {0}")]
    BadPlan(String),
    #[error("reference resolution {reference} is not a multiple of the lattice size {lattice}")]
    BadReference { reference: usize, lattice: usize },
    #[error("replica {replica} failed: {message}")]
    ReplicaFailed { replica: usize, message: String },
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

// ---- reference table ----

/// A deterministic path tabulated on the lattice the stochastic process
/// lives on: block-averaged snapshots on a uniform time grid, with linear
/// interpolation in time between them.
#[derive(Debug, Clone)]
pub struct ReferenceTable {
    n: usize,
    horizon: f64,
    times: Vec<f64>,
    u_c: Vec<f64>,
    u_d: Vec<f64>,
}

impl ReferenceTable {
    pub fn from_solution(sol: &LimitSolution, n: usize) -> Result<Self, LlnError> {
        if sol.n % n != 0 {
            return Err(LlnError::BadReference { reference: sol.n, lattice: n });
        }
        let steps = sol.times.len();
        let mut u_c = Vec::with_capacity(steps * n);
        let mut u_d = Vec::with_capacity(steps * n);
        for state in &sol.path {
            u_c.extend(block_average(state.u_c.values(), n));
            u_d.extend(block_average(state.u_d.values(), n));
        }
        Ok(ReferenceTable { n, horizon: sol.horizon(), times: sol.times.clone(), u_c, u_d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn initial(&self) -> PairField {
        PairField::new(
            GridFunction::new(self.u_c[..self.n].to_vec()),
            GridFunction::new(self.u_d[..self.n].to_vec()),
        )
    }

    /// Linear interpolation between tabulated rows; constant outside the
    /// tabulated range.
    fn fill(&self, t: f64, out_c: &mut [f64], out_d: &mut [f64]) {
        let rows = self.times.len();
        if rows == 1 || t <= 0.0 {
            out_c.copy_from_slice(&self.u_c[..self.n]);
            out_d.copy_from_slice(&self.u_d[..self.n]);
            return;
        }
        if t >= self.horizon {
            let last = (rows - 1) * self.n;
            out_c.copy_from_slice(&self.u_c[last..last + self.n]);
            out_d.copy_from_slice(&self.u_d[last..last + self.n]);
            return;
        }
        let dt = self.horizon / (rows - 1) as f64;
        let k = ((t / dt) as usize).min(rows - 2);
        let frac = ((t - self.times[k]) / dt).clamp(0.0, 1.0);
        let lo = k * self.n;
        let hi = lo + self.n;
        for j in 0..self.n {
            out_c[j] = self.u_c[lo + j] + frac * (self.u_c[hi + j] - self.u_c[lo + j]);
            out_d[j] = self.u_d[lo + j] + frac * (self.u_d[hi + j] - self.u_d[lo + j]);
        }
    }

    pub fn sample_field(&self, t: f64) -> PairField {
        let mut c = vec![0.0; self.n];
        let mut d = vec![0.0; self.n];
        self.fill(t, &mut c, &mut d);
        PairField::new(GridFunction::new(c), GridFunction::new(d))
    }
}

// ---- sup-error probe ----

/// Tracks sup_{[0,T]} of the sup-sup distance to a reference table along a
/// piecewise-constant path. The distance is affine in t while the state is
/// constant and the reference sits between tabulated rows, so its maximum
/// over a segment is attained at the segment ends or at interior row times;
/// the probe evaluates exactly those points.
pub struct SupErrorProbe<'a> {
    table: &'a ReferenceTable,
    max_error: f64,
    ref_c: Vec<f64>,
    ref_d: Vec<f64>,
}

impl<'a> SupErrorProbe<'a> {
    pub fn new(table: &'a ReferenceTable) -> Self {
        let n = table.n();
        SupErrorProbe { table, max_error: 0.0, ref_c: vec![0.0; n], ref_d: vec![0.0; n] }
    }

    pub fn max_error(&self) -> f64 {
        self.max_error
    }

    fn eval(&mut self, t: f64, uc: &[f64], ud: &[f64]) {
        self.table.fill(t, &mut self.ref_c, &mut self.ref_d);
        let mut dc = 0.0f64;
        let mut dd = 0.0f64;
        for j in 0..uc.len() {
            dc = dc.max((uc[j] - self.ref_c[j]).abs());
            dd = dd.max((ud[j] - self.ref_d[j]).abs());
        }
        self.max_error = self.max_error.max(dc + dd);
    }
}

impl PathObserver for SupErrorProbe<'_> {
    fn segment(&mut self, t0: f64, t1: f64, uc: &[f64], ud: &[f64]) {
        self.eval(t0, uc, ud);
        let rows = self.table.times.len();
        if rows > 1 {
            let dt = self.table.horizon / (rows - 1) as f64;
            let mut k = (t0 / dt).floor() as usize + 1;
            while k < rows && self.table.times[k] < t1 {
                self.eval(self.table.times[k], uc, ud);
                k += 1;
            }
        }
        self.eval(t1, uc, ud);
    }

    fn event(&mut self, _t: f64, _uc: &[f64], _ud: &[f64], _jump: &JumpView<'_>) {}
}

struct FanOut<'a, 'b> {
    probe: &'a mut SupErrorProbe<'b>,
    recorder: Option<&'a mut MartingaleRecorder<'b>>,
}

impl PathObserver for FanOut<'_, '_> {
    fn segment(&mut self, t0: f64, t1: f64, uc: &[f64], ud: &[f64]) {
        self.probe.segment(t0, t1, uc, ud);
        if let Some(r) = self.recorder.as_deref_mut() {
            r.segment(t0, t1, uc, ud);
        }
    }

    fn event(&mut self, t: f64, uc: &[f64], ud: &[f64], jump: &JumpView<'_>) {
        self.probe.event(t, uc, ud, jump);
        if let Some(r) = self.recorder.as_deref_mut() {
            r.event(t, uc, ud, jump);
        }
    }
}

// ---- ensembles ----

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    /// Record the compensated path statistics per replica. Off by default:
    /// the spectral bookkeeping is quadratic in the lattice size and is only
    /// needed by the diagnostic suite.
    pub with_martingales: bool,
    /// Tube radius for truncated runs; plain runs when absent.
    pub epsilon0: Option<f64>,
    /// Replica r uses RNG stream `stream_base + r`.
    pub stream_base: u64,
    pub max_events: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            with_martingales: false,
            epsilon0: None,
            stream_base: 0,
            max_events: u64::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub replica: usize,
    pub stream: u64,
    pub sup_error: f64,
    pub tau: f64,
    pub martingales: Option<MartingaleRecord>,
}

/// Run independent replicas of the site process started from the exact
/// projection of the network's initial profile, each compared in sup norm
/// against `v_ref` block-averaged onto the lattice. The run horizon is the
/// reference horizon. Outcomes are ordered by replica index and the whole
/// ensemble is a deterministic function of (spec, scaling, v_ref, seed,
/// options).
pub fn run_ensemble(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    v_ref: &LimitSolution,
    replicas: usize,
    seed: u64,
    options: &EnsembleOptions,
) -> Result<Vec<EnsembleOutcome>, LlnError> {
    let table = ReferenceTable::from_solution(v_ref, scaling.n())?;
    let horizon = table.horizon();
    let initial = PairField::new(
        project_pn_exact(&spec.initial_c, scaling.n()),
        project_pn_exact(&spec.initial_d, scaling.n()),
    );

    let results: Vec<Result<EnsembleOutcome, (usize, String)>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let stream = options.stream_base + r as u64;
            let opts = SimOptions { seed, stream, record_events: false, record_binary: false };
            let stop = StopRule {
                t_end: horizon,
                epsilon0: options.epsilon0,
                max_events: options.max_events,
            };
            let mut probe = SupErrorProbe::new(&table);
            let mut recorder = options
                .with_martingales
                .then(|| MartingaleRecorder::new(spec, scaling, horizon));
            let mut fan = FanOut { probe: &mut probe, recorder: recorder.as_mut() };

            let run = if options.epsilon0.is_some() {
                let reference = |t: f64| table.sample_field(t);
                truncated_simulate_observed(
                    spec, scaling, &initial, &stop, &[], &opts, &mut fan, &reference,
                )
            } else {
                simulate_observed(spec, scaling, &initial, &stop, &[], &opts, &mut fan)
            };
            match run {
                Ok(traj) => Ok(EnsembleOutcome {
                    replica: r,
                    stream,
                    sup_error: probe.max_error(),
                    tau: traj.tau,
                    martingales: recorder.map(|rec| rec.finish()),
                }),
                Err(e) => Err((r, e.to_string())),
            }
        })
        .collect();

    let mut outcomes = Vec::with_capacity(replicas);
    for res in results {
        match res {
            Ok(o) => outcomes.push(o),
            Err((replica, message)) => return Err(LlnError::ReplicaFailed { replica, message }),
        }
    }
    Ok(outcomes)
}

// ---- sweep plan and report ----

#[derive(Debug, Clone)]
pub struct SweepPlan {
    /// (lattice size, density) schedule.
    pub pairs: Vec<(usize, f64)>,
    pub replicas: usize,
    pub horizon: f64,
    pub seed: u64,
    /// Exceedance thresholds for the headline statistic.
    pub epsilons: Vec<f64>,
    /// Optional tube radius passed through to every run.
    pub epsilon0: Option<f64>,
    /// The deterministic reference for lattice size N is solved at
    /// `reference_multiple * N` sites and block-averaged back.
    pub reference_multiple: usize,
    /// Free-form provenance note carried into reports.
    pub note: Option<String>,
}

impl SweepPlan {
    /// The stock schedule: density four times the lattice size, doubling
    /// both three times.
    pub fn default_schedule(seed: u64) -> SweepPlan {
        SweepPlan {
            pairs: vec![(8, 32.0), (16, 64.0), (32, 128.0)],
            replicas: 20,
            horizon: 1.0,
            seed,
            epsilons: vec![0.05, 0.1, 0.2],
            epsilon0: None,
            reference_multiple: 8,
            note: Some("schedule rule: mu = 4N, doubling".to_string()),
        }
    }

    pub fn validate(&self) -> Result<(), LlnError> {
        if self.pairs.is_empty() {
            return Err(LlnError::BadPlan("empty schedule".into()));
        }
        if self.replicas == 0 {
            return Err(LlnError::BadPlan("zero replicas".into()));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(LlnError::BadPlan(format!("horizon {}", self.horizon)));
        }
        if self.reference_multiple == 0 {
            return Err(LlnError::BadPlan("zero reference multiple".into()));
        }
        let mut prev = f64::INFINITY;
        for &(n, mu) in &self.pairs {
            if n == 0 || !mu.is_finite() || mu <= 0.0 {
                return Err(LlnError::BadPlan(format!("bad pair ({n}, {mu})")));
            }
            let ratio = (n as f64).ln() / mu;
            if ratio >= prev {
                return Err(LlnError::BadPlan(
                    "log(N)/mu must decrease strictly along the schedule".into(),
                ));
            }
            prev = ratio;
        }
        for &e in &self.epsilons {
            if !e.is_finite() || e <= 0.0 {
                return Err(LlnError::BadPlan(format!("bad threshold {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReplicaRow {
    pub n: usize,
    pub mu: f64,
    pub replica: usize,
    pub stream: u64,
    pub sup_error: f64,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct PairSummary {
    pub n: usize,
    pub mu: f64,
    pub replicas: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    pub max: f64,
    /// (threshold, empirical exceedance fraction) per requested epsilon.
    pub exceedance: Vec<(f64, f64)>,
    /// Wall-clock seconds; informational only, excluded from the
    /// determinism contract.
    pub runtime_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub seed: u64,
    pub horizon: f64,
    pub epsilons: Vec<f64>,
    pub note: Option<String>,
    pub rows: Vec<ReplicaRow>,
    pub pairs: Vec<PairSummary>,
}

/// Linear-interpolation quantile of already-sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

impl ExperimentReport {
    /// One row per replica.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("n,mu,replica,seed,sup_error,tau\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.n, r.mu, r.replica, r.stream, r.sup_error, r.tau
            ));
        }
        out
    }

    fn pair_json(&self, p: &PairSummary, with_timing: bool) -> serde_json::Value {
        let mut doc = serde_json::json!({
            "n": p.n,
            "mu": p.mu,
            "replicas": p.replicas,
            "median": p.median,
            "q25": p.q25,
            "q75": p.q75,
            "mean": p.mean,
            "max": p.max,
            "exceedance": p
                .exceedance
                .iter()
                .map(|(e, f)| serde_json::json!({"epsilon": e, "fraction": f}))
                .collect::<Vec<_>>(),
        });
        if with_timing {
            doc["runtime_s"] = serde_json::json!(p.runtime_s);
        }
        doc
    }

    fn json_value(&self, with_timing: bool) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "horizon": self.horizon,
            "epsilons": self.epsilons,
            "note": self.note,
            "pairs": self.pairs.iter().map(|p| self.pair_json(p, with_timing)).collect::<Vec<_>>(),
        })
    }

    /// Full aggregate document, wall-clock timings included.
    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(&self.json_value(true)).expect("report serializes")
    }

    /// The bit-identical part: everything except timings.
    pub fn deterministic_json(&self) -> String {
        serde_json::to_string_pretty(&self.json_value(false)).expect("report serializes")
    }

    /// Tidy long-format table for external plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("n,mu,quantity,value\n");
        for p in &self.pairs {
            let mut push = |name: &str, v: f64| {
                out.push_str(&format!("{},{},{name},{v}\n", p.n, p.mu));
            };
            push("median", p.median);
            push("q25", p.q25);
            push("q75", p.q75);
            push("mean", p.mean);
            push("max", p.max);
            for (e, f) in &p.exceedance {
                push(&format!("exceed_{e}"), *f);
            }
        }
        out
    }
}

/// Run the full schedule: per pair, solve the refined deterministic
/// reference, run the ensemble against it, and aggregate. Streams are
/// partitioned by pair so every replica across the whole sweep is
/// independent, and the report is a deterministic function of
/// (spec, plan) apart from wall-clock timings.
pub fn lln_sweep(spec: &NetworkSpec, plan: &SweepPlan) -> Result<ExperimentReport, LlnError> {
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.pairs.len() * plan.replicas);
    let mut pairs = Vec::with_capacity(plan.pairs.len());

    for (k, &(n, mu)) in plan.pairs.iter().enumerate() {
        let started = std::time::Instant::now();
        let n_ref = n * plan.reference_multiple;
        let v0 = PairField::new(
            project_pn_exact(&spec.initial_c, n_ref),
            project_pn_exact(&spec.initial_d, n_ref),
        );
        // Seed step 1e-3: the stiff block is integrated exactly by the
        // semigroup factor, and step halving still certifies 1e-8.
        let v_ref = solve_discrete_limit(spec, n_ref, &v0, plan.horizon, Some(1e-3))?;

        let scaling = ScalingParams::new(n, mu)
            .map_err(|e| LlnError::BadPlan(e.to_string()))?;
        let options = EnsembleOptions {
            with_martingales: false,
            epsilon0: plan.epsilon0,
            stream_base: (k as u64) << 32,
            max_events: u64::MAX,
        };
        let outcomes = run_ensemble(spec, &scaling, &v_ref, plan.replicas, plan.seed, &options)?;

        let mut errors: Vec<f64> = outcomes.iter().map(|o| o.sup_error).collect();
        for o in &outcomes {
            rows.push(ReplicaRow {
                n,
                mu,
                replica: o.replica,
                stream: o.stream,
                sup_error: o.sup_error,
                tau: o.tau,
            });
        }
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let exceedance = plan
            .epsilons
            .iter()
            .map(|&e| {
                let frac = errors.iter().filter(|&&x| x > e).count() as f64
                    / errors.len() as f64;
                (e, frac)
            })
            .collect();
        pairs.push(PairSummary {
            n,
            mu,
            replicas: plan.replicas,
            median: quantile(&errors, 0.5),
            q25: quantile(&errors, 0.25),
            q75: quantile(&errors, 0.75),
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            max: errors.last().copied().unwrap_or(f64::NAN),
            exceedance,
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }

    Ok(ExperimentReport {
        seed: plan.seed,
        horizon: plan.horizon,
        epsilons: plan.epsilons.clone(),
        note: plan.note.clone(),
        rows,
        pairs,
    })
}

// ---- martingale diagnostics ----

#[derive(Debug, Clone)]
pub struct MartingaleLine {
    pub statistic: &'static str,
    pub site: usize,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub n: usize,
    pub mu: f64,
    pub replicas: usize,
    pub horizon: f64,
    pub seed: u64,
    pub lines: Vec<MartingaleLine>,
    pub max_abs_z: f64,
}

impl MartingaleReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("statistic,site,mean,se,z,replicas\n");
        for l in &self.lines {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.statistic, l.site, l.mean, l.se, l.z, self.replicas
            ));
        }
        out
    }

    pub fn json(&self) -> String {
        let doc = serde_json::json!({
            "n": self.n,
            "mu": self.mu,
            "replicas": self.replicas,
            "horizon": self.horizon,
            "seed": self.seed,
            "max_abs_z": self.max_abs_z,
            "statistics": self
                .lines
                .iter()
                .map(|l| serde_json::json!({
                    "statistic": l.statistic,
                    "site": l.site,
                    "mean": l.mean,
                    "se": l.se,
                    "z": l.z,
                }))
                .collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

/// Monte Carlo check that every compensated path statistic has zero mean:
/// per (statistic, site), the sample mean across replicas, its standard
/// error, and z = mean/se. Exact zero spreads report z = 0.
pub fn martingale_suite(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    replicas: usize,
    horizon: f64,
    seed: u64,
) -> Result<MartingaleReport, LlnError> {
    if replicas < 2 {
        return Err(LlnError::BadPlan("martingale suite needs at least 2 replicas".into()));
    }
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(LlnError::BadPlan(format!("horizon {horizon}")));
    }
    let initial = PairField::new(
        project_pn_exact(&spec.initial_c, scaling.n()),
        project_pn_exact(&spec.initial_d, scaling.n()),
    );

    let records: Vec<Result<MartingaleRecord, (usize, String)>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let opts = SimOptions {
                seed,
                stream: r as u64,
                record_events: false,
                record_binary: false,
            };
            let stop = StopRule::until(horizon);
            let mut recorder = MartingaleRecorder::new(spec, scaling, horizon);
            simulate_observed(spec, scaling, &initial, &stop, &[], &opts, &mut recorder)
                .map(|_| recorder.finish())
                .map_err(|e| (r, e.to_string()))
        })
        .collect();

    let mut stats: Vec<Vec<(&'static str, Vec<f64>)>> = Vec::with_capacity(replicas);
    for res in records {
        match res {
            Ok(rec) => stats.push(rec.statistics()),
            Err((replica, message)) => return Err(LlnError::ReplicaFailed { replica, message }),
        }
    }

    let families = stats[0].len();
    let n = scaling.n();
    let mut lines = Vec::with_capacity(families * n);
    let mut max_abs_z = 0.0f64;
    for f in 0..families {
        let name = stats[0][f].0;
        for site in 0..n {
            let values: Vec<f64> = stats.iter().map(|s| s[f].1[site]).collect();
            let mean = values.iter().sum::<f64>() / replicas as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (replicas - 1) as f64;
            let se = (var / replicas as f64).sqrt();
            let z = if se == 0.0 {
                if mean.abs() < 1e-14 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                mean / se
            };
            max_abs_z = max_abs_z.max(z.abs());
            lines.push(MartingaleLine { statistic: name, site, mean, se, z });
        }
    }

    Ok(MartingaleReport {
        n: scaling.n(),
        mu: scaling.mu(),
        replicas,
        horizon,
        seed,
        lines,
        max_abs_z,
    })
}
