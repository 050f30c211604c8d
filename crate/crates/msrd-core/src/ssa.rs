//! Exact event-driven simulation of the two-species jump process: a channel
//! rate table with tree-indexed sampling, the core jump loop, truncation
//! against a deterministic reference tube with forward-Euler continuation,
//! jump logging with quadratic-variation accumulators, and an optional
//! per-path martingale recorder.
//!
//! Channels are laid out site-major: site j owns `R + 2` consecutive
//! channels, one per reaction in network order, then diffusion to the left
//! neighbor, then diffusion to the right. Fast reaction channels run at
//! `mu * rate(u_j)`, slow at `rate(u_j)`, each diffusion direction at
//! `mu * N^2 * u_j^C`. On the single-site ring the diffusion jump is null
//! but its clock still ticks, so event counts stay faithful to the rate
//! formula at every N.

use crate::debit::{self, DriftAmp};
use crate::grid::{discrete_gradients, GridFunction, PairField};
use crate::model::{
    kernel_impl, kernel_weights, theta, KernelWeights, NetworkSpec, ReactionClass, ScalingParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid stop rule: {0}")]
    BadStop(String),
    #[error("state has {state} sites but scaling says {scaling}")]
    GridMismatch { state: usize, scaling: usize },
    #[error("sample times must be finite, sorted, and within [0, t_end]")]
    BadSampleTimes,
    #[error("initial state must be finite and non-negative")]
    BadInitialState,
    #[error("non-finite rate on channel {channel} (site {site}) at t = {t}")]
    NonFiniteRate { channel: usize, site: usize, t: f64 },
    #[error("positivity violated: u_{species}[{site}] = {value} at t = {t}")]
    Positivity { species: char, site: usize, value: f64, t: f64 },
    #[error("truncated run needs a tube radius epsilon0 in the stop rule")]
    MissingRadius,
    #[error("event log: {0}")]
    BadEventLog(String),
}

// ---- event table ----

/// Compensated (Kahan) sum; the rebuild path uses it so the reference total
/// is exact enough to bound the incremental drift.
fn kahan_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Channel rate table over a Fenwick tree: O(log n) rate updates and
/// cumulative-rate sampling, with a running total maintained incrementally
/// and re-synchronized by full rebuilds.
#[derive(Debug, Clone)]
pub struct EventTable {
    rates: Vec<f64>,
    tree: Vec<f64>,
    running_total: f64,
    top_bit: usize,
    last_rebuild_drift: f64,
}

impl EventTable {
    pub fn new(n_channels: usize) -> Self {
        assert!(n_channels > 0, "event table needs at least one channel");
        let mut top_bit = 1;
        while top_bit * 2 <= n_channels {
            top_bit *= 2;
        }
        EventTable {
            rates: vec![0.0; n_channels],
            tree: vec![0.0; n_channels + 1],
            running_total: 0.0,
            top_bit,
            last_rebuild_drift: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rate(&self, channel: usize) -> f64 {
        self.rates[channel]
    }

    /// Incrementally maintained total rate.
    pub fn total(&self) -> f64 {
        self.running_total
    }

    /// Freshly summed total, independent of the incremental bookkeeping.
    pub fn exact_total(&self) -> f64 {
        kahan_sum(&self.rates)
    }

    pub fn set_rate(&mut self, channel: usize, rate: f64) {
        debug_assert!(rate >= 0.0, "channel rates are non-negative");
        let delta = rate - self.rates[channel];
        if delta == 0.0 {
            return;
        }
        self.rates[channel] = rate;
        self.running_total += delta;
        let mut i = channel + 1;
        while i <= self.rates.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Recompute the tree and total from the stored rates; returns the
    /// relative drift the incremental total had accumulated.
    pub fn rebuild(&mut self) -> f64 {
        let n = self.rates.len();
        for v in self.tree.iter_mut() {
            *v = 0.0;
        }
        for i in 1..=n {
            self.tree[i] += self.rates[i - 1];
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                let child = self.tree[i];
                self.tree[parent] += child;
            }
        }
        let exact = kahan_sum(&self.rates);
        let drift = (self.running_total - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
        self.running_total = exact;
        self.last_rebuild_drift = drift;
        drift
    }

    pub fn last_rebuild_drift(&self) -> f64 {
        self.last_rebuild_drift
    }

    /// First channel whose cumulative rate exceeds `x`. Landing on a
    /// zero-rate channel (possible at float boundaries) walks to the nearest
    /// positive-rate channel.
    pub fn sample(&self, x: f64) -> usize {
        let n = self.rates.len();
        let mut pos = 0usize;
        let mut rem = x;
        let mut step = self.top_bit;
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                rem -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        let mut ch = pos.min(n - 1);
        if self.rates[ch] > 0.0 {
            return ch;
        }
        while ch + 1 < n {
            ch += 1;
            if self.rates[ch] > 0.0 {
                return ch;
            }
        }
        let mut back = pos.min(n - 1);
        while back > 0 {
            back -= 1;
            if self.rates[back] > 0.0 {
                return back;
            }
        }
        pos.min(n - 1)
    }
}

// ---- run records ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    Fast,
    Slow,
    Diffusion,
}

impl EventClass {
    pub fn code(self) -> u8 {
        match self {
            EventClass::Fast => 0,
            EventClass::Slow => 1,
            EventClass::Diffusion => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EventClass::Fast),
            1 => Some(EventClass::Slow),
            2 => Some(EventClass::Diffusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub fast: u64,
    pub slow: u64,
    pub diffusion: u64,
}

impl EventCounts {
    pub fn total(&self) -> u64 {
        self.fast + self.slow + self.diffusion
    }
}

/// One applied event with its sparse state increments.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub channel: u32,
    pub site: u32,
    pub class: EventClass,
    pub jump_c: Vec<(u32, f64)>,
    pub jump_d: Vec<(u32, f64)>,
}

/// Fixed-width identification of one event, as stored in the binary log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventStamp {
    pub time: f64,
    pub channel: u32,
    pub site: u32,
    pub class: EventClass,
}

/// Binary event-log record: little-endian `[time f64][channel u32][site u32]
/// [class u8][reserved 3B]`, 20 bytes per event.
pub const EVENT_RECORD_BYTES: usize = 20;

fn push_event_bytes(out: &mut Vec<u8>, time: f64, channel: u32, site: u32, class: EventClass) {
    out.extend_from_slice(&time.to_le_bytes());
    out.extend_from_slice(&channel.to_le_bytes());
    out.extend_from_slice(&site.to_le_bytes());
    out.push(class.code());
    out.extend_from_slice(&[0u8; 3]);
}

pub fn parse_event_log(bytes: &[u8]) -> Result<Vec<EventStamp>, SimError> {
    if bytes.len() % EVENT_RECORD_BYTES != 0 {
        return Err(SimError::BadEventLog(format!(
            "length {} is not a multiple of {EVENT_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / EVENT_RECORD_BYTES);
    for rec in bytes.chunks_exact(EVENT_RECORD_BYTES) {
        let time = f64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let channel = u32::from_le_bytes(rec[8..12].try_into().expect("4 bytes"));
        let site = u32::from_le_bytes(rec[12..16].try_into().expect("4 bytes"));
        let class = EventClass::from_code(rec[16])
            .ok_or_else(|| SimError::BadEventLog(format!("unknown class code {}", rec[16])))?;
        out.push(EventStamp { time, channel, site, class });
    }
    Ok(out)
}

/// Always-on quadratic-variation accumulators over the applied jumps, the
/// observed jump-size maxima against their a-priori bounds, and (when
/// enabled) the full per-event record.
#[derive(Debug, Clone)]
pub struct JumpLog {
    /// Per site: sum over events of (delta u_j^C)^2.
    pub sum_sq_c: Vec<f64>,
    /// Per site: sum over events of (delta u_j^C)(delta u_{j+1}^C).
    pub sum_cross_right: Vec<f64>,
    /// Per site: sum over events of (delta u_j^C)(delta u_{j-1}^C).
    pub sum_cross_left: Vec<f64>,
    /// Per site: sum over events of (delta u_j^D)^2.
    pub sum_sq_d: Vec<f64>,
    /// Largest observed per-event sup norm of the C increment.
    pub max_jump_c: f64,
    /// Largest observed per-event sup norm of the D increment.
    pub max_jump_d: f64,
    /// A-priori per-event bound on the C increment: (1 v gamma_bar_C)/mu.
    pub bound_c: f64,
    /// A-priori per-event bound on the D increment: gamma_bar_D a(0)/N.
    pub bound_d: f64,
    /// Full event record, kept only when requested.
    pub events: Option<Vec<EventRecord>>,
}

impl JumpLog {
    fn new(n: usize, bound_c: f64, bound_d: f64, keep_events: bool) -> Self {
        JumpLog {
            sum_sq_c: vec![0.0; n],
            sum_cross_right: vec![0.0; n],
            sum_cross_left: vec![0.0; n],
            sum_sq_d: vec![0.0; n],
            max_jump_c: 0.0,
            max_jump_d: 0.0,
            bound_c,
            bound_d,
            events: if keep_events { Some(Vec::new()) } else { None },
        }
    }

    pub fn within_bounds(&self) -> bool {
        let slack = 1.0 + 1e-12;
        self.max_jump_c <= self.bound_c * slack && self.max_jump_d <= self.bound_d * slack
    }
}

/// Horizon, optional tube radius, and event cap for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopRule {
    pub t_end: f64,
    /// Tube radius for truncated runs; ignored by plain `simulate`.
    pub epsilon0: Option<f64>,
    pub max_events: u64,
}

impl StopRule {
    pub fn until(t_end: f64) -> Self {
        StopRule { t_end, epsilon0: None, max_events: u64::MAX }
    }

    pub fn with_radius(t_end: f64, epsilon0: f64) -> Self {
        StopRule { t_end, epsilon0: Some(epsilon0), max_events: u64::MAX }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !self.t_end.is_finite() || self.t_end < 0.0 {
            return Err(SimError::BadStop(format!("t_end = {}", self.t_end)));
        }
        if let Some(e) = self.epsilon0 {
            if !e.is_finite() || e < 0.0 {
                return Err(SimError::BadStop(format!("epsilon0 = {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub seed: u64,
    pub stream: u64,
    /// Keep the full in-memory event record.
    pub record_events: bool,
    /// Keep the fixed-width binary event log.
    pub record_binary: bool,
}

/// One completed run: snapshots at the reached sample times, the final
/// state, event counts, the jump log, and whatever optional records were
/// requested. `tau` is +infinity unless a truncated run left the tube.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub sample_times: Vec<f64>,
    pub snapshots: Vec<PairField>,
    pub final_state: PairField,
    pub final_time: f64,
    pub seed: u64,
    pub stream: u64,
    pub counts: EventCounts,
    pub tau: f64,
    pub capped: bool,
    pub max_total_drift: f64,
    pub log: JumpLog,
    pub martingales: Option<MartingaleRecord>,
    pub event_bytes: Option<Vec<u8>>,
}

impl Trajectory {
    /// Long-format CSV of the snapshots.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,site,u_C,u_D\n");
        for (t, snap) in self.sample_times.iter().zip(&self.snapshots) {
            for j in 0..snap.n() {
                out.push_str(&format!(
                    "{t},{j},{},{}\n",
                    snap.u_c.values()[j],
                    snap.u_d.values()[j]
                ));
            }
        }
        out
    }

    /// Run summary as a JSON document: seed, counts, truncation time, jump
    /// bounds, and the quadratic-variation accumulators.
    pub fn summary_json(&self) -> String {
        let tau = if self.tau.is_finite() { Some(self.tau) } else { None };
        let doc = serde_json::json!({
            "seed": self.seed,
            "stream": self.stream,
            "final_time": self.final_time,
            "events": self.counts,
            "tau": tau,
            "capped": self.capped,
            "jump_bounds": {
                "bound_c": self.log.bound_c,
                "bound_d": self.log.bound_d,
                "max_c": self.log.max_jump_c,
                "max_d": self.log.max_jump_d,
            },
            "accumulators": {
                "sum_sq_c": self.log.sum_sq_c,
                "sum_cross_right": self.log.sum_cross_right,
                "sum_cross_left": self.log.sum_cross_left,
                "sum_sq_d": self.log.sum_sq_d,
            },
        });
        serde_json::to_string_pretty(&doc).expect("summary serializes")
    }
}

// ---- path observation ----

/// Sparse view of one applied event, borrowed from the engine's scratch.
pub struct JumpView<'a> {
    pub class: EventClass,
    pub channel: usize,
    pub site: usize,
    pub delta_c: &'a [(usize, f64)],
    pub delta_d: &'a [(usize, f64)],
}

/// Hook into the piecewise-constant path: `segment` covers every maximal
/// interval on which the state is constant (consecutive calls tile
/// [0, t_end)), and `event` fires after each applied jump with the post-jump
/// state. Truncated runs stop observing at the truncation time.
pub trait PathObserver {
    fn segment(&mut self, t0: f64, t1: f64, uc: &[f64], ud: &[f64]);
    fn event(&mut self, t: f64, uc: &[f64], ud: &[f64], jump: &JumpView<'_>);
}

// ---- stepping state ----

const REBUILD_INTERVAL: u64 = 1 << 20;
/// Snap tolerance for float dust when a decrement lands exactly on zero.
const NEGATIVE_DUST: f64 = 1e-12;

/// The outcome of one applied event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub time: f64,
    pub wait: f64,
    pub channel: usize,
    pub site: usize,
    pub class: EventClass,
}

/// Live simulation state: fields, clock, channel rates, RNG, and logs. The
/// run loops (`simulate`, `truncated_simulate`) drive it; tests can step it
/// one event at a time.
pub struct SimState<'a> {
    spec: &'a NetworkSpec,
    scaling: ScalingParams,
    weights: KernelWeights,
    n: usize,
    n_reactions: usize,
    mu: f64,
    diff_rate_factor: f64,
    uc: Vec<f64>,
    ud: Vec<f64>,
    t: f64,
    table: EventTable,
    rng: ChaCha8Rng,
    counts: EventCounts,
    events_since_rebuild: u64,
    max_total_drift: f64,
    log: JumpLog,
    event_bytes: Option<Vec<u8>>,
    scratch_c: Vec<(usize, f64)>,
    scratch_d: Vec<(usize, f64)>,
    dense_c: Vec<f64>,
    last_event: Option<(usize, EventClass, usize)>,
}

impl<'a> SimState<'a> {
    pub fn new(
        spec: &'a NetworkSpec,
        scaling: ScalingParams,
        initial: &PairField,
        opts: &SimOptions,
    ) -> Result<Self, SimError> {
        let n = scaling.n();
        if initial.n() != n {
            return Err(SimError::GridMismatch { state: initial.n(), scaling: n });
        }
        let finite_nonneg = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !finite_nonneg(initial.u_c.values()) || !finite_nonneg(initial.u_d.values()) {
            return Err(SimError::BadInitialState);
        }
        let mu = scaling.mu();
        let peak = kernel_impl(&spec.kernel).peak();
        let bound_c = spec.gamma_bar_c().max(1.0) / mu;
        let bound_d = spec.gamma_bar_d() * peak / n as f64;
        let n_reactions = spec.reactions.len();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(opts.stream);
        let mut state = SimState {
            spec,
            scaling,
            weights: kernel_weights(&spec.kernel, &scaling),
            n,
            n_reactions,
            mu,
            diff_rate_factor: mu * (n * n) as f64,
            uc: initial.u_c.values().to_vec(),
            ud: initial.u_d.values().to_vec(),
            t: 0.0,
            table: EventTable::new(n * (n_reactions + 2)),
            rng,
            counts: EventCounts::default(),
            events_since_rebuild: 0,
            max_total_drift: 0.0,
            log: JumpLog::new(n, bound_c, bound_d, opts.record_events),
            event_bytes: if opts.record_binary { Some(Vec::new()) } else { None },
            scratch_c: Vec::with_capacity(n),
            scratch_d: Vec::with_capacity(n),
            dense_c: vec![0.0; n],
            last_event: None,
        };
        for j in 0..n {
            state.refresh_site(j)?;
        }
        Ok(state)
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn u_c(&self) -> &[f64] {
        &self.uc
    }

    pub fn u_d(&self) -> &[f64] {
        &self.ud
    }

    pub fn field(&self) -> PairField {
        PairField::new(
            GridFunction::new(self.uc.clone()),
            GridFunction::new(self.ud.clone()),
        )
    }

    pub fn counts(&self) -> EventCounts {
        self.counts
    }

    pub fn scaling(&self) -> &ScalingParams {
        &self.scaling
    }

    pub fn table(&self) -> &EventTable {
        &self.table
    }

    pub fn log(&self) -> &JumpLog {
        &self.log
    }

    pub fn total_rate(&self) -> f64 {
        self.table.total()
    }

    fn channel_of(&self, site: usize, slot: usize) -> usize {
        site * (self.n_reactions + 2) + slot
    }

    /// Recompute every channel owned by one site from the current state.
    fn refresh_site(&mut self, j: usize) -> Result<(), SimError> {
        let (uc, ud) = (self.uc[j], self.ud[j]);
        for (k, r) in self.spec.reactions.iter().enumerate() {
            let bare = r.rate.eval_unchecked(uc, ud);
            let rate = if r.class.is_fast() { self.mu * bare } else { bare };
            let ch = self.channel_of(j, k);
            if !rate.is_finite() {
                return Err(SimError::NonFiniteRate { channel: ch, site: j, t: self.t });
            }
            self.table.set_rate(ch, rate.max(0.0));
        }
        let diff = self.diff_rate_factor * uc;
        if !diff.is_finite() {
            return Err(SimError::NonFiniteRate {
                channel: self.channel_of(j, self.n_reactions),
                site: j,
                t: self.t,
            });
        }
        self.table.set_rate(self.channel_of(j, self.n_reactions), diff);
        self.table.set_rate(self.channel_of(j, self.n_reactions + 1), diff);
        Ok(())
    }

    fn refresh_all(&mut self) -> Result<(), SimError> {
        for j in 0..self.n {
            self.refresh_site(j)?;
        }
        Ok(())
    }

    fn bump_c(&mut self, i: usize, delta: f64) -> Result<(), SimError> {
        let v = self.uc[i] + delta;
        self.uc[i] = if v >= 0.0 {
            v
        } else if v > -NEGATIVE_DUST {
            0.0
        } else {
            return Err(SimError::Positivity { species: 'C', site: i, value: v, t: self.t });
        };
        Ok(())
    }

    fn bump_d(&mut self, i: usize, delta: f64) -> Result<(), SimError> {
        let v = self.ud[i] + delta;
        self.ud[i] = if v >= 0.0 {
            v
        } else if v > -NEGATIVE_DUST {
            0.0
        } else {
            return Err(SimError::Positivity { species: 'D', site: i, value: v, t: self.t });
        };
        Ok(())
    }

    /// Draw the waiting time and the channel coordinate for the next event.
    /// Always consumes exactly two uniforms, so replay stays aligned.
    fn draw(&mut self) -> (f64, f64) {
        let u1: f64 = self.rng.gen();
        let u2: f64 = self.rng.gen();
        let wait = -(1.0 - u1).ln() / self.table.total();
        (wait, u2)
    }

    /// Sample a channel at cumulative coordinate `x`, apply its jump at time
    /// `te`, and update rates, logs, and counters.
    fn fire(&mut self, x: f64, te: f64) -> Result<StepEvent, SimError> {
        let wait = te - self.t;
        self.t = te;
        let ch = self.table.sample(x);
        let site = ch / (self.n_reactions + 2);
        let slot = ch % (self.n_reactions + 2);
        self.scratch_c.clear();
        self.scratch_d.clear();

        let class = if slot < self.n_reactions {
            let r = &self.spec.reactions[slot];
            match r.class {
                ReactionClass::FastC | ReactionClass::FastMixed => {
                    let dc = r.gamma_c as f64 / self.mu;
                    if dc != 0.0 {
                        self.bump_c(site, dc)?;
                        self.scratch_c.push((site, dc));
                    }
                    self.refresh_site(site)?;
                    self.counts.fast += 1;
                    EventClass::Fast
                }
                ReactionClass::SlowMixed | ReactionClass::SlowD => {
                    let gc = r.gamma_c as f64;
                    let gd = r.gamma_d as f64;
                    for i in 0..self.n {
                        let w = self.weights.at(i, site);
                        let gate = theta(self.uc[i] + gc / self.mu * w)
                            * theta(self.ud[i] + gd * w);
                        if gate == 0.0 {
                            continue;
                        }
                        if gc != 0.0 {
                            let dc = gc / self.mu * w * gate;
                            self.bump_c(i, dc)?;
                            self.scratch_c.push((i, dc));
                        }
                        if gd != 0.0 {
                            let dd = gd * w * gate;
                            self.bump_d(i, dd)?;
                            self.scratch_d.push((i, dd));
                        }
                    }
                    self.refresh_all()?;
                    self.counts.slow += 1;
                    EventClass::Slow
                }
            }
        } else {
            // diffusion: slot n_reactions hops left, slot n_reactions+1 right
            if self.n > 1 {
                let to = if slot == self.n_reactions {
                    (site + self.n - 1) % self.n
                } else {
                    (site + 1) % self.n
                };
                let dc = 1.0 / self.mu;
                self.bump_c(site, -dc)?;
                self.bump_c(to, dc)?;
                self.scratch_c.push((site, -dc));
                self.scratch_c.push((to, dc));
                self.refresh_site(site)?;
                self.refresh_site(to)?;
            }
            self.counts.diffusion += 1;
            EventClass::Diffusion
        };

        self.log_event(te, ch, site, class);

        self.events_since_rebuild += 1;
        if self.events_since_rebuild >= REBUILD_INTERVAL {
            let drift = self.table.rebuild();
            self.max_total_drift = self.max_total_drift.max(drift);
            self.events_since_rebuild = 0;
        }
        self.last_event = Some((ch, class, site));
        Ok(StepEvent { time: te, wait, channel: ch, site, class })
    }

    fn log_event(&mut self, te: f64, ch: usize, site: usize, class: EventClass) {
        let n = self.n;
        let mut max_c = 0.0f64;
        for &(i, d) in &self.scratch_c {
            self.dense_c[i] = d;
            max_c = max_c.max(d.abs());
        }
        for &(i, d) in &self.scratch_c {
            self.log.sum_sq_c[i] += d * d;
            self.log.sum_cross_right[i] += d * self.dense_c[(i + 1) % n];
            self.log.sum_cross_left[i] += d * self.dense_c[(i + n - 1) % n];
        }
        for &(i, _) in &self.scratch_c {
            self.dense_c[i] = 0.0;
        }
        let mut max_d = 0.0f64;
        for &(i, d) in &self.scratch_d {
            self.log.sum_sq_d[i] += d * d;
            max_d = max_d.max(d.abs());
        }
        self.log.max_jump_c = self.log.max_jump_c.max(max_c);
        self.log.max_jump_d = self.log.max_jump_d.max(max_d);

        if let Some(records) = self.log.events.as_mut() {
            records.push(EventRecord {
                time: te,
                channel: ch as u32,
                site: site as u32,
                class,
                jump_c: self.scratch_c.iter().map(|&(i, d)| (i as u32, d)).collect(),
                jump_d: self.scratch_d.iter().map(|&(i, d)| (i as u32, d)).collect(),
            });
        }
        if let Some(bytes) = self.event_bytes.as_mut() {
            push_event_bytes(bytes, te, ch as u32, site as u32, class);
        }
    }

    /// Advance by one event: waiting time from the total rate, channel by
    /// cumulative-rate inversion. Returns None when the total rate is zero
    /// (frozen state).
    pub fn step(&mut self) -> Result<Option<StepEvent>, SimError> {
        let total = self.table.total();
        if total <= 0.0 {
            return Ok(None);
        }
        let (wait, u2) = self.draw();
        let te = self.t + wait;
        let ev = self.fire(u2 * total, te)?;
        Ok(Some(ev))
    }

    fn jump_view(&self) -> JumpView<'_> {
        let (channel, class, site) = self.last_event.expect("view only after fire");
        JumpView {
            class,
            channel,
            site,
            delta_c: &self.scratch_c,
            delta_d: &self.scratch_d,
        }
    }

    fn sup_distance(&self, vc: &[f64], vd: &[f64]) -> f64 {
        let dc = self
            .uc
            .iter()
            .zip(vc)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let dd = self
            .ud
            .iter()
            .zip(vd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        dc + dd
    }
}

// ---- free-standing rate helpers ----

/// Total jump rate of the network at one state, freshly assembled.
pub fn total_rate(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    u: &PairField,
) -> Result<f64, SimError> {
    let state = SimState::new(spec, *scaling, u, &SimOptions::default())?;
    Ok(state.table().exact_total())
}

/// Dense per-site increments a slow reaction fired at `source` applies:
/// kernel-weighted, cutoff-gated jumps on C (scaled by 1/mu) and D.
pub fn slow_jump_vectors(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    u: &PairField,
    reaction: usize,
    source: usize,
) -> (Vec<f64>, Vec<f64>) {
    let r = &spec.reactions[reaction];
    assert!(r.class.is_slow(), "jump vectors are defined for slow reactions");
    let n = scaling.n();
    assert_eq!(u.n(), n);
    let weights = kernel_weights(&spec.kernel, scaling);
    let mu = scaling.mu();
    let gc = r.gamma_c as f64;
    let gd = r.gamma_d as f64;
    let mut jump_c = vec![0.0; n];
    let mut jump_d = vec![0.0; n];
    for i in 0..n {
        let w = weights.at(i, source);
        let gate = theta(u.u_c.values()[i] + gc / mu * w) * theta(u.u_d.values()[i] + gd * w);
        jump_c[i] = gc / mu * w * gate;
        jump_d[i] = gd * w * gate;
    }
    (jump_c, jump_d)
}

// ---- run loops ----

fn check_sample_times(times: &[f64], t_end: f64) -> Result<(), SimError> {
    let mut prev = 0.0f64;
    for &t in times {
        if !t.is_finite() || t < prev || t > t_end {
            return Err(SimError::BadSampleTimes);
        }
        prev = t;
    }
    Ok(())
}

struct RunAccumulator {
    times: Vec<f64>,
    snapshots: Vec<PairField>,
    cursor: usize,
}

impl RunAccumulator {
    fn new(times: &[f64]) -> Self {
        RunAccumulator { times: times.to_vec(), snapshots: Vec::new(), cursor: 0 }
    }

    /// Snapshot every requested time strictly before `upto`; the state is
    /// constant there.
    fn flush_before(&mut self, upto: f64, state: &SimState<'_>) {
        while self.cursor < self.times.len() && self.times[self.cursor] < upto {
            self.snapshots.push(state.field());
            self.cursor += 1;
        }
    }

    /// Snapshot every remaining requested time (state frozen from here on).
    fn flush_all(&mut self, state: &SimState<'_>) {
        while self.cursor < self.times.len() {
            self.snapshots.push(state.field());
            self.cursor += 1;
        }
    }
}

fn run_core(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
    mut observer: Option<&mut dyn PathObserver>,
    reference: Option<&dyn Fn(f64) -> PairField>,
) -> Result<Trajectory, SimError> {
    stop.validate()?;
    check_sample_times(sample_times, stop.t_end)?;
    let epsilon0 = match (reference.is_some(), stop.epsilon0) {
        (true, None) => return Err(SimError::MissingRadius),
        (true, Some(e)) => e,
        (false, _) => f64::INFINITY,
    };

    let mut state = SimState::new(spec, *scaling, initial, opts)?;
    let mut acc = RunAccumulator::new(sample_times);
    let mut tau = f64::INFINITY;
    let mut capped = false;

    if let Some(refpath) = reference {
        let v0 = refpath(0.0);
        if state.sup_distance(v0.u_c.values(), v0.u_d.values()) > epsilon0 {
            tau = 0.0;
        }
    }

    while tau.is_infinite() {
        if state.counts.total() >= stop.max_events {
            capped = true;
            break;
        }
        let total = state.table.total();
        if total <= 0.0 {
            // frozen state: nothing will ever fire again
            if let Some(obs) = observer.as_deref_mut() {
                obs.segment(state.t, stop.t_end, &state.uc, &state.ud);
            }
            state.t = stop.t_end;
            acc.flush_all(&state);
            break;
        }
        let (wait, u2) = state.draw();
        let te = state.t + wait;
        if te > stop.t_end {
            if let Some(obs) = observer.as_deref_mut() {
                obs.segment(state.t, stop.t_end, &state.uc, &state.ud);
            }
            state.t = stop.t_end;
            acc.flush_all(&state);
            break;
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs.segment(state.t, te, &state.uc, &state.ud);
        }
        acc.flush_before(te, &state);
        state.fire(u2 * total, te)?;
        if let Some(obs) = observer.as_deref_mut() {
            let view = state.jump_view();
            obs.event(te, &state.uc, &state.ud, &view);
        }
        if let Some(refpath) = reference {
            let v = refpath(te);
            if state.sup_distance(v.u_c.values(), v.u_d.values()) > epsilon0 {
                tau = te;
            }
        }
    }

    if tau.is_finite() {
        // leave the tube: continue deterministically to the horizon
        euler_continuation(spec, scaling, &mut state, stop.t_end, &mut acc)?;
    }

    let trimmed_times = acc.times[..acc.cursor].to_vec();
    Ok(Trajectory {
        sample_times: trimmed_times,
        snapshots: acc.snapshots,
        final_state: state.field(),
        final_time: state.t,
        seed: opts.seed,
        stream: opts.stream,
        counts: state.counts,
        tau,
        capped,
        max_total_drift: state.max_total_drift,
        log: state.log,
        martingales: None,
        event_bytes: state.event_bytes,
    })
}

/// After truncation the path follows the discrete reaction-diffusion flow
/// du_C = lap u_C + F(u), du_D = GN(u) by explicit Euler steps no longer
/// than min(1/(4N^2), 1e-3), landing exactly on sample times.
fn euler_continuation(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    state: &mut SimState<'_>,
    t_end: f64,
    acc: &mut RunAccumulator,
) -> Result<(), SimError> {
    let n = scaling.n();
    let dt_max = (1.0 / (4.0 * (n * n) as f64)).min(1e-3);
    while state.t < t_end {
        acc.flush_before(state.t.next_up(), state);
        let next_sample = acc
            .times
            .get(acc.cursor)
            .copied()
            .filter(|&s| s > state.t && s < t_end)
            .unwrap_or(t_end);
        let dt = dt_max.min(next_sample - state.t);
        let u = state.field();
        let f = debit::debit_f(spec, &u);
        let gn = debit::debit_gn(spec, scaling, &u);
        let lap = crate::grid::discrete_laplacian(&u.u_c);
        for j in 0..n {
            state.uc[j] += dt * (lap.values()[j] + f.values()[j]);
            state.ud[j] += dt * gn.values()[j];
            if state.uc[j] < 0.0 || state.ud[j] < 0.0 {
                // the flow is positivity-preserving up to step error; snap dust
                if state.uc[j] < -1e-9 || state.ud[j] < -1e-9 {
                    return Err(SimError::Positivity {
                        species: if state.uc[j] < 0.0 { 'C' } else { 'D' },
                        site: j,
                        value: state.uc[j].min(state.ud[j]),
                        t: state.t,
                    });
                }
                state.uc[j] = state.uc[j].max(0.0);
                state.ud[j] = state.ud[j].max(0.0);
            }
        }
        state.t += dt;
        if (state.t - next_sample).abs() < 1e-15 {
            state.t = next_sample;
        }
    }
    state.t = t_end;
    acc.flush_all(state);
    state.refresh_all()?;
    Ok(())
}

/// Run the jump process to the stop rule, snapshotting at the sample times.
/// Deterministic: identical inputs give a bit-identical trajectory.
pub fn simulate(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    run_core(spec, scaling, initial, stop, sample_times, opts, None, None)
}

/// `simulate` with a path observer attached.
pub fn simulate_observed(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
    observer: &mut dyn PathObserver,
) -> Result<Trajectory, SimError> {
    run_core(
        spec,
        scaling,
        initial,
        stop,
        sample_times,
        opts,
        Some(observer),
        None,
    )
}

/// Run the jump process until it leaves the epsilon0-tube around the
/// reference path (checked at event times), then continue deterministically
/// to the horizon. `tau` records the exit time, +infinity if the tube holds.
pub fn truncated_simulate(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
    reference: &dyn Fn(f64) -> PairField,
) -> Result<Trajectory, SimError> {
    run_core(
        spec,
        scaling,
        initial,
        stop,
        sample_times,
        opts,
        None,
        Some(reference),
    )
}

/// `truncated_simulate` with a path observer attached. The observer sees
/// the jump phase only; the deterministic continuation after the exit time
/// is recorded through snapshots alone.
pub fn truncated_simulate_observed(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
    observer: &mut dyn PathObserver,
    reference: &dyn Fn(f64) -> PairField,
) -> Result<Trajectory, SimError> {
    run_core(
        spec,
        scaling,
        initial,
        stop,
        sample_times,
        opts,
        Some(observer),
        Some(reference),
    )
}

/// `simulate` with the martingale recorder attached; the record lands in
/// the trajectory.
pub fn simulate_with_martingales(
    spec: &NetworkSpec,
    scaling: &ScalingParams,
    initial: &PairField,
    stop: &StopRule,
    sample_times: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let mut recorder = MartingaleRecorder::new(spec, scaling, stop.t_end);
    let mut traj = simulate_observed(spec, scaling, initial, stop, sample_times, opts, &mut recorder)?;
    traj.martingales = Some(recorder.finish());
    Ok(traj)
}

// ---- martingale recorder ----

/// Terminal values of the compensated path statistics at the horizon. Each
/// identity splits into its jump-sum part and its compensator integral; the
/// compensated value (their difference, or sum where the statement adds the
/// integral) has zero mean over independent runs.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleRecord {
    pub horizon: f64,
    /// Compensated terminal state deviation on C: u_C(T) - u_C(0) - int Psi_C.
    pub z_c: Vec<f64>,
    /// Same on D.
    pub z_d: Vec<f64>,
    /// Sum over events of squared C increments, per site.
    pub sum_sq_c: Vec<f64>,
    /// (1/mu) int (amp_lap + amp_f_sq + mu amp_f1n_sq) ds, per site.
    pub int_sq_c: Vec<f64>,
    /// Sum over events of delta_j delta_{j+1} on C.
    pub sum_cross_right: Vec<f64>,
    /// (1/mu) int N^2 (u_j + u_{j+1}) ds.
    pub int_cross_right: Vec<f64>,
    pub sum_cross_left: Vec<f64>,
    pub int_cross_left: Vec<f64>,
    /// Sum over events of squared D increments, per site.
    pub sum_sq_d: Vec<f64>,
    /// int amp_gn_sq ds, per site.
    pub int_sq_d: Vec<f64>,
    /// Squared increments of the projected C deviation <Z_C, phi_j> with
    /// phi_j = N * indicator(j), computed through the projection machinery.
    pub proj_sq_c: Vec<f64>,
    /// (1/(N mu)) int [<u_C, (grad+ phi)^2 + (grad- phi)^2> +
    /// <amp_f_sq + mu amp_f1n_sq, phi^2>] ds.
    pub int_proj_c: Vec<f64>,
    /// Squared increments of the projected D deviation.
    pub proj_sq_d: Vec<f64>,
    /// (1/N) int <amp_gn_sq, phi^2> ds.
    pub int_proj_d: Vec<f64>,
    /// Squared increments of the heat-filtered C deviation
    /// m_j(t) = <int_0^t T(horizon - s) dZ_C(s), phi_j>.
    pub heat_sq: Vec<f64>,
    /// Its quadratic-variation compensator integral.
    pub heat_int: Vec<f64>,
    /// Terminal value of the heat-filtered deviation itself.
    pub heat_value: Vec<f64>,
}

impl MartingaleRecord {
    /// The nine compensated families as (name, per-site values).
    pub fn statistics(&self) -> Vec<(&'static str, Vec<f64>)> {
        let minus = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        let plus = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };
        vec![
            ("z_c", self.z_c.clone()),
            ("z_d", self.z_d.clone()),
            ("qv_c", minus(&self.sum_sq_c, &self.int_sq_c)),
            ("cross_right", plus(&self.sum_cross_right, &self.int_cross_right)),
            ("cross_left", plus(&self.sum_cross_left, &self.int_cross_left)),
            ("qv_d", minus(&self.sum_sq_d, &self.int_sq_d)),
            ("proj_qv_c", minus(&self.proj_sq_c, &self.int_proj_c)),
            ("proj_qv_d", minus(&self.proj_sq_d, &self.int_proj_d)),
            ("heat_qv", minus(&self.heat_sq, &self.heat_int)),
            ("heat_value", self.heat_value.clone()),
        ]
    }
}

/// One distinct spatial frequency of the ring Laplacian with its kernel
/// column: values c(d), forward-difference column N(c(d+1) - c(d)), and
/// backward column.
struct HeatMode {
    beta: f64,
    c: Vec<f64>,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
}

/// Precomputed product tables for one unordered pair of frequencies: the
/// time integral of exp(-(beta_a + beta_b)(horizon - s)) multiplies these.
struct HeatPair {
    beta_sum: f64,
    mult: f64,
    cc: Vec<f64>,
    grad: Vec<f64>,
}

/// Path observer accumulating the compensated statistics. The heat-filtered
/// family needs the evolution weight T(horizon - s), which is polynomial in
/// the per-frequency decay factors, so each constant-state segment
/// contributes a closed-form time integral per frequency pair.
pub struct MartingaleRecorder<'a> {
    spec: &'a NetworkSpec,
    scaling: ScalingParams,
    weights: KernelWeights,
    n: usize,
    mu: f64,
    horizon: f64,
    amp: DriftAmp,
    // initial and last-seen state
    u0_c: Vec<f64>,
    u0_d: Vec<f64>,
    last_c: Vec<f64>,
    last_d: Vec<f64>,
    // running compensator integrals
    int_psi_c: Vec<f64>,
    int_psi_d: Vec<f64>,
    int_sq_c: Vec<f64>,
    int_cross_right: Vec<f64>,
    int_cross_left: Vec<f64>,
    int_sq_d: Vec<f64>,
    int_proj_c: Vec<f64>,
    int_proj_d: Vec<f64>,
    heat_int: Vec<f64>,
    heat_drift: Vec<f64>,
    // running jump sums
    sum_sq_c: Vec<f64>,
    sum_cross_right: Vec<f64>,
    sum_cross_left: Vec<f64>,
    sum_sq_d: Vec<f64>,
    proj_sq_c: Vec<f64>,
    proj_sq_d: Vec<f64>,
    heat_sq: Vec<f64>,
    heat_jumps: Vec<f64>,
    // projection machinery: phi_j = N * indicator(j)
    phi: Vec<Vec<f64>>,
    phi_sq: Vec<Vec<f64>>,
    grad_sq: Vec<Vec<f64>>,
    // heat machinery
    modes: Vec<HeatMode>,
    pairs: Vec<HeatPair>,
    kappa: Vec<f64>,
    dense: Vec<f64>,
}

fn inner2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n
}

impl<'a> MartingaleRecorder<'a> {
    pub fn new(spec: &'a NetworkSpec, scaling: &ScalingParams, horizon: f64) -> Self {
        let n = scaling.n();
        let nf = n as f64;

        let mut phi = Vec::with_capacity(n);
        let mut phi_sq = Vec::with_capacity(n);
        let mut grad_sq = Vec::with_capacity(n);
        for j in 0..n {
            let mut p = vec![0.0; n];
            p[j] = nf;
            let gf = GridFunction::new(p.clone());
            let (fwd, bwd) = discrete_gradients(&gf);
            let combined: Vec<f64> = fwd
                .values()
                .iter()
                .zip(bwd.values())
                .map(|(a, b)| a * a + b * b)
                .collect();
            phi_sq.push(p.iter().map(|v| v * v).collect());
            grad_sq.push(combined);
            phi.push(p);
        }

        // distinct ring frequencies: 0, the even m below N, and N when even
        let mut freqs = vec![0usize];
        let mut m = 2;
        while m < n {
            freqs.push(m);
            m += 2;
        }
        if n % 2 == 0 && n >= 2 {
            freqs.push(n);
        }
        let modes: Vec<HeatMode> = freqs
            .iter()
            .map(|&m| {
                let beta = 2.0 * nf * nf * (1.0 - (std::f64::consts::PI * m as f64 / nf).cos());
                let c: Vec<f64> = (0..n)
                    .map(|d| {
                        if m == 0 {
                            1.0
                        } else if m == n {
                            if d % 2 == 0 {
                                1.0
                            } else {
                                -1.0
                            }
                        } else {
                            2.0 * (std::f64::consts::PI * (m * d) as f64 / nf).cos()
                        }
                    })
                    .collect();
                let fwd: Vec<f64> = (0..n).map(|d| nf * (c[(d + 1) % n] - c[d])).collect();
                let bwd: Vec<f64> = (0..n).map(|d| nf * (c[d] - c[(d + n - 1) % n])).collect();
                HeatMode { beta, c, fwd, bwd }
            })
            .collect();
        let mut pairs = Vec::new();
        for a in 0..modes.len() {
            for b in a..modes.len() {
                let cc = (0..n).map(|d| modes[a].c[d] * modes[b].c[d]).collect();
                let grad = (0..n)
                    .map(|d| modes[a].fwd[d] * modes[b].fwd[d] + modes[a].bwd[d] * modes[b].bwd[d])
                    .collect();
                pairs.push(HeatPair {
                    beta_sum: modes[a].beta + modes[b].beta,
                    mult: if a == b { 1.0 } else { 2.0 },
                    cc,
                    grad,
                });
            }
        }

        MartingaleRecorder {
            spec,
            scaling: *scaling,
            weights: kernel_weights(&spec.kernel, scaling),
            n,
            mu: scaling.mu(),
            horizon,
            amp: DriftAmp::zeros(n),
            u0_c: Vec::new(),
            u0_d: Vec::new(),
            last_c: vec![0.0; n],
            last_d: vec![0.0; n],
            int_psi_c: vec![0.0; n],
            int_psi_d: vec![0.0; n],
            int_sq_c: vec![0.0; n],
            int_cross_right: vec![0.0; n],
            int_cross_left: vec![0.0; n],
            int_sq_d: vec![0.0; n],
            int_proj_c: vec![0.0; n],
            int_proj_d: vec![0.0; n],
            heat_int: vec![0.0; n],
            heat_drift: vec![0.0; n],
            sum_sq_c: vec![0.0; n],
            sum_cross_right: vec![0.0; n],
            sum_cross_left: vec![0.0; n],
            sum_sq_d: vec![0.0; n],
            proj_sq_c: vec![0.0; n],
            proj_sq_d: vec![0.0; n],
            heat_sq: vec![0.0; n],
            heat_jumps: vec![0.0; n],
            phi,
            phi_sq,
            grad_sq,
            modes,
            pairs,
            kappa: vec![0.0; n],
            dense: vec![0.0; n],
        }
    }

    /// Integral of exp(-b (horizon - s)) over [s0, s1].
    fn exp_integral(&self, b: f64, s0: f64, s1: f64) -> f64 {
        if b == 0.0 {
            return s1 - s0;
        }
        ((-b * (self.horizon - s1)).exp() - (-b * (self.horizon - s0)).exp()) / b
    }

    /// Evolution weight column at lag `tau`, by displacement:
    /// kappa(d) = sum over frequencies of exp(-beta tau) c(d).
    fn kappa_at(&mut self, tau: f64) {
        for v in self.kappa.iter_mut() {
            *v = 0.0;
        }
        for mode in &self.modes {
            let decay = (-mode.beta * tau).exp();
            if decay == 0.0 {
                continue;
            }
            for (v, c) in self.kappa.iter_mut().zip(&mode.c) {
                *v += decay * c;
            }
        }
    }

    pub fn finish(self) -> MartingaleRecord {
        let n = self.n;
        let mut z_c = vec![0.0; n];
        let mut z_d = vec![0.0; n];
        let mut heat_value = vec![0.0; n];
        for j in 0..n {
            z_c[j] = self.last_c[j] - self.u0_c[j] - self.int_psi_c[j];
            z_d[j] = self.last_d[j] - self.u0_d[j] - self.int_psi_d[j];
            heat_value[j] = self.heat_jumps[j] - self.heat_drift[j];
        }
        MartingaleRecord {
            horizon: self.horizon,
            z_c,
            z_d,
            sum_sq_c: self.sum_sq_c,
            int_sq_c: self.int_sq_c,
            sum_cross_right: self.sum_cross_right,
            int_cross_right: self.int_cross_right,
            sum_cross_left: self.sum_cross_left,
            int_cross_left: self.int_cross_left,
            sum_sq_d: self.sum_sq_d,
            int_sq_d: self.int_sq_d,
            proj_sq_c: self.proj_sq_c,
            int_proj_c: self.int_proj_c,
            proj_sq_d: self.proj_sq_d,
            int_proj_d: self.int_proj_d,
            heat_sq: self.heat_sq,
            heat_int: self.heat_int,
            heat_value,
        }
    }
}

impl PathObserver for MartingaleRecorder<'_> {
    fn segment(&mut self, t0: f64, t1: f64, uc: &[f64], ud: &[f64]) {
        if self.u0_c.is_empty() {
            self.u0_c = uc.to_vec();
            self.u0_d = ud.to_vec();
        }
        self.last_c.copy_from_slice(uc);
        self.last_d.copy_from_slice(ud);
        if t1 <= t0 {
            return;
        }
        let dt = t1 - t0;
        let n = self.n;
        let nf = n as f64;
        let nsq = nf * nf;

        debit::drift_and_square_amplitudes_into(
            self.spec,
            &self.scaling,
            &self.weights,
            uc,
            ud,
            &mut self.amp,
        );
        // amp_sum_c drives both the projected and the heat compensators:
        // the fast square amplitude plus mu times the slow C square amplitude
        let amp_sum_c: Vec<f64> = (0..n)
            .map(|j| self.amp.amp_f_sq[j] + self.mu * self.amp.amp_f1n_sq[j])
            .collect();

        for j in 0..n {
            self.int_psi_c[j] += self.amp.psi_c[j] * dt;
            self.int_psi_d[j] += self.amp.psi_d[j] * dt;
            self.int_sq_c[j] += (self.amp.amp_lap[j] + amp_sum_c[j]) / self.mu * dt;
            self.int_cross_right[j] += nsq / self.mu * (uc[j] + uc[(j + 1) % n]) * dt;
            self.int_cross_left[j] += nsq / self.mu * (uc[j] + uc[(j + n - 1) % n]) * dt;
            self.int_sq_d[j] += self.amp.amp_gn_sq[j] * dt;
            // projected compensators, through the inner-product machinery
            self.int_proj_c[j] += (inner2(uc, &self.grad_sq[j])
                + inner2(&amp_sum_c, &self.phi_sq[j]))
                / (nf * self.mu)
                * dt;
            self.int_proj_d[j] += inner2(&self.amp.amp_gn_sq, &self.phi_sq[j]) / nf * dt;
        }

        // heat-filtered quadratic variation: per frequency pair, the product
        // table against u_C (gradient part) and amp_sum_c (reaction part),
        // times the closed-form time integral of the paired decay
        for pair in &self.pairs {
            let integral = self.exp_integral(pair.beta_sum, t0, t1);
            if integral == 0.0 {
                continue;
            }
            let scale = pair.mult * integral / (nsq * self.mu);
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    let d = (i + n - j) % n;
                    acc += uc[i] * pair.grad[d] + amp_sum_c[i] * pair.cc[d];
                }
                self.heat_int[j] += scale * acc;
            }
        }
        // heat-filtered drift: <T(horizon - s) Psi_C, phi_j> integrated in s
        for mode in &self.modes {
            let integral = self.exp_integral(mode.beta, t0, t1);
            if integral == 0.0 {
                continue;
            }
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.amp.psi_c[i] * mode.c[(i + n - j) % n];
                }
                self.heat_drift[j] += integral / nf * acc;
            }
        }
    }

    fn event(&mut self, t: f64, _uc: &[f64], _ud: &[f64], jump: &JumpView<'_>) {
        let n = self.n;
        let nf = n as f64;
        // direct per-site accumulation
        for &(i, d) in jump.delta_c {
            self.dense[i] = d;
        }
        for &(i, d) in jump.delta_c {
            self.sum_sq_c[i] += d * d;
            self.sum_cross_right[i] += d * self.dense[(i + 1) % n];
            self.sum_cross_left[i] += d * self.dense[(i + n - 1) % n];
        }
        for &(i, _) in jump.delta_c {
            self.dense[i] = 0.0;
        }
        for &(i, d) in jump.delta_d {
            self.sum_sq_d[i] += d * d;
        }
        // projected increments, squared, through the inner product
        for j in 0..n {
            let mut dc = 0.0;
            for &(i, d) in jump.delta_c {
                dc += d * self.phi[j][i];
            }
            dc /= nf;
            self.proj_sq_c[j] += dc * dc;
            let mut dd = 0.0;
            for &(i, d) in jump.delta_d {
                dd += d * self.phi[j][i];
            }
            dd /= nf;
            self.proj_sq_d[j] += dd * dd;
        }
        // heat-filtered increment: the evolution weight at lag horizon - t
        // applied to the sparse C jump
        self.kappa_at(self.horizon - t);
        for j in 0..n {
            let mut dm = 0.0;
            for &(i, d) in jump.delta_c {
                dm += d * self.kappa[(i + n - j) % n];
            }
            dm /= nf;
            self.heat_sq[j] += dm * dm;
            self.heat_jumps[j] += dm;
        }
    }
}
