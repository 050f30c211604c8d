//! Subcommand registry and dispatch. Every subcommand is a trait object
//! registered by name; the front end looks the invoked name up at runtime,
//! so new commands plug in without touching the dispatcher.

use crate::config::{
    load_config, resolve_seed, CliError, Format, LimitParams, MartingaleParams, RunConfig,
    SimulateParams, SpectralParams, SweepParams,
};
use clap::{Arg, ArgAction, ArgMatches};
use msrd_core::grid::{
    discrete_laplacian, project_pn_exact, semigroup_apply, semigroup_kernel, spectral_basis,
    GridFunction, PairField,
};
use msrd_core::limit::solve_discrete_limit;
use msrd_core::lln::{
    lln_sweep, martingale_suite, LlnError, ReferenceTable, SweepPlan,
};
use msrd_core::model::{kernel_impl, NetworkSpec, ReactionClass, ScalingParams};
use msrd_core::ssa::{simulate, truncated_simulate, SimOptions, StopRule};
use std::path::{Path, PathBuf};

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Ctx {
    pub run: RunConfig,
    pub spec: Option<NetworkSpec>,
    pub network_doc: Option<toml::Table>,
    pub network_source: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Format,
    pub plot_data: bool,
}

impl Ctx {
    fn network(&self) -> Result<&NetworkSpec, CliError> {
        self.spec.as_ref().ok_or_else(|| {
            CliError::Validation("this command needs --config with a network".to_string())
        })
    }

    /// The resolved configuration block embedded in every artifact.
    fn resolved_config(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "out": self.out_dir.display().to_string(),
            "format": self.format,
            "network_source": self.network_source,
            "run": self.run,
            "network": self.network_doc,
        })
    }

    fn write_file(&self, name: &str, bytes: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", self.out_dir.display())))?;
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    /// CSV artifact: data prefixed by comment lines carrying the tool
    /// version and the resolved configuration.
    fn csv_artifact(&self, name: &str, body: &str) -> Result<(), CliError> {
        if !self.format.writes_csv() {
            return Ok(());
        }
        let config = serde_json::to_string(&self.resolved_config()).expect("config serializes");
        let text = format!("# msrd {VERSION}\n# config {config}\n{body}");
        let path = self.write_file(name, &text)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// JSON artifact: the result document wrapped with version and resolved
    /// configuration.
    fn json_artifact(&self, name: &str, result: serde_json::Value) -> Result<(), CliError> {
        if !self.format.writes_json() {
            return Ok(());
        }
        let doc = serde_json::json!({
            "version": VERSION,
            "config": self.resolved_config(),
            "result": result,
        });
        let text = serde_json::to_string_pretty(&doc).expect("artifact serializes") + "\n";
        let path = self.write_file(name, &text)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn lln_error(e: LlnError) -> CliError {
    match e {
        LlnError::BadPlan(_) | LlnError::BadReference { .. } => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

fn scaling_for(n: usize, mu: f64) -> Result<ScalingParams, CliError> {
    let made = if n == 1 { ScalingParams::single_site(mu) } else { ScalingParams::new(n, mu) };
    made.map_err(|e| CliError::Validation(e.to_string()))
}

fn initial_field(spec: &NetworkSpec, n: usize) -> PairField {
    PairField::new(project_pn_exact(&spec.initial_c, n), project_pn_exact(&spec.initial_d, n))
}

pub trait Command: Sync {
    fn name(&self) -> &'static str;
    fn about(&self) -> &'static str;
    fn run(&self, ctx: &Ctx) -> Result<(), CliError>;
}

pub fn registry() -> Vec<Box<dyn Command>> {
    vec![
        Box::new(Validate),
        Box::new(Simulate),
        Box::new(SolveLimit),
        Box::new(SpectralCheck),
        Box::new(MartingaleCheck),
        Box::new(LlnSweep),
    ]
}

// ---- validate ----

struct Validate;

impl Command for Validate {
    fn name(&self) -> &'static str {
        "validate"
    }

    fn about(&self) -> &'static str {
        "Parse and validate the network and run configuration"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let spec = ctx.network()?;
        let count = |class: ReactionClass| {
            spec.reactions.iter().filter(|r| r.class == class).count()
        };
        println!(
            "network ok: {} reactions (fast_c {}, fast_mixed {}, slow_mixed {}, slow_d {}), kernel {}, species {}/{}",
            spec.reactions.len(),
            count(ReactionClass::FastC),
            count(ReactionClass::FastMixed),
            count(ReactionClass::SlowMixed),
            count(ReactionClass::SlowD),
            kernel_impl(&spec.kernel).name(),
            spec.species_fast,
            spec.species_slow,
        );
        Ok(())
    }
}

// ---- simulate ----

struct Simulate;

impl Command for Simulate {
    fn name(&self) -> &'static str {
        "simulate"
    }

    fn about(&self) -> &'static str {
        "Run one stochastic trajectory and write it out"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let spec = ctx.network()?;
        let p: SimulateParams = ctx.run.simulate.clone().unwrap_or_default();
        if !p.t_end.is_finite() || p.t_end <= 0.0 {
            return Err(CliError::Validation(format!("t_end = {}", p.t_end)));
        }
        if p.sample_points == 0 {
            return Err(CliError::Validation("sample_points must be positive".into()));
        }
        let scaling = scaling_for(p.n, p.mu)?;
        let initial = initial_field(spec, p.n);
        let times: Vec<f64> = (0..=p.sample_points)
            .map(|k| k as f64 * p.t_end / p.sample_points as f64)
            .collect();
        let stop = StopRule {
            t_end: p.t_end,
            epsilon0: p.epsilon0,
            max_events: p.max_events.unwrap_or(u64::MAX),
        };
        let opts =
            SimOptions { seed: ctx.seed, stream: 0, record_events: false, record_binary: false };

        let traj = if p.epsilon0.is_some() {
            let v_ref = solve_discrete_limit(spec, p.n, &initial, p.t_end, None)
                .map_err(runtime)?;
            let table = ReferenceTable::from_solution(&v_ref, p.n).map_err(lln_error)?;
            let reference = |t: f64| table.sample_field(t);
            truncated_simulate(spec, &scaling, &initial, &stop, &times, &opts, &reference)
        } else {
            simulate(spec, &scaling, &initial, &stop, &times, &opts)
        }
        .map_err(runtime)?;

        ctx.csv_artifact("trajectory.csv", &traj.to_csv())?;
        let summary: serde_json::Value =
            serde_json::from_str(&traj.summary_json()).expect("summary is valid json");
        ctx.json_artifact("summary.json", summary)?;
        println!(
            "simulate: {} events to t = {} (fast {}, slow {}, diffusion {})",
            traj.counts.total(),
            traj.final_time,
            traj.counts.fast,
            traj.counts.slow,
            traj.counts.diffusion,
        );
        if traj.capped {
            return Err(CliError::Runtime(format!(
                "partial trajectory: event cap {} reached at t = {}; artifacts hold the reached prefix",
                stop.max_events, traj.final_time
            )));
        }
        Ok(())
    }
}

// ---- solve-limit ----

struct SolveLimit;

impl Command for SolveLimit {
    fn name(&self) -> &'static str {
        "solve-limit"
    }

    fn about(&self) -> &'static str {
        "Integrate the deterministic reaction-diffusion limit"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let spec = ctx.network()?;
        let p: LimitParams = ctx.run.solve_limit.clone().unwrap_or_default();
        if p.n == 0 {
            return Err(CliError::Validation("n must be positive".into()));
        }
        let v0 = initial_field(spec, p.n);
        let sol = solve_discrete_limit(spec, p.n, &v0, p.t_end, p.dt).map_err(runtime)?;

        ctx.csv_artifact("limit.csv", &sol.to_csv())?;
        let meta: serde_json::Value =
            serde_json::from_str(&sol.metadata_json()).expect("metadata is valid json");
        ctx.json_artifact("limit.json", meta)?;
        println!(
            "solve-limit: n = {}, {} refinement levels, dt = {}, sup C {:.6}, sup D {:.6}",
            sol.n,
            sol.refinements.len(),
            sol.dt,
            sol.max_sup_c,
            sol.max_sup_d,
        );
        if sol.positivity_flagged {
            eprintln!("note: negative excursion {:.3e} recorded in metadata", sol.min_value);
        }
        Ok(())
    }
}

// ---- spectral-check ----

struct SpectralCheck;

impl Command for SpectralCheck {
    fn name(&self) -> &'static str {
        "spectral-check"
    }

    fn about(&self) -> &'static str {
        "Verify the discrete Laplacian eigenstructure and heat semigroup"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let p: SpectralParams = ctx.run.spectral_check.clone().unwrap_or_default();
        if p.sizes.iter().any(|&n| n < 2) {
            return Err(CliError::Validation("spectral checks need n >= 2".into()));
        }

        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for &n in &p.sizes {
            let basis = spectral_basis(n);

            let mut worst_eigen = 0.0f64;
            for mode in basis.modes() {
                let lap = discrete_laplacian(&mode.func);
                let scale = mode.beta.max(1.0);
                for j in 0..n {
                    let residual =
                        (lap.values()[j] + mode.beta * mode.func.values()[j]).abs() / scale;
                    worst_eigen = worst_eigen.max(residual);
                }
            }

            let mut worst_gram = 0.0f64;
            for (i, a) in basis.modes().iter().enumerate() {
                for (j, b) in basis.modes().iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst_gram = worst_gram.max((a.func.l2_inner(&b.func) - want).abs());
                }
            }

            // generic strictly positive test vectors
            let f = GridFunction::new((0..n).map(|j| 2.0 + (j as f64).sin()).collect());
            let g = GridFunction::new((0..n).map(|j| 1.0 + (j as f64 * 0.7).cos()).collect());
            let mut worst_contraction = 0.0f64;
            let mut worst_symmetry = 0.0f64;
            for &t in &[0.01, 0.1, 1.0] {
                let tf = semigroup_apply(&basis, t, &f);
                let tg = semigroup_apply(&basis, t, &g);
                worst_contraction = worst_contraction.max(tf.sup_norm() - f.sup_norm());
                worst_symmetry =
                    worst_symmetry.max((tf.l2_inner(&g) - f.l2_inner(&tg)).abs());
            }

            let kappa = semigroup_kernel(n, 0.37);
            let row_gap = (kappa.iter().sum::<f64>() / n as f64 - 1.0).abs();

            let pass = worst_eigen <= p.tol_eigen
                && worst_gram <= p.tol_gram
                && worst_contraction <= p.tol_gram
                && worst_symmetry <= p.tol_gram
                && row_gap <= p.tol_gram;
            if !pass {
                failures.push(n);
            }
            println!(
                "spectral n = {n}: eigen {worst_eigen:.2e}, gram {worst_gram:.2e}, contraction excess {worst_contraction:.2e}, symmetry {worst_symmetry:.2e}, row sum {row_gap:.2e} -> {}",
                if pass { "ok" } else { "FAIL" }
            );
            rows.push(serde_json::json!({
                "n": n,
                "eigen_residual": worst_eigen,
                "gram_gap": worst_gram,
                "contraction_excess": worst_contraction,
                "symmetry_gap": worst_symmetry,
                "row_sum_gap": row_gap,
                "pass": pass,
            }));
        }

        ctx.json_artifact(
            "spectral.json",
            serde_json::json!({
                "tol_eigen": p.tol_eigen,
                "tol_gram": p.tol_gram,
                "sizes": rows,
            }),
        )?;
        if failures.is_empty() {
            Ok(())
        } else {
            Err(CliError::CheckFailed(format!("spectral residuals out of tolerance at n = {failures:?}")))
        }
    }
}

// ---- martingale-check ----

struct MartingaleCheck;

impl Command for MartingaleCheck {
    fn name(&self) -> &'static str {
        "martingale-check"
    }

    fn about(&self) -> &'static str {
        "Monte Carlo zero-mean check of the compensated path statistics"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let spec = ctx.network()?;
        let p: MartingaleParams = ctx.run.martingale_check.clone().unwrap_or_default();
        let scaling = scaling_for(p.n, p.mu)?;
        let report = martingale_suite(spec, &scaling, p.replicas, p.horizon, ctx.seed)
            .map_err(lln_error)?;

        ctx.csv_artifact("martingale.csv", &report.csv())?;
        let doc: serde_json::Value =
            serde_json::from_str(&report.json()).expect("report is valid json");
        ctx.json_artifact("martingale.json", doc)?;
        println!(
            "martingale-check: {} statistics, {} replicas, max |z| = {:.3}",
            report.lines.len(),
            report.replicas,
            report.max_abs_z,
        );
        if report.max_abs_z > p.z_max {
            return Err(CliError::CheckFailed(format!(
                "max |z| = {:.3} exceeds {}",
                report.max_abs_z, p.z_max
            )));
        }
        Ok(())
    }
}

// ---- lln-sweep ----

struct LlnSweep;

impl Command for LlnSweep {
    fn name(&self) -> &'static str {
        "lln-sweep"
    }

    fn about(&self) -> &'static str {
        "Convergence sweep of ensembles against the deterministic limit"
    }

    fn run(&self, ctx: &Ctx) -> Result<(), CliError> {
        let spec = ctx.network()?;
        let p: SweepParams = ctx.run.lln_sweep.clone().unwrap_or_default();
        let stock = p.pairs == SweepParams::default().pairs;
        let plan = SweepPlan {
            pairs: p.pairs,
            replicas: p.replicas,
            horizon: p.horizon,
            seed: ctx.seed,
            epsilons: p.epsilons,
            epsilon0: p.epsilon0,
            reference_multiple: p.reference_multiple,
            note: stock.then(|| "schedule rule: mu = 4N, doubling".to_string()),
        };
        plan.validate().map_err(lln_error)?;
        let report = lln_sweep(spec, &plan).map_err(lln_error)?;

        ctx.csv_artifact("sweep_rows.csv", &report.rows_csv())?;
        let doc: serde_json::Value =
            serde_json::from_str(&report.deterministic_json()).expect("report is valid json");
        ctx.json_artifact("sweep.json", doc)?;
        if ctx.plot_data {
            ctx.csv_artifact("sweep_plot.csv", &report.plot_csv())?;
        }
        for pair in &report.pairs {
            println!(
                "lln-sweep (N = {}, mu = {}): median {:.4}, exceed {:?} [{:.1}s]",
                pair.n,
                pair.mu,
                pair.median,
                pair.exceedance
                    .iter()
                    .map(|(e, f)| format!("{e}:{f:.2}"))
                    .collect::<Vec<_>>(),
                pair.runtime_s,
            );
        }
        Ok(())
    }
}

// ---- front end ----

fn clap_app(registry: &[Box<dyn Command>]) -> clap::Command {
    let mut app = clap::Command::new("msrd")
        .version(VERSION)
        .about("Two-species stochastic reaction-diffusion lattice: exact simulator, deterministic limit, convergence experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("Run configuration or bare network file"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .global(true)
                .value_parser(clap::value_parser!(u64))
                .help("Master seed (MSRD_SEED overrides)"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .global(true)
                .help("Artifact directory (default msrd-out)"),
        )
        .arg(
            Arg::new("workers")
                .long("workers")
                .value_name("N")
                .global(true)
                .value_parser(clap::value_parser!(usize))
                .help("Thread budget for ensemble runs"),
        )
        .arg(
            Arg::new("format")
                .long("format")
                .value_name("FMT")
                .global(true)
                .value_parser(["csv", "json", "both"])
                .help("Artifact formats (default both)"),
        )
        .arg(
            Arg::new("plot-data")
                .long("plot-data")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("Also write tidy plotting CSV where supported"),
        );
    for c in registry {
        app = app.subcommand(clap::Command::new(c.name()).about(c.about()));
    }
    app
}

fn parse_format(matches: &ArgMatches, config: Option<Format>) -> Format {
    match matches.get_one::<String>("format").map(String::as_str) {
        Some("csv") => Format::Csv,
        Some("json") => Format::Json,
        Some("both") => Format::Both,
        _ => config.unwrap_or(Format::Both),
    }
}

pub fn entry() -> Result<(), CliError> {
    let registry = registry();
    let matches = clap_app(&registry).get_matches();
    let (name, _) = matches.subcommand().expect("subcommand is required");

    let loaded = matches
        .get_one::<String>("config")
        .map(|p| load_config(Path::new(p)))
        .transpose()?;
    let (run, spec, network_doc, network_source) = match loaded {
        Some(l) => (l.run, Some(l.spec), Some(l.network_doc), l.network_source),
        None => (RunConfig::default(), None, None, "none".to_string()),
    };

    let seed = resolve_seed(matches.get_one::<u64>("seed").copied(), run.seed)?;
    let out_dir = matches
        .get_one::<String>("out")
        .cloned()
        .or_else(|| run.out.clone())
        .unwrap_or_else(|| "msrd-out".to_string());
    let format = parse_format(&matches, run.format);
    if let Some(&w) = matches.get_one::<usize>("workers").or(run.workers.as_ref()) {
        if w == 0 {
            return Err(CliError::Validation("workers must be positive".into()));
        }
        // A global pool can only be installed once per process; later calls
        // keep the first configuration.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }

    let ctx = Ctx {
        run,
        spec,
        network_doc,
        network_source,
        seed,
        out_dir: PathBuf::from(out_dir),
        format,
        plot_data: matches.get_flag("plot-data"),
    };

    let cmd = registry
        .iter()
        .find(|c| c.name() == name)
        .expect("clap only admits registered subcommands");
    cmd.run(&ctx)
}
