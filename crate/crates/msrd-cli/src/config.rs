//! Run configuration: a TOML document that either is a network file or
//! points at one (`network = "path"`, or an inline `[network]` table) and
//! adds per-subcommand parameter tables. The resolved configuration is
//! embedded in every artifact.

use msrd_core::model::{parse_network, validate_network, NetworkSpec};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, bad network, bad flags: exit 2.
    Validation(String),
    /// Failure while running a valid job (IO, simulation error, event cap):
    /// exit 1.
    Runtime(String),
    /// A check command measured something out of tolerance: exit 3.
    CheckFailed(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    pub fn writes_csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    pub fn writes_json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

fn d_sim_n() -> usize {
    8
}
fn d_sim_mu() -> f64 {
    32.0
}
fn d_one() -> f64 {
    1.0
}
fn d_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    #[serde(default = "d_sim_n")]
    pub n: usize,
    #[serde(default = "d_sim_mu")]
    pub mu: f64,
    #[serde(default = "d_one")]
    pub t_end: f64,
    /// Number of uniform snapshot intervals.
    #[serde(default = "d_points")]
    pub sample_points: usize,
    /// Tube radius; enables the truncated run against the lattice-level
    /// deterministic solution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_events: Option<u64>,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams {
            n: d_sim_n(),
            mu: d_sim_mu(),
            t_end: 1.0,
            sample_points: d_points(),
            epsilon0: None,
            max_events: None,
        }
    }
}

fn d_lim_n() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitParams {
    #[serde(default = "d_lim_n")]
    pub n: usize,
    #[serde(default = "d_one")]
    pub t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl Default for LimitParams {
    fn default() -> Self {
        LimitParams { n: d_lim_n(), t_end: 1.0, dt: None }
    }
}

fn d_sizes() -> Vec<usize> {
    vec![3, 4, 8, 16]
}
fn d_tol_eigen() -> f64 {
    1e-10
}
fn d_tol_gram() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralParams {
    #[serde(default = "d_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "d_tol_eigen")]
    pub tol_eigen: f64,
    #[serde(default = "d_tol_gram")]
    pub tol_gram: f64,
}

impl Default for SpectralParams {
    fn default() -> Self {
        SpectralParams { sizes: d_sizes(), tol_eigen: d_tol_eigen(), tol_gram: d_tol_gram() }
    }
}

fn d_mart_replicas() -> usize {
    200
}
fn d_z_max() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleParams {
    #[serde(default = "d_sim_n")]
    pub n: usize,
    #[serde(default = "d_sim_mu")]
    pub mu: f64,
    #[serde(default = "d_mart_replicas")]
    pub replicas: usize,
    #[serde(default = "d_one")]
    pub horizon: f64,
    #[serde(default = "d_z_max")]
    pub z_max: f64,
}

impl Default for MartingaleParams {
    fn default() -> Self {
        MartingaleParams {
            n: d_sim_n(),
            mu: d_sim_mu(),
            replicas: d_mart_replicas(),
            horizon: 1.0,
            z_max: d_z_max(),
        }
    }
}

fn d_pairs() -> Vec<(usize, f64)> {
    vec![(8, 32.0), (16, 64.0), (32, 128.0)]
}
fn d_replicas() -> usize {
    20
}
fn d_epsilons() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}
fn d_multiple() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParams {
    #[serde(default = "d_pairs")]
    pub pairs: Vec<(usize, f64)>,
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    #[serde(default = "d_one")]
    pub horizon: f64,
    #[serde(default = "d_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon0: Option<f64>,
    #[serde(default = "d_multiple")]
    pub reference_multiple: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams {
            pairs: d_pairs(),
            replicas: d_replicas(),
            horizon: 1.0,
            epsilons: d_epsilons(),
            epsilon0: None,
            reference_multiple: d_multiple(),
        }
    }
}

/// The run-form configuration document. The `network` value is kept as raw
/// TOML (a path string or an inline table) so the document round-trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<toml::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateParams>,
    #[serde(
        default,
        rename = "solve-limit",
        skip_serializing_if = "Option::is_none"
    )]
    pub solve_limit: Option<LimitParams>,
    #[serde(
        default,
        rename = "spectral-check",
        skip_serializing_if = "Option::is_none"
    )]
    pub spectral_check: Option<SpectralParams>,
    #[serde(
        default,
        rename = "martingale-check",
        skip_serializing_if = "Option::is_none"
    )]
    pub martingale_check: Option<MartingaleParams>,
    #[serde(default, rename = "lln-sweep", skip_serializing_if = "Option::is_none")]
    pub lln_sweep: Option<SweepParams>,
}

/// A parsed configuration: the run parameters, the validated network, and
/// the network document for artifact embedding.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub spec: NetworkSpec,
    pub network_doc: toml::Table,
    /// Where the network came from, for reports.
    pub network_source: String,
}

fn validation<E: fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

/// Parse a configuration document. A document without a `network` key must
/// itself be a network file (run parameters all default); with one, the
/// rest of the document is strictly checked against the run schema and the
/// network is loaded from the referenced path (relative to `base_dir`) or
/// from the inline table.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<LoadedConfig, CliError> {
    let table: toml::Table = text.parse().map_err(validation)?;

    if !table.contains_key("network") {
        let spec = checked_network(text)?;
        return Ok(LoadedConfig {
            run: RunConfig::default(),
            spec,
            network_doc: table,
            network_source: "inline".to_string(),
        });
    }

    let run: RunConfig = table.try_into().map_err(validation)?;
    let (network_text, network_source) = match run.network.as_ref().expect("checked above") {
        toml::Value::String(path) => {
            let full: PathBuf = if Path::new(path).is_absolute() {
                path.into()
            } else {
                base_dir.join(path)
            };
            let text = std::fs::read_to_string(&full).map_err(|e| {
                CliError::Validation(format!("cannot read network file {}: {e}", full.display()))
            })?;
            (text, full.display().to_string())
        }
        toml::Value::Table(t) => {
            let text = toml::to_string(t).map_err(validation)?;
            (text, "inline".to_string())
        }
        other => {
            return Err(CliError::Validation(format!(
                "network must be a path string or a table, got {}",
                other.type_str()
            )))
        }
    };
    let spec = checked_network(&network_text)?;
    let network_doc: toml::Table = network_text.parse().map_err(validation)?;
    Ok(LoadedConfig { run, spec, network_doc, network_source })
}

/// Parse a network document and refuse it if it carries violations.
fn checked_network(text: &str) -> Result<NetworkSpec, CliError> {
    let spec = parse_network(text).map_err(validation)?;
    let violations = validate_network(&spec);
    if violations.is_empty() {
        Ok(spec)
    } else {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(CliError::Validation(format!("network rejected: {}", list.join("; "))))
    }
}

/// Load a configuration from a file path.
pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

/// Seed precedence: MSRD_SEED environment > --seed flag > config > 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    if let Ok(raw) = std::env::var("MSRD_SEED") {
        return raw.trim().parse::<u64>().map_err(|_| {
            CliError::Validation(format!("MSRD_SEED must be an unsigned integer, got {raw:?}"))
        });
    }
    Ok(flag.or(config).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NETWORK: &str = r#"
[species]
fast = "C"
slow = "D"

[[reactions]]
class = "fast_c"
gamma_c = 1
rate = "1"

[kernel]
shape = "constant_box"

[initial]
v_c = "1"
v_d = "0"
"#;

    #[test]
    fn bare_network_documents_are_valid_configs() {
        let loaded = parse_config(NETWORK, Path::new(".")).unwrap();
        assert_eq!(loaded.spec.reactions.len(), 1);
        assert_eq!(loaded.run, RunConfig::default());
        assert_eq!(loaded.network_source, "inline");
    }

    #[test]
    fn run_configs_round_trip_through_toml() {
        let text = r#"
network = "net.toml"
seed = 9
format = "csv"

[simulate]
n = 4
mu = 8.0
t_end = 0.5

[lln-sweep]
pairs = [[4, 16.0], [8, 32.0]]
replicas = 3
horizon = 0.25
"#;
        let table: toml::Table = text.parse().unwrap();
        let run: RunConfig = table.try_into().unwrap();
        let serialized = toml::to_string_pretty(&run).unwrap();
        let reparsed: RunConfig = serialized.parse::<toml::Table>().unwrap().try_into().unwrap();
        assert_eq!(run, reparsed);
        assert_eq!(reparsed.simulate.as_ref().unwrap().sample_points, 200);
        assert_eq!(reparsed.lln_sweep.as_ref().unwrap().reference_multiple, 8);
    }

    #[test]
    fn inline_network_tables_parse() {
        let text = r#"
seed = 3

[network.species]
fast = "C"
slow = "D"

[[network.reactions]]
class = "slow_d"
gamma_d = 1
rate = "1"

[network.kernel]
shape = "constant_box"

[network.initial]
v_c = "1"
v_d = "0"
"#;
        let loaded = parse_config(text, Path::new(".")).unwrap();
        assert_eq!(loaded.spec.reactions.len(), 1);
        assert_eq!(loaded.run.seed, Some(3));
        assert_eq!(loaded.network_source, "inline");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "network = \"net.toml\"\nbogus = 1\n";
        let err = parse_config(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn seed_precedence_without_env() {
        std::env::remove_var("MSRD_SEED");
        assert_eq!(resolve_seed(Some(5), Some(7)).unwrap(), 5);
        assert_eq!(resolve_seed(None, Some(7)).unwrap(), 7);
        assert_eq!(resolve_seed(None, None).unwrap(), 0);
    }
}
