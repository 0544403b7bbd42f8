//! Layered run configuration: built-in defaults, an optional TOML file,
//! then command-line overrides, with the source of every setting kept
//! for the startup log.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::engine::{AnnealerConfig, EngineMode, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::{build_config, FederationSpec};
use crate::simulator::{QosMode, SimParams};
use crate::workload::{FaultModel, SchedulerPolicy};

/// Environment variable holding the default config-file path, used when
/// no explicit flag names one.
pub const CONFIG_ENV: &str = "DRAGON_CONFIG";

/// Either one of the three 16-host reference layouts or a TOML file
/// describing a custom federation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Topology {
    Reference(u8),
    File(PathBuf),
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(n) = s.parse::<u8>() {
            return if (1..=3).contains(&n) {
                Ok(Topology::Reference(n))
            } else {
                Err(Error::usage(format!("reference topologies are 1, 2 or 3, got {n}")))
            };
        }
        if s.is_empty() {
            return Err(Error::usage("topology must be 1|2|3 or a file path"));
        }
        Ok(Topology::File(PathBuf::from(s)))
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Reference(n) => write!(f, "{n}"),
            Topology::File(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeChoice {
    None,
    Dragon,
    DragonPlus,
}

impl FromStr for ModeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ModeChoice::None),
            "dragon" => Ok(ModeChoice::Dragon),
            "dragon_plus" | "dragon-plus" => Ok(ModeChoice::DragonPlus),
            other => Err(Error::usage(format!(
                "mode must be none|dragon|dragon_plus, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeChoice::None => "none",
            ModeChoice::Dragon => "dragon",
            ModeChoice::DragonPlus => "dragon_plus",
        })
    }
}

impl FromStr for QosMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cost" => Ok(QosMode::Cost),
            "paper" => Ok(QosMode::Paper),
            other => Err(Error::usage(format!("qos mode must be cost|paper, got `{other}`"))),
        }
    }
}

impl FromStr for SchedulerPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least_util" | "least-util" => Ok(SchedulerPolicy::LeastUtil),
            "random" => Ok(SchedulerPolicy::Random),
            other => Err(Error::usage(format!(
                "scheduler must be least_util|random, got `{other}`"
            ))),
        }
    }
}

fn qos_name(m: QosMode) -> &'static str {
    match m {
        QosMode::Cost => "cost",
        QosMode::Paper => "paper",
    }
}

fn scheduler_name(s: SchedulerPolicy) -> &'static str {
    match s {
        SchedulerPolicy::LeastUtil => "least_util",
        SchedulerPolicy::Random => "random",
    }
}

/// One layer of optional settings. The file parser and the CLI both
/// produce this shape; unset fields fall through to the next layer.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    #[serde(default, deserialize_with = "de_topology")]
    pub topology: Option<Topology>,
    #[serde(default, deserialize_with = "de_from_str")]
    pub mode: Option<ModeChoice>,
    pub lookahead: Option<usize>,
    pub window_k: Option<usize>,
    pub seed: Option<u64>,
    pub intervals: Option<u64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    #[serde(default, deserialize_with = "de_from_str")]
    pub qos_mode: Option<QosMode>,
    pub q_low: Option<f64>,
    pub q_risk: Option<f64>,
    pub arrival_rate: Option<f64>,
    pub fault_rate: Option<f64>,
    pub slo_multiplier: Option<f64>,
    pub initial_temp: Option<f64>,
    pub cooling: Option<f64>,
    pub anneal_iters: Option<usize>,
    #[serde(default, deserialize_with = "de_from_str")]
    pub scheduler: Option<SchedulerPolicy>,
    pub finetune_lr: Option<f64>,
    pub threads: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn de_from_str<'de, D, T>(deserializer: D) -> std::result::Result<Option<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: FromStr<Err = Error>,
{
    let s = Option::<String>::deserialize(deserializer)?;
    s.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
}

/// Accepts `topology = 2` and `topology = "fed.toml"` alike.
fn de_topology<'de, D>(deserializer: D) -> std::result::Result<Option<Topology>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(u8),
        Str(String),
    }
    let repr = Option::<Repr>::deserialize(deserializer)?;
    repr.map(|r| {
        match r {
            Repr::Num(n) => n.to_string().parse(),
            Repr::Str(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    })
    .transpose()
}

impl ConfigLayer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Cli,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Cli => "cli",
        })
    }
}

/// One resolved setting and the layer that decided it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting {
    pub name: &'static str,
    pub value: String,
    pub source: Source,
}

/// Fully resolved run settings; every field has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub topology: Topology,
    pub mode: ModeChoice,
    /// Lookahead depth N; consulted only in dragon_plus mode.
    pub lookahead: usize,
    /// None picks the per-mode default window length.
    pub window_k: Option<usize>,
    pub seed: u64,
    pub intervals: u64,
    pub alpha: f64,
    pub beta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub qos_mode: QosMode,
    pub q_low: f64,
    pub q_risk: f64,
    pub arrival_rate: f64,
    /// Expected fault events per 100 intervals across the federation.
    pub fault_rate: f64,
    pub slo_multiplier: f64,
    pub initial_temp: f64,
    pub cooling: f64,
    pub anneal_iters: usize,
    pub scheduler: SchedulerPolicy,
    pub finetune_lr: f64,
    pub threads: usize,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let engine = ExperimentConfig::default();
        let annealer = AnnealerConfig::default();
        let sim = SimParams::default();
        RunConfig {
            topology: Topology::Reference(2),
            mode: ModeChoice::None,
            lookahead: 5,
            window_k: None,
            seed: 0,
            intervals: engine.intervals,
            alpha: sim.alpha,
            beta: sim.beta,
            delta1: sim.delta1,
            delta2: sim.delta2,
            qos_mode: QosMode::Cost,
            q_low: engine.q_low,
            q_risk: engine.q_risk,
            arrival_rate: engine.arrival_rate,
            fault_rate: FaultModel::default().lambda_per_100,
            slo_multiplier: engine.slo_multiplier,
            initial_temp: annealer.initial_temp,
            cooling: annealer.cooling,
            anneal_iters: annealer.iterations,
            scheduler: SchedulerPolicy::LeastUtil,
            finetune_lr: engine.finetune_lr,
            threads: 1,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Folds `cli` over `file` over the defaults and records where each
    /// setting came from, in declaration order.
    pub fn resolve(file: Option<&ConfigLayer>, cli: &ConfigLayer) -> (Self, Vec<Setting>) {
        let base = RunConfig::default();
        let mut log = Vec::new();

        macro_rules! pick {
            ($field:ident, $show:expr) => {{
                let (value, source) = if let Some(v) = cli.$field.clone() {
                    (v, Source::Cli)
                } else if let Some(v) = file.and_then(|f| f.$field.clone()) {
                    (v, Source::File)
                } else {
                    (base.$field.clone(), Source::Default)
                };
                #[allow(clippy::redundant_closure_call)]
                log.push(Setting { name: stringify!($field), value: $show(&value), source });
                value
            }};
            ($field:ident) => {
                pick!($field, |v: &_| format!("{v}"))
            };
        }

        macro_rules! pick_opt {
            ($field:ident, $absent:expr) => {{
                let (value, source) = if let Some(v) = cli.$field.clone() {
                    (Some(v), Source::Cli)
                } else if let Some(v) = file.and_then(|f| f.$field.clone()) {
                    (Some(v), Source::File)
                } else {
                    (base.$field.clone(), Source::Default)
                };
                let shown = match &value {
                    Some(v) => format!("{}", ShowPath(v)),
                    None => String::from($absent),
                };
                log.push(Setting { name: stringify!($field), value: shown, source });
                value
            }};
        }

        let resolved = RunConfig {
            topology: pick!(topology),
            mode: pick!(mode),
            lookahead: pick!(lookahead),
            window_k: pick_opt!(window_k, "per-mode default"),
            seed: pick!(seed),
            intervals: pick!(intervals),
            alpha: pick!(alpha),
            beta: pick!(beta),
            delta1: pick!(delta1),
            delta2: pick!(delta2),
            qos_mode: pick!(qos_mode, |v: &QosMode| qos_name(*v).to_string()),
            q_low: pick!(q_low),
            q_risk: pick!(q_risk),
            arrival_rate: pick!(arrival_rate),
            fault_rate: pick!(fault_rate),
            slo_multiplier: pick!(slo_multiplier),
            initial_temp: pick!(initial_temp),
            cooling: pick!(cooling),
            anneal_iters: pick!(anneal_iters),
            scheduler: pick!(scheduler, |v: &SchedulerPolicy| scheduler_name(*v).to_string()),
            finetune_lr: pick!(finetune_lr),
            threads: pick!(threads),
            checkpoint: pick_opt!(checkpoint, "unset"),
            out_dir: pick!(out_dir, |v: &PathBuf| v.display().to_string()),
        };
        (resolved, log)
    }

    /// Effective window length: explicit setting, else the per-mode
    /// default (10 single-stage, 5 with lookahead).
    pub fn effective_window_k(&self) -> usize {
        self.window_k.unwrap_or_else(|| match self.mode {
            ModeChoice::None | ModeChoice::Dragon => EngineMode::dragon().default_window_k(),
            ModeChoice::DragonPlus => EngineMode::dragon_plus(self.lookahead).default_window_k(),
        })
    }

    pub fn engine_mode(&self) -> Option<EngineMode> {
        match self.mode {
            ModeChoice::None => None,
            ModeChoice::Dragon => Some(EngineMode::dragon()),
            ModeChoice::DragonPlus => Some(EngineMode::dragon_plus(self.lookahead)),
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            mode: self.engine_mode(),
            intervals: self.intervals,
            window_k: self.effective_window_k(),
            arrival_rate: self.arrival_rate,
            slo_multiplier: self.slo_multiplier,
            scheduler: self.scheduler,
            annealer: AnnealerConfig {
                initial_temp: self.initial_temp,
                cooling: self.cooling,
                iterations: self.anneal_iters,
            },
            finetune_lr: self.finetune_lr,
            q_low: self.q_low,
            q_risk: self.q_risk,
            threads: self.threads,
        }
    }

    pub fn sim_params(&self) -> SimParams {
        SimParams {
            alpha: self.alpha,
            beta: self.beta,
            delta1: self.delta1,
            delta2: self.delta2,
            qos_mode: self.qos_mode,
            ..SimParams::default()
        }
    }

    pub fn fault_model(&self) -> FaultModel {
        FaultModel { lambda_per_100: self.fault_rate, ..FaultModel::default() }
    }

    pub fn federation(&self) -> Result<FederationSpec> {
        let spec = match &self.topology {
            Topology::Reference(n) => build_config(*n)?,
            Topology::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
                let spec: FederationSpec = toml::from_str(&text)
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
                spec
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fault_rate >= 0.0) || !self.fault_rate.is_finite() {
            return Err(Error::contract(format!(
                "fault rate must be >= 0, got {}",
                self.fault_rate
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::contract(format!("{name} must be >= 0, got {v}")));
            }
        }
        self.experiment_config().validate()
    }
}

/// Display adapter: paths print lossily, everything else via Display.
struct ShowPath<'a, T: ?Sized>(&'a T);

impl fmt::Display for ShowPath<'_, PathBuf> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

impl fmt::Display for ShowPath<'_, usize> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_beats_file_beats_default() {
        let file: ConfigLayer = toml::from_str(
            r#"
            intervals = 50
            seed = 9
            mode = "dragon"
            "#,
        )
        .unwrap();
        let cli = ConfigLayer { seed: Some(3), ..ConfigLayer::default() };
        let (cfg, log) = RunConfig::resolve(Some(&file), &cli);
        assert_eq!(cfg.intervals, 50);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode, ModeChoice::Dragon);
        assert_eq!(cfg.alpha, 0.5);

        let source = |name: &str| log.iter().find(|s| s.name == name).unwrap().source;
        assert_eq!(source("intervals"), Source::File);
        assert_eq!(source("seed"), Source::Cli);
        assert_eq!(source("mode"), Source::File);
        assert_eq!(source("alpha"), Source::Default);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let err = toml::from_str::<ConfigLayer>("intervals = 10\ntypo_key = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn topology_parses_numbers_and_paths() {
        assert_eq!("3".parse::<Topology>().unwrap(), Topology::Reference(3));
        assert_eq!(
            "fed.toml".parse::<Topology>().unwrap(),
            Topology::File(PathBuf::from("fed.toml"))
        );
        assert!("4".parse::<Topology>().is_err());
        assert!("".parse::<Topology>().is_err());

        let file: ConfigLayer = toml::from_str("topology = 2\n").unwrap();
        assert_eq!(file.topology, Some(Topology::Reference(2)));
        let file: ConfigLayer = toml::from_str("topology = \"custom.toml\"\n").unwrap();
        assert_eq!(file.topology, Some(Topology::File(PathBuf::from("custom.toml"))));
    }

    #[test]
    fn window_default_tracks_mode() {
        let mut cfg = RunConfig::default();
        cfg.mode = ModeChoice::Dragon;
        assert_eq!(cfg.effective_window_k(), 10);
        cfg.mode = ModeChoice::DragonPlus;
        assert_eq!(cfg.effective_window_k(), 5);
        cfg.window_k = Some(7);
        assert_eq!(cfg.effective_window_k(), 7);
        cfg.window_k = None;
        cfg.mode = ModeChoice::None;
        assert_eq!(cfg.effective_window_k(), 10);
    }

    #[test]
    fn federation_file_roundtrip() {
        let spec = build_config(3).unwrap();
        let dir = std::env::temp_dir().join("dragon-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fed3.toml");
        std::fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();

        let cfg = RunConfig {
            topology: Topology::File(path),
            ..RunConfig::default()
        };
        let loaded = cfg.federation().unwrap();
        assert_eq!(loaded, spec);
        assert_eq!(loaded.leis.iter().map(|l| l.hosts.len()).collect::<Vec<_>>(), vec![2, 4, 4, 8]);
    }

    #[test]
    fn engine_config_carries_all_knobs() {
        let mut cfg = RunConfig::default();
        cfg.mode = ModeChoice::DragonPlus;
        cfg.lookahead = 4;
        cfg.q_low = 0.05;
        cfg.q_risk = 2e-4;
        cfg.anneal_iters = 33;
        let eng = cfg.experiment_config();
        assert_eq!(eng.mode.unwrap().lookahead, 4);
        assert_eq!(eng.window_k, 5);
        assert_eq!(eng.q_low, 0.05);
        assert_eq!(eng.q_risk, 2e-4);
        assert_eq!(eng.annealer.iterations, 33);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn mode_strings_are_strict() {
        assert!("dragonplus".parse::<ModeChoice>().is_err());
        assert_eq!("dragon-plus".parse::<ModeChoice>().unwrap(), ModeChoice::DragonPlus);
        assert!("Dragon".parse::<ModeChoice>().is_err());
    }
}
