//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers, `#` comments, and comma-separated lists. Unknown
//! sections or keys, duplicate keys, and malformed values are rejected with
//! the offending line number, and `parse` inverts `serialize` exactly. The
//! canonical serialized text also names the run directory through a content
//! hash, so re-running an identical configuration reuses its directory.

use std::fmt::Write as _;
use std::path::PathBuf;

use euler_resnet::data::MoonSpec;
use euler_resnet::layers::NetworkConfig;
use euler_resnet::training::TrainPlan;

/// Which experiment a configuration drives. The serialized `kind` must
/// match the subcommand it is passed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Euler,
    Train,
    Gridsearch,
    NoiseSweep,
    Diagnose,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Euler => "euler",
            Kind::Train => "train",
            Kind::Gridsearch => "gridsearch",
            Kind::NoiseSweep => "noise-sweep",
            Kind::Diagnose => "diagnose",
        }
    }

    fn from_name(name: &str) -> Option<Kind> {
        match name {
            "euler" => Some(Kind::Euler),
            "train" => Some(Kind::Train),
            "gridsearch" => Some(Kind::Gridsearch),
            "noise-sweep" => Some(Kind::NoiseSweep),
            "diagnose" => Some(Kind::Diagnose),
            _ => None,
        }
    }
}

/// Dataset generation and train/test split settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub moons: MoonSpec,
    pub train_fraction: f64,
    pub split_seed: u64,
}

/// Step sizes and horizon for the decay-benchmark integration.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerSection {
    pub t_end: f64,
    pub h_values: Vec<f64>,
}

/// Step-factor grid and trial seeds for accuracy sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct GridsearchSection {
    pub h_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Injected training-noise levels crossed with step factors and seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweepSection {
    pub noise_levels: Vec<f64>,
    pub h_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

/// Diagnostic batch settings: which trunk boundaries to snapshot, where to
/// load parameters from (fresh initialization when empty), and the injected
/// perturbation's per-sample norm and direction seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSection {
    pub blocks: Vec<usize>,
    pub params_file: Option<PathBuf>,
    pub perturbation_norm: f64,
    pub perturbation_seed: u64,
}

/// Full experiment description. Every section is always present and
/// serialized; a command only reads the sections it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub network: NetworkConfig,
    pub data: DataSection,
    pub train: TrainPlan,
    pub euler: EulerSection,
    pub gridsearch: GridsearchSection,
    pub noise_sweep: NoiseSweepSection,
    pub diagnose: DiagnoseSection,
}

impl ExperimentConfig {
    /// Defaults for one experiment kind: a depth-100, width-16 trunk without
    /// batch normalization at h = 0.1 on 1000 two-moon samples, trained for
    /// 200 epochs of minibatch SGD with momentum.
    pub fn default_for(kind: Kind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            network: NetworkConfig {
                depth: 100,
                h: 0.1,
                width: 16,
                use_bn: false,
                num_classes: 2,
                input_dim: 2,
                seed: 1,
                init_scale: 1.0,
            },
            data: DataSection {
                moons: MoonSpec {
                    n_per_class: 500,
                    radius: 1.0,
                    noise_std: 0.15,
                    seed: 2,
                },
                train_fraction: 0.5,
                split_seed: 3,
            },
            train: TrainPlan {
                epochs: 200,
                batch_size: 32,
                lr: 0.01,
                momentum: 0.9,
                seed: 4,
            },
            euler: EulerSection {
                t_end: 3.0,
                h_values: vec![1.0, 0.5, 0.1, 0.01],
            },
            gridsearch: GridsearchSection {
                h_values: vec![0.001, 0.01, 0.1, 0.5, 1.0],
                seeds: vec![1, 2, 3, 4, 5],
            },
            noise_sweep: NoiseSweepSection {
                noise_levels: vec![0.0, 0.1, 0.3],
                h_values: vec![0.1, 1.0],
                seeds: vec![1, 2, 3, 4, 5],
            },
            diagnose: DiagnoseSection {
                blocks: vec![0, 50, 100],
                params_file: None,
                perturbation_norm: 0.1,
                perturbation_seed: 5,
            },
        }
    }

    /// Checks the sections the kind actually uses, leaving inactive sections
    /// unchecked so one file can carry settings for several commands.
    pub fn validate_for_kind(&self) -> Result<(), String> {
        match self.kind {
            Kind::Euler => {
                if !(self.euler.t_end.is_finite() && self.euler.t_end > 0.0) {
                    return Err(format!("euler.t_end must be positive, got {:?}", self.euler.t_end));
                }
                require_list("euler.h_values", &self.euler.h_values)?;
                for &h in &self.euler.h_values {
                    if !(h > 0.0 && h <= self.euler.t_end) {
                        return Err(format!(
                            "euler.h_values entries must lie in (0, t_end], got {h:?} with t_end {:?}",
                            self.euler.t_end
                        ));
                    }
                }
                return Ok(());
            }
            Kind::Train => {}
            Kind::Gridsearch => {
                require_list("gridsearch.h_values", &self.gridsearch.h_values)?;
                positive_steps("gridsearch.h_values", &self.gridsearch.h_values)?;
                require_list("gridsearch.seeds", &self.gridsearch.seeds)?;
            }
            Kind::NoiseSweep => {
                require_list("noise_sweep.noise_levels", &self.noise_sweep.noise_levels)?;
                for &level in &self.noise_sweep.noise_levels {
                    if !(level.is_finite() && level >= 0.0) {
                        return Err(format!("noise_sweep.noise_levels entries must be nonnegative, got {level:?}"));
                    }
                }
                require_list("noise_sweep.h_values", &self.noise_sweep.h_values)?;
                positive_steps("noise_sweep.h_values", &self.noise_sweep.h_values)?;
                require_list("noise_sweep.seeds", &self.noise_sweep.seeds)?;
            }
            Kind::Diagnose => {
                require_list("diagnose.blocks", &self.diagnose.blocks)?;
                for &b in &self.diagnose.blocks {
                    if b > self.network.depth {
                        return Err(format!(
                            "diagnose.blocks entry {b} exceeds network.depth {}",
                            self.network.depth
                        ));
                    }
                }
                let norm = self.diagnose.perturbation_norm;
                if !(norm.is_finite() && norm > 0.0) {
                    return Err(format!("diagnose.perturbation_norm must be positive, got {norm:?}"));
                }
            }
        }
        self.network.validate().map_err(|e| e.to_string())?;
        self.data.moons.validate().map_err(|e| e.to_string())?;
        if !(self.data.train_fraction.is_finite()
            && self.data.train_fraction > 0.0
            && self.data.train_fraction < 1.0)
        {
            return Err(format!(
                "data.train_fraction must lie in (0, 1), got {:?}",
                self.data.train_fraction
            ));
        }
        self.train.validate().map_err(|e| e.to_string())?;
        if self.network.input_dim != 2 {
            return Err(format!(
                "network.input_dim must be 2 for two-moon data, got {}",
                self.network.input_dim
            ));
        }
        if self.network.num_classes < 2 {
            return Err(format!(
                "network.num_classes must be at least 2, got {}",
                self.network.num_classes
            ));
        }
        Ok(())
    }
}

fn require_list<T>(name: &str, values: &[T]) -> Result<(), String> {
    if values.is_empty() {
        return Err(format!("{name} must not be empty"));
    }
    Ok(())
}

fn positive_steps(name: &str, values: &[f64]) -> Result<(), String> {
    for &h in values {
        if !(h.is_finite() && h > 0.0) {
            return Err(format!("{name} entries must be positive, got {h:?}"));
        }
    }
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_f64_list(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
}

fn fmt_u64_list(values: &[u64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn fmt_usize_list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

/// Renders the canonical form: every section in fixed order, every key on
/// its own line, lists comma-separated, one blank line between sections,
/// and a trailing newline. `parse` returns the same configuration.
pub fn serialize(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[experiment]");
    let _ = writeln!(s, "kind = {}", cfg.kind.name());
    let _ = writeln!(s);
    let _ = writeln!(s, "[network]");
    let _ = writeln!(s, "depth = {}", cfg.network.depth);
    let _ = writeln!(s, "h = {}", fmt_f64(cfg.network.h));
    let _ = writeln!(s, "width = {}", cfg.network.width);
    let _ = writeln!(s, "use_bn = {}", cfg.network.use_bn);
    let _ = writeln!(s, "num_classes = {}", cfg.network.num_classes);
    let _ = writeln!(s, "input_dim = {}", cfg.network.input_dim);
    let _ = writeln!(s, "seed = {}", cfg.network.seed);
    let _ = writeln!(s, "init_scale = {}", fmt_f64(cfg.network.init_scale));
    let _ = writeln!(s);
    let _ = writeln!(s, "[data]");
    let _ = writeln!(s, "n_per_class = {}", cfg.data.moons.n_per_class);
    let _ = writeln!(s, "radius = {}", fmt_f64(cfg.data.moons.radius));
    let _ = writeln!(s, "noise_std = {}", fmt_f64(cfg.data.moons.noise_std));
    let _ = writeln!(s, "seed = {}", cfg.data.moons.seed);
    let _ = writeln!(s, "train_fraction = {}", fmt_f64(cfg.data.train_fraction));
    let _ = writeln!(s, "split_seed = {}", cfg.data.split_seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "[train]");
    let _ = writeln!(s, "epochs = {}", cfg.train.epochs);
    let _ = writeln!(s, "batch_size = {}", cfg.train.batch_size);
    let _ = writeln!(s, "lr = {}", fmt_f64(cfg.train.lr));
    let _ = writeln!(s, "momentum = {}", fmt_f64(cfg.train.momentum));
    let _ = writeln!(s, "seed = {}", cfg.train.seed);
    let _ = writeln!(s);
    let _ = writeln!(s, "[euler]");
    let _ = writeln!(s, "t_end = {}", fmt_f64(cfg.euler.t_end));
    let _ = writeln!(s, "h_values = {}", fmt_f64_list(&cfg.euler.h_values));
    let _ = writeln!(s);
    let _ = writeln!(s, "[gridsearch]");
    let _ = writeln!(s, "h_values = {}", fmt_f64_list(&cfg.gridsearch.h_values));
    let _ = writeln!(s, "seeds = {}", fmt_u64_list(&cfg.gridsearch.seeds));
    let _ = writeln!(s);
    let _ = writeln!(s, "[noise_sweep]");
    let _ = writeln!(s, "noise_levels = {}", fmt_f64_list(&cfg.noise_sweep.noise_levels));
    let _ = writeln!(s, "h_values = {}", fmt_f64_list(&cfg.noise_sweep.h_values));
    let _ = writeln!(s, "seeds = {}", fmt_u64_list(&cfg.noise_sweep.seeds));
    let _ = writeln!(s);
    let _ = writeln!(s, "[diagnose]");
    let _ = writeln!(s, "blocks = {}", fmt_usize_list(&cfg.diagnose.blocks));
    let _ = writeln!(
        s,
        "params_file = {}",
        cfg.diagnose
            .params_file
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    let _ = writeln!(s, "perturbation_norm = {}", fmt_f64(cfg.diagnose.perturbation_norm));
    let _ = writeln!(s, "perturbation_seed = {}", cfg.diagnose.perturbation_seed);
    s
}

struct Parser<'a> {
    cfg: ExperimentConfig,
    explicit_kind: Option<Kind>,
    seen: Vec<(&'a str, String)>,
}

impl<'a> Parser<'a> {
    fn assign(&mut self, section: &'a str, key: &str, value: &str, line: usize) -> Result<(), String> {
        let slot = (section, key.to_string());
        if self.seen.contains(&slot) {
            return Err(format!("line {line}: duplicate key {key:?} in section [{section}]"));
        }
        self.seen.push(slot);
        let cfg = &mut self.cfg;
        match (section, key) {
            ("experiment", "kind") => {
                let kind = Kind::from_name(value)
                    .ok_or_else(|| format!("line {line}: unknown experiment kind {value:?}"))?;
                self.explicit_kind = Some(kind);
                cfg.kind = kind;
            }
            ("network", "depth") => cfg.network.depth = parse_usize(value, line)?,
            ("network", "h") => cfg.network.h = parse_f64(value, line)?,
            ("network", "width") => cfg.network.width = parse_usize(value, line)?,
            ("network", "use_bn") => cfg.network.use_bn = parse_bool(value, line)?,
            ("network", "num_classes") => cfg.network.num_classes = parse_usize(value, line)?,
            ("network", "input_dim") => cfg.network.input_dim = parse_usize(value, line)?,
            ("network", "seed") => cfg.network.seed = parse_u64(value, line)?,
            ("network", "init_scale") => cfg.network.init_scale = parse_f64(value, line)?,
            ("data", "n_per_class") => cfg.data.moons.n_per_class = parse_usize(value, line)?,
            ("data", "radius") => cfg.data.moons.radius = parse_f64(value, line)?,
            ("data", "noise_std") => cfg.data.moons.noise_std = parse_f64(value, line)?,
            ("data", "seed") => cfg.data.moons.seed = parse_u64(value, line)?,
            ("data", "train_fraction") => cfg.data.train_fraction = parse_f64(value, line)?,
            ("data", "split_seed") => cfg.data.split_seed = parse_u64(value, line)?,
            ("train", "epochs") => cfg.train.epochs = parse_usize(value, line)?,
            ("train", "batch_size") => cfg.train.batch_size = parse_usize(value, line)?,
            ("train", "lr") => cfg.train.lr = parse_f64(value, line)?,
            ("train", "momentum") => cfg.train.momentum = parse_f64(value, line)?,
            ("train", "seed") => cfg.train.seed = parse_u64(value, line)?,
            ("euler", "t_end") => cfg.euler.t_end = parse_f64(value, line)?,
            ("euler", "h_values") => cfg.euler.h_values = parse_f64_list(value, line)?,
            ("gridsearch", "h_values") => cfg.gridsearch.h_values = parse_f64_list(value, line)?,
            ("gridsearch", "seeds") => cfg.gridsearch.seeds = parse_u64_list(value, line)?,
            ("noise_sweep", "noise_levels") => cfg.noise_sweep.noise_levels = parse_f64_list(value, line)?,
            ("noise_sweep", "h_values") => cfg.noise_sweep.h_values = parse_f64_list(value, line)?,
            ("noise_sweep", "seeds") => cfg.noise_sweep.seeds = parse_u64_list(value, line)?,
            ("diagnose", "blocks") => cfg.diagnose.blocks = parse_usize_list(value, line)?,
            ("diagnose", "params_file") => {
                cfg.diagnose.params_file =
                    if value.is_empty() { None } else { Some(PathBuf::from(value)) };
            }
            ("diagnose", "perturbation_norm") => cfg.diagnose.perturbation_norm = parse_f64(value, line)?,
            ("diagnose", "perturbation_seed") => cfg.diagnose.perturbation_seed = parse_u64(value, line)?,
            _ => return Err(format!("line {line}: unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }
}

const SECTIONS: [&str; 8] = [
    "experiment",
    "network",
    "data",
    "train",
    "euler",
    "gridsearch",
    "noise_sweep",
    "diagnose",
];

/// Parses configuration text. Missing keys keep the defaults of
/// `default_for(fallback_kind)`; an explicit `kind` line must match
/// `fallback_kind`, keeping a file from silently driving the wrong command.
pub fn parse_for(text: &str, fallback_kind: Kind) -> Result<ExperimentConfig, String> {
    let mut parser = Parser {
        cfg: ExperimentConfig::default_for(fallback_kind),
        explicit_kind: None,
        seen: Vec::new(),
    };
    let mut section: Option<&str> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {line}: unterminated section header {content:?}"))?
                .trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|s| **s == name)
                    .copied()
                    .ok_or_else(|| format!("line {line}: unknown section [{name}]"))?,
            );
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| format!("line {line}: expected `key = value`, got {content:?}"))?;
        let section =
            section.ok_or_else(|| format!("line {line}: key outside of any [section]"))?;
        parser.assign(section, key.trim(), value.trim(), line)?;
    }
    if let Some(kind) = parser.explicit_kind {
        if kind != fallback_kind {
            return Err(format!(
                "config kind is {:?} but the {:?} command was invoked",
                kind.name(),
                fallback_kind.name()
            ));
        }
    }
    Ok(parser.cfg)
}

fn parse_f64(value: &str, line: usize) -> Result<f64, String> {
    let x: f64 = value
        .parse()
        .map_err(|_| format!("line {line}: expected a number, got {value:?}"))?;
    if !x.is_finite() {
        return Err(format!("line {line}: number must be finite, got {value:?}"));
    }
    Ok(x)
}

fn parse_u64(value: &str, line: usize) -> Result<u64, String> {
    value
        .parse()
        .map_err(|_| format!("line {line}: expected an unsigned integer, got {value:?}"))
}

fn parse_usize(value: &str, line: usize) -> Result<usize, String> {
    value
        .parse()
        .map_err(|_| format!("line {line}: expected an unsigned integer, got {value:?}"))
}

fn parse_bool(value: &str, line: usize) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("line {line}: expected true or false, got {value:?}")),
    }
}

fn parse_list<T>(
    value: &str,
    line: usize,
    item: fn(&str, usize) -> Result<T, String>,
) -> Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| item(part.trim(), line)).collect()
}

fn parse_f64_list(value: &str, line: usize) -> Result<Vec<f64>, String> {
    parse_list(value, line, parse_f64)
}

fn parse_u64_list(value: &str, line: usize) -> Result<Vec<u64>, String> {
    parse_list(value, line, parse_u64)
}

fn parse_usize_list(value: &str, line: usize) -> Result<Vec<usize>, String> {
    parse_list(value, line, parse_usize)
}

/// FNV-1a over the canonical serialized text.
fn content_hash(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// `<kind>-<16 hex digits>`: stable across runs, distinct for any change to
/// the effective configuration (overrides included).
pub fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!("{}-{:016x}", cfg.kind.name(), content_hash(&serialize(cfg)))
}
