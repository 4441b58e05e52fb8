//! Run configuration: `key = value` config files with `[section]` headers,
//! overridden by CLI flags. The master seed is mandatory — there is no
//! wall-clock default.

use predrisk_core::cases::CaseId;
use predrisk_core::fission::HPolicy;
use predrisk_core::oracle::ParamMode;
use predrisk_core::priors::Prior;
use predrisk_core::select::PriorClass;
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}
impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Diagnose,
    RiskCheck,
    Table1,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub cases: Vec<CaseId>,
    pub n_grid: Vec<usize>,
    pub h_policies: Vec<HPolicy>,
    pub reps: usize,
    pub seed: u64,
    pub mode: ParamMode,
    pub out: Option<PathBuf>,
    pub nodes: usize,
    pub rb_nodes: usize,
    pub format: OutFormat,
    pub class: PriorClass,
    pub g0: Prior,
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub max_iter: usize,
    pub tol: f64,
}

/// Raw CLI-provided values (all optional; missing ones fall back to the
/// config file, then to per-command defaults).
#[derive(Debug, Default, Clone)]
pub struct CliOverrides {
    pub config: Option<PathBuf>,
    pub cases: Vec<String>,
    pub n_grid: Vec<usize>,
    pub h_policies: Vec<String>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub out: Option<PathBuf>,
    pub nodes: Option<usize>,
    pub format: Option<String>,
}

type FileMap = BTreeMap<(String, String), String>;

/// Parse the line-oriented `key = value` format with `[section]` headers.
/// Keys outside any section belong to the implicit `run` section; `#` and `;`
/// start comments.
pub fn parse_config_text(text: &str) -> Result<FileMap, ConfigError> {
    let mut out = FileMap::new();
    let mut section = "run".to_string();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError(format!("line {}: unterminated section", lineno + 1)))?;
            section = name.trim().to_ascii_lowercase();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!("line {}: expected `key = value`, got `{line}`", lineno + 1));
        };
        out.insert(
            (section.clone(), key.trim().to_ascii_lowercase()),
            value.trim().to_string(),
        );
    }
    Ok(out)
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| ConfigError(format!("bad {what}: `{s}`"))))
        .collect()
}

fn file_get<'a>(file: &'a FileMap, section: &str, key: &str) -> Option<&'a str> {
    file.get(&(section.to_string(), key.to_string())).map(|s| s.as_str())
}

fn parse_class(file: &FileMap) -> Result<PriorClass, ConfigError> {
    let kind = file_get(file, "class", "kind").unwrap_or("gauss_mix");
    match kind {
        "uniform" => Ok(PriorClass::Uniform),
        "gauss_mix" => {
            let variances = match file_get(file, "class", "variances") {
                Some(v) => parse_list(v, "variance")?,
                None => vec![0.25, 1.0],
            };
            Ok(PriorClass::GaussMix { variances })
        }
        "discrete" => {
            let support = match file_get(file, "class", "support") {
                Some(v) => parse_list(v, "support point")?,
                None => return err("discrete class needs `support`"),
            };
            Ok(PriorClass::Discrete { support })
        }
        "spike_slab_grid" => {
            let (de, dr) = predrisk_core::select::default_spike_slab_grid();
            let etas = match file_get(file, "class", "etas") {
                Some(v) => parse_list(v, "eta")?,
                None => de,
            };
            let rates = match file_get(file, "class", "rates") {
                Some(v) => parse_list(v, "rate")?,
                None => dr,
            };
            Ok(PriorClass::SpikeSlabGrid { etas, rates })
        }
        other => err(format!("unknown class kind `{other}`")),
    }
}

fn parse_g0(file: &FileMap) -> Result<Prior, ConfigError> {
    let kind = file_get(file, "truth", "g0_kind").unwrap_or("gauss_mix");
    match kind {
        "gauss_mix" => {
            let weights = match file_get(file, "truth", "g0_weights") {
                Some(v) => parse_list(v, "weight")?,
                None => vec![0.7, 0.3],
            };
            let variances = match file_get(file, "truth", "g0_variances") {
                Some(v) => parse_list(v, "variance")?,
                None => vec![0.25, 1.0],
            };
            Prior::gauss_mix(weights, variances).map_err(|e| ConfigError(e.to_string()))
        }
        "gaussian" => {
            let tau: f64 = file_get(file, "truth", "g0_tau")
                .unwrap_or("1.0")
                .parse()
                .map_err(|_| ConfigError("bad g0_tau".into()))?;
            Prior::gaussian_scalar(tau).map_err(|e| ConfigError(e.to_string()))
        }
        "discrete" => {
            let weights = match file_get(file, "truth", "g0_weights") {
                Some(v) => parse_list(v, "weight")?,
                None => return err("discrete g0 needs g0_weights"),
            };
            let support = match file_get(file, "truth", "g0_support") {
                Some(v) => parse_list(v, "support point")?,
                None => return err("discrete g0 needs g0_support"),
            };
            Prior::discrete(weights, support).map_err(|e| ConfigError(e.to_string()))
        }
        "spike_slab" => {
            let eta: f64 = file_get(file, "truth", "g0_eta")
                .unwrap_or("0.5")
                .parse()
                .map_err(|_| ConfigError("bad g0_eta".into()))?;
            let rate: f64 = file_get(file, "truth", "g0_rate")
                .unwrap_or("1.0")
                .parse()
                .map_err(|_| ConfigError("bad g0_rate".into()))?;
            Prior::spike_slab(eta, rate).map_err(|e| ConfigError(e.to_string()))
        }
        other => err(format!("unknown g0 kind `{other}`")),
    }
}

impl RunConfig {
    /// Merge CLI overrides over the config file over per-command defaults.
    pub fn resolve(command: Command, cli: &CliOverrides) -> Result<RunConfig, ConfigError> {
        let file: FileMap = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
                parse_config_text(&text)?
            }
            None => FileMap::new(),
        };

        let cases: Vec<CaseId> = if !cli.cases.is_empty() {
            cli.cases
                .iter()
                .map(|s| CaseId::parse(s).map_err(|e| ConfigError(e.to_string())))
                .collect::<Result<_, _>>()?
        } else if let Some(v) = file_get(&file, "run", "case") {
            v.split(',')
                .map(|s| CaseId::parse(s).map_err(|e| ConfigError(e.to_string())))
                .collect::<Result<_, _>>()?
        } else {
            CaseId::ALL.to_vec()
        };

        let n_grid: Vec<usize> = if !cli.n_grid.is_empty() {
            cli.n_grid.clone()
        } else if let Some(v) = file_get(&file, "run", "n_grid") {
            parse_list(v, "n")?
        } else {
            match command {
                Command::Diagnose => vec![50, 100, 250, 500, 1000, 1500, 2000, 2500],
                Command::RiskCheck => vec![100, 400, 1600],
                Command::Table1 => vec![1000],
            }
        };
        if n_grid.is_empty() || n_grid.iter().any(|&n| n == 0) {
            return err("n grid must be nonempty with positive entries");
        }

        let h_policies: Vec<HPolicy> = {
            let raw: Vec<String> = if !cli.h_policies.is_empty() {
                cli.h_policies.clone()
            } else if let Some(v) = file_get(&file, "run", "h_policy") {
                v.split(',').map(|s| s.trim().to_string()).collect()
            } else {
                match command {
                    Command::Table1 => {
                        vec!["1".into(), "logn".into(), "n14".into(), "n12".into()]
                    }
                    _ => vec!["1".into()],
                }
            };
            raw.iter()
                .map(|s| HPolicy::parse(s).map_err(|e| ConfigError(e.to_string())))
                .collect::<Result<_, _>>()?
        };

        let reps = match (cli.reps, file_get(&file, "run", "reps")) {
            (Some(r), _) => r,
            (None, Some(v)) => v.parse().map_err(|_| ConfigError("bad reps".into()))?,
            (None, None) => match command {
                Command::Diagnose => 100,
                Command::RiskCheck => 100,
                Command::Table1 => 50,
            },
        };
        if reps == 0 {
            return err("reps must be positive");
        }

        let seed = match (cli.seed, file_get(&file, "run", "seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.parse().map_err(|_| ConfigError("bad seed".into()))?,
            (None, None) => return err("seed is required (flag --seed or [run] seed)"),
        };

        let mode = {
            let raw = cli
                .mode
                .clone()
                .or_else(|| file_get(&file, "run", "mode").map(str::to_string))
                .unwrap_or_else(|| "known".into());
            match raw.as_str() {
                "known" => ParamMode::Known,
                "estimated" => ParamMode::Estimated,
                other => return err(format!("mode must be known|estimated, got `{other}`")),
            }
        };

        let out = cli
            .out
            .clone()
            .or_else(|| file_get(&file, "run", "out").map(PathBuf::from));

        let nodes = match (cli.nodes, file_get(&file, "run", "nodes")) {
            (Some(n), _) => n,
            (None, Some(v)) => v.parse().map_err(|_| ConfigError("bad nodes".into()))?,
            (None, None) => 61,
        };
        let rb_nodes = match file_get(&file, "run", "rb_nodes") {
            Some(v) => v.parse().map_err(|_| ConfigError("bad rb_nodes".into()))?,
            None => 21,
        };
        if nodes < 3 || rb_nodes < 3 {
            return err("nodes and rb_nodes must be >= 3");
        }

        let format = {
            let raw = cli
                .format
                .clone()
                .or_else(|| file_get(&file, "run", "format").map(str::to_string))
                .unwrap_or_else(|| "csv".into());
            match raw.as_str() {
                "csv" => OutFormat::Csv,
                "json" => OutFormat::Json,
                other => return err(format!("format must be csv|json, got `{other}`")),
            }
        };

        let class = parse_class(&file)?;
        let g0 = parse_g0(&file)?;
        let beta: Vec<f64> = match file_get(&file, "truth", "beta") {
            Some(v) => parse_list(v, "beta entry")?,
            None => vec![],
        };
        let sigma: f64 = match file_get(&file, "truth", "sigma") {
            Some(v) => v.parse().map_err(|_| ConfigError("bad sigma".into()))?,
            None => 1.0,
        };
        if !(sigma > 0.0) {
            return err("sigma must be positive");
        }

        let max_iter = match file_get(&file, "optimizer", "max_iter") {
            Some(v) => v.parse().map_err(|_| ConfigError("bad max_iter".into()))?,
            None => predrisk_core::select::DEFAULT_MAX_ITER,
        };
        let tol: f64 = match file_get(&file, "optimizer", "tol") {
            Some(v) => v.parse().map_err(|_| ConfigError("bad tol".into()))?,
            None => predrisk_core::select::DEFAULT_TOL,
        };

        Ok(RunConfig {
            command,
            cases,
            n_grid,
            h_policies,
            reps,
            seed,
            mode,
            out,
            nodes,
            rb_nodes,
            format,
            class,
            g0,
            beta,
            sigma,
            max_iter,
            tol,
        })
    }
}
