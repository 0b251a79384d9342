//! Experiment configuration: a `key = value` file (TOML syntax) merged with
//! command-line flags, per-kind defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use slowfast_core::problems::NAMES;
use slowfast_core::validation::DEFAULT_SEED;
use toml::{Table, Value};

pub const OUT_ENV: &str = "SLOWFAST_OUT";
pub const DEFAULT_OUT: &str = "slowfast-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Sample,
    Simulate,
    Frozen,
    Bbar,
    StrongRate,
    WeakRate,
    Poisson,
    Oracle,
    Validate,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Sample => "sample",
            Kind::Simulate => "simulate",
            Kind::Frozen => "frozen",
            Kind::Bbar => "bbar",
            Kind::StrongRate => "strong-rate",
            Kind::WeakRate => "weak-rate",
            Kind::Poisson => "poisson",
            Kind::Oracle => "oracle",
            Kind::Validate => "validate",
        }
    }

    /// Keys with a default value for this kind.
    fn defaults(self) -> Vec<(&'static str, Value)> {
        let dyadic = |from: i32, to: i32| {
            Value::Array((from..=to).map(|k| Value::Float(2f64.powi(-k))).collect())
        };
        let s = |v: &str| Value::String(v.to_string());
        let f = Value::Float;
        let i = Value::Integer;
        match self {
            Kind::Sample => vec![("dim", i(1)), ("dt", f(1.0)), ("n_paths", i(100_000))],
            Kind::Simulate => vec![
                ("problem", s("linear")),
                ("eps", f(0.0625)),
                ("horizon", f(1.0)),
                ("h_rule", s("eps/50")),
                ("x", f(0.0)),
                ("y", f(0.0)),
            ],
            Kind::Frozen => vec![
                ("problem", s("linear")),
                ("x", f(0.0)),
                ("y", f(0.0)),
                ("horizon", f(10.0)),
                ("dt", f(0.01)),
            ],
            Kind::Bbar => vec![
                ("problem", s("bounded")),
                ("x_min", f(-3.0)),
                ("x_max", f(3.0)),
                ("n_x", i(13)),
                ("horizon", f(50.0)),
                ("burn_in", f(10.0)),
                ("dt", f(0.01)),
                ("n_reps", i(100)),
            ],
            Kind::StrongRate => vec![
                ("problem", s("linear")),
                ("eps_list", dyadic(3, 6)),
                ("horizon", f(1.0)),
                ("n_paths", i(1000)),
                ("p", f(1.0)),
                ("h_rule", s("eps/50")),
                ("n_bootstrap", i(1000)),
            ],
            Kind::WeakRate => vec![
                ("problem", s("bounded")),
                ("eps_list", dyadic(2, 5)),
                ("horizon", f(1.0)),
                ("n_paths", i(1000)),
                ("h_rule", s("eps/50")),
                ("n_bootstrap", i(1000)),
                ("phi", s("cos")),
            ],
            Kind::Poisson => vec![
                ("problem", s("example")),
                ("x", f(0.0)),
                ("y_list", Value::Array([0.0, 1.0, 2.0, 4.0, 8.0].map(f).to_vec())),
                ("tol", f(0.01)),
                ("n_paths", i(2000)),
            ],
            Kind::Oracle => vec![
                ("eps_list", dyadic(2, 6)),
                ("horizon", f(1.0)),
                ("n_paths", i(10_000)),
                ("p", f(1.0)),
                ("h_rule", s("eps/20")),
                ("n_bootstrap", i(1000)),
            ],
            Kind::Validate => vec![("quick", Value::Boolean(false))],
        }
    }

    /// Keys accepted without a default.
    fn optional(self) -> &'static [&'static str] {
        match self {
            Kind::Poisson => &["dt"],
            _ => &[],
        }
    }

    fn needs_alpha(self) -> bool {
        self != Kind::Validate
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every configuration key. Used for both the file (unknown keys are
/// rejected) and the flags (`--n-paths` sets `n_paths`).
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Stability index, in (1, 2).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Named test problem: linear, example, bounded or coupled.
    #[arg(long)]
    pub problem: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Strictly decreasing, comma separated on the command line.
    #[arg(long, value_delimiter = ',')]
    pub eps_list: Option<Vec<f64>>,
    /// Time horizon (evaluation time for weak errors and the oracle).
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub n_paths: Option<usize>,
    /// Strong error exponent, in [1, alpha).
    #[arg(long)]
    pub p: Option<f64>,
    /// Fast step rule `eps/N`.
    #[arg(long)]
    pub h_rule: Option<String>,
    #[arg(long)]
    pub n_bootstrap: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub x: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub y: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub y_list: Option<Vec<f64>>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<f64>,
    #[arg(long)]
    pub n_reps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub x_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub n_x: Option<usize>,
    /// Weak-error test function: cos, sin or atan.
    #[arg(long)]
    pub phi: Option<String>,
    #[arg(long = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Validate at the reduced scale.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub quick: Option<bool>,
}

const COMMON: [&str; 3] = ["seed", "output_dir", "workers"];

pub const WEAK_TEST_FUNCTIONS: [&str; 3] = ["cos", "sin", "atan"];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Fully resolved configuration of one experiment.
#[derive(Debug, Clone)]
pub struct Config {
    pub kind: Kind,
    pub params: Params,
    /// Resolved keys, as echoed in the summary.
    pub table: Table,
    pub output_dir: PathBuf,
}

impl Config {
    pub fn seed(&self) -> u64 {
        self.params.seed.unwrap_or(DEFAULT_SEED)
    }

    /// `N` of the resolved `h_rule = eps/N`.
    pub fn steps_per_eps(&self) -> usize {
        parse_h_rule(self.params.h_rule.as_deref().unwrap_or("eps/50")).unwrap_or(50)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.table).expect("toml tables serialise")
    }
}

/// Where a key's value came from, for diagnostics.
struct Source<'a> {
    file: Option<(&'a Path, &'a str)>,
    flags: Table,
}

impl Source<'_> {
    fn locate(&self, key: &str) -> String {
        if self.flags.contains_key(key) {
            return format!("flag --{}", flag_name(key));
        }
        if let Some((path, text)) = self.file {
            if let Some(n) = line_of(text, key) {
                return format!("{}:{n}", path.display());
            }
        }
        "defaults".to_string()
    }

    fn error(&self, key: &str, msg: impl fmt::Display) -> ConfigError {
        ConfigError(format!("{}: key `{key}`: {msg}", self.locate(key)))
    }
}

fn flag_name(key: &str) -> String {
    match key {
        "output_dir" => "out".into(),
        k => k.replace('_', "-"),
    }
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

pub fn parse_h_rule(rule: &str) -> Option<usize> {
    let n = rule.replace(' ', "");
    n.strip_prefix("eps/")?.parse().ok().filter(|&n| n > 0)
}

/// Reads `file` (when given), applies `flags` over it, fills the kind's
/// defaults and validates the result.
pub fn parse_config(kind: Kind, file: Option<&Path>, flags: &Params) -> Result<Config, ConfigError> {
    let text = match file {
        Some(p) => {
            Some(std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut table = match (&text, file) {
        (Some(t), Some(p)) => {
            let table: Table = toml::from_str(t).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            // Typed pass for unknown keys and value types, with positions.
            toml::from_str::<Params>(t).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
            table
        }
        _ => Table::new(),
    };
    let flag_table = Table::try_from(flags).expect("flags serialise");
    let src = Source {
        file: file.zip(text.as_deref()),
        flags: flag_table.clone(),
    };
    table.extend(flag_table);

    let defaults = kind.defaults();
    for key in table.keys() {
        let applies = COMMON.contains(&key.as_str())
            || (key == "alpha" && kind.needs_alpha())
            || defaults.iter().any(|(k, _)| k == key)
            || kind.optional().contains(&key.as_str());
        if !applies {
            return Err(src.error(key, format!("does not apply to `{kind}`")));
        }
    }
    if kind.needs_alpha() && !table.contains_key("alpha") {
        return Err(ConfigError(format!("missing required key `alpha` for `{kind}`")));
    }
    for (k, v) in defaults {
        table.entry(k).or_insert(v);
    }
    table.entry("seed").or_insert(Value::Integer(DEFAULT_SEED as i64));

    let mut params: Params = table
        .clone()
        .try_into()
        .map_err(|e| ConfigError(format!("invalid configuration: {e}")))?;
    validate(&params, &src)?;

    let output_dir = params
        .output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    params.output_dir = Some(output_dir.clone());
    table.insert("output_dir".into(), Value::String(output_dir.display().to_string()));
    Ok(Config {
        kind,
        params,
        table,
        output_dir,
    })
}

fn validate(p: &Params, src: &Source) -> Result<(), ConfigError> {
    let positive = |key: &str, v: Option<f64>| match v {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(src.error(key, format!("{v} must be positive"))),
        _ => Ok(()),
    };
    let count = |key: &str, v: Option<usize>, min: usize| match v {
        Some(v) if v < min => Err(src.error(key, format!("{v} is below the minimum {min}"))),
        _ => Ok(()),
    };
    if let Some(a) = p.alpha {
        if !(a > 1.0 && a < 2.0) {
            return Err(src.error("alpha", format!("{a} is outside (1, 2)")));
        }
    }
    if let (Some(p), Some(a)) = (p.p, p.alpha) {
        if !(p >= 1.0 && p < a) {
            return Err(src.error("p", format!("{p} is outside [1, alpha = {a})")));
        }
    }
    positive("eps", p.eps)?;
    positive("horizon", p.horizon)?;
    positive("tol", p.tol)?;
    positive("dt", p.dt)?;
    count("n_paths", p.n_paths, 2)?;
    count("n_bootstrap", p.n_bootstrap, 1)?;
    count("n_reps", p.n_reps, 2)?;
    count("n_x", p.n_x, 2)?;
    count("dim", p.dim, 1)?;
    count("workers", p.workers, 1)?;
    if let Some(b) = p.burn_in {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(src.error("burn_in", format!("{b} must be non-negative")));
        }
    }
    if let Some(list) = &p.eps_list {
        if list.len() < 4 {
            return Err(src.error("eps_list", "needs at least four values"));
        }
        if list.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(src.error("eps_list", "values must be positive"));
        }
        if list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(src.error("eps_list", "must be strictly decreasing"));
        }
    }
    if let Some(ys) = &p.y_list {
        if ys.is_empty() || ys.iter().any(|y| !y.is_finite()) {
            return Err(src.error("y_list", "needs at least one finite value"));
        }
    }
    if let (Some(lo), Some(hi)) = (p.x_min, p.x_max) {
        if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
            return Err(src.error("x_max", format!("{hi} must exceed x_min = {lo}")));
        }
    }
    if let Some(rule) = &p.h_rule {
        if parse_h_rule(rule).is_none() {
            return Err(src.error("h_rule", format!("{rule:?} is not of the form eps/N")));
        }
    }
    if let Some(name) = &p.problem {
        if !NAMES.contains(&name.as_str()) {
            return Err(src.error("problem", format!("{name:?} is not one of {}", NAMES.join(", "))));
        }
    }
    if let Some(phi) = &p.phi {
        if !WEAK_TEST_FUNCTIONS.contains(&phi.as_str()) {
            return Err(src.error(
                "phi",
                format!("{phi:?} is not one of {}", WEAK_TEST_FUNCTIONS.join(", ")),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_rule_forms() {
        assert_eq!(parse_h_rule("eps/50"), Some(50));
        assert_eq!(parse_h_rule("eps / 20"), Some(20));
        assert_eq!(parse_h_rule("eps/0"), None);
        assert_eq!(parse_h_rule("0.01"), None);
    }

    #[test]
    fn line_lookup() {
        let text = "# c\nalpha = 1.5\n  n_paths=10\nn_paths_x = 3\n";
        assert_eq!(line_of(text, "alpha"), Some(2));
        assert_eq!(line_of(text, "n_paths"), Some(3));
        assert_eq!(line_of(text, "p"), None);
    }

    #[test]
    fn flags_override_defaults() {
        let flags = Params {
            alpha: Some(1.5),
            n_paths: Some(10),
            ..Default::default()
        };
        let c = parse_config(Kind::StrongRate, None, &flags).unwrap();
        assert_eq!(c.params.n_paths, Some(10));
        assert_eq!(c.params.n_bootstrap, Some(1000));
        assert_eq!(c.steps_per_eps(), 50);
        assert_eq!(c.seed(), DEFAULT_SEED);
    }

    #[test]
    fn inapplicable_key_names_flag() {
        let flags = Params {
            alpha: Some(1.5),
            p: Some(1.2),
            ..Default::default()
        };
        let e = parse_config(Kind::WeakRate, None, &flags).unwrap_err();
        assert!(e.0.contains("--p") && e.0.contains("weak-rate"), "{e}");
    }

    #[test]
    fn p_must_stay_below_alpha() {
        let flags = Params {
            alpha: Some(1.3),
            p: Some(1.3),
            ..Default::default()
        };
        assert!(parse_config(Kind::StrongRate, None, &flags).is_err());
    }

    #[test]
    fn validate_needs_no_alpha() {
        let c = parse_config(Kind::Validate, None, &Params::default()).unwrap();
        assert_eq!(c.params.quick, Some(false));
    }
}
