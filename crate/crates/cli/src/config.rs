//! Experiment configuration: flat key-value sections parsed from TOML,
//! semantic validation, and the problem fingerprint used to match runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Whole configuration file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub grid: GridSection,
    pub media: MediaSection,
    pub gpc: GpcSection,
    pub dybo: DyboSection,
    /// Required when `dybo.space = "coarse"`.
    pub online: Option<OnlineSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_coarse: usize,
    pub n_fine_per_coarse: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaSection {
    /// Mean-field spec: `constant <v>` | `channels <background> <contrast>
    /// <n_channels>` | `raster <path> <scale>`.
    pub abar: String,
    /// Seed for synthetic mean-field generation.
    pub seed: u64,
    /// One spec per random variable: `trig <amplitude> <P> <eps> <variant>`
    /// or `constant <v>`; numeric tokens accept fractions like `1/7`.
    pub fluctuations: Vec<String>,
    /// Deterministic source term; defaults to `constant 1`.
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "constant 1".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpcSection {
    pub r: usize,
    pub p: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DyboSection {
    pub m: usize,
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    /// `coarse` runs the multiscale method; `fine` runs the same scheme
    /// directly on the fine grid (the reference method).
    #[serde(default = "default_space")]
    pub space: String,
    #[serde(default = "default_recast_stride")]
    pub recast_stride: usize,
    /// Mean initial field spec, e.g. `cosine 32 1`.
    pub ic_mean: String,
    /// One spec per mode; the length fixes consistency with `m`.
    pub ic_modes: Vec<String>,
}

fn default_space() -> String {
    "coarse".to_string()
}

fn default_recast_stride() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub l_per_node: usize,
    pub theta: f64,
    #[serde(default)]
    pub tol_abs: f64,
    pub max_rounds: usize,
    /// `reset` drops online columns every step; `keep` accumulates them.
    #[serde(default = "default_window")]
    pub window: String,
    /// Solve the fine systems alongside for energy-error diagnostics.
    #[serde(default)]
    pub fine_check: bool,
    /// Optional offline-space cache produced by `cache-offline`.
    #[serde(default)]
    pub offline_cache: String,
}

fn default_true() -> bool {
    true
}

fn default_window() -> String {
    "reset".to_string()
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Times at which error rows are recorded; each must land on a step.
    #[serde(default)]
    pub record_times: Vec<f64>,
    /// Error reference: `fine` (fine-grid run of the same scheme), `gpc`
    /// (coupled stochastic Galerkin oracle), or `none`.
    #[serde(default = "default_reference")]
    pub reference: String,
    #[serde(default)]
    pub export_fields: bool,
}

fn default_reference() -> String {
    "fine".to_string()
}

/// Parses a numeric token, accepting plain decimals and `a/b` fractions.
pub fn parse_num(token: &str, what: &str) -> Result<f64, CliError> {
    let parse = |t: &str| -> Result<f64, CliError> {
        t.parse::<f64>()
            .map_err(|_| CliError::Config(format!("{what}: `{t}` is not a number")))
    };
    let v = match token.split_once('/') {
        Some((a, b)) => {
            let den = parse(b)?;
            if den == 0.0 {
                return Err(CliError::Config(format!("{what}: division by zero in `{token}`")));
            }
            parse(a)? / den
        }
        None => parse(token)?,
    };
    if !v.is_finite() {
        return Err(CliError::Config(format!("{what}: `{token}` is not finite")));
    }
    Ok(v)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k.min(n));
    let mut out = 1usize;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

/// Chaos basis size excluding the constant, `C(r+p, r) − 1`.
pub fn n_p(r: usize, p: usize) -> usize {
    binomial(r + p, r).saturating_sub(1)
}

pub fn load(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg: Config = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn validate(cfg: &Config) -> Result<(), CliError> {
    let fail = |msg: String| Err(CliError::Config(msg));
    if cfg.grid.n_coarse < 2 || cfg.grid.n_fine_per_coarse < 2 {
        return fail(format!(
            "grid: n_coarse and n_fine_per_coarse must be at least 2, got {} and {}",
            cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse
        ));
    }
    if cfg.gpc.r == 0 || cfg.gpc.p == 0 {
        return fail("gpc: r and p must be at least 1".into());
    }
    if cfg.media.fluctuations.len() != cfg.gpc.r {
        return fail(format!(
            "media: {} fluctuation specs for r = {}",
            cfg.media.fluctuations.len(),
            cfg.gpc.r
        ));
    }
    let d = &cfg.dybo;
    if d.m == 0 {
        return fail("dybo: m must be at least 1".into());
    }
    let np = n_p(cfg.gpc.r, cfg.gpc.p);
    if d.m > np {
        return fail(format!("dybo: m = {} exceeds the chaos basis size N_p = {np}", d.m));
    }
    if d.ic_modes.len() != d.m {
        return fail(format!(
            "dybo: {} ic_modes entries for m = {}",
            d.ic_modes.len(),
            d.m
        ));
    }
    if !(d.dt > 0.0 && d.dt.is_finite()) {
        return fail(format!("dybo: dt must be positive, got {}", d.dt));
    }
    if !(d.t_end > 0.0 && d.t_end.is_finite()) {
        return fail(format!("dybo: T must be positive, got {}", d.t_end));
    }
    if step_of(d.t_end, d.dt).is_none() {
        return fail(format!("dybo: T = {} is not a multiple of dt = {}", d.t_end, d.dt));
    }
    match d.space.as_str() {
        "coarse" | "fine" => {}
        other => return fail(format!("dybo: space must be `coarse` or `fine`, got `{other}`")),
    }
    if d.space == "coarse" {
        let Some(online) = &cfg.online else {
            return fail("online: section required for a coarse-space run".into());
        };
        if online.l_per_node == 0 {
            return fail("online: l_per_node must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&online.theta) {
            return fail(format!("online: theta must lie in [0, 1], got {}", online.theta));
        }
        if online.tol_abs < 0.0 {
            return fail(format!("online: tol_abs must be nonnegative, got {}", online.tol_abs));
        }
        match online.window.as_str() {
            "reset" | "keep" => {}
            other => return fail(format!("online: window must be `reset` or `keep`, got `{other}`")),
        }
    }
    for &t in &cfg.output.record_times {
        if !(t > 0.0 && t <= d.t_end + 1e-12) {
            return fail(format!("output: record time {t} outside (0, T]"));
        }
        if step_of(t, d.dt).is_none() {
            return fail(format!("output: record time {t} does not land on a step of dt = {}", d.dt));
        }
    }
    match cfg.output.reference.as_str() {
        "fine" | "gpc" | "none" => {}
        other => return fail(format!("output: reference must be `fine`, `gpc`, or `none`, got `{other}`")),
    }
    Ok(())
}

/// Step index of time `t` on the grid `k·dt`, if `t` lands on one.
pub fn step_of(t: f64, dt: f64) -> Option<usize> {
    let k = (t / dt).round();
    if k >= 0.5 && (k * dt - t).abs() <= 1e-9 * t.abs().max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

/// Canonical description of the problem being solved: everything that must
/// match between a run and its reference (grids, media, chaos space, time
/// grid, initial data), excluding method choices like the space or the
/// enrichment policy.
pub fn problem_fingerprint(cfg: &Config) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "grid {} {}", cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse);
    let _ = writeln!(s, "abar {} seed {}", cfg.media.abar.split_whitespace().collect::<Vec<_>>().join(" "), cfg.media.seed);
    for f in &cfg.media.fluctuations {
        let _ = writeln!(s, "fluct {}", f.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    let _ = writeln!(s, "source {}", cfg.media.source.split_whitespace().collect::<Vec<_>>().join(" "));
    let _ = writeln!(s, "gpc {} {}", cfg.gpc.r, cfg.gpc.p);
    let _ = writeln!(s, "time {:e} {:e}", cfg.dybo.dt, cfg.dybo.t_end);
    let _ = writeln!(s, "m {}", cfg.dybo.m);
    let _ = writeln!(s, "ic {}", cfg.dybo.ic_mean.split_whitespace().collect::<Vec<_>>().join(" "));
    for f in &cfg.dybo.ic_modes {
        let _ = writeln!(s, "ic {}", f.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    s
}

/// Hex SHA-256 of the problem fingerprint.
pub fn problem_hash(cfg: &Config) -> String {
    let mut h = Sha256::new();
    h.update(problem_fingerprint(cfg).as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> String {
        r#"
[grid]
n_coarse = 4
n_fine_per_coarse = 4

[media]
abar = "constant 1"
seed = 7
fluctuations = ["trig 0.1 1.5 1/7 axis-cos"]

[gpc]
r = 1
p = 2

[dybo]
m = 2
dt = 0.01
T = 0.1
ic_mean = "cosine 32 1"
ic_modes = ["cosine 24 1", "cosine 16 2"]

[online]
l_per_node = 3
theta = 0.05
max_rounds = 4

[output]
record_times = [0.05, 0.1]
"#
        .to_string()
    }

    fn parse(text: &str) -> Result<Config, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        validate(&cfg)?;
        Ok(cfg)
    }

    #[test]
    fn sample_config_parses_with_defaults() {
        let cfg = parse(&sample()).unwrap();
        assert_eq!(cfg.dybo.space, "coarse");
        assert_eq!(cfg.dybo.recast_stride, 20);
        assert_eq!(cfg.online.as_ref().unwrap().window, "reset");
        assert!(cfg.online.as_ref().unwrap().enabled);
        assert_eq!(cfg.output.reference, "fine");
        assert_eq!(cfg.media.source, "constant 1");
    }

    #[test]
    fn zero_modes_is_rejected() {
        let text = sample().replace("m = 2", "m = 0");
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, CliError::Config(msg) if msg.contains("m must be")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = sample().replace("n_coarse = 4", "n_coarse = 4\nn_corase = 4");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn misaligned_record_time_is_rejected() {
        let text = sample().replace("record_times = [0.05, 0.1]", "record_times = [0.055]");
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, CliError::Config(msg) if msg.contains("does not land on a step")));
    }

    #[test]
    fn mode_count_must_match_ic_list() {
        let text = sample().replace("m = 2", "m = 1");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn fingerprint_ignores_method_choices() {
        let a = parse(&sample()).unwrap();
        let text = sample()
            .replace("l_per_node = 3", "l_per_node = 4")
            .replace("theta = 0.05", "theta = 0.5");
        let b = parse(&text).unwrap();
        assert_eq!(problem_hash(&a), problem_hash(&b));
        let text = sample().replace("dt = 0.01", "dt = 0.005");
        let c = parse(&text).unwrap();
        assert_ne!(problem_hash(&a), problem_hash(&c));
    }

    #[test]
    fn fraction_tokens_parse() {
        assert_eq!(parse_num("1/8", "t").unwrap(), 0.125);
        assert!(parse_num("1/0", "t").is_err());
        assert!(parse_num("abc", "t").is_err());
    }

    #[test]
    fn step_grid_matching() {
        assert_eq!(step_of(0.1, 1e-3), Some(100));
        assert_eq!(step_of(0.125, 0.0125), Some(10));
        assert_eq!(step_of(0.0555, 1e-2), None);
    }
}
