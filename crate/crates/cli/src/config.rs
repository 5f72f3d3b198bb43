//! Plain-text run configuration: `[section]` headers followed by `key = value` lines.
//!
//! Blank lines and `#` comments are kept so that a parsed file serializes back to the same
//! content up to whitespace.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn global(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
enum Line {
    Blank,
    Comment(String),
    Section(String),
    Entry { key: String, value: String },
}

/// Line-preserving document; entries carry their 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    lines: Vec<(usize, Line)>,
}

const SECTIONS: [(&str, &[&str]); 6] = [
    ("data", &["n", "p", "rho", "snr", "seed", "beta_star", "input"]),
    (
        "path",
        &[
            "lambda_min",
            "lambda_max",
            "grid_points",
            "samples",
            "burn_in",
            "cv_folds",
            "threads",
            "n_test",
            "complexity_mode",
            "box_half_width",
        ],
    ),
    ("sampler", &["step_scale", "eps_feas", "oracle_eps", "oracle_m", "oracle_policy", "reverse", "reverse_check"]),
    ("output", &["directory", "emit_samples"]),
    ("bench", &["n_sweep", "n_sweep_p", "p_sweep", "p_sweep_n", "k", "steps_per_cell", "warmup"]),
    (
        "study",
        &[
            "studies",
            "slope_ns",
            "slope_p",
            "slope_beta_star",
            "slope_replicates",
            "slope_box_half_width",
            "slope_lambda_factor",
            "eps_list",
            "tolerance_dim",
            "tolerance_samples",
            "tolerance_step",
            "bias_draws",
            "bias_bandwidth",
        ],
    ),
];

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut lines = Vec::new();
        let mut section: Option<&'static [&'static str]> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let t = raw.trim();
            let line = if t.is_empty() {
                Line::Blank
            } else if let Some(c) = t.strip_prefix('#') {
                Line::Comment(c.trim().to_string())
            } else if let Some(rest) = t.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::at(no, "unterminated section header"))?.trim();
                let keys = SECTIONS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| ConfigError::at(no, format!("unknown section `{name}`")))?
                    .1;
                if lines.iter().any(|(_, l)| matches!(l, Line::Section(s) if s == name)) {
                    return Err(ConfigError::at(no, format!("duplicate section `{name}`")));
                }
                section = Some(keys);
                current = name.to_string();
                Line::Section(name.to_string())
            } else {
                let (k, v) = t.split_once('=').ok_or_else(|| ConfigError::at(no, "expected `key = value`"))?;
                let (k, v) = (k.trim(), v.trim());
                let keys = section.ok_or_else(|| ConfigError::at(no, "entry before any section header"))?;
                if !keys.contains(&k) {
                    return Err(ConfigError::at(no, format!("unknown key `{k}` in [{current}]")));
                }
                if v.is_empty() {
                    return Err(ConfigError::at(no, format!("empty value for `{k}`")));
                }
                if seen.iter().any(|(s, key)| *s == current && key == k) {
                    return Err(ConfigError::at(no, format!("duplicate key `{k}` in [{current}]")));
                }
                seen.push((current.clone(), k.to_string()));
                Line::Entry { key: k.to_string(), value: v.to_string() }
            };
            lines.push((no, line));
        }
        Ok(Self { lines })
    }

    /// Returns `(value, line)` for `key` in `section`.
    fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        let mut inside = false;
        for (no, line) in &self.lines {
            match line {
                Line::Section(s) => inside = s == section,
                Line::Entry { key: k, value } if inside && k == key => return Some((value, *no)),
                _ => {}
            }
        }
        None
    }

    /// Sets `key` in `section`, appending the section or the entry when missing.
    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        let mut inside = false;
        let mut insert_at = None;
        for (idx, (_, line)) in self.lines.iter_mut().enumerate() {
            match line {
                Line::Section(s) => {
                    if inside {
                        break;
                    }
                    inside = s == section;
                    if inside {
                        insert_at = Some(idx + 1);
                    }
                }
                Line::Entry { key: k, value: v } if inside => {
                    if k == key {
                        *v = value.to_string();
                        return;
                    }
                    insert_at = Some(idx + 1);
                }
                _ => {}
            }
        }
        let entry = Line::Entry { key: key.to_string(), value: value.to_string() };
        match insert_at {
            Some(at) => self.lines.insert(at, (0, entry)),
            None => {
                self.lines.push((0, Line::Section(section.to_string())));
                self.lines.push((0, entry));
            }
        }
    }
}

impl fmt::Display for RawConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (_, line) in &self.lines {
            match line {
                Line::Blank => writeln!(f)?,
                Line::Comment(c) => writeln!(f, "# {c}")?,
                Line::Section(s) => writeln!(f, "[{s}]")?,
                Line::Entry { key, value } => writeln!(f, "{key} = {value}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub snr: f64,
    /// Master seed; the sampler, fold and test-set seeds derive from it.
    pub seed: u64,
    pub beta_star: Vec<f64>,
    /// Directory holding `dataset.csv` and `dataset_meta.txt`; when unset the data are generated.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBlock {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grid_points: usize,
    /// Chain length per grid point; 0 skips the chain cross-check.
    pub samples: usize,
    pub burn_in: usize,
    pub cv_folds: usize,
    pub threads: usize,
    pub n_test: usize,
    pub sign_region: bool,
    pub box_half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerBlock {
    pub step_scale: Option<f64>,
    pub eps_feas: f64,
    /// Relative oracle ball radius.
    pub oracle_eps: f64,
    pub oracle_m: usize,
    pub mean_element: bool,
    pub symmetric_reverse: bool,
    pub reverse_check: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub directory: Option<PathBuf>,
    pub emit_samples: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchBlock {
    pub n_sweep: Vec<usize>,
    pub n_sweep_p: usize,
    pub p_sweep: Vec<usize>,
    pub p_sweep_n: usize,
    pub k: usize,
    pub steps_per_cell: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    Slope,
    Tolerance,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyBlock {
    pub studies: Vec<Study>,
    pub slope_ns: Vec<usize>,
    pub slope_p: usize,
    pub slope_beta_star: Vec<f64>,
    pub slope_replicates: usize,
    pub slope_box_half_width: f64,
    pub slope_lambda_factor: f64,
    /// Tolerances of the feasibility study; the smallest is the reference.
    pub eps_list: Vec<f64>,
    pub tolerance_dim: usize,
    pub tolerance_samples: usize,
    pub tolerance_step: f64,
    pub bias_draws: usize,
    pub bias_bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataBlock,
    pub path: PathBlock,
    pub sampler: SamplerBlock,
    pub output: OutputBlock,
    pub bench: BenchBlock,
    pub study: StudyBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataBlock { n: 100, p: 200, rho: 0.5, snr: 3.0, seed: 0, beta_star: vec![3.0, -2.0, 2.0, -1.0, 1.0], input: None },
            path: PathBlock {
                lambda_min: 0.05,
                lambda_max: 100.0,
                grid_points: 120,
                samples: 0,
                burn_in: 500,
                cv_folds: 5,
                threads: 0,
                n_test: 1000,
                sign_region: false,
                box_half_width: 6.0,
            },
            sampler: SamplerBlock {
                step_scale: None,
                eps_feas: 1e-9,
                oracle_eps: 1e-6,
                oracle_m: 5,
                mean_element: false,
                symmetric_reverse: false,
                reverse_check: false,
            },
            output: OutputBlock { directory: None, emit_samples: false },
            bench: BenchBlock {
                n_sweep: vec![100, 200, 400],
                n_sweep_p: 500,
                p_sweep: vec![100, 200, 400, 1000, 2000],
                p_sweep_n: 100,
                k: 5,
                steps_per_cell: 200,
                warmup: 20,
            },
            study: StudyBlock {
                studies: vec![Study::Slope, Study::Tolerance, Study::Bias],
                slope_ns: vec![50, 100, 200, 400],
                slope_p: 10,
                slope_beta_star: vec![2.0, -1.5],
                slope_replicates: 20,
                slope_box_half_width: 1.0,
                slope_lambda_factor: 1.0,
                eps_list: vec![1e-4, 1e-5, 1e-6, 1e-9],
                tolerance_dim: 5,
                tolerance_samples: 4000,
                tolerance_step: 0.3,
                bias_draws: 20_000,
                bias_bandwidth: 0.05,
            },
        }
    }
}

fn parse_one<T: std::str::FromStr>(raw: &RawConfig, section: &str, key: &str, slot: &mut T) -> Result<(), ConfigError>
where
    T::Err: fmt::Display,
{
    if let Some((v, no)) = raw.get(section, key) {
        *slot = v.parse().map_err(|e| ConfigError::at(no, format!("`{key}`: {e}")))?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &RawConfig, section: &str, key: &str, slot: &mut Vec<T>) -> Result<(), ConfigError>
where
    T::Err: fmt::Display,
{
    if let Some((v, no)) = raw.get(section, key) {
        *slot = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| ConfigError::at(no, format!("`{key}` entry `{s}`: {e}"))))
            .collect::<Result<_, _>>()?;
    }
    Ok(())
}

fn parse_choice(raw: &RawConfig, section: &str, key: &str, choices: [&str; 2], slot: &mut bool) -> Result<(), ConfigError> {
    if let Some((v, no)) = raw.get(section, key) {
        *slot = match v {
            _ if v == choices[0] => false,
            _ if v == choices[1] => true,
            _ => return Err(ConfigError::at(no, format!("`{key}` must be `{}` or `{}`, got `{v}`", choices[0], choices[1]))),
        };
    }
    Ok(())
}

fn check(ok: bool, raw: &RawConfig, section: &str, key: &str, msg: &str) -> Result<(), ConfigError> {
    if ok {
        return Ok(());
    }
    Err(match raw.get(section, key) {
        Some((_, no)) => ConfigError::at(no, format!("`{key}` {msg}")),
        None => ConfigError::global(format!("[{section}] `{key}` {msg}")),
    })
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let d = &mut c.data;
        parse_one(raw, "data", "n", &mut d.n)?;
        parse_one(raw, "data", "p", &mut d.p)?;
        parse_one(raw, "data", "rho", &mut d.rho)?;
        parse_one(raw, "data", "snr", &mut d.snr)?;
        parse_one(raw, "data", "seed", &mut d.seed)?;
        parse_list(raw, "data", "beta_star", &mut d.beta_star)?;
        d.input = raw.get("data", "input").map(|(v, _)| PathBuf::from(v));

        let p = &mut c.path;
        parse_one(raw, "path", "lambda_min", &mut p.lambda_min)?;
        parse_one(raw, "path", "lambda_max", &mut p.lambda_max)?;
        parse_one(raw, "path", "grid_points", &mut p.grid_points)?;
        parse_one(raw, "path", "samples", &mut p.samples)?;
        parse_one(raw, "path", "burn_in", &mut p.burn_in)?;
        parse_one(raw, "path", "cv_folds", &mut p.cv_folds)?;
        parse_one(raw, "path", "threads", &mut p.threads)?;
        parse_one(raw, "path", "n_test", &mut p.n_test)?;
        parse_choice(raw, "path", "complexity_mode", ["active_chart", "sign_region"], &mut p.sign_region)?;
        parse_one(raw, "path", "box_half_width", &mut p.box_half_width)?;

        let s = &mut c.sampler;
        if let Some((v, no)) = raw.get("sampler", "step_scale") {
            s.step_scale = match v {
                "auto" => None,
                _ => Some(v.parse().map_err(|e| ConfigError::at(no, format!("`step_scale`: {e}")))?),
            };
        }
        parse_one(raw, "sampler", "eps_feas", &mut s.eps_feas)?;
        parse_one(raw, "sampler", "oracle_eps", &mut s.oracle_eps)?;
        parse_one(raw, "sampler", "oracle_m", &mut s.oracle_m)?;
        parse_choice(raw, "sampler", "oracle_policy", ["random_element", "mean_element"], &mut s.mean_element)?;
        parse_choice(raw, "sampler", "reverse", ["verbatim", "symmetric"], &mut s.symmetric_reverse)?;
        parse_one(raw, "sampler", "reverse_check", &mut s.reverse_check)?;

        c.output.directory = raw.get("output", "directory").map(|(v, _)| PathBuf::from(v));
        parse_one(raw, "output", "emit_samples", &mut c.output.emit_samples)?;

        let b = &mut c.bench;
        parse_list(raw, "bench", "n_sweep", &mut b.n_sweep)?;
        parse_one(raw, "bench", "n_sweep_p", &mut b.n_sweep_p)?;
        parse_list(raw, "bench", "p_sweep", &mut b.p_sweep)?;
        parse_one(raw, "bench", "p_sweep_n", &mut b.p_sweep_n)?;
        parse_one(raw, "bench", "k", &mut b.k)?;
        parse_one(raw, "bench", "steps_per_cell", &mut b.steps_per_cell)?;
        parse_one(raw, "bench", "warmup", &mut b.warmup)?;

        let st = &mut c.study;
        if let Some((v, no)) = raw.get("study", "studies") {
            st.studies = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "slope" => Ok(Study::Slope),
                    "tolerance" => Ok(Study::Tolerance),
                    "bias" => Ok(Study::Bias),
                    _ => Err(ConfigError::at(no, format!("unknown study `{s}`; expected slope, tolerance or bias"))),
                })
                .collect::<Result<_, _>>()?;
        }
        parse_list(raw, "study", "slope_ns", &mut st.slope_ns)?;
        parse_one(raw, "study", "slope_p", &mut st.slope_p)?;
        parse_list(raw, "study", "slope_beta_star", &mut st.slope_beta_star)?;
        parse_one(raw, "study", "slope_replicates", &mut st.slope_replicates)?;
        parse_one(raw, "study", "slope_box_half_width", &mut st.slope_box_half_width)?;
        parse_one(raw, "study", "slope_lambda_factor", &mut st.slope_lambda_factor)?;
        parse_list(raw, "study", "eps_list", &mut st.eps_list)?;
        parse_one(raw, "study", "tolerance_dim", &mut st.tolerance_dim)?;
        parse_one(raw, "study", "tolerance_samples", &mut st.tolerance_samples)?;
        parse_one(raw, "study", "tolerance_step", &mut st.tolerance_step)?;
        parse_one(raw, "study", "bias_draws", &mut st.bias_draws)?;
        parse_one(raw, "study", "bias_bandwidth", &mut st.bias_bandwidth)?;

        c.validate(raw)?;
        Ok(c)
    }

    fn validate(&self, raw: &RawConfig) -> Result<(), ConfigError> {
        let (d, p, s) = (&self.data, &self.path, &self.sampler);
        check(d.n >= 2, raw, "data", "n", "must be at least 2")?;
        check(d.p >= 1, raw, "data", "p", "must be at least 1")?;
        check((0.0..1.0).contains(&d.rho), raw, "data", "rho", "must lie in [0, 1)")?;
        check(d.snr > 0.0, raw, "data", "snr", "must be positive")?;
        check(d.beta_star.len() <= d.p, raw, "data", "beta_star", "has more entries than p")?;
        check(p.lambda_min > 0.0, raw, "path", "lambda_min", "must be positive")?;
        check(p.lambda_min < p.lambda_max, raw, "path", "lambda_max", "must exceed lambda_min")?;
        check(p.grid_points >= 1, raw, "path", "grid_points", "must be at least 1")?;
        check(p.cv_folds >= 2, raw, "path", "cv_folds", "must be at least 2")?;
        check(p.samples == 0 || p.burn_in < p.samples, raw, "path", "burn_in", "must be smaller than samples")?;
        check(!self.output.emit_samples || p.samples > 0, raw, "output", "emit_samples", "needs [path] samples > 0")?;
        check(p.box_half_width > 0.0, raw, "path", "box_half_width", "must be positive")?;
        check(s.step_scale.map_or(true, |h| h > 0.0), raw, "sampler", "step_scale", "must be positive")?;
        check(s.eps_feas > 0.0, raw, "sampler", "eps_feas", "must be positive")?;
        check(s.oracle_eps > 0.0, raw, "sampler", "oracle_eps", "must be positive")?;
        check(s.oracle_m >= 1, raw, "sampler", "oracle_m", "must be at least 1")?;
        check(self.study.eps_list.iter().all(|e| *e > 0.0), raw, "study", "eps_list", "entries must be positive")?;
        check(self.study.bias_bandwidth > 0.0, raw, "study", "bias_bandwidth", "must be positive")?;
        check(self.study.tolerance_step > 0.0, raw, "study", "tolerance_step", "must be positive")?;
        Ok(())
    }
}
