//! Flat `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a typo is an error rather than a silently ignored setting.

use std::fmt;
use std::path::{Path, PathBuf};

use psrl_core::train::{TrainConfig, Variant};
use psrl_core::{parse_eps, EpsGrid, Norm, ScenarioPreset, SmoothingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// A perturbation budget in an attack sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepEps {
    Grid(u32),
    /// Each state's own certified budget, read from its certificate.
    Certified,
}

impl fmt::Display for SweepEps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepEps::Grid(k) => f.write_str(&psrl_core::format_eps(*k)),
            SweepEps::Certified => f.write_str("certified"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: ScenarioPreset,
    pub train: TrainConfig,
    pub grid: EpsGrid,
    pub smoothing: SmoothingConfig,
    /// Verification horizon `T_v`.
    pub horizon: usize,
    pub budget: usize,
    /// Seeds of the initial states that are certified and attacked.
    pub cert_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub mse_eps: u32,
    /// Budgets of the evaluation sweep.
    pub eval_eps: Vec<u32>,
    pub attack_eps: Vec<SweepEps>,
    pub attack_seeds: Vec<u64>,
    pub pgd_steps: usize,
    pub restarts: usize,
    pub out: PathBuf,
}

impl RunConfig {
    fn defaults(preset: ScenarioPreset) -> Self {
        Self {
            preset,
            train: TrainConfig::default(),
            grid: EpsGrid::linf(),
            smoothing: SmoothingConfig::default(),
            horizon: 5,
            budget: 500,
            cert_seeds: (0..10).collect(),
            eval_seeds: (0..20).collect(),
            mse_eps: 1,
            eval_eps: vec![0, 1, 2, 4],
            attack_eps: vec![SweepEps::Certified, SweepEps::Grid(4), SweepEps::Grid(16)],
            attack_seeds: vec![0, 1],
            pgd_steps: 20,
            restarts: 5,
            out: PathBuf::from("out"),
        }
    }

    pub fn norm(&self) -> Norm {
        self.train.norm
    }

    pub fn set_norm(&mut self, norm: Norm) {
        if norm != self.train.norm {
            self.grid = EpsGrid::for_norm(norm);
        }
        self.train.norm = norm;
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indent = raw.len() - trimmed.len();
            let Some(eq) = raw.find('=') else {
                return Err(ConfigError { line, column: indent + 1, message: "expected `section.key = value`".into() });
            };
            let key = raw[..eq].trim();
            let value_raw = &raw[eq + 1..];
            let value = value_raw.trim();
            let value_col = eq + 2 + (value_raw.len() - value_raw.trim_start().len());
            if !key.contains('.') {
                return Err(ConfigError {
                    line,
                    column: indent + 1,
                    message: format!("key `{key}` must have the form `section.key`"),
                });
            }
            entries.push(Entry { line, key_col: indent + 1, value_col, key: key.to_string(), value: value.to_string() });
        }
        let preset_entry = entries.iter().find(|e| e.key == "scenario.preset").ok_or_else(|| ConfigError {
            line: text.lines().count().max(1),
            column: 1,
            message: "missing required key `scenario.preset`".into(),
        })?;
        let preset = ScenarioPreset::by_name(&preset_entry.value).map_err(|e| preset_entry.value_error(e))?;
        let mut cfg = Self::defaults(preset);
        // the norm decides the default grid, so it goes first
        if let Some(e) = entries.iter().find(|e| e.key == "run.norm") {
            cfg.set_norm(Norm::parse(&e.value).map_err(|err| e.value_error(err))?);
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.key.as_str()) {
                return Err(ConfigError { line: e.line, column: e.key_col, message: format!("duplicate key `{}`", e.key) });
            }
            cfg.apply(e)?;
        }
        cfg.validate_ranges().map_err(|m| ConfigError { line: 1, column: 1, message: m })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| anyhow::anyhow!("{}:{e}", path.display()))
    }

    fn apply(&mut self, e: &Entry) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match e.key.as_str() {
            "scenario.preset" | "run.norm" => {}
            "run.variant" => t.variant = e.parse_with(Variant::parse)?,
            "run.seed" => t.seed = e.num()?,
            "run.out" => self.out = PathBuf::from(&e.value),
            "train.buffer_size" => t.buffer_size = e.num()?,
            "train.batch_size" => t.batch_size = e.num()?,
            "train.discount" => t.discount = e.num()?,
            "train.learning_rate" => t.learning_rate = e.num()?,
            "train.dqn_steps" => t.dqn_steps = e.num()?,
            "train.learning_starts" => t.learning_starts = e.num()?,
            "train.target_sync" => t.target_sync = e.num()?,
            "train.explore_initial" => t.explore_initial = e.num()?,
            "train.explore_final" => t.explore_final = e.num()?,
            "train.explore_fraction" => t.explore_fraction = e.num()?,
            "train.g_steps" => t.g_steps = e.num()?,
            "train.g_explore" => t.g_explore = e.num()?,
            "train.adv_steps" => t.adv_steps = e.num()?,
            "train.target_eps" => t.target_eps = e.parse_with(parse_eps)?,
            "train.ramp_fraction" => t.ramp_fraction = e.num()?,
            "train.kappa" => t.kappa = e.num()?,
            "train.sigma" => t.sigma = e.num()?,
            "train.g_hidden" => t.g_hidden = e.list()?,
            "train.q_hidden" => t.q_hidden = e.list()?,
            "train.log_every" => t.log_every = e.num()?,
            "cert.tv" => self.horizon = e.num()?,
            "cert.budget" => self.budget = e.num()?,
            "cert.cap" => self.grid.cap = e.parse_with(parse_eps)?,
            "cert.seeds" => self.cert_seeds = e.seeds()?,
            "smoothing.sigma" => self.smoothing.sigma = e.num()?,
            "smoothing.n_samples" => self.smoothing.n_samples = e.num()?,
            "smoothing.seed" => self.smoothing.seed = e.num()?,
            "smoothing.index_offset" => self.smoothing.index_offset = e.num()?,
            "eval.seeds" => self.eval_seeds = e.seeds()?,
            "eval.mse_eps" => self.mse_eps = e.parse_with(parse_eps)?,
            "eval.eps" => {
                self.eval_eps =
                    e.items().iter().map(|s| parse_eps(s)).collect::<psrl_core::Result<_>>().map_err(|err| e.value_error(err))?
            }
            "attack.eps" => {
                self.attack_eps = e
                    .items()
                    .iter()
                    .map(|s| if s == "certified" { Ok(SweepEps::Certified) } else { parse_eps(s).map(SweepEps::Grid) })
                    .collect::<psrl_core::Result<_>>()
                    .map_err(|err| e.value_error(err))?
            }
            "attack.seeds" => self.attack_seeds = e.seeds()?,
            "attack.pgd_steps" => self.pgd_steps = e.num()?,
            "attack.restarts" => self.restarts = e.num()?,
            other => {
                return Err(ConfigError { line: e.line, column: e.key_col, message: format!("unknown key `{other}`") })
            }
        }
        Ok(())
    }

    /// Checks that do not belong to a single line.
    pub fn validate_ranges(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        self.smoothing.validate().map_err(|e| e.to_string())?;
        if self.horizon == 0 {
            return Err("cert.tv must be at least 1".into());
        }
        if self.budget < self.horizon {
            return Err(format!("cert.budget {} is smaller than cert.tv {}", self.budget, self.horizon));
        }
        if self.pgd_steps == 0 {
            return Err("attack.pgd_steps must be at least 1".into());
        }
        Ok(())
    }
}

struct Entry {
    line: usize,
    key_col: usize,
    value_col: usize,
    key: String,
    value: String,
}

impl Entry {
    fn value_error(&self, err: impl fmt::Display) -> ConfigError {
        ConfigError { line: self.line, column: self.value_col, message: format!("`{}`: {err}", self.key) }
    }

    fn num<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value.parse().map_err(|_| self.value_error(format!("cannot parse `{}`", self.value)))
    }

    fn parse_with<T>(&self, f: impl Fn(&str) -> psrl_core::Result<T>) -> Result<T, ConfigError> {
        f(&self.value).map_err(|e| self.value_error(e))
    }

    fn items(&self) -> Vec<String> {
        self.value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
    }

    fn list<T: std::str::FromStr>(&self) -> Result<Vec<T>, ConfigError> {
        self.items()
            .iter()
            .map(|s| s.parse().map_err(|_| self.value_error(format!("cannot parse list item `{s}`"))))
            .collect()
    }

    /// `a..b` (half open) or a comma list.
    fn seeds(&self) -> Result<Vec<u64>, ConfigError> {
        if let Some((a, b)) = self.value.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| self.value_error("bad range start"))?;
            let b: u64 = b.trim().parse().map_err(|_| self.value_error("bad range end"))?;
            if b <= a {
                return Err(self.value_error("empty seed range"));
            }
            return Ok((a..b).collect());
        }
        let seeds = self.list()?;
        if seeds.is_empty() {
            return Err(self.value_error("no seeds given"));
        }
        Ok(seeds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let cfg = RunConfig::parse(
            "# demo\nscenario.preset = highway\nrun.variant = radial\ncert.seeds = 3..6\nattack.eps = certified, 2/255\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, ScenarioPreset::highway());
        assert_eq!(cfg.train.variant, Variant::Radial);
        assert_eq!(cfg.cert_seeds, vec![3, 4, 5]);
        assert_eq!(cfg.attack_eps, vec![SweepEps::Certified, SweepEps::Grid(2)]);
        assert_eq!(cfg.grid, EpsGrid::linf());
    }

    #[test]
    fn l2_norm_switches_grid_and_keeps_smoothing_defaults() {
        let cfg = RunConfig::parse("scenario.preset = exit\nrun.norm = l2\n").unwrap();
        assert_eq!(cfg.grid, EpsGrid::l2());
        assert_eq!((cfg.smoothing.n_samples, cfg.smoothing.sigma), (2000, 0.05));
    }

    #[test]
    fn missing_preset_names_the_key() {
        let err = RunConfig::parse("run.seed = 3\n").unwrap_err();
        assert!(err.message.contains("scenario.preset"), "{err}");
    }

    #[test]
    fn errors_carry_line_and_column() {
        let err = RunConfig::parse("scenario.preset = highway\n\ntrain.kapa = 0.5\n").unwrap_err();
        assert_eq!((err.line, err.column), (3, 1));
        assert!(err.message.contains("train.kapa"));
        let err = RunConfig::parse("scenario.preset = highway\n  cert.tv =  five\n").unwrap_err();
        assert_eq!((err.line, err.column), (2, 14));
        let err = RunConfig::parse("scenario.preset = highway\nnonsense\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = RunConfig::parse("scenario.preset = highway\ncert.tv = 3\ncert.tv = 4\n").unwrap_err();
        assert!(err.message.contains("duplicate"));
    }

    #[test]
    fn rejects_budget_below_horizon() {
        assert!(RunConfig::parse("scenario.preset = highway\ncert.tv = 10\ncert.budget = 9\n").is_err());
    }
}
