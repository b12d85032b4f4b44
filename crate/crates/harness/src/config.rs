//! Layered configuration: profile defaults, then a TOML file, then
//! `section.key=value` overrides.

use serde::{Deserialize, Serialize};
use tpmb_core::filter::FilterOptions;
use tpmb_core::metrics::MetricParams;
use tpmb_core::models::ModelParams;

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_objects: usize,
    pub circle_radius: f64,
    pub initial_speed: f64,
    /// Pair `p` (objects `p` and `p + ceil(n / 2)`) appears at `appear_steps[p]`.
    pub appear_steps: Vec<usize>,
    /// Last step on which pair `p` is present.
    pub disappear_steps: Vec<usize>,
    pub horizon: usize,
    /// Propagate truth with process noise; otherwise the deterministic mean.
    pub noisy_truth: bool,
    /// Reuse the first run's truth in every Monte Carlo run.
    pub fixed_truth: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_objects: 10,
            circle_radius: 75.0,
            initial_speed: 10.0,
            appear_steps: vec![3, 6, 9, 12, 15],
            disappear_steps: vec![83, 86, 89, 92, 95],
            horizon: 100,
            noisy_truth: true,
            fixed_truth: false,
        }
    }
}

impl ScenarioConfig {
    pub fn n_pairs(&self) -> usize {
        self.n_objects.div_ceil(2)
    }

    /// Index of the pair object `i` belongs to.
    pub fn pair_of(&self, i: usize) -> usize {
        i % self.n_pairs()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |s: String| Err(HarnessError::Config(s));
        if self.n_objects == 0 {
            return bad("scenario.n_objects must be positive".into());
        }
        if self.horizon == 0 {
            return bad("scenario.horizon must be positive".into());
        }
        if self.appear_steps.len() != self.disappear_steps.len() {
            return bad("scenario.appear_steps and scenario.disappear_steps differ in length".into());
        }
        if self.appear_steps.len() < self.n_pairs() {
            return bad(format!(
                "{} objects need {} appear/disappear pairs, got {}",
                self.n_objects,
                self.n_pairs(),
                self.appear_steps.len()
            ));
        }
        for (p, (&a, &d)) in self.appear_steps.iter().zip(&self.disappear_steps).take(self.n_pairs()).enumerate() {
            if a == 0 {
                return bad(format!("pair {p}: appear step must be at least 1"));
            }
            if d < a {
                return bad(format!("pair {p}: disappears at {d} before appearing at {a}"));
            }
            if d > self.horizon {
                return bad(format!("pair {p}: disappear step {d} exceeds horizon {}", self.horizon));
            }
        }
        if !(self.circle_radius >= 0.0 && self.circle_radius.is_finite()) {
            return bad("scenario.circle_radius must be finite and non-negative".into());
        }
        if !self.initial_speed.is_finite() {
            return bad("scenario.initial_speed must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub runs: usize,
    /// Base seed; per-run streams are derived from it.
    pub seed: u64,
    /// Explicit per-run seeds, overriding `seed` when non-empty.
    pub seeds: Vec<u64>,
    pub gamma_grid: Vec<f64>,
    pub variants: Vec<String>,
    /// Backward-simulation smoothing of the final estimates.
    pub smoothing: bool,
    pub smoothing_draws: usize,
    /// Worker threads, 0 for the rayon default.
    pub threads: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            seed: 1,
            seeds: Vec::new(),
            gamma_grid: vec![3.0, 5.0, 7.0],
            variants: vec!["tpmb-all".into(), "pmb".into()],
            smoothing: false,
            smoothing_draws: 100,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub model: ModelParams,
    pub filter: FilterOptions,
    pub metric: MetricParams,
    pub mc: McConfig,
}

impl Default for Config {
    fn default() -> Self {
        let filter = FilterOptions { scalar_ppp: true, ..FilterOptions::default() };
        Self {
            scenario: ScenarioConfig::default(),
            model: ModelParams::default(),
            filter,
            metric: MetricParams::default(),
            mc: McConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "desk" => Ok(Profile::Desk),
            "smoke" => Ok(Profile::Smoke),
            other => Err(HarnessError::Config(format!("unknown profile '{other}' (known: desk, smoke)"))),
        }
    }
}

impl Config {
    pub fn profile(p: Profile) -> Self {
        let mut c = Config::default();
        if p == Profile::Smoke {
            c.scenario.n_objects = 2;
            c.scenario.horizon = 30;
            c.scenario.appear_steps = vec![3];
            c.scenario.disappear_steps = vec![25];
            c.mc.runs = 2;
        }
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.filter.validate()?;
        self.metric.validate()?;
        let mc = &self.mc;
        if mc.runs == 0 {
            return Err(HarnessError::Config("mc.runs must be positive".into()));
        }
        if !mc.seeds.is_empty() && mc.seeds.len() < mc.runs {
            return Err(HarnessError::Config(format!("mc.seeds has {} entries for {} runs", mc.seeds.len(), mc.runs)));
        }
        if mc.gamma_grid.is_empty() || mc.gamma_grid.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(HarnessError::Config("mc.gamma_grid must be a non-empty list of non-negative rates".into()));
        }
        if mc.variants.is_empty() {
            return Err(HarnessError::Config("mc.variants is empty".into()));
        }
        let known = tpmb_core::filter::filter_registry();
        for v in &mc.variants {
            known.resolve(v)?;
        }
        if mc.smoothing && mc.smoothing_draws == 0 {
            return Err(HarnessError::Config("mc.smoothing_draws must be positive".into()));
        }
        Ok(())
    }

    /// Builds a config from an optional profile, optional TOML text and
    /// `section.key=value` overrides, in that order.
    pub fn layered(profile: Option<Profile>, file: Option<&str>, overrides: &[String]) -> Result<Self, HarnessError> {
        let base = Config::profile(profile.unwrap_or(Profile::Desk));
        let mut value = toml::Value::try_from(&base).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(text) = file {
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(table));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = value.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

fn merge(into: &mut toml::Value, from: toml::Value) {
    match (into, from) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), HarnessError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parsed: toml::Table = format!("v = {}", raw.trim())
        .parse()
        .unwrap_or_else(|_| toml::Table::from_iter([("v".to_string(), toml::Value::String(raw.trim().into()))]));
    let value = parsed["v"].clone();
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key '{path}'")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let toml::Value::Table(t) = node else {
            return Err(HarnessError::Config(format!("'{}' is not a section", keys[..i].join("."))));
        };
        if i + 1 == keys.len() {
            t.insert(key.to_string(), value);
            return Ok(());
        }
        node = t.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!()
}
