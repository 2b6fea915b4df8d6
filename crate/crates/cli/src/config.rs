use std::path::Path;

use cellsearch::cas::{Ablation, CasConfig};
use cellsearch::regularizers::RegConfig;
use cellsearch::search::SearchConfig;
use cellsearch::tasks::TaskSpec;
use cellsearch::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs, read from one JSON file. Missing keys take their
/// defaults; unknown keys are an error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Overrides `search.seed`; task `i` is generated with `seed + 100 * i`.
    pub seed: u64,
    /// Tasks in order. `search`, `retrain` and `eval` use the first one.
    pub tasks: Vec<TaskSpec>,
    /// Unseen task for the multi-task transfer comparison.
    pub held_out: Option<TaskSpec>,
    pub search: SearchConfig,
    pub cas: CasSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: Vec::new(),
            held_out: None,
            search: SearchConfig::default(),
            cas: CasSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CasSection {
    pub reg: RegConfig,
    pub finetune_epochs: usize,
    pub ablation: Ablation,
    pub reset_controller: bool,
}

impl Default for CasSection {
    fn default() -> Self {
        let d = CasConfig::default();
        Self {
            reg: d.reg,
            finetune_epochs: d.finetune_epochs,
            ablation: d.ablation,
            reset_controller: d.reset_controller,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub points: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { points: 100 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(config_path(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.tasks.iter().chain(&self.held_out) {
            t.validate()?;
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("tasks", "task names must be unique"));
        }
        let pair = self.tasks.iter().chain(&self.held_out).map(|t| t.rule.is_pair());
        let kinds: Vec<bool> = pair.collect();
        if kinds.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::config("tasks", "all tasks must be of the same kind"));
        }
        self.search_config().validate()?;
        self.cas.reg.validate()?;
        if self.gradcheck.points == 0 {
            return Err(Error::config("gradcheck.points", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            seed: self.seed,
            ..self.search.clone()
        }
    }

    pub fn cas_config(&self) -> CasConfig {
        CasConfig {
            search: self.search_config(),
            reg: self.cas.reg.clone(),
            finetune_epochs: self.cas.finetune_epochs,
            ablation: self.cas.ablation,
            reset_controller: self.cas.reset_controller,
        }
    }

    /// Seed used to generate task `i`.
    pub fn task_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(100 * i as u64)
    }

    pub fn require_tasks(&self, n: usize) -> Result<&[TaskSpec]> {
        if self.tasks.len() < n {
            return Err(Error::config("tasks", format!("needs at least {n} task(s), got {}", self.tasks.len())));
        }
        Ok(&self.tasks)
    }
}

/// Best-effort field name out of a serde message (`unknown field `x``, `missing field `x``).
fn config_path(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .filter(|_| msg.contains("field"))
        .map(str::to_string)
        .unwrap_or_else(|| format!("line {} column {}", e.line(), e.column()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.search.model.num_nodes, 6);
        assert_eq!(d.search.batch_size, 64);
        assert_eq!(d.search.controller.lr, 0.00035);
        assert_eq!((d.cas.reg.lambda_sparsity, d.cas.reg.lambda_ortho), (0.001, 0.001));
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let e = RunConfig::parse(r#"{"search": {"epochz": 3}}"#).unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(matches!(e, Error::Config { ref field, .. } if field == "epochz"), "{e}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        let e = RunConfig::parse(r#"{"search": {"lr": -1}}"#).unwrap_err();
        assert_eq!(e.kind(), "config");
        let e = RunConfig::parse(r#"{"cas": {"reg": {"lambda_ortho": -1}}}"#).unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn seed_overrides_the_search_seed() {
        let c = RunConfig::parse(r#"{"seed": 9, "search": {"seed": 4}}"#).unwrap();
        assert_eq!(c.search_config().seed, 9);
        assert_eq!(c.cas_config().search.seed, 9);
    }
}
