use std::path::Path;

use serde::{Deserialize, Serialize};
use trimodal_core::synthdata::GenConfig;
use trimodal_core::trainer::TrainConfig;

use crate::error::CliError;

/// Options of the `eval` and `caption` commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Acc@q cut-offs.
    pub q: Vec<usize>,
    /// Caption candidates per record for the oracle BLEU.
    pub caption_samples: usize,
    /// Records captioned by `eval` (the first ones of the dataset); 0 skips captioning.
    pub caption_records: usize,
    /// Highest BLEU order reported.
    pub bleu_max_n: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            q: vec![1, 5, 10],
            caption_samples: 100,
            caption_records: 20,
            bleu_max_n: 4,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.q.is_empty() || self.q.contains(&0) {
            return Err(CliError::Config("eval.q must be a non-empty list of values >= 1".into()));
        }
        if self.caption_samples == 0 {
            return Err(CliError::Config("eval.caption_samples must be >= 1".into()));
        }
        if !(1..=4).contains(&self.bleu_max_n) {
            return Err(CliError::Config(format!(
                "eval.bleu_max_n must be in 1..=4, got {}",
                self.bleu_max_n
            )));
        }
        Ok(())
    }
}

/// Everything a run needs, read from one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    /// Flat `section.key = value` pairs for the report echo.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten_into(&value, String::new(), &mut out);
        out
    }
}

fn flatten_into(v: &toml::Value, prefix: String, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(child, key, out);
            }
        }
        other => out.push((prefix, other.to_string())),
    }
}
