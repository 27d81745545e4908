//! Run configuration and its `key = value` file format.
//!
//! ```text
//! # top-level keys
//! knowledge = data/default.kb
//! alpha = 0.5
//! attention_norm = softmax
//!
//! [stage2]
//! epochs = 80
//! lr = 0.001
//! ```
//!
//! Blank lines and `#` comments are ignored. Keys inside `[stageN]` apply to
//! that stage's plan; `stageN.key` works anywhere, which is also the syntax
//! for command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::knowledge::{prior_matrix, KnowledgeBase, PriorMatrix, RelevanceLevels};
use crate::losses::{DEFAULT_ALPHA, DEFAULT_LAMBDA};
use crate::model::ModelConfig;
use crate::training::{Stage, StagePlan, StepDecay};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `None` selects the built-in knowledge base.
    pub knowledge_path: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub model: ModelConfig,
    /// Overrides the levels declared in the knowledge file.
    pub levels: Option<RelevanceLevels>,
    pub lambda: f64,
    pub alpha: f64,
    pub stages: [StagePlan; 3],
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            knowledge_path: None,
            data_path: None,
            model: ModelConfig::default(),
            levels: None,
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
            stages: Stage::ALL.map(StagePlan::default_for),
            seed: DEFAULT_SEED,
            output_dir: PathBuf::from("."),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn split_stage(key: &str) -> Option<(Stage, &str)> {
    let rest = key.strip_prefix("stage")?;
    let (n, field) = rest.split_once('.')?;
    let stage = Stage::from_number(n.parse().ok()?).ok()?;
    Some((stage, field))
}

impl RunConfig {
    pub fn stage(&self, stage: Stage) -> &StagePlan {
        &self.stages[stage.number() as usize - 1]
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StagePlan {
        &mut self.stages[stage.number() as usize - 1]
    }

    /// Sets one key. Stage keys are written `stageN.field`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some((stage, field)) = split_stage(key) {
            return self.set_stage_field(stage, field, value);
        }
        match key {
            "knowledge" => self.knowledge_path = Some(PathBuf::from(value)),
            "data" => self.data_path = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "levels" => self.levels = Some(RelevanceLevels::parse(value)?),
            "input_dim" => self.model.input_dim = parse_num(key, value)?,
            "d_e" => self.model.d_e = parse_num(key, value)?,
            "d_a" => self.model.d_a = parse_num(key, value)?,
            "d" => self.model.d = parse_num(key, value)?,
            "n_expr" | "E" => self.model.n_expr = parse_num(key, value)?,
            "n_aus" | "A" => self.model.n_aus = parse_num(key, value)?,
            "attention_norm" => self.model.attention_norm = value.parse()?,
            "au_bias" => self.model.au_bias = parse_bool(key, value)?,
            "expr_bias" => self.model.expr_bias = parse_bool(key, value)?,
            "epochs" | "batch_size" | "momentum" | "weight_decay" => {
                for stage in Stage::ALL {
                    self.set_stage_field(stage, key, value)?;
                }
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_stage_field(&mut self, stage: Stage, field: &str, value: &str) -> Result<()> {
        let key = format!("stage{stage}.{field}");
        let plan = self.stage_mut(stage);
        match field {
            "lr" => plan.lr = parse_num(&key, value)?,
            "momentum" => plan.momentum = parse_num(&key, value)?,
            "weight_decay" => plan.weight_decay = parse_num(&key, value)?,
            "epochs" => plan.epochs = parse_num(&key, value)?,
            "batch_size" => plan.batch_size = parse_num(&key, value)?,
            "decay_every" | "decay_factor" => {
                let mut d = plan.decay.unwrap_or(StepDecay {
                    every: usize::MAX,
                    factor: 1.0,
                });
                if field == "decay_every" {
                    d.every = parse_num(&key, value)?;
                } else {
                    d.factor = parse_num(&key, value)?;
                }
                plan.decay = Some(d);
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<Stage> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => other,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let n = name
                    .trim()
                    .strip_prefix("stage")
                    .and_then(|n| n.parse::<u32>().ok())
                    .ok_or_else(|| Error::config(format!("line {}: unknown section [{name}]", lineno + 1)))?;
                section = Some(Stage::from_number(n).map_err(at)?);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match section {
                Some(stage) => self.set_stage_field(stage, key, value).map_err(at)?,
                None => self.set(key, value).map_err(at)?,
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("`lambda` must be a non-negative number"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("`alpha` must be a non-negative number"));
        }
        for plan in &self.stages {
            plan.validate()?;
        }
        if let Some(l) = &self.levels {
            l.validate()?;
        }
        Ok(())
    }

    /// Loads the knowledge base and prior, checking the model's E and A
    /// against the file.
    pub fn knowledge(&self) -> Result<(KnowledgeBase, PriorMatrix)> {
        let kb = match &self.knowledge_path {
            Some(p) => KnowledgeBase::load(p)?,
            None => KnowledgeBase::builtin(),
        };
        if kb.n_expressions() != self.model.n_expr || kb.n_aus() != self.model.n_aus {
            return Err(Error::config(format!(
                "knowledge base has E={} A={}, config has E={} A={}",
                kb.n_expressions(),
                kb.n_aus(),
                self.model.n_expr,
                self.model.n_aus
            )));
        }
        let levels = self.levels.unwrap_or_else(|| kb.levels());
        let prior = prior_matrix(&kb, &levels)?;
        Ok((kb, prior))
    }
}
