//! Randomized finite-difference verification of every loss and of the full
//! forward pipeline.
//!
//! Each instance draws a small model (A and E from the built-in knowledge
//! base, attention rank 8) with fresh uniform weights, `W_EA` jittered
//! around the prior, and a batch of 2 to 8 samples.
//!
//! With `h = 1e-5` the central-difference truncation error is `O(h²)` and
//! the rounding error is about `1e-16 / h`, so relative errors bottom out
//! near `1e-7` to `1e-9`. Tolerances below that will report failures that
//! say nothing about the gradients. The same floor applies per entry: a
//! component whose true gradient is below roughly `1e-6 * |loss|` cannot
//! reach `1e-4` relative agreement, which is why instances avoid saturated
//! units and a `W_EA` far from the prior.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{finite_difference_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::losses;
use crate::model::{names, AttentionNorm, ModelConfig, ModelState, ModelVars, ParamGroup};
use crate::synthdata::SynthSample;
use crate::training::{LossSetup, Stage, StageObjective};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;
pub const MAX_BATCH: usize = 8;
/// Half-widths of the uniform weight draws in check instances. Encoder
/// weights stay small enough that tanh is not saturated; the rest are wide
/// enough to spread the existence scores away from 0.5.
pub const WEIGHT_SCALE: f64 = 1.5;
pub const ENCODER_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOp {
    LossAu,
    LossPos,
    LossNeg,
    LossExpr,
    Pipeline,
}

impl CheckOp {
    pub const ALL: [CheckOp; 5] = [
        CheckOp::LossAu,
        CheckOp::LossPos,
        CheckOp::LossNeg,
        CheckOp::LossExpr,
        CheckOp::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckOp::LossAu => "l_au",
            CheckOp::LossPos => "l_p",
            CheckOp::LossNeg => "l_n",
            CheckOp::LossExpr => "l_e",
            CheckOp::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for CheckOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown op `{s}`, expected one of l_au, l_p, l_n, l_e, pipeline"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub ops: Vec<CheckOp>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: DEFAULT_INSTANCES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            ops: CheckOp::ALL.to_vec(),
        }
    }
}

/// One randomly drawn model, batch and loss setup.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: ModelState,
    pub samples: Vec<SynthSample>,
    pub setup: LossSetup,
    /// Fixed random weights contracting all pipeline outputs to a scalar.
    pub probe: Vec<f64>,
}

pub fn instance_config() -> ModelConfig {
    let kb = KnowledgeBase::builtin();
    ModelConfig {
        input_dim: 4,
        d_e: 4,
        d_a: 3,
        d: 8,
        n_expr: kb.n_expressions(),
        n_aus: kb.n_aus(),
        ..ModelConfig::default()
    }
}

pub fn draw_instance(seed: u64, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let kb = KnowledgeBase::builtin();
    let prior = kb.prior();
    let config = instance_config();
    let mut model = ModelState::init(&config, &prior, rng.random())?;

    let params = model.params_mut();
    let shifted: Vec<(String, Tensor)> = params
        .iter()
        .map(|p| {
            let n = p.value().len();
            let data = if p.name() == names::W_EA {
                prior
                    .tensor()
                    .data()
                    .iter()
                    .map(|&v| (v + rng.random_range(-0.1..0.1)).clamp(0.02, 0.98))
                    .collect()
            } else if p.name().ends_with(".bias") || p.name() == names::ATTN_B {
                (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
            } else {
                let scale = if p.name().starts_with("encoder.") { ENCODER_SCALE } else { WEIGHT_SCALE };
                (0..n).map(|_| rng.random_range(-scale..scale)).collect()
            };
            Ok((p.name().to_string(), Tensor::new(p.value().shape().to_vec(), data)?))
        })
        .collect::<Result<_>>()?;
    for (name, t) in shifted {
        params.get_mut(&name)?.set_value(t)?;
    }

    let batch = rng.random_range(2..=MAX_BATCH);
    let samples = (0..batch)
        .map(|_| SynthSample {
            x: (0..config.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
            y: rng.random_range(0..config.n_expr),
            au_truth: vec![0; config.n_aus],
        })
        .collect();
    let probe_len = config.n_expr + 2 * config.n_aus;
    let probe = (0..probe_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let setup = LossSetup::new(&kb, &prior, losses::DEFAULT_ALPHA, losses::DEFAULT_LAMBDA)?;
    Ok(Instance {
        model,
        samples,
        setup,
        probe,
    })
}

fn batch_scores(g: &mut Graph, vars: &ModelVars, xs: &[Var]) -> Result<Vec<Var>> {
    xs.iter()
        .map(|&x| {
            let fs = vars.encode(g, x)?;
            let logits = crate::model::attention_logits(g, fs.f_e, &fs.f_a, &vars.attention)?;
            losses::existence_scores(g, logits)
        })
        .collect()
}

impl Instance {
    fn inputs(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.samples
            .iter()
            .map(|s| Ok(g.constant(Tensor::vector(s.x.clone())?)))
            .collect()
    }

    /// The scalar objective for `op`, built on `g`.
    pub fn objective(&self, op: CheckOp, g: &mut Graph, params: &ParamStore) -> Result<Var> {
        let config = self.model.config();
        match op {
            CheckOp::LossAu | CheckOp::LossExpr => {
                let stage = if op == CheckOp::LossAu { Stage::Two } else { Stage::Three };
                StageObjective {
                    stage,
                    config,
                    setup: &self.setup,
                    batch: self.samples.iter().collect(),
                }
                .build_components(g, params)
                .map(|(root, _)| root)
            }
            CheckOp::LossPos | CheckOp::LossNeg => {
                let vars = ModelVars::bind(g, config, params)?;
                let xs = self.inputs(g)?;
                let scores = batch_scores(g, &vars, &xs)?;
                let probs = losses::batch_probs(g, &scores)?;
                if op == CheckOp::LossPos {
                    losses::loss_pos(g, &probs, &self.setup.positive)
                } else {
                    losses::loss_neg(g, &probs, &self.setup.negative)
                }
            }
            CheckOp::Pipeline => {
                let vars = ModelVars::bind(g, config, params)?;
                let xs = self.inputs(g)?;
                let probe = g.constant(Tensor::vector(self.probe.clone())?);
                let mut terms = Vec::with_capacity(xs.len());
                for &x in &xs {
                    let f = vars.forward(g, x)?;
                    let out = g.concat(&[f.p_e, f.p_a, f.attention.weights])?;
                    terms.push(g.dot(out, probe)?);
                }
                g.mean(&terms)
            }
        }
    }

    /// Parameters each objective is checked against.
    pub fn checked_params(&self, op: CheckOp) -> Vec<String> {
        let keep = |name: &str| {
            let group = ParamGroup::of(name);
            let au_encoder = name.starts_with("encoder.au");
            match op {
                CheckOp::LossAu => group == ParamGroup::AuBranch,
                CheckOp::LossPos | CheckOp::LossNeg => {
                    group == ParamGroup::Encoder
                        || au_encoder
                        || (group == ParamGroup::AttentionHead && name.starts_with("attn."))
                }
                CheckOp::LossExpr => {
                    group == ParamGroup::Encoder || au_encoder || group == ParamGroup::AttentionHead
                }
                // A shared bias shifts every attention logit equally, which
                // softmax cancels exactly.
                CheckOp::Pipeline => {
                    group != ParamGroup::ExprHeadStage1
                        && name != names::W_EA
                        && !(name == names::ATTN_B && self.model.config().attention_norm == AttentionNorm::Softmax)
                }
            }
        };
        self.model
            .params()
            .names()
            .filter(|n| keep(n))
            .map(str::to_string)
            .collect()
    }

    pub fn check(&self, op: CheckOp, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        let wrt = self.checked_params(op);
        let wrt: Vec<&str> = wrt.iter().map(String::as_str).collect();
        let objective = |g: &mut Graph, p: &ParamStore| self.objective(op, g, p);
        finite_difference_check(&objective, self.model.params(), &wrt, step, tolerance)
    }
}

#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub instance: usize,
    pub op: CheckOp,
    pub batch: usize,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub results: Vec<InstanceResult>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.report.passed)
    }

    pub fn max_rel_error(&self, op: CheckOp) -> f64 {
        self.results
            .iter()
            .filter(|r| r.op == op)
            .fold(0.0, |m, r| m.max(r.report.max_rel_error()))
    }

    /// The result with the largest relative error.
    pub fn worst(&self) -> Option<&InstanceResult> {
        self.results
            .iter()
            .max_by(|a, b| a.report.max_rel_error().total_cmp(&b.report.max_rel_error()))
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.instances == 0 {
        return Err(Error::config("instances must be at least 1"));
    }
    if !(cfg.tolerance > 0.0) {
        return Err(Error::config("tolerance must be positive"));
    }
    let mut results = Vec::new();
    for index in 0..cfg.instances {
        let inst = draw_instance(cfg.seed, index)?;
        for &op in &cfg.ops {
            results.push(InstanceResult {
                instance: index,
                op,
                batch: inst.samples.len(),
                report: inst.check(op, cfg.step, cfg.tolerance)?,
            });
        }
    }
    Ok(SuiteReport {
        results,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in CheckOp::ALL {
            assert_eq!(op.name().parse::<CheckOp>().unwrap(), op);
        }
        assert!("l_x".parse::<CheckOp>().is_err());
    }

    #[test]
    fn instances_are_deterministic_and_bounded() {
        let a = draw_instance(5, 3).unwrap();
        let b = draw_instance(5, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!((2..=MAX_BATCH).contains(&a.samples.len()));
        assert_eq!(a.model.config().d, 8);
    }

    #[test]
    fn single_instance_passes() {
        let inst = draw_instance(0, 0).unwrap();
        for op in CheckOp::ALL {
            let r = inst.check(op, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed, "{op}: {:?}", r.worst());
        }
    }
}
