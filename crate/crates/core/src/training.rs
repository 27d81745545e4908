//! Three-stage schedule, SGD with momentum, and per-class evaluation.
//!
//! | stage | trains                             | loss        | lr     |
//! |-------|------------------------------------|-------------|--------|
//! | 1     | encoder + global-feature classifier | cross-entropy | 0.01  |
//! | 2     | per-AU encoders, AU classifiers, W_EA | L_au      | 0.001  |
//! | 3     | attention + fused classifier       | L_e         | 0.0001 |

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Objective, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::knowledge::{AuPair, KnowledgeBase, PriorMatrix};
use crate::losses;
use crate::model::{self, ModelConfig, ModelState, ModelVars, ParamGroup};
use crate::synthdata::{Dataset, SynthSample};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0;
pub const DEFAULT_EPOCHS: usize = 50;
/// Stage 3 runs at a tenth of the stage-2 rate and gets twice the epochs.
pub const DEFAULT_STAGE3_EPOCHS: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u32 {
        self as u32
    }

    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            other => Err(Error::config(format!("stage must be 1, 2 or 3, got {other}"))),
        }
    }

    pub fn trainable_groups(self) -> Vec<ParamGroup> {
        match self {
            Stage::One => vec![ParamGroup::Encoder, ParamGroup::ExprHeadStage1],
            Stage::Two => vec![ParamGroup::AuBranch],
            Stage::Three => vec![ParamGroup::AttentionHead],
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Three => DEFAULT_STAGE3_EPOCHS,
            _ => DEFAULT_EPOCHS,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Stage::One => 0.01,
            Stage::Two => 0.001,
            Stage::Three => 0.0001,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Multiply the learning rate by `factor` every `every` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub groups: Vec<ParamGroup>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay: Option<StepDecay>,
}

impl StagePlan {
    pub fn default_for(stage: Stage) -> Self {
        StagePlan {
            stage,
            groups: stage.trainable_groups(),
            lr: stage.default_lr(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: stage.default_epochs(),
            batch_size: DEFAULT_BATCH_SIZE,
            decay: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut groups = self.groups.clone();
        groups.sort();
        groups.dedup();
        let mut expected = self.stage.trainable_groups();
        expected.sort();
        if groups != expected {
            let list = |g: &[ParamGroup]| {
                g.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            };
            return Err(Error::config(format!(
                "stage {} trains [{}], plan lists [{}]",
                self.stage,
                list(&expected),
                list(&groups)
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("stage {}: lr must be positive", self.stage)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "stage {}: momentum must be in [0, 1)",
                self.stage
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "stage {}: weight_decay must be >= 0",
                self.stage
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!(
                "stage {}: epochs and batch_size must be positive",
                self.stage
            )));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::config(format!("stage {}: invalid step decay", self.stage)));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay {
            Some(d) => self.lr * d.factor.powi((epoch / d.every) as i32),
            None => self.lr,
        }
    }
}

/// In-place SGD with momentum and L2 weight decay:
/// `v ← momentum·v + g + wd·θ`, `θ ← θ − lr·v`. Frozen parameters and their
/// buffers are left untouched; bounded parameters are clamped afterwards.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for p in params.iter() {
        if !p.is_frozen() && p.grad().data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite gradient for `{}`", p.name())));
        }
    }
    for p in params.iter_mut() {
        if p.is_frozen() {
            continue;
        }
        let bounds = p.bounds();
        let name = p.name().to_string();
        let (value, grad, buf) = p.parts_mut();
        let (theta, g, v) = (value.data_mut(), grad.data(), buf.data_mut());
        for k in 0..theta.len() {
            v[k] = momentum * v[k] + g[k] + weight_decay * theta[k];
            theta[k] -= lr * v[k];
            if let Some((lo, hi)) = bounds {
                theta[k] = theta[k].clamp(lo, hi);
            }
            if !theta[k].is_finite() || !v[k].is_finite() {
                return Err(Error::Numerics(format!("update of `{name}` overflowed")));
            }
        }
    }
    Ok(())
}

/// Knowledge-derived constants and balance weights shared by the objectives.
#[derive(Debug, Clone)]
pub struct LossSetup {
    pub prior: Tensor,
    pub positive: Vec<AuPair>,
    pub negative: Vec<AuPair>,
    pub alpha: f64,
    pub lambda: f64,
}

impl LossSetup {
    pub fn new(kb: &KnowledgeBase, prior: &PriorMatrix, alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(lambda >= 0.0) {
            return Err(Error::config("alpha and lambda must be non-negative"));
        }
        let (positive, negative) = kb.pair_sets();
        Ok(LossSetup {
            prior: prior.tensor().clone(),
            positive,
            negative,
            alpha,
            lambda,
        })
    }
}

/// Graph nodes for the loss components of one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct Components {
    pub l_c: Option<Var>,
    pub l_p: Option<Var>,
    pub l_n: Option<Var>,
    pub l_au: Option<Var>,
}

/// The loss a stage minimizes over one batch.
pub struct StageObjective<'a> {
    pub stage: Stage,
    pub config: &'a ModelConfig,
    pub setup: &'a LossSetup,
    pub batch: Vec<&'a SynthSample>,
}

impl StageObjective<'_> {
    pub fn build_components(&self, g: &mut Graph, params: &ParamStore) -> Result<(Var, Components)> {
        if self.batch.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        let vars = ModelVars::bind(g, self.config, params)?;
        let labels: Vec<usize> = self.batch.iter().map(|s| s.y).collect();
        let mut inputs = Vec::with_capacity(self.batch.len());
        for s in &self.batch {
            inputs.push(g.constant(Tensor::vector(s.x.clone())?));
        }
        match self.stage {
            Stage::One => {
                let mut preds = Vec::with_capacity(inputs.len());
                for &x in &inputs {
                    let f_e = vars.encode_expr(g, x)?;
                    preds.push(vars.predict_expression_stage1(g, f_e)?);
                }
                let l_c = losses::cross_entropy(g, &preds, &labels)?;
                Ok((l_c, Components { l_c: Some(l_c), ..Components::default() }))
            }
            Stage::Two => {
                let mut p_a = Vec::with_capacity(inputs.len());
                let mut pseudo = Vec::with_capacity(inputs.len());
                for (&x, &y) in inputs.iter().zip(&labels) {
                    let f_a = vars.encode_aus(g, x)?;
                    p_a.push(model::predict_au(g, &f_a, &vars.au)?);
                    let onehot = g.constant(Tensor::one_hot(self.config.n_expr, y));
                    pseudo.push(model::pseudo_labels(g, onehot, vars.w_ea)?);
                }
                let prior = g.constant(self.setup.prior.clone());
                let l_au = losses::loss_au(g, &p_a, &pseudo, vars.w_ea, prior, self.setup.lambda)?;
                Ok((l_au, Components { l_au: Some(l_au), ..Components::default() }))
            }
            Stage::Three => {
                let mut preds = Vec::with_capacity(inputs.len());
                let mut scores = Vec::with_capacity(inputs.len());
                for &x in &inputs {
                    let fs = vars.encode(g, x)?;
                    let logits = model::attention_logits(g, fs.f_e, &fs.f_a, &vars.attention)?;
                    let att = model::normalize_attention(g, logits, vars.norm)?;
                    let fused = model::fuse_au(g, att.weights, &fs.f_a)?;
                    preds.push(model::predict_expression(g, fused, fs.f_e, &vars.head)?);
                    scores.push(losses::existence_scores(g, logits)?);
                }
                let l_c = losses::cross_entropy(g, &preds, &labels)?;
                let probs = losses::batch_probs(g, &scores)?;
                let l_p = losses::loss_pos(g, &probs, &self.setup.positive)?;
                let l_n = losses::loss_neg(g, &probs, &self.setup.negative)?;
                let l_e = losses::composite(g, l_c, l_p, l_n, self.setup.alpha)?;
                Ok((
                    l_e,
                    Components {
                        l_c: Some(l_c),
                        l_p: Some(l_p),
                        l_n: Some(l_n),
                        l_au: None,
                    },
                ))
            }
        }
    }
}

impl Objective for StageObjective<'_> {
    fn build(&self, graph: &mut Graph, params: &ParamStore) -> Result<Var> {
        Ok(self.build_components(graph, params)?.0)
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub stage: u32,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub l_c: Option<f64>,
    pub l_p: Option<f64>,
    pub l_n: Option<f64>,
    pub l_au: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "stage,epoch,loss,l_c,l_p,l_n,l_au";

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.stage,
            r.epoch,
            r.loss,
            cell(r.l_c),
            cell(r.l_p),
            cell(r.l_n),
            cell(r.l_au)
        ));
    }
    out
}

pub fn write_loss_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, loss_csv(history))?;
    Ok(())
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let key = seed
        ^ (u64::from(stage.number()) << 56)
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn check_data(model: &ModelState, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let c = model.config();
    if data.input_dim != c.input_dim || data.n_expr != c.n_expr || data.n_aus != c.n_aus {
        return Err(Error::config(format!(
            "dataset has dim={} E={} A={}, model expects dim={} E={} A={}",
            data.input_dim, data.n_expr, data.n_aus, c.input_dim, c.n_expr, c.n_aus
        )));
    }
    Ok(())
}

/// Trains one stage in place and returns per-epoch mean losses. Shuffling
/// is a pure function of `(seed, stage, epoch)`.
pub fn run_stage(
    plan: &StagePlan,
    model: &mut ModelState,
    data: &Dataset,
    setup: &LossSetup,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    plan.validate()?;
    check_data(model, data)?;
    if plan.stage == Stage::Three && model.stage() < 3 {
        model.warm_start_fused_head()?;
    }
    let config = model.config().clone();
    {
        let params = model.params_mut();
        params.freeze_all_except(|name| plan.groups.contains(&ParamGroup::of(name)));
        params.reset_momentum();
    }

    let mut history = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let lr = plan.lr_at(epoch);
        let order = epoch_order(data.len(), seed, plan.stage, epoch);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        let mut seen = Components::default();
        for chunk in order.chunks(plan.batch_size) {
            let objective = StageObjective {
                stage: plan.stage,
                config: &config,
                setup,
                batch: chunk.iter().map(|&i| &data.samples[i]).collect(),
            };
            let mut g = Graph::new();
            let (root, parts) = objective.build_components(&mut g, model.params())?;
            let loss = g.value(root).item();
            if !loss.is_finite() {
                return Err(Error::Numerics(format!("non-finite loss in stage {}", plan.stage)));
            }
            crate::diffcore::store_gradients(&g, root, model.params_mut())?;
            sgd_step(model.params_mut(), lr, plan.momentum, plan.weight_decay)?;

            let read = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
            sums[0] += loss;
            sums[1] += read(parts.l_c);
            sums[2] += read(parts.l_p);
            sums[3] += read(parts.l_n);
            sums[4] += read(parts.l_au);
            batches += 1;
            seen = parts;
        }
        let mean = |k: usize, present: bool| present.then(|| sums[k] / batches as f64);
        history.push(EpochRecord {
            stage: plan.stage.number(),
            epoch: epoch + 1,
            loss: sums[0] / batches as f64,
            l_c: mean(1, seen.l_c.is_some()),
            l_p: mean(2, seen.l_p.is_some()),
            l_n: mean(3, seen.l_n.is_some()),
            l_au: mean(4, seen.l_au.is_some()),
        });
    }
    model.set_stage(plan.stage.number());
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Percent correct per class; `None` for classes absent from the data.
    pub per_class_acc: Vec<Option<f64>>,
    /// Mean of the defined per-class accuracies.
    pub average_acc: f64,
    pub overall_acc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(n_classes: usize, predicted: &[usize], labels: &[usize]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::shape("prediction and label counts differ"));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= n_classes || y >= n_classes {
                return Err(Error::shape(format!("class index out of range for {n_classes}")));
            }
            confusion[y][p] += 1;
        }
        let per_class_acc: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| 100.0 * row[c] as f64 / n as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_acc.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::Validation("no labeled samples to evaluate".into()));
        }
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        Ok(Metrics {
            average_acc: defined.iter().sum::<f64>() / defined.len() as f64,
            overall_acc: 100.0 * correct as f64 / labels.len() as f64,
            per_class_acc,
            confusion,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-class and average accuracy of the classifier for the model's stage.
pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<Metrics> {
    check_data(model, data)?;
    let predicted = data
        .samples
        .iter()
        .map(|s| Ok(argmax(&model.classify(&s.x)?)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.y).collect();
    Metrics::from_predictions(model.config().n_expr, &predicted, &labels)
}

/// Attention statistics over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    /// Mean normalized weight per AU over all samples.
    pub mean_weight: Vec<f64>,
    /// Fraction of samples with `sigmoid(logit) > 0.5` per AU.
    pub existence_rate: Vec<f64>,
    /// Mean normalized weight per AU for each expression (`None` if the
    /// expression has no samples).
    pub per_expression: Vec<Option<Vec<f64>>>,
}

pub fn attention_stats(model: &ModelState, data: &Dataset) -> Result<AttentionStats> {
    check_data(model, data)?;
    let (e, a) = (model.config().n_expr, model.config().n_aus);
    let mut mean_weight = vec![0.0; a];
    let mut exists = vec![0usize; a];
    let mut per_expr = vec![vec![0.0; a]; e];
    let mut counts = vec![0usize; e];
    for s in &data.samples {
        let p = model.predict(&s.x)?;
        for i in 0..a {
            mean_weight[i] += p.weights[i];
            per_expr[s.y][i] += p.weights[i];
            if p.logits[i] > 0.0 {
                exists[i] += 1;
            }
        }
        counts[s.y] += 1;
    }
    let n = data.len() as f64;
    Ok(AttentionStats {
        mean_weight: mean_weight.iter().map(|w| w / n).collect(),
        existence_rate: exists.iter().map(|&c| c as f64 / n).collect(),
        per_expression: per_expr
            .into_iter()
            .zip(counts)
            .map(|(row, c)| (c > 0).then(|| row.iter().map(|w| w / c as f64).collect()))
            .collect(),
    })
}

/// Indices of the `k` largest values, largest first; ties keep index order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Param;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut p = Param::new("theta", Tensor::scalar(value).unwrap());
        p.set_grad(Tensor::scalar(grad).unwrap()).unwrap();
        s.insert(p).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(0.3, 0.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.value("theta").unwrap().item(), 0.3);
    }

    #[test]
    fn first_step_is_plain_gradient_descent() {
        let mut s = store_with(1.0, 2.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.value("theta").unwrap().item(), 1.0 - 0.1 * 2.0);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut s = store_with(0.0, 1.0);
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        // v1 = 1, θ1 = -0.1; v2 = 1.9, θ2 = -0.1 - 0.19
        assert!((s.value("theta").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_bounded_params() {
        let mut s = ParamStore::new();
        let mut frozen = Param::new("f", Tensor::scalar(1.0).unwrap());
        frozen.set_grad(Tensor::scalar(5.0).unwrap()).unwrap();
        let mut bounded = Param::new("b", Tensor::vector(vec![0.05, 0.95]).unwrap()).with_bounds(0.0, 1.0);
        bounded.set_grad(Tensor::vector(vec![10.0, -10.0]).unwrap()).unwrap();
        s.insert(frozen).unwrap();
        s.insert(bounded).unwrap();
        s.set_frozen("f", true).unwrap();
        sgd_step(&mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.value("f").unwrap().item(), 1.0);
        assert_eq!(s.get("f").unwrap().momentum().item(), 0.0);
        assert_eq!(s.value("b").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = ParamStore::new();
        let mut p = Param::new("x", Tensor::scalar(0.0).unwrap());
        p.set_grad(Tensor::from_raw(vec![1], vec![f64::NAN])).unwrap();
        s.insert(p).unwrap();
        assert!(matches!(sgd_step(&mut s, 0.1, 0.0, 0.0), Err(Error::Numerics(_))));
    }

    #[test]
    fn weight_decay_adds_to_velocity() {
        let mut s = store_with(2.0, 0.0);
        sgd_step(&mut s, 0.5, 0.0, 0.1).unwrap();
        assert!((s.value("theta").unwrap().item() - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn stage_plan_rejects_group_mismatch() {
        let mut plan = StagePlan::default_for(Stage::Two);
        plan.groups.push(ParamGroup::Encoder);
        assert!(matches!(plan.validate(), Err(Error::Config(_))));
        assert!(StagePlan::default_for(Stage::Three).validate().is_ok());
    }

    #[test]
    fn default_stage_rates() {
        let lrs: Vec<f64> = Stage::ALL.iter().map(|s| StagePlan::default_for(*s).lr).collect();
        assert_eq!(lrs, vec![0.01, 0.001, 0.0001]);
        let plan = StagePlan::default_for(Stage::One);
        assert_eq!((plan.momentum, plan.weight_decay), (0.9, 0.0));
    }

    #[test]
    fn step_decay() {
        let mut plan = StagePlan::default_for(Stage::One);
        assert_eq!(plan.lr_at(40), 0.01);
        plan.decay = Some(StepDecay { every: 10, factor: 0.5 });
        assert_eq!(plan.lr_at(9), 0.01);
        assert_eq!(plan.lr_at(25), 0.0025);
    }

    #[test]
    fn metrics_counting() {
        // class 0: 3 of 4 right, class 1: 1 of 2 right
        let labels = [0, 0, 0, 0, 1, 1];
        let preds = [0, 0, 0, 1, 1, 0];
        let m = Metrics::from_predictions(2, &preds, &labels).unwrap();
        assert_eq!(m.per_class_acc, vec![Some(75.0), Some(50.0)]);
        assert_eq!(m.average_acc, 62.5);
        assert!((m.overall_acc - 400.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.confusion, vec![vec![3, 1], vec![1, 1]]);
    }

    #[test]
    fn metrics_perfect_and_empty_classes() {
        let m = Metrics::from_predictions(3, &[0, 2], &[0, 2]).unwrap();
        assert_eq!(m.per_class_acc, vec![Some(100.0), None, Some(100.0)]);
        assert_eq!(m.average_acc, 100.0);
        assert!(Metrics::from_predictions(3, &[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(top_k(&[0.1, 0.5, 0.5, 0.2], 3), vec![1, 2, 3]);
    }

    #[test]
    fn loss_csv_format() {
        let h = [EpochRecord {
            stage: 2,
            epoch: 1,
            loss: 0.5,
            l_c: None,
            l_p: None,
            l_n: None,
            l_au: Some(0.5),
        }];
        assert_eq!(loss_csv(&h), "stage,epoch,loss,l_c,l_p,l_n,l_au\n2,1,0.5,,,,0.5\n");
    }
}
