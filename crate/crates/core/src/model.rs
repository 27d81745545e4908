//! Forward path: toy feature encoder, pseudo AU labels, linear AU
//! classifiers, low-rank bilinear attention, weighted AU fusion and the
//! expression head.
//!
//! Everything is built on [`Graph`] so the same code serves inference,
//! training and gradient checks. The free functions at the bottom of the
//! module are value-level conveniences over single tensors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Param, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::knowledge::PriorMatrix;

/// How attention logits become weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionNorm {
    #[default]
    Softmax,
    /// Plain `w_i / sum_j w_j`; requires a positive logit sum.
    Ratio,
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionNorm::Softmax),
            "ratio" => Ok(AttentionNorm::Ratio),
            other => Err(Error::config(format!(
                "attention_norm must be softmax or ratio, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionNorm::Softmax => "softmax",
            AttentionNorm::Ratio => "ratio",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Global expression feature width.
    pub d_e: usize,
    /// Per-AU feature width.
    pub d_a: usize,
    /// Rank of the bilinear attention.
    pub d: usize,
    pub n_expr: usize,
    pub n_aus: usize,
    pub attention_norm: AttentionNorm,
    pub au_bias: bool,
    pub expr_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            d_e: 32,
            d_a: 16,
            d: 16,
            n_expr: 7,
            n_aus: 12,
            attention_norm: AttentionNorm::Softmax,
            au_bias: true,
            expr_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_e", self.d_e),
            ("d_a", self.d_a),
            ("d", self.d),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_expr < 2 || self.n_aus < 2 {
            return Err(Error::config("need at least 2 expressions and 2 AUs"));
        }
        Ok(())
    }

    /// FNV-1a over the shape-determining fields.
    pub fn shape_hash(&self) -> u32 {
        let text = format!(
            "in={} de={} da={} d={} E={} A={} aub={} eb={}",
            self.input_dim,
            self.d_e,
            self.d_a,
            self.d,
            self.n_expr,
            self.n_aus,
            self.au_bias,
            self.expr_bias
        );
        text.bytes().fold(0x811c_9dc5u32, |h, b| {
            (h ^ u32::from(b)).wrapping_mul(0x0100_0193)
        })
    }
}

/// Parameter names, in the order they are created.
pub mod names {
    pub const ENC_EXPR_W: &str = "encoder.expr.weight";
    pub const ENC_EXPR_B: &str = "encoder.expr.bias";
    pub const HEAD1_W: &str = "head1.weight";
    pub const HEAD1_B: &str = "head1.bias";
    pub const W_EA: &str = "w_ea";
    pub const ATTN_U: &str = "attn.u";
    pub const ATTN_V: &str = "attn.v";
    pub const ATTN_P: &str = "attn.p";
    pub const ATTN_B: &str = "attn.b";
    pub const HEAD_W: &str = "head.weight";
    pub const HEAD_B: &str = "head.bias";

    pub fn enc_au_w(i: usize) -> String {
        format!("encoder.au{i}.weight")
    }

    pub fn enc_au_b(i: usize) -> String {
        format!("encoder.au{i}.bias")
    }

    pub fn au_w(i: usize) -> String {
        format!("au{i}.weight")
    }

    pub fn au_b(i: usize) -> String {
        format!("au{i}.bias")
    }
}

/// Trainable parameter groups used by the staged schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Global expression encoder.
    Encoder,
    /// Expression classifier over the global feature alone.
    ExprHeadStage1,
    /// Per-AU encoders, AU classifiers and the correlation matrix.
    AuBranch,
    /// Bilinear attention and the fused expression classifier.
    AttentionHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("encoder.expr.") {
            ParamGroup::Encoder
        } else if name.starts_with("head1.") {
            ParamGroup::ExprHeadStage1
        } else if name.starts_with("attn.") || name.starts_with("head.") {
            ParamGroup::AttentionHead
        } else {
            ParamGroup::AuBranch
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::ExprHeadStage1 => "expr_head_stage1",
            ParamGroup::AuBranch => "au_branch",
            ParamGroup::AttentionHead => "attention_head",
        })
    }
}

/// All learnable parameters plus the last completed training stage.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamStore,
    stage: u32,
}

impl ModelState {
    /// Seeded initialization. Weight matrices are uniform in
    /// `±1/sqrt(fan_in)`, biases start at zero and `w_ea` starts at the prior.
    pub fn init(config: &ModelConfig, prior: &PriorMatrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if prior.n_expressions() != config.n_expr || prior.n_aus() != config.n_aus {
            return Err(Error::shape(format!(
                "prior is {}x{} but the model expects {}x{}",
                prior.n_expressions(),
                prior.n_aus(),
                config.n_expr,
                config.n_aus
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let mut uniform = |rows: usize, cols: usize| -> Result<Tensor> {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::matrix(rows, cols, data)
        };

        store.insert(Param::new(names::ENC_EXPR_W, uniform(c.input_dim, c.d_e)?))?;
        store.insert(Param::new(names::ENC_EXPR_B, Tensor::zeros(&[c.d_e])))?;
        for i in 0..c.n_aus {
            store.insert(Param::new(names::enc_au_w(i), uniform(c.input_dim, c.d_a)?))?;
            store.insert(Param::new(names::enc_au_b(i), Tensor::zeros(&[c.d_a])))?;
        }
        store.insert(Param::new(names::HEAD1_W, uniform(c.d_e, c.n_expr)?))?;
        if c.expr_bias {
            store.insert(Param::new(names::HEAD1_B, Tensor::zeros(&[c.n_expr])))?;
        }
        store.insert(Param::new(names::W_EA, prior.tensor().clone()).with_bounds(0.0, 1.0))?;
        for i in 0..c.n_aus {
            let w = uniform(c.d_a, 1)?;
            store.insert(Param::new(names::au_w(i), Tensor::vector(w.into_data())?))?;
            if c.au_bias {
                store.insert(Param::new(names::au_b(i), Tensor::zeros(&[1])))?;
            }
        }
        store.insert(Param::new(names::ATTN_U, uniform(c.d_e, c.d)?))?;
        store.insert(Param::new(names::ATTN_V, uniform(c.d_a, c.d)?))?;
        store.insert(Param::new(names::ATTN_P, uniform(c.d, 1)?))?;
        store.insert(Param::new(names::ATTN_B, Tensor::zeros(&[c.d])))?;
        store.insert(Param::new(names::HEAD_W, uniform(c.d_a + c.d_e, c.n_expr)?))?;
        if c.expr_bias {
            store.insert(Param::new(names::HEAD_B, Tensor::zeros(&[c.n_expr])))?;
        }
        Ok(ModelState {
            config: config.clone(),
            params: store,
            stage: 0,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, stage: u32) -> Self {
        ModelState {
            config,
            params,
            stage,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Last completed training stage (0 when freshly initialized).
    pub fn stage(&self) -> u32 {
        self.stage
    }

    pub fn set_stage(&mut self, stage: u32) {
        self.stage = stage;
    }

    pub fn w_ea(&self) -> &Tensor {
        self.params.value(names::W_EA).expect("w_ea always exists")
    }

    /// Copies the stage-1 classifier into the `f^e` block of the fused head
    /// and zeroes the `f^a` block, so the fused classifier starts from the
    /// stage-1 decision function.
    pub fn warm_start_fused_head(&mut self) -> Result<()> {
        let c = &self.config;
        let head1 = self.params.value(names::HEAD1_W)?.clone();
        let mut w = vec![0.0; (c.d_a + c.d_e) * c.n_expr];
        w[c.d_a * c.n_expr..].copy_from_slice(head1.data());
        let w = Tensor::matrix(c.d_a + c.d_e, c.n_expr, w)?;
        self.params.get_mut(names::HEAD_W)?.set_value(w)?;
        if c.expr_bias {
            let b = self.params.value(names::HEAD1_B)?.clone();
            self.params.get_mut(names::HEAD_B)?.set_value(b)?;
        }
        Ok(())
    }

    /// Inference for one raw input vector.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.config, &self.params)?;
        let xv = g.constant(Tensor::vector(x.to_vec())?);
        let fwd = vars.forward(&mut g, xv)?;
        let stage1 = vars.predict_expression_stage1(&mut g, fwd.features.f_e)?;
        let read = |v: Var| g.value(v).data().to_vec();
        Ok(Prediction {
            p_e: read(fwd.p_e),
            p_e_stage1: read(stage1),
            p_a: read(fwd.p_a),
            logits: read(fwd.attention.logits),
            weights: read(fwd.attention.weights),
        })
    }

    /// Expression distribution from the classifier matching the completed
    /// stage: the global-feature head before stage 3, the fused head after.
    pub fn classify(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.predict(x)?;
        Ok(if self.stage >= 3 { p.p_e } else { p.p_e_stage1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Fused-head expression distribution.
    pub p_e: Vec<f64>,
    /// Global-feature-only expression distribution.
    pub p_e_stage1: Vec<f64>,
    /// Predicted AU labels.
    pub p_a: Vec<f64>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Affine {
    fn bind(g: &mut Graph, params: &ParamStore, w: &str, b: &str, bias: bool) -> Result<Self> {
        Ok(Affine {
            weight: g.param(params, w)?,
            bias: if bias { Some(g.param(params, b)?) } else { None },
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.vecmat(x, self.weight)?;
        match self.bias {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

/// One linear AU classifier: weight vector and optional scalar bias.
#[derive(Debug, Clone, Copy)]
pub struct AuClassifier {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub u: Var,
    pub v: Var,
    pub p: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub f_e: Var,
    pub f_a: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub logits: Var,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub features: FeatureSet,
    pub p_a: Var,
    pub attention: AttentionWeights,
    pub fused: Var,
    pub p_e: Var,
}

/// Every model parameter recorded once as a leaf of a graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub norm: AttentionNorm,
    pub enc_expr: Affine,
    pub enc_au: Vec<Affine>,
    pub head1: Affine,
    pub w_ea: Var,
    pub au: Vec<AuClassifier>,
    pub attention: AttentionParams,
    pub head: Affine,
}

impl ModelVars {
    pub fn bind(g: &mut Graph, config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let enc_expr = Affine::bind(g, params, names::ENC_EXPR_W, names::ENC_EXPR_B, true)?;
        let enc_au = (0..config.n_aus)
            .map(|i| Affine::bind(g, params, &names::enc_au_w(i), &names::enc_au_b(i), true))
            .collect::<Result<Vec<_>>>()?;
        let head1 = Affine::bind(g, params, names::HEAD1_W, names::HEAD1_B, config.expr_bias)?;
        let w_ea = g.param(params, names::W_EA)?;
        let au = (0..config.n_aus)
            .map(|i| {
                Ok(AuClassifier {
                    weight: g.param(params, &names::au_w(i))?,
                    bias: if config.au_bias {
                        Some(g.param(params, &names::au_b(i))?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let attention = AttentionParams {
            u: g.param(params, names::ATTN_U)?,
            v: g.param(params, names::ATTN_V)?,
            p: g.param(params, names::ATTN_P)?,
            b: g.param(params, names::ATTN_B)?,
        };
        let head = Affine::bind(g, params, names::HEAD_W, names::HEAD_B, config.expr_bias)?;
        Ok(ModelVars {
            norm: config.attention_norm,
            enc_expr,
            enc_au,
            head1,
            w_ea,
            au,
            attention,
            head,
        })
    }

    pub fn encode_expr(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.enc_expr.apply(g, x)?;
        g.tanh(h)
    }

    pub fn encode_aus(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        self.enc_au
            .iter()
            .map(|enc| {
                let h = enc.apply(g, x)?;
                g.tanh(h)
            })
            .collect()
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<FeatureSet> {
        Ok(FeatureSet {
            f_e: self.encode_expr(g, x)?,
            f_a: self.encode_aus(g, x)?,
        })
    }

    pub fn predict_expression_stage1(&self, g: &mut Graph, f_e: Var) -> Result<Var> {
        let logits = self.head1.apply(g, f_e)?;
        g.softmax(logits)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let features = self.encode(g, x)?;
        let p_a = predict_au(g, &features.f_a, &self.au)?;
        let logits = attention_logits(g, features.f_e, &features.f_a, &self.attention)?;
        let attention = normalize_attention(g, logits, self.norm)?;
        let fused = fuse_au(g, attention.weights, &features.f_a)?;
        let p_e = predict_expression(g, fused, features.f_e, &self.head)?;
        Ok(Forward {
            features,
            p_a,
            attention,
            fused,
            p_e,
        })
    }
}

/// `p_e · W_EA`: soft AU targets from an expression distribution.
pub fn pseudo_labels(g: &mut Graph, p_e: Var, w_ea: Var) -> Result<Var> {
    g.vecmat(p_e, w_ea)
}

/// `p_a[i] = w_i · f_a_i (+ bias_i)`, a raw linear score per AU.
pub fn predict_au(g: &mut Graph, f_a: &[Var], classifiers: &[AuClassifier]) -> Result<Var> {
    if f_a.len() != classifiers.len() {
        return Err(Error::shape(format!(
            "{} AU features but {} AU classifiers",
            f_a.len(),
            classifiers.len()
        )));
    }
    let scores = f_a
        .iter()
        .zip(classifiers)
        .map(|(&f, c)| {
            let s = g.dot(c.weight, f)?;
            match c.bias {
                Some(b) => g.add(s, b),
                None => Ok(s),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&scores)
}

/// `logit_i = Pᵀ(tanh(Uᵀ f_e) ⊙ tanh(Vᵀ f_a_i) + b)`, one shared head for all AUs.
pub fn attention_logits(
    g: &mut Graph,
    f_e: Var,
    f_a: &[Var],
    attn: &AttentionParams,
) -> Result<Var> {
    let ue = g.vecmat(f_e, attn.u)?;
    let expr_side = g.tanh(ue)?;
    let logits = f_a
        .iter()
        .map(|&f| {
            let va = g.vecmat(f, attn.v)?;
            let au_side = g.tanh(va)?;
            let joint = g.mul(expr_side, au_side)?;
            let shifted = g.add(joint, attn.b)?;
            g.vecmat(shifted, attn.p)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&logits)
}

pub fn normalize_attention(g: &mut Graph, logits: Var, norm: AttentionNorm) -> Result<AttentionWeights> {
    let weights = match norm {
        AttentionNorm::Softmax => g.softmax(logits)?,
        AttentionNorm::Ratio => g.ratio_norm(logits)?,
    };
    Ok(AttentionWeights { logits, weights })
}

/// `Σ_i w_i f_a_i`.
pub fn fuse_au(g: &mut Graph, weights: Var, f_a: &[Var]) -> Result<Var> {
    if g.value(weights).len() != f_a.len() {
        return Err(Error::shape(format!(
            "{} attention weights for {} AU features",
            g.value(weights).len(),
            f_a.len()
        )));
    }
    let terms = f_a
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let w = g.gather(weights, &[i])?;
            g.mul_scalar(f, w)
        })
        .collect::<Result<Vec<_>>>()?;
    g.add_n(&terms)
}

/// `softmax(head([f^a, f^e]))`.
pub fn predict_expression(g: &mut Graph, fused: Var, f_e: Var, head: &Affine) -> Result<Var> {
    let joint = g.concat(&[fused, f_e])?;
    let logits = head.apply(g, joint)?;
    g.softmax(logits)
}

/// Value-level wrappers over the graph builders.
pub mod eval {
    use super::*;

    fn run(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = build(&mut g)?;
        Ok(g.value(out).clone())
    }

    pub fn pseudo_labels(p_e: &Tensor, w_ea: &Tensor) -> Result<Tensor> {
        if p_e.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Validation("expression distribution has negative entries".into()));
        }
        run(|g| {
            let p = g.constant(p_e.clone());
            let w = g.constant(w_ea.clone());
            super::pseudo_labels(g, p, w)
        })
    }

    /// `weights[i]` with optional `biases[i]`.
    pub fn predict_au(f_a: &[Tensor], weights: &[Tensor], biases: Option<&[f64]>) -> Result<Tensor> {
        run(|g| {
            let feats: Vec<Var> = f_a.iter().map(|t| g.constant(t.clone())).collect();
            let cls = weights
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    Ok(AuClassifier {
                        weight: g.constant(w.clone()),
                        bias: match biases {
                            Some(b) => Some(g.constant(Tensor::scalar(b[i])?)),
                            None => None,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            super::predict_au(g, &feats, &cls)
        })
    }

    pub fn attention_logits(
        f_e: &Tensor,
        f_a: &[Tensor],
        u: &Tensor,
        v: &Tensor,
        p: &Tensor,
        b: &Tensor,
    ) -> Result<Tensor> {
        run(|g| {
            let fe = g.constant(f_e.clone());
            let fa: Vec<Var> = f_a.iter().map(|t| g.constant(t.clone())).collect();
            let attn = AttentionParams {
                u: g.constant(u.clone()),
                v: g.constant(v.clone()),
                p: g.constant(p.clone()),
                b: g.constant(b.clone()),
            };
            super::attention_logits(g, fe, &fa, &attn)
        })
    }

    pub fn normalize_attention(logits: &Tensor, norm: AttentionNorm) -> Result<Tensor> {
        run(|g| {
            let l = g.constant(logits.clone());
            Ok(super::normalize_attention(g, l, norm)?.weights)
        })
    }

    pub fn fuse_au(weights: &Tensor, f_a: &[Tensor]) -> Result<Tensor> {
        run(|g| {
            let w = g.constant(weights.clone());
            let fa: Vec<Var> = f_a.iter().map(|t| g.constant(t.clone())).collect();
            super::fuse_au(g, w, &fa)
        })
    }

    pub fn predict_expression(
        fused: &Tensor,
        f_e: &Tensor,
        head: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        run(|g| {
            let fa = g.constant(fused.clone());
            let fe = g.constant(f_e.clone());
            let affine = Affine {
                weight: g.constant(head.clone()),
                bias: bias.map(|b| g.constant(b.clone())),
            };
            super::predict_expression(g, fa, fe, &affine)
        })
    }

    /// Global feature and per-AU features for one input.
    pub fn encode(model: &ModelState, x: &[f64]) -> Result<(Tensor, Vec<Tensor>)> {
        if x.len() != model.config().input_dim {
            return Err(Error::shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                model.config().input_dim
            )));
        }
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, model.config(), model.params())?;
        let xv = g.constant(Tensor::vector(x.to_vec())?);
        let fs = vars.encode(&mut g, xv)?;
        Ok((
            g.value(fs.f_e).clone(),
            fs.f_a.iter().map(|&v| g.value(v).clone()).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::KnowledgeBase;
    use proptest::prelude::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn attention_logits_two_dim_hand_case() {
        let f_e = vec_t(&[0.5, -0.5]);
        let f_a = [vec_t(&[1.0, 0.0]), vec_t(&[0.0, 1.0])];
        // Asymmetric U catches a missing transpose.
        let u = mat(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let v = mat(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let p = mat(2, 1, &[1.0, -1.0]);
        let b = vec_t(&[0.1, 0.2]);
        let got = eval::attention_logits(&f_e, &f_a, &u, &v, &p, &b).unwrap();
        let (g0, g1) = (0.5f64.tanh(), (-0.25f64).tanh());
        let want = [g0 * 1f64.tanh() + 0.1 - 0.2, 0.1 - (g1 * 2f64.tanh() + 0.2)];
        assert!(close(got.data(), &want, 1e-15), "{:?} vs {want:?}", got.data());
    }

    #[test]
    fn normalizations() {
        let s = eval::normalize_attention(&vec_t(&[2f64.ln(), 0.0]), AttentionNorm::Softmax).unwrap();
        assert!(close(s.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let r = eval::normalize_attention(&vec_t(&[1.0, 3.0]), AttentionNorm::Ratio).unwrap();
        assert!(close(r.data(), &[0.25, 0.75], 1e-15));
        assert!(eval::normalize_attention(&vec_t(&[1.0, -1.0]), AttentionNorm::Ratio).is_err());
    }

    #[test]
    fn fusion_and_au_scores() {
        let f_a = [vec_t(&[1.0, 0.0]), vec_t(&[0.0, 4.0])];
        let fused = eval::fuse_au(&vec_t(&[0.25, 0.75]), &f_a).unwrap();
        assert_eq!(fused.data(), &[0.25, 3.0]);
        assert!(eval::fuse_au(&vec_t(&[1.0]), &f_a).is_err());

        let feats = [vec_t(&[1.0, 2.0]), vec_t(&[3.0, 4.0])];
        let weights = [vec_t(&[1.0, 1.0]), vec_t(&[0.5, 0.0])];
        let p_a = eval::predict_au(&feats, &weights, Some(&[0.1, -0.1])).unwrap();
        assert!(close(p_a.data(), &[3.1, 1.4], 1e-15));
    }

    #[test]
    fn pseudo_labels_mix_rows() {
        let w = mat(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, 0.25]);
        let one = eval::pseudo_labels(&Tensor::one_hot(2, 1), &w).unwrap();
        assert_eq!(one.data(), &[0.0, 1.0, 0.25]);
        let mix = eval::pseudo_labels(&vec_t(&[0.5, 0.5]), &w).unwrap();
        assert!(close(mix.data(), &[0.5, 0.5, 0.375], 1e-15));
        assert!(matches!(
            eval::pseudo_labels(&vec_t(&[1.5, -0.5]), &w),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fused_head_reads_au_block_first() {
        let head = mat(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = eval::predict_expression(&vec_t(&[1.0]), &vec_t(&[0.0]), &head, None).unwrap();
        let e = std::f64::consts::E;
        assert!(close(p.data(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
        let zero = mat(2, 2, &[0.0; 4]);
        let u = eval::predict_expression(&vec_t(&[1.0]), &vec_t(&[2.0]), &zero, None).unwrap();
        assert_eq!(u.data(), &[0.5, 0.5]);
    }

    fn model(seed: u64) -> ModelState {
        let kb = KnowledgeBase::builtin();
        ModelState::init(&ModelConfig::default(), &kb.prior(), seed).unwrap()
    }

    #[test]
    fn init_is_seeded_and_starts_at_prior() {
        let kb = KnowledgeBase::builtin();
        let (a, b, c) = (model(1), model(1), model(2));
        assert_eq!(a.params().value(names::ATTN_U).unwrap(), b.params().value(names::ATTN_U).unwrap());
        assert_ne!(a.params().value(names::ATTN_U).unwrap(), c.params().value(names::ATTN_U).unwrap());
        assert_eq!(a.w_ea(), kb.prior().tensor());
        assert_eq!(a.stage(), 0);
        assert_eq!(a.params().value(names::HEAD_W).unwrap().shape(), &[16 + 32, 7]);
        assert_eq!(a.params().value(&names::enc_au_w(11)).unwrap().shape(), &[32, 16]);
    }

    #[test]
    fn init_rejects_mismatched_prior() {
        let kb = KnowledgeBase::builtin();
        let config = ModelConfig { n_aus: 17, ..ModelConfig::default() };
        assert!(matches!(ModelState::init(&config, &kb.prior(), 0), Err(Error::Shape(_))));
        let bad = ModelConfig { d: 0, ..ModelConfig::default() };
        assert!(matches!(ModelState::init(&bad, &kb.prior(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn warm_start_reproduces_stage_one_classifier() {
        let mut m = model(3);
        m.warm_start_fused_head().unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = m.predict(&x).unwrap();
        assert!(close(&p.p_e, &p.p_e_stage1, 1e-12));
    }

    #[test]
    fn classify_switches_head_after_stage_three() {
        let mut m = model(4);
        let x = vec![0.3; 32];
        let p = m.predict(&x).unwrap();
        assert_eq!(m.classify(&x).unwrap(), p.p_e_stage1);
        m.set_stage(3);
        assert_eq!(m.classify(&x).unwrap(), p.p_e);
        assert!(m.predict(&[0.0; 3]).is_err());
    }

    #[test]
    fn shape_hash_tracks_shapes_only() {
        let base = ModelConfig::default();
        let ratio = ModelConfig { attention_norm: AttentionNorm::Ratio, ..base.clone() };
        let wider = ModelConfig { d: 17, ..base.clone() };
        assert_eq!(base.shape_hash(), ratio.shape_hash());
        assert_ne!(base.shape_hash(), wider.shape_hash());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn outputs_are_distributions(seed in 0u64..1000, x in prop::collection::vec(-4.0..4.0f64, 32)) {
            let p = model(seed).predict(&x).unwrap();
            prop_assert!(p.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((p.p_e.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(p.p_a.len(), 12);
        }
    }
}
