//! AU loss with the prior-matrix regularizer, batch co-occurrence estimates,
//! the positive/negative pair hinge regularizers and the composite
//! expression objective.
//!
//! Probabilities are mini-batch means of soft existence scores
//! `s_i = sigmoid(logit_i)`; joints are means of per-sample products, so
//! `p(i1, j1) = mean_b s_i s_j` and `p(i1, j0) = mean_b s_i (1 - s_j)`.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::knowledge::AuPair;

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Batch AU loss: mean over samples of `||p_a - pseudo||²` plus
/// `lambda * ||W_EA - prior||²`.
pub fn loss_au(
    g: &mut Graph,
    p_a: &[Var],
    pseudo: &[Var],
    w_ea: Var,
    prior: Var,
    lambda: f64,
) -> Result<Var> {
    if p_a.len() != pseudo.len() || p_a.is_empty() {
        return Err(Error::shape(format!(
            "loss_au: {} predictions for {} pseudo labels",
            p_a.len(),
            pseudo.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::config("lambda must be non-negative"));
    }
    let per_sample = p_a
        .iter()
        .zip(pseudo)
        .map(|(&p, &q)| g.squared_error(p, q))
        .collect::<Result<Vec<_>>>()?;
    let fit = g.mean(&per_sample)?;
    let drift = g.squared_error(w_ea, prior)?;
    let reg = g.scale(drift, lambda)?;
    g.add(fit, reg)
}

pub fn existence_scores(g: &mut Graph, logits: Var) -> Result<Var> {
    g.sigmoid(logits)
}

/// Batch co-occurrence estimates as graph nodes. Joint matrices are `[A, A]`.
#[derive(Debug, Clone, Copy)]
pub struct ProbVars {
    pub marginal_1: Var,
    pub marginal_0: Var,
    pub joint_11: Var,
    pub joint_10: Var,
    pub joint_01: Var,
    pub n_aus: usize,
}

pub fn batch_probs(g: &mut Graph, scores: &[Var]) -> Result<ProbVars> {
    let first = scores
        .first()
        .ok_or_else(|| Error::shape("batch_probs: empty batch"))?;
    let n_aus = g.value(*first).len();
    let mut j11 = Vec::with_capacity(scores.len());
    let mut j10 = Vec::with_capacity(scores.len());
    let mut j01 = Vec::with_capacity(scores.len());
    for &s in scores {
        let off = g.const_sub(1.0, s)?;
        j11.push(g.outer(s, s)?);
        j10.push(g.outer(s, off)?);
        j01.push(g.outer(off, s)?);
    }
    let marginal_1 = g.mean(scores)?;
    let marginal_0 = g.const_sub(1.0, marginal_1)?;
    Ok(ProbVars {
        marginal_1,
        marginal_0,
        joint_11: g.mean(&j11)?,
        joint_10: g.mean(&j10)?,
        joint_01: g.mean(&j01)?,
        n_aus,
    })
}

struct PairTerms {
    product: Var,
    p11: Var,
    p10: Var,
    p01: Var,
}

fn pair_terms(g: &mut Graph, probs: &ProbVars, pairs: &[AuPair]) -> Result<PairTerms> {
    let a = probs.n_aus;
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= a || j >= a) {
        return Err(Error::shape(format!("pair ({i},{j}) out of range for {a} AUs")));
    }
    let first: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let flat: Vec<usize> = pairs.iter().map(|&(i, j)| i * a + j).collect();
    let pi = g.gather(probs.marginal_1, &first)?;
    let pj = g.gather(probs.marginal_1, &second)?;
    Ok(PairTerms {
        product: g.mul(pi, pj)?,
        p11: g.gather(probs.joint_11, &flat)?,
        p10: g.gather(probs.joint_10, &flat)?,
        p01: g.gather(probs.joint_01, &flat)?,
    })
}

fn hinge_sum(g: &mut Graph, terms: [(Var, Var); 3]) -> Result<Var> {
    let sums = terms
        .into_iter()
        .map(|(a, b)| {
            let diff = g.sub(a, b)?;
            let h = g.hinge(diff)?;
            g.sum(h)
        })
        .collect::<Result<Vec<_>>>()?;
    g.add_n(&sums)
}

/// Positive-pair regularizer: penalizes each pair whose joint activation
/// falls below the independence product or below either one-sided joint.
pub fn loss_pos(g: &mut Graph, probs: &ProbVars, pairs: &[AuPair]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1])));
    }
    let t = pair_terms(g, probs, pairs)?;
    hinge_sum(g, [(t.product, t.p11), (t.p10, t.p11), (t.p01, t.p11)])
}

/// Negative-pair regularizer, the mirror image of [`loss_pos`].
pub fn loss_neg(g: &mut Graph, probs: &ProbVars, pairs: &[AuPair]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[1])));
    }
    let t = pair_terms(g, probs, pairs)?;
    hinge_sum(g, [(t.p11, t.product), (t.p11, t.p10), (t.p11, t.p01)])
}

/// Batch-mean cross-entropy of predicted distributions against class labels.
pub fn cross_entropy(g: &mut Graph, p_e: &[Var], labels: &[usize]) -> Result<Var> {
    if p_e.len() != labels.len() || p_e.is_empty() {
        return Err(Error::shape(format!(
            "cross_entropy: {} predictions for {} labels",
            p_e.len(),
            labels.len()
        )));
    }
    let terms = p_e
        .iter()
        .zip(labels)
        .map(|(&p, &y)| g.cross_entropy(p, y))
        .collect::<Result<Vec<_>>>()?;
    g.mean(&terms)
}

/// `l_c + alpha * (l_p + l_n)`.
pub fn composite(g: &mut Graph, l_c: Var, l_p: Var, l_n: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::config("alpha must be non-negative"));
    }
    let reg = g.add(l_p, l_n)?;
    let reg = g.scale(reg, alpha)?;
    g.add(l_c, reg)
}

/// Scalar loss components. Entries that play no part in the objective that
/// produced the report are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_p: f64,
    pub l_n: f64,
    pub l_au: f64,
    pub l_e: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// Value-level co-occurrence estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbEstimates {
    pub marginal_1: Tensor,
    pub marginal_0: Tensor,
    pub joint_11: Tensor,
    pub joint_10: Tensor,
    pub joint_01: Tensor,
}

impl ProbEstimates {
    /// Estimates from a batch of per-sample existence scores in `[0, 1]`.
    pub fn from_scores(scores: &[Vec<f64>]) -> Result<Self> {
        if scores
            .iter()
            .flatten()
            .any(|&s| !(0.0..=1.0).contains(&s))
        {
            return Err(Error::Validation("existence scores must lie in [0, 1]".into()));
        }
        let mut g = Graph::new();
        let vars = scores
            .iter()
            .map(|s| Ok(g.constant(Tensor::vector(s.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let p = batch_probs(&mut g, &vars)?;
        Ok(ProbEstimates {
            marginal_1: g.value(p.marginal_1).clone(),
            marginal_0: g.value(p.marginal_0).clone(),
            joint_11: g.value(p.joint_11).clone(),
            joint_10: g.value(p.joint_10).clone(),
            joint_01: g.value(p.joint_01).clone(),
        })
    }

    pub fn n_aus(&self) -> usize {
        self.marginal_1.len()
    }

    fn bind(&self, g: &mut Graph) -> ProbVars {
        ProbVars {
            marginal_1: g.constant(self.marginal_1.clone()),
            marginal_0: g.constant(self.marginal_0.clone()),
            joint_11: g.constant(self.joint_11.clone()),
            joint_10: g.constant(self.joint_10.clone()),
            joint_01: g.constant(self.joint_01.clone()),
            n_aus: self.n_aus(),
        }
    }

    pub fn loss_pos(&self, pairs: &[AuPair]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let l = loss_pos(&mut g, &p, pairs)?;
        Ok(g.value(l).item())
    }

    pub fn loss_neg(&self, pairs: &[AuPair]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let l = loss_neg(&mut g, &p, pairs)?;
        Ok(g.value(l).item())
    }
}

/// Sigmoid existence scores for a logit vector.
pub fn existence_scores_of(logits: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(logits.to_vec())?);
    let s = existence_scores(&mut g, l)?;
    Ok(g.value(s).data().to_vec())
}

/// Value-level AU loss over a batch.
pub fn loss_au_value(
    p_a: &[Vec<f64>],
    pseudo: &[Vec<f64>],
    w_ea: &Tensor,
    prior: &Tensor,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let pa = p_a
        .iter()
        .map(|v| Ok(g.constant(Tensor::vector(v.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let ps = pseudo
        .iter()
        .map(|v| Ok(g.constant(Tensor::vector(v.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let w = g.constant(w_ea.clone());
    let pr = g.constant(prior.clone());
    let l = loss_au(&mut g, &pa, &ps, w, pr, lambda)?;
    Ok(g.value(l).item())
}

/// Cross-entropy of `p_e_pred` (one distribution per sample) against class
/// labels, combined with precomputed regularizer values.
pub fn loss_expr(
    p_e_pred: &[Vec<f64>],
    labels: &[usize],
    l_p: f64,
    l_n: f64,
    alpha: f64,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let preds = p_e_pred
        .iter()
        .map(|v| Ok(g.constant(Tensor::vector(v.clone())?)))
        .collect::<Result<Vec<_>>>()?;
    let l_c = cross_entropy(&mut g, &preds, labels)?;
    let lp = g.constant(Tensor::scalar(l_p)?);
    let ln = g.constant(Tensor::scalar(l_n)?);
    let l_e = composite(&mut g, l_c, lp, ln, alpha)?;
    Ok(LossReport {
        l_c: g.value(l_c).item(),
        l_p,
        l_n,
        l_au: 0.0,
        l_e: g.value(l_e).item(),
        alpha,
        lambda: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn estimates_2(p_i: f64, p_j: f64, p11: f64, p10: f64, p01: f64) -> ProbEstimates {
        let joint = |v: f64| Tensor::matrix(2, 2, vec![0.0, v, 0.0, 0.0]).unwrap();
        ProbEstimates {
            marginal_1: Tensor::vector(vec![p_i, p_j]).unwrap(),
            marginal_0: Tensor::vector(vec![1.0 - p_i, 1.0 - p_j]).unwrap(),
            joint_11: joint(p11),
            joint_10: joint(p10),
            joint_01: joint(p01),
        }
    }

    #[test]
    fn positive_hand_case() {
        let est = estimates_2(0.5, 0.5, 0.2, 0.3, 0.3);
        assert!((est.loss_pos(&[(0, 1)]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(est.loss_neg(&[(0, 1)]).unwrap(), 0.0);
    }

    #[test]
    fn negative_hand_case() {
        let est = estimates_2(0.6, 0.6, 0.5, 0.1, 0.1);
        assert!((est.loss_neg(&[(0, 1)]).unwrap() - 0.94).abs() < 1e-15);
        assert_eq!(est.loss_pos(&[(0, 1)]).unwrap(), 0.0);
    }

    #[test]
    fn batch_estimates_from_binary_scores() {
        let mut scores = vec![vec![1.0, 1.0]; 2];
        scores.extend(vec![vec![1.0, 0.0]; 3]);
        scores.extend(vec![vec![0.0, 1.0]; 3]);
        scores.extend(vec![vec![0.0, 0.0]; 2]);
        let est = ProbEstimates::from_scores(&scores).unwrap();
        assert_eq!(est.marginal_1.data(), &[0.5, 0.5]);
        assert!((est.joint_11.data()[1] - 0.2).abs() < 1e-15);
        assert!((est.joint_10.data()[1] - 0.3).abs() < 1e-15);
        assert!((est.loss_pos(&[(0, 1)]).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_e() {
        let uniform = vec![vec![1.0 / 7.0; 7]; 3];
        let r = loss_expr(&uniform, &[0, 4, 6], 0.0, 0.0, 0.5).unwrap();
        assert!((r.l_c - 7f64.ln()).abs() < 1e-9);
        assert!((r.l_c - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn composite_weights_regularizers() {
        let p = vec![vec![0.25, 0.75]];
        let r = loss_expr(&p, &[1], 0.2, 0.1, 0.5).unwrap();
        assert!((r.l_e - (-(0.75f64 + 1e-12).ln() + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_scores() {
        let s = existence_scores_of(&[1.0, -1.0]).unwrap();
        assert!((s[0] - 0.7311).abs() < 1e-4 && (s[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn au_loss_hand_value() {
        let w = Tensor::matrix(1, 2, vec![0.5, 1.0]).unwrap();
        let prior = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let l = loss_au_value(&[vec![0.0, 1.0], vec![1.5, 1.0]], &vec![vec![0.5, 1.0]; 2], &w, &prior, 2.0).unwrap();
        // fit (0.25 + 1.0) / 2, drift 0.25 scaled by 2
        assert!((l - (0.625 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn fixed_points() {
        let w = Tensor::matrix(2, 2, vec![0.1, 0.9, 1.0, 0.0]).unwrap();
        let pseudo = vec![vec![0.1, 0.9], vec![1.0, 0.0]];
        assert_eq!(loss_au_value(&pseudo, &pseudo, &w, &w, 1.0).unwrap(), 0.0);
        let one_hot = vec![vec![0.0, 1.0, 0.0]];
        assert!(loss_expr(&one_hot, &[1], 0.0, 0.0, 0.5).unwrap().l_e < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        assert!(matches!(
            loss_au_value(&[vec![0.0]], &[vec![0.0]], &w, &w, -1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(loss_au_value(&[vec![0.0]], &[], &w, &w, 1.0), Err(Error::Shape(_))));
        assert!(matches!(ProbEstimates::from_scores(&[vec![1.2]]), Err(Error::Validation(_))));
        let est = estimates_2(0.5, 0.5, 0.2, 0.3, 0.3);
        assert!(matches!(est.loss_pos(&[(0, 2)]), Err(Error::Shape(_))));
        assert!(loss_expr(&[vec![0.5, 0.5]], &[2], 0.0, 0.0, 0.5).is_err());
    }

    fn score_batch() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 2usize..10).prop_flat_map(|(a, b)| prop::collection::vec(prop::collection::vec(0.0..=1.0f64, a), b))
    }

    proptest! {
        #[test]
        fn regularizers_nonnegative(scores in score_batch(), i in 0usize..6, j in 0usize..6) {
            let a = scores[0].len();
            let pair = [(i % a, j % a)];
            let est = ProbEstimates::from_scores(&scores).unwrap();
            prop_assert!(est.loss_pos(&pair).unwrap() >= 0.0);
            prop_assert!(est.loss_neg(&pair).unwrap() >= 0.0);
        }

        #[test]
        fn joints_marginalize(scores in score_batch()) {
            let est = ProbEstimates::from_scores(&scores).unwrap();
            let a = est.n_aus();
            for i in 0..a {
                for j in 0..a {
                    let p11 = est.joint_11.data()[i * a + j];
                    let p10 = est.joint_10.data()[i * a + j];
                    let p01 = est.joint_01.data()[i * a + j];
                    prop_assert!((p11 + p10 - est.marginal_1.data()[i]).abs() < 1e-12);
                    prop_assert!((p11 + p01 - est.marginal_1.data()[j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn au_loss_ignores_w_when_unregularized(shift in -0.4..0.4f64, p in prop::collection::vec(-1.0..2.0f64, 3)) {
            let w = Tensor::matrix(1, 3, vec![0.5; 3]).unwrap();
            let moved = Tensor::matrix(1, 3, vec![0.5 + shift; 3]).unwrap();
            let pseudo = vec![vec![0.5; 3]];
            let base = loss_au_value(&[p.clone()], &pseudo, &w, &w, 0.0).unwrap();
            prop_assert_eq!(base, loss_au_value(&[p], &pseudo, &moved, &w, 0.0).unwrap());
        }
    }
}
