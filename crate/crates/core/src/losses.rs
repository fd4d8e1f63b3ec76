//! Cross-entropy, logit regression and representation losses, and their
//! weighted combination. Every loss is a batch mean so the weights keep
//! their meaning across batch sizes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the cross-entropy (`alpha`), representation (`beta`) and
/// logit (`gamma`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::contract(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::contract("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// True when neither teacher-driven term contributes.
    pub fn is_supervised_only(&self) -> bool {
        self.beta == 0.0 && self.gamma == 0.0
    }
}

/// Mean negative log-likelihood of `labels` under probability rows `probs`.
pub fn cross_entropy(graph: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = graph
        .value(probs)
        .dims2()
        .ok_or_else(|| Error::contract("cross_entropy expects [B×C] probabilities"))?;
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let picked = graph.select_cols(probs, labels)?;
    let logp = graph.log_clamped(picked, PROB_FLOOR)?;
    let total = graph.sum(logp)?;
    graph.scale(total, -1.0 / rows as f64)
}

/// `(1/B) Σ_i ½‖pred_i − target_i‖²`.
pub fn half_squared_error(graph: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if graph.shape(pred) != graph.shape(target) {
        return Err(Error::Shape {
            op: "half_squared_error",
            left: graph.shape(pred).to_vec(),
            right: graph.shape(target).to_vec(),
        });
    }
    let rows = graph.shape(pred).first().copied().unwrap_or(1);
    let diff = graph.sub(pred, target)?;
    let sq = graph.square(diff)?;
    let total = graph.sum(sq)?;
    graph.scale(total, 0.5 / rows as f64)
}

/// Student regression scores against teacher logits.
pub fn logit_loss(graph: &mut Graph, scores: Var, target_logits: Var) -> Result<Var> {
    half_squared_error(graph, scores, target_logits)
}

/// Projected student encoding against the teacher hidden state.
pub fn representation_loss(graph: &mut Graph, projected: Var, teacher_hidden: Var) -> Result<Var> {
    half_squared_error(graph, projected, teacher_hidden)
}

/// `alpha·ce + beta·rl + gamma·ll`, skipping absent terms.
pub fn joint_loss(
    graph: &mut Graph,
    weights: &LossWeights,
    ce: Option<Var>,
    rl: Option<Var>,
    ll: Option<Var>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, w) in [(ce, weights.alpha), (rl, weights.beta), (ll, weights.gamma)] {
        let Some(term) = term else { continue };
        let scaled = graph.scale(term, w)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| Error::contract("joint loss needs at least one term"))
}

/// Plain-value version of [`joint_loss`] for metrics.
pub fn combine(weights: &LossWeights, ce: Option<f64>, rl: Option<f64>, ll: Option<f64>) -> Option<f64> {
    let terms = [(ce, weights.alpha), (rl, weights.beta), (ll, weights.gamma)];
    if terms.iter().all(|(t, _)| t.is_none()) {
        return None;
    }
    Some(terms.iter().map(|(t, w)| t.map_or(0.0, |v| v * w)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn var(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = var(&mut g, &[vec![0.0, 1.0]]);
        let ce = cross_entropy(&mut g, p, &[1]).unwrap();
        assert_eq!(scalar(&g, ce), 0.0);

        let p = var(&mut g, &[vec![0.25; 4]]);
        let ce = cross_entropy(&mut g, p, &[2]).unwrap();
        assert!((scalar(&g, ce) - 1.38629).abs() < 1e-5);

        let p = var(&mut g, &[vec![0.5, 0.5], vec![0.75, 0.25]]);
        let ce = cross_entropy(&mut g, p, &[0, 1]).unwrap();
        assert!((scalar(&g, ce) - 1.03972).abs() < 1e-5);

        assert!(matches!(cross_entropy(&mut g, p, &[0, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn squared_error_examples() {
        let mut g = Graph::new();
        let r = var(&mut g, &[vec![1.0, 1.0]]);
        let t = var(&mut g, &[vec![0.0, 0.0]]);
        let l = logit_loss(&mut g, r, t).unwrap();
        assert_eq!(scalar(&g, l), 1.0);
        let same = logit_loss(&mut g, r, r).unwrap();
        assert_eq!(scalar(&g, same), 0.0);

        let a = var(&mut g, &[vec![0.1; 100]]);
        let b = var(&mut g, &[vec![0.0; 100]]);
        let l = representation_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, l) - 0.5).abs() < 1e-12);

        let c = var(&mut g, &[vec![0.0; 99]]);
        assert!(matches!(representation_loss(&mut g, a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn joint_examples() {
        let mut g = Graph::new();
        let w = LossWeights::default();
        let ce = g.constant(Tensor::scalar(0.1)).unwrap();
        let rl = g.constant(Tensor::scalar(0.2)).unwrap();
        let ll = g.constant(Tensor::scalar(3.0)).unwrap();
        let j = joint_loss(&mut g, &w, Some(ce), Some(rl), Some(ll)).unwrap();
        assert!((scalar(&g, j) - 6.0).abs() < 1e-12);

        let w0 = LossWeights::new(10.0, 0.0, 0.0).unwrap();
        let j = joint_loss(&mut g, &w0, Some(ce), Some(rl), Some(ll)).unwrap();
        assert_eq!(scalar(&g, j), 10.0 * 0.1);
        let j = joint_loss(&mut g, &w, Some(ce), None, None).unwrap();
        assert_eq!(scalar(&g, j), 10.0 * 0.1);
        assert!(joint_loss(&mut g, &w, None, None, None).is_err());

        let doubled = LossWeights::new(20.0, 10.0, 1.0).unwrap();
        let a = combine(&w, Some(0.1), Some(0.2), Some(3.0)).unwrap();
        let b = combine(&doubled, Some(0.1), Some(0.2), Some(3.0)).unwrap();
        assert!((b - a - 10.0 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).unwrap().gamma == 1.0);
    }

    proptest! {
        #[test]
        fn losses_are_permutation_invariant_and_nonnegative(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..6),
            shift in 0usize..6,
        ) {
            let mut g = Graph::new();
            let targets: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 0.5 + 0.1).collect()).collect();
            let n = rows.len();
            let rot = |v: &Vec<Vec<f64>>| { let mut w = v.clone(); w.rotate_left(shift % n); w };
            let a = var(&mut g, &rows);
            let t = var(&mut g, &targets);
            let a2 = var(&mut g, &rot(&rows));
            let t2 = var(&mut g, &rot(&targets));
            let l1 = half_squared_error(&mut g, a, t).unwrap();
            let l2 = half_squared_error(&mut g, a2, t2).unwrap();
            prop_assert!((scalar(&g, l1) - scalar(&g, l2)).abs() < 1e-12);
            prop_assert!(scalar(&g, l1) >= 0.0);

            let p = g.softmax(a).unwrap();
            let p2 = g.softmax(a2).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let mut labels2 = labels.clone();
            labels2.rotate_left(shift % n);
            let c1 = cross_entropy(&mut g, p, &labels).unwrap();
            let c2 = cross_entropy(&mut g, p2, &labels2).unwrap();
            prop_assert!((scalar(&g, c1) - scalar(&g, c2)).abs() < 1e-12);
            prop_assert!(scalar(&g, c1) > 0.0);
        }
    }
}
