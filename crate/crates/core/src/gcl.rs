//! Cosine classifier with reserved placeholder nodes and the generalized
//! classification loss.
//!
//! Node order is `[background, base…, placeholder…]`. During base training
//! the placeholders are excluded from the softmax and only pulled towards
//! zero by an L1 penalty on their logits. Fine-tuning binds novel classes to
//! placeholder slots (sorted by name), adds them to the softmax support and
//! sums the cross-entropy of the base group (background and base labels)
//! and the novel group, plus an L2 penalty on the classifier weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Placeholder L1 in base training; grouped CE + L2 in fine-tuning.
    Gcl,
    /// Plain cross-entropy in both phases.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GclConfig {
    pub loss: LossKind,
    pub lambda_placeholder: f64,
    pub lambda_regularization: f64,
    /// Cosine logit scale `s`.
    pub scale: f64,
    /// Number of placeholder nodes `R`.
    pub placeholders: usize,
    /// Floor on feature and weight norms.
    pub eps: f64,
}

impl Default for GclConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Gcl,
            lambda_placeholder: 0.1,
            lambda_regularization: 1e-4,
            scale: 20.0,
            placeholders: 8,
            eps: 1e-8,
        }
    }
}

impl GclConfig {
    /// The cross-entropy-only ablation with `novel` reserved nodes.
    pub fn standard(novel: usize) -> Self {
        Self {
            loss: LossKind::Standard,
            lambda_placeholder: 0.0,
            lambda_regularization: 0.0,
            placeholders: novel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_placeholder) || !ok(self.lambda_regularization) {
            return Err(Error::Config("gcl: regularization weights must be finite and >= 0".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::Config("gcl: scale and eps must be positive".into()));
        }
        Ok(())
    }
}

/// Index bookkeeping for classifier nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierLayout {
    pub base_classes: Vec<String>,
    pub placeholders: usize,
    /// Novel class bound to each leading placeholder slot.
    pub bound: Vec<String>,
}

pub const BACKGROUND: usize = 0;

impl ClassifierLayout {
    pub fn new(base_classes: Vec<String>, placeholders: usize) -> Self {
        Self {
            base_classes,
            placeholders,
            bound: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        1 + self.base_classes.len() + self.placeholders
    }

    pub fn base_nodes(&self) -> std::ops::Range<usize> {
        1..1 + self.base_classes.len()
    }

    pub fn placeholder_nodes(&self) -> std::ops::Range<usize> {
        let s = 1 + self.base_classes.len();
        s..s + self.placeholders
    }

    pub fn is_activated(&self) -> bool {
        !self.bound.is_empty()
    }

    pub fn bound_nodes(&self) -> std::ops::Range<usize> {
        let s = 1 + self.base_classes.len();
        s..s + self.bound.len()
    }

    pub fn unbound_nodes(&self) -> std::ops::Range<usize> {
        let s = 1 + self.base_classes.len();
        s + self.bound.len()..s + self.placeholders
    }

    /// Node of a base or bound novel class.
    pub fn node_of(&self, class: &str) -> Option<usize> {
        if let Some(i) = self.base_classes.iter().position(|c| c == class) {
            return Some(1 + i);
        }
        self.bound.iter().position(|c| c == class).map(|i| 1 + self.base_classes.len() + i)
    }

    /// Class name of a node, `None` for background and unbound slots.
    pub fn class_of(&self, node: usize) -> Option<&str> {
        if self.base_nodes().contains(&node) {
            return Some(&self.base_classes[node - 1]);
        }
        if self.bound_nodes().contains(&node) {
            return Some(&self.bound[node - 1 - self.base_classes.len()]);
        }
        None
    }

    /// Nodes taking part in the softmax.
    pub fn support(&self) -> Vec<bool> {
        let active_end = 1 + self.base_classes.len() + self.bound.len();
        (0..self.num_nodes()).map(|j| j < active_end).collect()
    }

    /// Binds the sorted `novel` classes to placeholder slots `0, 1, …`.
    /// Repeating the call with the same classes returns the same layout.
    pub fn activate(&self, novel: &[String]) -> Result<Self> {
        let mut sorted = novel.to_vec();
        sorted.sort();
        sorted.dedup();
        if let Some(c) = sorted.iter().find(|c| self.base_classes.contains(c)) {
            return Err(Error::invalid("activate_placeholders", format!("'{c}' is a base class")));
        }
        if sorted.len() > self.placeholders {
            return Err(Error::invalid(
                "activate_placeholders",
                format!(
                    "{} novel classes exceed the {} placeholder nodes; increase the placeholder count",
                    sorted.len(),
                    self.placeholders
                ),
            ));
        }
        if self.is_activated() && self.bound != sorted {
            return Err(Error::Protocol(format!(
                "layout already bound to {:?}; cannot rebind to {:?}",
                self.bound, sorted
            )));
        }
        Ok(Self {
            bound: sorted,
            ..self.clone()
        })
    }
}

/// `s · cos(f_i, w_j)` with norms floored at `eps`; `(n, J, 1, 1)`.
pub fn cosine_logits(g: &mut Graph, features: Var, weights: Var, scale: f64, eps: f64) -> Result<Var> {
    let f = g.l2_normalize_rows(features, eps);
    let w = g.l2_normalize_rows(weights, eps);
    let dot = g.linear(f, w, None)?;
    Ok(g.scale(dot, scale))
}

/// Rows of `(n, …)` data whose L2 norm falls below `eps`.
pub fn floored_rows(t: &crate::tensor::Tensor4, eps: f64) -> usize {
    (0..t.batch())
        .filter(|&r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < eps)
        .count()
}

/// One named term of a loss: contributes `weight · value` to the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: Vec<Component>,
}

impl LossBreakdown {
    /// `Σ weight · value` over the components.
    pub fn reconstruct(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// Named scalar nodes with weights; [`LossTerms::finish`] sums them.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub terms: Vec<(String, Var, f64)>,
}

impl LossTerms {
    pub fn push(&mut self, name: impl Into<String>, v: Var, weight: f64) {
        self.terms.push((name.into(), v, weight));
    }

    pub fn extend(&mut self, other: LossTerms) {
        self.terms.extend(other.terms);
    }

    /// Total node and the breakdown of its current values.
    pub fn finish(&self, g: &mut Graph) -> (Var, LossBreakdown) {
        let weighted: Vec<(Var, f64)> = self.terms.iter().map(|t| (t.1, t.2)).collect();
        let total = g.weighted_sum(&weighted);
        let components = self
            .terms
            .iter()
            .map(|(n, v, w)| Component {
                name: n.clone(),
                value: g.scalar(*v),
                weight: *w,
            })
            .collect();
        (
            total,
            LossBreakdown {
                total: g.scalar(total),
                components,
            },
        )
    }
}

fn zero(g: &mut Graph) -> Var {
    g.constant(crate::tensor::Tensor4::scalar(0.0))
}

fn check_logits(g: &Graph, logits: Var, labels: &[usize], layout: &ClassifierLayout) -> Result<()> {
    let t = g.value(logits);
    if t.item_len() != layout.num_nodes() {
        return Err(Error::Shape {
            op: "gcl",
            dim: "logit columns",
            expected: layout.num_nodes(),
            got: t.item_len(),
        });
    }
    if t.batch() != labels.len() {
        return Err(Error::Shape {
            op: "gcl",
            dim: "labels",
            expected: t.batch(),
            got: labels.len(),
        });
    }
    Ok(())
}

/// Base-phase loss terms: `ce` over background ∪ base (placeholders
/// masked) and, for [`LossKind::Gcl`], `placeholder_l1` = mean |logit| over
/// every row and placeholder node, weighted by `λ_placeholder`.
pub fn gcl_base_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    layout: &ClassifierLayout,
    cfg: &GclConfig,
) -> Result<LossTerms> {
    check_logits(g, logits, labels, layout)?;
    let base_end = 1 + layout.base_classes.len();
    if let Some(&l) = labels.iter().find(|&&l| l >= base_end) {
        return Err(Error::invalid(
            "gcl_base_loss",
            format!("label {l} is not background or a base class during base training"),
        ));
    }
    let support: Vec<bool> = (0..layout.num_nodes()).map(|j| j < base_end).collect();
    let mut terms = LossTerms::default();
    let rows: Vec<usize> = (0..labels.len()).collect();
    let ce = if labels.is_empty() {
        zero(g)
    } else {
        g.softmax_cross_entropy(logits, rows.clone(), labels.to_vec(), support)?
    };
    terms.push("cls_ce", ce, 1.0);
    if cfg.loss == LossKind::Gcl && layout.placeholders > 0 && !labels.is_empty() {
        let l1 = g.mean_abs(logits, rows, layout.placeholder_nodes().collect())?;
        terms.push("placeholder_l1", l1, cfg.lambda_placeholder);
    }
    Ok(terms)
}

/// Fine-tune loss terms. For [`LossKind::Gcl`]: `base_ce` (rows labelled
/// background or base) + `novel_ce`, both over the joint support, plus
/// `l2_reg` = Σ‖W‖² of `classifier_weights` and the L1 penalty on the
/// still-unbound placeholders. An empty group contributes 0. For
/// [`LossKind::Standard`]: a single `cls_ce` over all rows.
pub fn gcl_finetune_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    layout: &ClassifierLayout,
    cfg: &GclConfig,
    classifier_weights: Var,
) -> Result<LossTerms> {
    check_logits(g, logits, labels, layout)?;
    if !layout.is_activated() {
        return Err(Error::Protocol("fine-tune loss requires an activated layout".into()));
    }
    let support = layout.support();
    if let Some(&l) = labels.iter().find(|&&l| l >= support.len() || !support[l]) {
        return Err(Error::invalid(
            "gcl_finetune_loss",
            format!("label {l} refers to a masked placeholder node"),
        ));
    }
    let mut terms = LossTerms::default();
    if cfg.loss == LossKind::Standard {
        let ce = if labels.is_empty() {
            zero(g)
        } else {
            g.softmax_cross_entropy(logits, (0..labels.len()).collect(), labels.to_vec(), support)?
        };
        terms.push("cls_ce", ce, 1.0);
        return Ok(terms);
    }
    let novel = layout.bound_nodes();
    for (name, is_novel) in [("base_ce", false), ("novel_ce", true)] {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| novel.contains(&labels[i]) == is_novel).collect();
        let v = if rows.is_empty() {
            zero(g)
        } else {
            let targets = rows.iter().map(|&i| labels[i]).collect();
            g.softmax_cross_entropy(logits, rows, targets, support.clone())?
        };
        terms.push(name, v, 1.0);
    }
    let l2 = g.sum_squares(classifier_weights);
    terms.push("l2_reg", l2, cfg.lambda_regularization);
    let unbound: Vec<usize> = layout.unbound_nodes().collect();
    if !unbound.is_empty() && !labels.is_empty() {
        let l1 = g.mean_abs(logits, (0..labels.len()).collect(), unbound)?;
        terms.push("placeholder_l1", l1, cfg.lambda_placeholder);
    }
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn rows(r: &[&[f64]]) -> Tensor4 {
        Tensor4::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cosine_hand_values() {
        let mut g = Graph::new();
        let f = g.constant(rows(&[&[1.0, 1.0], &[3.0, 0.0], &[0.0, 2.0]]));
        let w = g.constant(rows(&[&[1.0, 0.0]]));
        let l = cosine_logits(&mut g, f, w, 20.0, 1e-8).unwrap();
        let v = g.value(l).data();
        assert!((v[0] - 20.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((v[1] - 20.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn two_node_uniform_ce() {
        let layout = ClassifierLayout::new(names(&["a"]), 0);
        let mut g = Graph::new();
        let l = g.constant(rows(&[&[0.0, 0.0]]));
        let t = gcl_base_loss(&mut g, l, &[0], &layout, &GclConfig::default()).unwrap();
        let (_, b) = t.finish(&mut g);
        assert!((b.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn placeholder_l1_term() {
        let layout = ClassifierLayout::new(names(&["a"]), 2);
        let mut g = Graph::new();
        let l = g.constant(rows(&[&[0.0, 0.0, 0.3, -0.5]]));
        let (_, b) = gcl_base_loss(&mut g, l, &[1], &layout, &GclConfig::default()).unwrap().finish(&mut g);
        let term = b.get("placeholder_l1").unwrap() * 0.1;
        assert!((term - 0.04).abs() < 1e-12);
        assert!((b.total - b.reconstruct()).abs() < 1e-12);
    }

    #[test]
    fn base_phase_rejects_placeholder_label() {
        let layout = ClassifierLayout::new(names(&["a"]), 2);
        let mut g = Graph::new();
        let l = g.constant(Tensor4::zeros([1, 4, 1, 1]));
        assert!(gcl_base_loss(&mut g, l, &[2], &layout, &GclConfig::default()).is_err());
    }

    #[test]
    fn activation_binds_sorted_and_is_idempotent() {
        let layout = ClassifierLayout::new(names(&["a", "b"]), 8);
        let novel = names(&["z", "x", "y", "w", "v"]);
        let act = layout.activate(&novel).unwrap();
        assert_eq!(act.bound, names(&["v", "w", "x", "y", "z"]));
        assert_eq!(act.bound_nodes(), 3..8);
        assert_eq!(act.unbound_nodes(), 8..11);
        assert_eq!(act.activate(&novel).unwrap(), act);
        assert!(act.activate(&names(&["q"])).is_err());
        assert!(ClassifierLayout::new(names(&["a"]), 2).activate(&novel).is_err());
    }

    #[test]
    fn three_node_grouped_ce() {
        let layout = ClassifierLayout::new(names(&["base"]), 1).activate(&names(&["novel"])).unwrap();
        let cfg = GclConfig {
            lambda_regularization: 0.0,
            ..GclConfig::default()
        };
        let mut g = Graph::new();
        let l = g.constant(Tensor4::zeros([2, 3, 1, 1]));
        let w = g.constant(Tensor4::zeros([3, 4, 1, 1]));
        let (_, b) = gcl_finetune_loss(&mut g, l, &[1, 2], &layout, &cfg, w).unwrap().finish(&mut g);
        assert!((b.total - 2.197225).abs() < 1e-6);
        assert_eq!(b.get("l2_reg"), Some(0.0));
    }

    #[test]
    fn novel_only_batch_has_zero_base_term() {
        let layout = ClassifierLayout::new(names(&["base"]), 1).activate(&names(&["novel"])).unwrap();
        let mut g = Graph::new();
        let l = g.constant(Tensor4::zeros([2, 3, 1, 1]));
        let w = g.constant(Tensor4::full([3, 4, 1, 1], 0.5));
        let (_, b) = gcl_finetune_loss(&mut g, l, &[2, 2], &layout, &GclConfig::default(), w)
            .unwrap()
            .finish(&mut g);
        assert_eq!(b.get("base_ce"), Some(0.0));
        assert!((b.get("l2_reg").unwrap() - 3.0).abs() < 1e-12);
    }
}
