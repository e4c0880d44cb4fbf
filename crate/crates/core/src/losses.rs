//! Task losses and the log-variance weighting of a multi-task objective.
//!
//! Every task carries a learnable `s = log σ²`. Regression tasks enter the
//! objective as `0.5·exp(-s)·L + 0.5·s`, classification as
//! `exp(-s)·L + 0.5·s`, where `L` is the pixel-averaged task loss.

use crate::diffcore::{GraphError, NodeId, Parameter, ValueGraph};
use thiserror::Error;

/// Bounds applied to `exp(-s)` inside [`weighted_task_loss`].
pub const WEIGHT_MIN: f64 = 1e-6;
pub const WEIGHT_MAX: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no masked-in elements")]
    EmptyMask,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} at pixel {index} is outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("log-variance parameter of task '{0}' is not bound to the graph")]
    Unbound(String),
    #[error("invalid fixed weights: {0}")]
    InvalidWeights(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    RegressionL2,
    RegressionL1,
    Classification,
}

impl TaskKind {
    pub fn is_regression(self) -> bool {
        !matches!(self, TaskKind::Classification)
    }
}

/// A task with its learnable log variance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    kind: TaskKind,
    pub name: String,
    pub s: Parameter,
}

impl TaskHead {
    pub fn new(name: impl Into<String>, kind: TaskKind, s_init: f64) -> Self {
        Self {
            kind,
            name: name.into(),
            s: Parameter::exempt(s_init),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Effective task weight `exp(-s)` at the current value.
    pub fn precision(&self) -> f64 {
        (-self.s.value).exp()
    }
}

/// `exp(-s)` left the allowed range and was replaced by the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampEvent {
    pub task: String,
    pub s: f64,
    pub clamped_to: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClampLog {
    pub events: Vec<ClampEvent>,
}

impl ClampLog {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Non-negative per-task weights for the plain weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedWeights {
    w: Vec<f64>,
}

impl FixedWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(LossError::InvalidWeights("empty weight vector".into()));
        }
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(LossError::InvalidWeights(format!(
                "weight {bad} is not a finite non-negative number"
            )));
        }
        Ok(Self { w })
    }

    /// Rescales to sum to one.
    pub fn normalized(w: Vec<f64>) -> Result<Self> {
        let fw = Self::new(w)?;
        let total: f64 = fw.w.iter().sum();
        if total <= 0.0 {
            return Err(LossError::InvalidWeights("weights sum to zero".into()));
        }
        Ok(Self {
            w: fw.w.iter().map(|x| x / total).collect(),
        })
    }

    /// `1/K` for each of `k` tasks.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveMode {
    Learned,
    Fixed(FixedWeights),
    Unweighted,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LossError::LengthMismatch {
            what,
            expected,
            got,
        })
    }
}

fn mean_of(g: &mut ValueGraph, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let total = g.sum(terms)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64)?)
}

/// Mean squared residual over masked-in elements.
pub fn l2_loss(g: &mut ValueGraph, pred: &[NodeId], target: &[f64], mask: &[bool]) -> Result<NodeId> {
    check_len("target", pred.len(), target.len())?;
    check_len("mask", pred.len(), mask.len())?;
    let mut terms = Vec::new();
    for ((&p, &t), _) in pred.iter().zip(target).zip(mask).filter(|(_, &m)| m) {
        let r = g.offset(p, -t)?;
        terms.push(g.mul(r, r)?);
    }
    mean_of(g, &terms)
}

/// Mean absolute residual over masked-in elements.
pub fn l1_loss(g: &mut ValueGraph, pred: &[NodeId], target: &[f64], mask: &[bool]) -> Result<NodeId> {
    check_len("target", pred.len(), target.len())?;
    check_len("mask", pred.len(), mask.len())?;
    let mut terms = Vec::new();
    for ((&p, &t), _) in pred.iter().zip(target).zip(mask).filter(|(_, &m)| m) {
        let r = g.offset(p, -t)?;
        terms.push(g.abs(r)?);
    }
    mean_of(g, &terms)
}

/// L1 loss on a 2-vector field: `|Δrow| + |Δcol|` per pixel, averaged over
/// masked-in pixels (not over components).
pub fn l1_loss_vec2(
    g: &mut ValueGraph,
    pred: &[[NodeId; 2]],
    target: &[[f64; 2]],
    mask: &[bool],
) -> Result<NodeId> {
    check_len("target", pred.len(), target.len())?;
    check_len("mask", pred.len(), mask.len())?;
    let mut terms = Vec::new();
    for ((p, t), _) in pred.iter().zip(target).zip(mask).filter(|(_, &m)| m) {
        let r0 = g.offset(p[0], -t[0])?;
        let r1 = g.offset(p[1], -t[1])?;
        let a0 = g.abs(r0)?;
        let a1 = g.abs(r1)?;
        terms.push(g.add(a0, a1)?);
    }
    mean_of(g, &terms)
}

/// `log Σ exp(x_i)` with the running maximum subtracted as a constant.
fn log_sum_exp(g: &mut ValueGraph, xs: &[NodeId]) -> Result<NodeId> {
    let m = xs
        .iter()
        .map(|&x| g.value(x))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut exps = Vec::with_capacity(xs.len());
    for &x in xs {
        let shifted = g.offset(x, -m)?;
        exps.push(g.exp(shifted)?);
    }
    let total = g.sum(&exps)?;
    let lse = g.ln(total)?;
    Ok(g.offset(lse, m)?)
}

/// `-log softmax(logits)[label]` for one pixel.
pub fn pixel_nll(g: &mut ValueGraph, logits: &[NodeId], label: usize) -> Result<NodeId> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange {
            index: 0,
            label,
            classes: logits.len(),
        });
    }
    let lse = log_sum_exp(g, logits)?;
    Ok(g.sub(lse, logits[label])?)
}

/// Mean cross-entropy over masked-in pixels.
pub fn cross_entropy(
    g: &mut ValueGraph,
    logits: &[Vec<NodeId>],
    labels: &[usize],
    mask: &[bool],
) -> Result<NodeId> {
    check_len("labels", logits.len(), labels.len())?;
    check_len("mask", logits.len(), mask.len())?;
    let mut terms = Vec::new();
    for (index, ((l, &label), &m)) in logits.iter().zip(labels).zip(mask).enumerate() {
        if label >= l.len() {
            return Err(LossError::LabelOutOfRange {
                index,
                label,
                classes: l.len(),
            });
        }
        if m {
            terms.push(pixel_nll(g, l, label)?);
        }
    }
    mean_of(g, &terms)
}

fn bound_s(head: &TaskHead) -> Result<NodeId> {
    head.s
        .node()
        .ok_or_else(|| LossError::Unbound(head.name.clone()))
}

/// Node for `exp(-s)`, clamped to `[WEIGHT_MIN, WEIGHT_MAX]`. A clamped
/// weight is a constant (zero gradient) and is logged.
fn clamped_precision(g: &mut ValueGraph, head: &TaskHead, log: &mut ClampLog) -> Result<NodeId> {
    let s = bound_s(head)?;
    let sv = g.value(s);
    let raw = (-sv).exp();
    if (WEIGHT_MIN..=WEIGHT_MAX).contains(&raw) {
        let ns = g.neg(s)?;
        Ok(g.exp(ns)?)
    } else {
        let clamped_to = raw.clamp(WEIGHT_MIN, WEIGHT_MAX);
        log.events.push(ClampEvent {
            task: head.name.clone(),
            s: sv,
            clamped_to,
        });
        Ok(g.constant(clamped_to)?)
    }
}

/// Uncertainty-weighted task term.
///
/// Regression: `0.5·exp(-s)·L + 0.5·s`. Classification: `exp(-s)·L + 0.5·s`.
/// `0.5·s` is `log σ` for `s = log σ²`.
pub fn weighted_task_loss(
    g: &mut ValueGraph,
    loss: NodeId,
    head: &TaskHead,
    log: &mut ClampLog,
) -> Result<NodeId> {
    debug_assert!(g.value(loss) >= 0.0, "task loss must be non-negative");
    let s = bound_s(head)?;
    let precision = clamped_precision(g, head, log)?;
    let scaled = g.mul(precision, loss)?;
    let data = if head.kind.is_regression() {
        g.scale(scaled, 0.5)?
    } else {
        scaled
    };
    let penalty = g.scale(s, 0.5)?;
    Ok(g.add(data, penalty)?)
}

/// Negative log of the temperature-scaled softmax with `σ² = exp(s)`:
/// `-(f_c / σ²) + log Σ exp(f_c' / σ²)`.
pub fn exact_classification_nll(
    g: &mut ValueGraph,
    logits: &[NodeId],
    label: usize,
    s: &Parameter,
) -> Result<NodeId> {
    let s = s.node().ok_or_else(|| LossError::Unbound("classification".into()))?;
    let ns = g.neg(s)?;
    let inv_temp = g.exp(ns)?;
    let scaled = logits
        .iter()
        .map(|&f| g.mul(inv_temp, f))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    pixel_nll(g, &scaled, label)
}

/// Mean of [`exact_classification_nll`] over masked-in pixels.
pub fn exact_classification_loss(
    g: &mut ValueGraph,
    logits: &[Vec<NodeId>],
    labels: &[usize],
    mask: &[bool],
    s: &Parameter,
) -> Result<NodeId> {
    check_len("labels", logits.len(), labels.len())?;
    check_len("mask", logits.len(), mask.len())?;
    let mut terms = Vec::new();
    for (index, ((l, &label), &m)) in logits.iter().zip(labels).zip(mask).enumerate() {
        if label >= l.len() {
            return Err(LossError::LabelOutOfRange {
                index,
                label,
                classes: l.len(),
            });
        }
        if m {
            terms.push(exact_classification_nll(g, l, label, s)?);
        }
    }
    mean_of(g, &terms)
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log[ Σ exp(f/σ²) / (Σ exp f)^(1/σ²) ]` with `σ² = exp(s)`: the term
/// dropped when the classification likelihood is replaced by the weighted
/// cross-entropy. Exactly zero at `s = 0`.
pub fn approximation_gap(logits: &[f64], s: f64) -> f64 {
    let inv_temp = (-s).exp();
    let scaled = lse(logits.iter().map(|f| f * inv_temp));
    let plain = lse(logits.iter().copied());
    scaled - inv_temp * plain
}

/// Combines per-task losses into one objective.
///
/// `Learned` sums [`weighted_task_loss`] over tasks; `Fixed` and
/// `Unweighted` compute the plain weighted sum `Σ w_i L_i`.
pub fn multitask_objective(
    g: &mut ValueGraph,
    task_losses: &[NodeId],
    heads: &[TaskHead],
    mode: &ObjectiveMode,
    log: &mut ClampLog,
) -> Result<NodeId> {
    check_len("heads", task_losses.len(), heads.len())?;
    let terms = match mode {
        ObjectiveMode::Learned => task_losses
            .iter()
            .zip(heads)
            .map(|(&l, h)| weighted_task_loss(g, l, h, log))
            .collect::<Result<Vec<_>>>()?,
        ObjectiveMode::Fixed(w) => fixed_terms(g, task_losses, w)?,
        ObjectiveMode::Unweighted => {
            fixed_terms(g, task_losses, &FixedWeights::uniform(task_losses.len())?)?
        }
    };
    Ok(g.sum(&terms)?)
}

fn fixed_terms(g: &mut ValueGraph, losses: &[NodeId], w: &FixedWeights) -> Result<Vec<NodeId>> {
    check_len("weights", losses.len(), w.w.len())?;
    losses
        .iter()
        .zip(&w.w)
        .map(|(&l, &wi)| Ok(g.scale(l, wi)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(g: &mut ValueGraph, xs: &[f64]) -> Vec<NodeId> {
        xs.iter().map(|&x| g.leaf(x).unwrap()).collect()
    }

    fn head(g: &mut ValueGraph, kind: TaskKind, s: f64) -> TaskHead {
        let mut h = TaskHead::new("t", kind, s);
        h.s.bind(g).unwrap();
        h
    }

    #[test]
    fn l2_cases() {
        let mut g = ValueGraph::new();
        let p = leaves(&mut g, &[1.0, 2.0, 3.0]);
        let l = l2_loss(&mut g, &p, &[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert_eq!(g.value(l), 0.0);
        let l = l2_loss(&mut g, &p, &[-1.0, 0.0, 1.0], &[true; 3]).unwrap();
        assert_eq!(g.value(l), 4.0);
        assert_eq!(
            l2_loss(&mut g, &p, &[0.0; 3], &[false; 3]),
            Err(LossError::EmptyMask)
        );
        assert!(matches!(
            l2_loss(&mut g, &p, &[0.0; 2], &[true; 3]),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn l1_cases() {
        let mut g = ValueGraph::new();
        let p = leaves(&mut g, &[3.0, -4.0]);
        let l = l1_loss_vec2(&mut g, &[[p[0], p[1]]], &[[0.0, 0.0]], &[true]).unwrap();
        assert_eq!(g.value(l), 7.0);
        let l = l1_loss(&mut g, &p, &[3.0, -4.0], &[true, true]).unwrap();
        assert_eq!(g.value(l), 0.0);
        // Errors only on masked-out pixels.
        let l = l1_loss(&mut g, &p, &[3.0, 10.0], &[true, false]).unwrap();
        assert_eq!(g.value(l), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_and_large_logits() {
        let mut g = ValueGraph::new();
        let a = leaves(&mut g, &[0.0, 0.0]);
        for label in 0..2 {
            let l = cross_entropy(&mut g, std::slice::from_ref(&a), &[label], &[true]).unwrap();
            assert!((g.value(l) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let b = leaves(&mut g, &[1000.0, 0.0]);
        let l = cross_entropy(&mut g, &[b], &[0], &[true]).unwrap();
        assert!(g.value(l).abs() < 1e-300 || g.value(l) == 0.0);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = ValueGraph::new();
        let a = leaves(&mut g, &[0.0, 0.0]);
        let err = cross_entropy(&mut g, &[a.clone(), a], &[0, 2], &[true, false]).unwrap_err();
        assert_eq!(
            err,
            LossError::LabelOutOfRange {
                index: 1,
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn weighted_task_loss_examples() {
        let mut g = ValueGraph::new();
        let mut log = ClampLog::default();
        let l = g.constant(2.0).unwrap();
        let h = head(&mut g, TaskKind::RegressionL2, 0.0);
        let w = weighted_task_loss(&mut g, l, &h, &mut log).unwrap();
        assert_eq!(g.value(w), 1.0);

        let l = g.constant(std::f64::consts::LN_2).unwrap();
        let h = head(&mut g, TaskKind::Classification, 0.0);
        let w = weighted_task_loss(&mut g, l, &h, &mut log).unwrap();
        assert!((g.value(w) - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(log.is_empty());
    }

    #[test]
    fn weighted_task_loss_stationary_point() {
        let mut g = ValueGraph::new();
        let mut log = ClampLog::default();
        let l = g.constant(4.0).unwrap();
        let h = head(&mut g, TaskKind::RegressionL1, 4.0f64.ln());
        let w = weighted_task_loss(&mut g, l, &h, &mut log).unwrap();
        // 0.5 * 1 + 0.5 * ln 4
        assert!((g.value(w) - 1.193147).abs() < 1e-6);
        g.backward(w).unwrap();
        assert!(g.grad(h.s.node().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn clamping_is_logged() {
        let mut g = ValueGraph::new();
        let mut log = ClampLog::default();
        let l = g.constant(1.0).unwrap();
        let h = head(&mut g, TaskKind::RegressionL2, -20.0);
        let w = weighted_task_loss(&mut g, l, &h, &mut log).unwrap();
        assert_eq!(log.events.len(), 1);
        assert_eq!(log.events[0].clamped_to, WEIGHT_MAX);
        assert_eq!(g.value(w), 0.5 * WEIGHT_MAX - 10.0);
        let h = head(&mut g, TaskKind::RegressionL2, 5.0);
        weighted_task_loss(&mut g, l, &h, &mut log).unwrap();
        assert_eq!(log.events.len(), 1);
    }

    #[test]
    fn unbound_head_errors() {
        let mut g = ValueGraph::new();
        let l = g.constant(1.0).unwrap();
        let h = TaskHead::new("depth", TaskKind::RegressionL1, 0.0);
        assert_eq!(
            weighted_task_loss(&mut g, l, &h, &mut ClampLog::default()),
            Err(LossError::Unbound("depth".into()))
        );
    }

    #[test]
    fn exact_nll_examples() {
        let mut g = ValueGraph::new();
        let mut s = Parameter::exempt(0.0);
        s.bind(&mut g).unwrap();
        let f = leaves(&mut g, &[1.3, -0.2, 0.4]);
        let exact = exact_classification_nll(&mut g, &f, 2, &s).unwrap();
        let ce = cross_entropy(&mut g, std::slice::from_ref(&f), &[2], &[true]).unwrap();
        assert!((g.value(exact) - g.value(ce)).abs() < 1e-12);

        let u = leaves(&mut g, &[0.0, 0.0]);
        for sv in [-1.5, 0.7, 3.0] {
            let mut s = Parameter::exempt(sv);
            s.bind(&mut g).unwrap();
            let v = exact_classification_nll(&mut g, &u, 1, &s).unwrap();
            assert!((g.value(v) - std::f64::consts::LN_2).abs() < 1e-12);
        }

        let mut s = Parameter::exempt(2.0f64.ln());
        s.bind(&mut g).unwrap();
        let f = leaves(&mut g, &[2.0, 0.0]);
        let v = exact_classification_nll(&mut g, &f, 0, &s).unwrap();
        let expected = -1.0 + (1.0f64.exp() + 1.0).ln();
        assert!((g.value(v) - expected).abs() < 1e-12);
        assert!((g.value(v) - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn approximation_gap_examples() {
        assert_eq!(approximation_gap(&[0.3, -2.0, 5.0], 0.0), 0.0);
        for c in [2usize, 3, 7] {
            let gap = approximation_gap(&vec![0.0; c], 2.0f64.ln());
            assert!((gap - (c as f64).ln() * 0.5).abs() < 1e-12);
        }
        // Non-zero uniform logits: ln C (1 - 1/σ²).
        let gap = approximation_gap(&[1.7; 4], 2.0f64.ln());
        assert!((gap - 4f64.ln() * 0.5).abs() < 1e-12);
    }

    #[test]
    fn approximation_gap_grows_with_abs_s() {
        let logits = [2.0, -1.0, 0.5, 0.0];
        let at = |s: f64| approximation_gap(&logits, s).abs();
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(at(w[1]) >= at(w[0]), "s = {}", w[1]);
            assert!(at(-w[1]) >= at(-w[0]), "s = {}", -w[1]);
        }
    }

    #[test]
    fn objective_modes() {
        let mut g = ValueGraph::new();
        let mut log = ClampLog::default();
        let heads: Vec<_> = (0..2)
            .map(|_| head(&mut g, TaskKind::RegressionL2, 0.0))
            .collect();
        let ls = leaves(&mut g, &[2.0, 4.0]);
        let o = multitask_objective(&mut g, &ls, &heads, &ObjectiveMode::Learned, &mut log).unwrap();
        assert_eq!(g.value(o), 3.0);

        let ls = leaves(&mut g, &[1.0, 2.0]);
        let fixed = ObjectiveMode::Fixed(FixedWeights::new(vec![0.9, 0.1]).unwrap());
        let o = multitask_objective(&mut g, &ls, &heads, &fixed, &mut log).unwrap();
        assert!((g.value(o) - 1.1).abs() < 1e-15);

        let heads3: Vec<_> = (0..3)
            .map(|_| head(&mut g, TaskKind::RegressionL1, 0.0))
            .collect();
        let ls = leaves(&mut g, &[3.0, 3.0, 3.0]);
        let o = multitask_objective(&mut g, &ls, &heads3, &ObjectiveMode::Unweighted, &mut log).unwrap();
        assert!((g.value(o) - 3.0).abs() < 1e-15);

        assert!(matches!(
            multitask_objective(&mut g, &ls, &heads, &ObjectiveMode::Learned, &mut log),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn fixed_weight_constructors() {
        assert!(FixedWeights::new(vec![0.5, -0.1]).is_err());
        assert!(FixedWeights::new(vec![]).is_err());
        let w = FixedWeights::normalized(vec![3.0, 1.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.75, 0.25]);
        assert!(FixedWeights::normalized(vec![0.0, 0.0]).is_err());
        assert_eq!(FixedWeights::new(vec![2.0, 5.0]).unwrap().as_slice(), &[2.0, 5.0]);
    }
}
