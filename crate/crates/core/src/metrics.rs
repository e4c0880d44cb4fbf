//! Evaluation metrics for the three tasks.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("shape mismatch: {what} has {got} entries, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("class id {id} at pixel {index} is outside [0, {classes})")]
    ClassOutOfRange { index: usize, id: u32, classes: usize },
    #[error("no masked-in pixels")]
    EmptyMask,
}

fn same_len(what: &'static str, expected: usize, got: usize) -> Result<(), MetricError> {
    if expected == got {
        Ok(())
    } else {
        Err(MetricError::Shape { what, expected, got })
    }
}

/// Per-class intersection over union. Classes absent from both maps are
/// `None` and excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub defined: usize,
}

pub fn iou(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<IouScores, MetricError> {
    same_len("prediction", gt.len(), pred.len())?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for id in [p, g] {
            if id as usize >= num_classes {
                return Err(MetricError::ClassOutOfRange {
                    index,
                    id,
                    classes: num_classes,
                });
            }
        }
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(IouScores {
        per_class,
        mean,
        defined: defined.len(),
    })
}

/// Mean absolute and root-mean-square error over masked-in pixels.
pub fn depth_errors(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64), MetricError> {
    same_len("prediction", gt.len(), pred.len())?;
    same_len("mask", gt.len(), mask.len())?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        let e = p - g;
        abs += e.abs();
        sq += e * e;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

/// Mean of `|Δrow| + |Δcol|` over masked-in pixels.
pub fn vector_l1(pred: &[[f64; 2]], gt: &[[f64; 2]], mask: &[bool]) -> Result<f64, MetricError> {
    same_len("prediction", gt.len(), pred.len())?;
    same_len("mask", gt.len(), mask.len())?;
    let (mut total, mut n) = (0.0, 0usize);
    for ((p, g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        total += (p[0] - g[0]).abs() + (p[1] - g[1]).abs();
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionScore {
    /// Matched-pixel fraction in `[0, 1]`.
    pub score: f64,
    /// Set when the mask selected no pixels (score is then 1).
    pub empty: bool,
}

/// Relabeling-invariant agreement of two instance maps over masked pixels.
///
/// Predicted and ground-truth instances are paired one-to-one so that the
/// total overlap is maximal; the score is the overlap of matched pairs
/// divided by the number of masked pixels. Id 0 means unassigned and never
/// matches.
pub fn partition_match(pred: &[u32], gt: &[u32], mask: &[bool]) -> Result<PartitionScore, MetricError> {
    same_len("prediction", gt.len(), pred.len())?;
    same_len("mask", gt.len(), mask.len())?;
    let mut overlap: BTreeMap<(u32, u32), i64> = BTreeMap::new();
    let mut total = 0usize;
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        total += 1;
        if p != 0 && g != 0 {
            *overlap.entry((p, g)).or_default() += 1;
        }
    }
    if total == 0 {
        return Ok(PartitionScore {
            score: 1.0,
            empty: true,
        });
    }
    let mut pred_ids: Vec<u32> = overlap.keys().map(|k| k.0).collect();
    let mut gt_ids: Vec<u32> = overlap.keys().map(|k| k.1).collect();
    pred_ids.dedup();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    if pred_ids.is_empty() {
        return Ok(PartitionScore {
            score: 0.0,
            empty: false,
        });
    }
    let side = pred_ids.len().max(gt_ids.len());
    let mut weights = Matrix::new(side, side, 0i64);
    for (&(p, g), &n) in &overlap {
        let i = pred_ids.binary_search(&p).unwrap();
        let j = gt_ids.binary_search(&g).unwrap();
        weights[(i, j)] = n;
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(PartitionScore {
        score: matched as f64 / total as f64,
        empty: false,
    })
}

/// Fraction of `(predicted, true)` instance counts that agree.
pub fn instance_count_accuracy(counts: &[(usize, usize)]) -> f64 {
    if counts.is_empty() {
        return f64::NAN;
    }
    counts.iter().filter(|(p, t)| p == t).count() as f64 / counts.len() as f64
}

/// Metrics for one evaluation; entries are `None` when the task was not
/// evaluated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: Option<f64>,
    /// Classes contributing to `mean_iou`.
    pub iou_defined_classes: usize,
    pub depth_l1: Option<f64>,
    pub depth_rms: Option<f64>,
    pub instance_l1: Option<f64>,
    pub instance_count_accuracy: Option<f64>,
    pub partition_match: Option<f64>,
}

impl MetricReport {
    /// `(name, value)` pairs in a fixed column order; missing values are NaN.
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        vec![
            ("mean_iou", v(self.mean_iou)),
            ("depth_l1", v(self.depth_l1)),
            ("depth_rms", v(self.depth_rms)),
            ("instance_l1", v(self.instance_l1)),
            ("instance_count_acc", v(self.instance_count_accuracy)),
            ("partition_match", v(self.partition_match)),
        ]
    }
}
