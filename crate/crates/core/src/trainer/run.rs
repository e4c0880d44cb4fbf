//! The training loop, validation metrics and run persistence.

use super::config::{ClassificationForm, Target, TrainConfig, TrainMode};
use super::data::{Dataset, PixelSampler, SceneData, TaskTargets};
use super::network::ToyNetwork;
use super::optim::{sgd_step, OptimError, OptimizerState};
use crate::diffcore::{GraphError, NodeId, ValueGraph};
use crate::hough_instance::{segment_instances, HoughError, SegmentParams};
use crate::losses::{self, ClampLog, FixedWeights, LossError, ObjectiveMode, TaskHead};
use crate::metrics::{self, MetricError, MetricReport};
use crate::scenes::SceneError;
use crate::textio::fmt_sig9;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(#[from] super::config::ConfigError),
    #[error("scene generation failed: {0}")]
    Scene(#[from] SceneError),
    #[error("loss construction failed: {0}")]
    Loss(#[from] LossError),
    #[error("evaluation failed: {0}")]
    Metric(#[from] MetricError),
    #[error("instance segmentation failed: {0}")]
    Hough(#[from] HoughError),
    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged {
        iter: usize,
        reason: String,
        record: Box<RunRecord>,
    },
    #[error("gradient check: {0}")]
    FiniteDiff(#[from] crate::diffcore::FiniteDiffError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One training iteration. Losses are raw task losses on the minibatch,
/// NaN when a task had no labelled pixel in the batch or is inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRow {
    pub iter: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub s: Vec<f64>,
    pub total: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub task_names: Vec<String>,
    pub rows: Vec<IterRow>,
    /// Validation metrics of the final iterate.
    pub final_metrics: Option<MetricReport>,
    pub diverged: bool,
    pub clamp_events: usize,
}

impl RunRecord {
    pub fn final_s(&self) -> Vec<f64> {
        self.rows.last().map(|r| r.s.clone()).unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr");
        for prefix in ["loss", "s"] {
            for t in &self.task_names {
                let _ = write!(out, ",{prefix}_{t}");
            }
        }
        out.push_str(",total");
        let metric_names: Vec<&str> = MetricReport::default().columns().iter().map(|c| c.0).collect();
        for m in &metric_names {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.iter, fmt_sig9(r.lr));
            for v in r.losses.iter().chain(&r.s).chain([&r.total]) {
                let _ = write!(out, ",{}", fmt_sig9(*v));
            }
            match &r.metrics {
                Some(m) => {
                    for (_, v) in m.columns() {
                        let _ = write!(out, ",{}", fmt_sig9(v));
                    }
                }
                None => out.push_str(&",".repeat(metric_names.len())),
            }
            out.push('\n');
        }
        out
    }
}

/// Trained network, heads and record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub network: ToyNetwork,
    pub heads: Vec<TaskHead>,
}

impl TrainOutcome {
    /// Writes `run.csv`, `config.kv` and `params.csv` into `dir`.
    pub fn write(&self, dir: &Path, config: &TrainConfig) -> Result<(), TrainError> {
        write_run(dir, &self.record, config)?;
        let mut p = String::from("index,name,value\n");
        for (i, param) in self.network.params.params.iter().enumerate() {
            let _ = writeln!(p, "{i},{},{}", self.network.param_name(i), fmt_sig9(param.value));
        }
        for h in &self.heads {
            let _ = writeln!(p, ",s_{},{}", h.name, fmt_sig9(h.s.value));
        }
        write_file(&dir.join("params.csv"), &p)
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), TrainError> {
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_run(dir: &Path, record: &RunRecord, config: &TrainConfig) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("run.csv"), &record.to_csv())?;
    write_file(&dir.join("config.kv"), &config.to_kv().render())
}

fn outputs(config: &TrainConfig) -> Vec<usize> {
    config
        .tasks
        .iter()
        .map(|t| t.target.outputs(config.scene.num_classes))
        .collect()
}

pub fn build_network(config: &TrainConfig) -> ToyNetwork {
    ToyNetwork::new(
        super::data::feature_dim(config.patch_radius),
        &config.hidden,
        config.head_hidden,
        &outputs(config),
        config.seed ^ 0x9e37_79b9_7f4a_7c15,
    )
}

pub fn build_heads(config: &TrainConfig) -> Vec<TaskHead> {
    config
        .tasks
        .iter()
        .zip(&config.s_init)
        .map(|(t, &s)| TaskHead::new(t.name.clone(), t.kind, s))
        .collect()
}

/// Task losses for a batch of pixels. Entries are `None` for inactive tasks
/// and for tasks without a labelled pixel in the batch.
pub fn batch_task_losses(
    g: &mut ValueGraph,
    network: &mut ToyNetwork,
    heads: &[TaskHead],
    config: &TrainConfig,
    batch: &[(&SceneData, usize)],
    active: &[bool],
) -> Result<Vec<Option<NodeId>>, LossError> {
    let feats: Vec<Vec<f64>> = batch.iter().map(|(d, p)| d.features[*p].clone()).collect();
    let out = network.forward_graph(g, &feats, active)?;
    let mut result = Vec::with_capacity(config.tasks.len());
    for (t, (task, per_pixel)) in config.tasks.iter().zip(out).enumerate() {
        let Some(per_pixel) = per_pixel else {
            result.push(None);
            continue;
        };
        let mask: Vec<bool> = batch.iter().map(|(d, p)| d.targets[t].1[*p]).collect();
        if !mask.iter().any(|&m| m) {
            result.push(None);
            continue;
        }
        let loss = match task.target {
            Target::Semantic => {
                let labels: Vec<usize> = batch
                    .iter()
                    .map(|(d, p)| match &d.targets[t].0 {
                        TaskTargets::Labels(l) => l[*p],
                        _ => unreachable!("semantic task has label targets"),
                    })
                    .collect();
                let learned_exact = config.mode == TrainMode::Learned
                    && config.classification_form == ClassificationForm::Exact;
                if learned_exact {
                    losses::exact_classification_loss(g, &per_pixel, &labels, &mask, &heads[t].s)?
                } else {
                    losses::cross_entropy(g, &per_pixel, &labels, &mask)?
                }
            }
            Target::Depth => {
                let target: Vec<f64> = batch
                    .iter()
                    .map(|(d, p)| match &d.targets[t].0 {
                        TaskTargets::Scalars(v) => v[*p],
                        _ => unreachable!("depth task has scalar targets"),
                    })
                    .collect();
                let pred: Vec<NodeId> = per_pixel.iter().map(|o| o[0]).collect();
                if task.kind == losses::TaskKind::RegressionL2 {
                    losses::l2_loss(g, &pred, &target, &mask)?
                } else {
                    losses::l1_loss(g, &pred, &target, &mask)?
                }
            }
            Target::Instance => {
                let target: Vec<[f64; 2]> = batch
                    .iter()
                    .map(|(d, p)| match &d.targets[t].0 {
                        TaskTargets::Vectors(v) => v[*p],
                        _ => unreachable!("instance task has vector targets"),
                    })
                    .collect();
                let pred: Vec<[NodeId; 2]> = per_pixel.iter().map(|o| [o[0], o[1]]).collect();
                if task.kind == losses::TaskKind::RegressionL2 {
                    let flat_pred: Vec<NodeId> = pred.iter().flatten().copied().collect();
                    let flat_target: Vec<f64> = target.iter().flatten().copied().collect();
                    let flat_mask: Vec<bool> = mask.iter().flat_map(|&m| [m, m]).collect();
                    losses::l2_loss(g, &flat_pred, &flat_target, &flat_mask)?
                } else {
                    losses::l1_loss_vec2(g, &pred, &target, &mask)?
                }
            }
        };
        result.push(Some(loss));
    }
    Ok(result)
}

/// Combined objective over the tasks that produced a loss.
pub fn combine(
    g: &mut ValueGraph,
    task_losses: &[Option<NodeId>],
    heads: &[TaskHead],
    config: &TrainConfig,
    log: &mut ClampLog,
) -> Result<NodeId, LossError> {
    let present: Vec<usize> = (0..task_losses.len()).filter(|&i| task_losses[i].is_some()).collect();
    if present.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let nodes: Vec<NodeId> = present.iter().map(|&i| task_losses[i].unwrap()).collect();
    match config.fixed_weights() {
        None => {
            let mut terms = Vec::with_capacity(nodes.len());
            for (&i, &l) in present.iter().zip(&nodes) {
                let exact = config.classification_form == ClassificationForm::Exact
                    && config.tasks[i].target == Target::Semantic;
                terms.push(if exact {
                    l
                } else {
                    losses::weighted_task_loss(g, l, &heads[i], log)?
                });
            }
            Ok(g.sum(&terms)?)
        }
        Some(w) => {
            let sub: Vec<f64> = present.iter().map(|&i| w[i]).collect();
            let sub_heads: Vec<TaskHead> = present.iter().map(|&i| heads[i].clone()).collect();
            losses::multitask_objective(g, &nodes, &sub_heads, &ObjectiveMode::Fixed(FixedWeights::new(sub)?), log)
        }
    }
}

/// Validation metrics of `network` on `scenes` (clean targets).
pub fn evaluate(network: &ToyNetwork, config: &TrainConfig, scenes: &[SceneData]) -> Result<MetricReport, TrainError> {
    let p = network.params.values();
    let nc = config.scene.num_classes;
    let mut report = MetricReport::default();
    let mut pred_class = Vec::new();
    let mut gt_class = Vec::new();
    let (mut d_pred, mut d_gt, mut d_mask) = (Vec::new(), Vec::new(), Vec::new());
    let (mut v_pred, mut v_gt, mut v_mask) = (Vec::new(), Vec::new(), Vec::new());
    let mut counts = Vec::new();
    let (mut matched, mut masked) = (0.0, 0usize);
    let seg = SegmentParams::for_image(config.scene.width, config.scene.height, config.min_pts, config.eps_prime);
    for sd in scenes {
        let s = &sd.scene;
        let preds: Vec<Vec<Vec<f64>>> = sd.features.iter().map(|f| network.predict_with(&p, f)).collect();
        for (t, task) in config.tasks.iter().enumerate() {
            match task.target {
                Target::Semantic => {
                    for (px, out) in preds.iter().enumerate() {
                        let logits = &out[t];
                        let mut best = 0;
                        for k in 1..logits.len() {
                            if logits[k] > logits[best] {
                                best = k;
                            }
                        }
                        pred_class.push(best as u32);
                        gt_class.push(s.class_map[px]);
                    }
                }
                Target::Depth => {
                    d_pred.extend(preds.iter().map(|o| o[t][0]));
                    d_gt.extend_from_slice(&s.depth_map);
                    d_mask.extend_from_slice(&s.valid_depth_mask);
                }
                Target::Instance => {
                    let vecs: Vec<[f64; 2]> = preds.iter().map(|o| [o[t][0], o[t][1]]).collect();
                    let mask = s.instance_class_mask();
                    let ids = segment_instances(&vecs, &mask, s.width, seg)?;
                    let mut found: Vec<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
                    found.sort_unstable();
                    found.dedup();
                    counts.push((found.len(), s.num_instances()));
                    let pm = metrics::partition_match(&ids, &s.instance_map, &mask)?;
                    let n = mask.iter().filter(|&&m| m).count();
                    matched += pm.score * n as f64;
                    masked += n;
                    v_pred.extend(vecs);
                    v_gt.extend_from_slice(&s.vector_targets);
                    v_mask.extend_from_slice(&s.valid_instance_mask);
                }
            }
        }
    }
    if !gt_class.is_empty() {
        let iou = metrics::iou(&pred_class, &gt_class, nc)?;
        report.per_class_iou = iou.per_class;
        report.mean_iou = Some(iou.mean);
        report.iou_defined_classes = iou.defined;
    }
    if !d_gt.is_empty() {
        let (l1, rms) = metrics::depth_errors(&d_pred, &d_gt, &d_mask)?;
        report.depth_l1 = Some(l1);
        report.depth_rms = Some(rms);
    }
    if !counts.is_empty() {
        report.instance_l1 = metrics::vector_l1(&v_pred, &v_gt, &v_mask).ok();
        report.instance_count_accuracy = Some(metrics::instance_count_accuracy(&counts));
        report.partition_match = Some(if masked == 0 { 1.0 } else { matched / masked as f64 });
    }
    Ok(report)
}

/// Which network parameters receive updates: the encoder whenever any task
/// is active, and the decoders of active tasks.
fn trainable_mask(network: &ToyNetwork, active: &[bool]) -> Vec<bool> {
    let mut mask = vec![false; network.params.len()];
    if active.iter().any(|&a| a) {
        for i in network.encoder_range() {
            mask[i] = true;
        }
    }
    for (dec, &a) in network.decoders.iter().zip(active) {
        if a {
            for i in dec.range() {
                mask[i] = true;
            }
        }
    }
    mask
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let data = Dataset::build(config)?;
    train_on(config, &data)
}

/// Trains on an already built dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome, TrainError> {
    let mut network = build_network(config);
    let mut heads = build_heads(config);
    let active = config.active_tasks();
    let learned = config.mode == TrainMode::Learned;
    let trainable = trainable_mask(&network, &active);
    let names: Vec<String> = (0..network.params.len())
        .filter(|&i| trainable[i])
        .map(|i| network.param_name(i))
        .chain(heads.iter().filter(|_| learned).map(|h| format!("s_{}", h.name)))
        .collect();
    let mut opt = OptimizerState::new(names.len(), config.iters);
    opt.base_lr = config.base_lr;
    opt.momentum = config.momentum;
    opt.weight_decay = config.weight_decay;
    opt.power = config.power;
    let mut sampler = PixelSampler::new(&data.train, config.seed);
    let mut record = RunRecord {
        task_names: config.tasks.iter().map(|t| t.name.clone()).collect(),
        rows: Vec::with_capacity(config.iters),
        final_metrics: None,
        diverged: false,
        clamp_events: 0,
    };
    let mut g = ValueGraph::new();
    let mut log = ClampLog::default();
    for iter in 0..config.iters {
        let batch: Vec<(&SceneData, usize)> = sampler
            .next_batch(config.batch)
            .into_iter()
            .map(|(s, p)| (&data.train[s], p))
            .collect();
        g.clear();
        if learned {
            for h in heads.iter_mut() {
                h.s.bind(&mut g)?;
            }
        }
        let diverge = |record: &mut RunRecord, reason: String| {
            record.diverged = true;
            TrainError::Diverged {
                iter,
                reason,
                record: Box::new(record.clone()),
            }
        };
        let task_losses = match batch_task_losses(&mut g, &mut network, &heads, config, &batch, &active) {
            Ok(l) => l,
            Err(LossError::Graph(e @ GraphError::NonFinite { .. })) => return Err(diverge(&mut record, e.to_string())),
            Err(e) => return Err(e.into()),
        };
        // A batch without any labelled pixel contributes a zero gradient.
        let total_value = if task_losses.iter().any(Option::is_some) {
            let total = match combine(&mut g, &task_losses, &heads, config, &mut log) {
                Ok(t) => t,
                Err(LossError::Graph(e @ GraphError::NonFinite { .. })) => {
                    return Err(diverge(&mut record, e.to_string()))
                }
                Err(e) => return Err(e.into()),
            };
            g.backward(total).map_err(LossError::from)?;
            g.value(total)
        } else {
            g.reset_grads();
            f64::NAN
        };
        network.params.pull_grads(&g);
        if learned {
            for h in heads.iter_mut() {
                h.s.pull_grad(&g);
            }
        }
        let params = network
            .params
            .params
            .iter_mut()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p)
            .chain(heads.iter_mut().filter(|_| learned).map(|h| &mut h.s));
        let lr = match sgd_step(params, &mut opt, iter) {
            Ok(lr) => lr,
            Err(OptimError::NonFiniteGradient { index, value }) => {
                return Err(diverge(&mut record, format!("gradient {value} for {}", names[index])))
            }
            Err(e) => unreachable!("optimizer misconfigured: {e}"),
        };
        let s: Vec<f64> = heads.iter().map(|h| h.s.value).collect();
        if let Some(bad) = s.iter().find(|v| !v.is_finite()) {
            return Err(diverge(&mut record, format!("log variance became {bad}")));
        }
        let metrics = if (iter + 1) % config.metrics_every == 0 || iter + 1 == config.iters {
            Some(evaluate(&network, config, &data.val)?)
        } else {
            None
        };
        record.rows.push(IterRow {
            iter,
            lr,
            losses: task_losses.iter().map(|l| l.map_or(f64::NAN, |n| g.value(n))).collect(),
            s,
            total: total_value,
            metrics,
        });
    }
    record.clamp_events = log.events.len();
    record.final_metrics = record.rows.last().and_then(|r| r.metrics.clone());
    Ok(TrainOutcome {
        record,
        network,
        heads,
    })
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Loss(LossError::Graph(e))
    }
}
