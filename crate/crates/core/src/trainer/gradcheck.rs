//! Finite-difference check of the full three-task learned objective.

use super::config::{TaskSpec, TrainConfig};
use super::data::{Dataset, SceneData};
use super::run::{batch_task_losses, build_heads, build_network, combine, TrainError};
use super::network::ToyNetwork;
use crate::diffcore::{finite_diff_grad, scaled_error, NodeId, ValueGraph};
use crate::losses::{ClampLog, LossError, TaskHead};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;
/// Points closer than this to a relu or max kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub points: usize,
    pub rejected: usize,
    pub coordinates: usize,
    /// Largest [`scaled_error`] over all points and coordinates.
    pub max_error: f64,
    /// `(point, coordinate name)` where `max_error` occurred.
    pub worst: (usize, String),
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < REL_TOL
    }
}

fn small_config(seed: u64) -> TrainConfig {
    let tasks: Vec<TaskSpec> = ["class", "depth:l1", "instance:l1"]
        .iter()
        .map(|t| TaskSpec::parse(t).expect("static task list"))
        .collect();
    let mut c = TrainConfig {
        seed,
        num_scenes: 2,
        hidden: vec![6],
        head_hidden: 3,
        patch_radius: 1,
        s_init: vec![0.0; tasks.len()],
        tasks,
        ..TrainConfig::default()
    };
    c.scene.width = 16;
    c.scene.height = 16;
    c.scene.shapes = (1, 2);
    c.scene.min_separation = 6.0;
    c.scene.min_instance_pixels = 12;
    c.scene.object_size = (3.0, 5.0);
    c.scene.distance = (4.0, 10.0);
    c
}

/// A handful of pixels with every task labelled at least once.
fn pick_pixels<'a>(scene: &'a SceneData, rng: &mut ChaCha8Rng, count: usize) -> Vec<(&'a SceneData, usize)> {
    let inst: Vec<usize> = (0..scene.scene.len()).filter(|&p| scene.scene.valid_instance_mask[p]).collect();
    let mut out = Vec::with_capacity(count);
    if !inst.is_empty() {
        out.push((scene, inst[rng.random_range(0..inst.len())]));
    }
    while out.len() < count {
        out.push((scene, rng.random_range(0..scene.scene.len())));
    }
    out
}

/// Loads `theta` (network weights then log variances) and records the
/// combined objective into `g`.
fn objective(
    network: &mut ToyNetwork,
    heads: &mut [TaskHead],
    config: &TrainConfig,
    batch: &[(&SceneData, usize)],
    theta: &[f64],
    g: &mut ValueGraph,
) -> Result<NodeId, LossError> {
    let n_net = network.params.len();
    network.params.set_values(&theta[..n_net]);
    for (h, &v) in heads.iter_mut().zip(&theta[n_net..]) {
        h.s.value = v;
    }
    g.clear();
    for h in heads.iter_mut() {
        h.s.bind(g)?;
    }
    let active = vec![true; heads.len()];
    let losses = batch_task_losses(g, network, heads, config, batch, &active)?;
    combine(g, &losses, heads, config, &mut ClampLog::default())
}

/// Compares analytic and central-difference gradients of the combined
/// learned objective at `points` random parameter settings (network weights
/// and log variances).
pub fn gradcheck(seed: u64, points: usize) -> Result<GradcheckReport, TrainError> {
    let config = small_config(seed);
    let data = Dataset::build(&config)?;
    let mut network = build_network(&config);
    let mut heads = build_heads(&config);
    let n_net = network.params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);

    let mut report = GradcheckReport {
        points: 0,
        rejected: 0,
        coordinates: n_net + heads.len(),
        max_error: 0.0,
        worst: (0, String::new()),
    };
    let mut g = ValueGraph::new();
    while report.points < points {
        let values: Vec<f64> = (0..n_net).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = heads.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
        let batch = pick_pixels(&data.train[0], &mut rng, 6);

        let theta: Vec<f64> = values.iter().chain(&s).copied().collect();
        let total = objective(&mut network, &mut heads, &config, &batch, &theta, &mut g)?;
        if g.kink_margin() < KINK_MARGIN {
            report.rejected += 1;
            continue;
        }
        g.backward(total).map_err(LossError::from)?;
        network.params.pull_grads(&g);
        for h in heads.iter_mut() {
            h.s.pull_grad(&g);
        }
        let analytic: Vec<f64> = network
            .params
            .grads()
            .into_iter()
            .chain(heads.iter().map(|h| h.s.grad))
            .collect();
        let mut scratch = ValueGraph::new();
        let numeric = finite_diff_grad(
            |t| {
                objective(&mut network, &mut heads, &config, &batch, t, &mut scratch)
                    .map(|n| scratch.value(n))
            },
            &theta,
            STEP,
        )?;
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = scaled_error(a, n, REL_TOL, ABS_TOL);
            if e > report.max_error {
                report.max_error = e;
                let name = if i < n_net {
                    network.param_name(i)
                } else {
                    format!("s_{}", heads[i - n_net].name)
                };
                report.worst = (report.points, name);
            }
        }
        report.points += 1;
    }
    Ok(report)
}
