//! Scene sets, per-pixel features and seeded minibatches.

use super::config::{Target, TaskSpec, TrainConfig};
use crate::scenes::{generate_scene, Scene, SceneError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Intensity patch of radius `r` around `(row, col)` with edge clamping,
/// followed by row and column scaled to `[-1, 1]`.
pub fn pixel_features(scene: &Scene, row: usize, col: usize, r: usize) -> Vec<f64> {
    let (w, h) = (scene.width as isize, scene.height as isize);
    let r = r as isize;
    let mut f = Vec::with_capacity(((2 * r + 1) * (2 * r + 1) + 2) as usize);
    for dr in -r..=r {
        for dc in -r..=r {
            let rr = (row as isize + dr).clamp(0, h - 1) as usize;
            let cc = (col as isize + dc).clamp(0, w - 1) as usize;
            f.push(scene.intensity[scene.index(rr, cc)]);
        }
    }
    f.push(2.0 * row as f64 / (h - 1) as f64 - 1.0);
    f.push(2.0 * col as f64 / (w - 1) as f64 - 1.0);
    f
}

pub fn feature_dim(r: usize) -> usize {
    (2 * r + 1) * (2 * r + 1) + 2
}

/// Targets of one task for one scene.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTargets {
    Labels(Vec<usize>),
    Scalars(Vec<f64>),
    Vectors(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub scene: Scene,
    pub features: Vec<Vec<f64>>,
    /// Per task: training targets (label noise applied) and loss mask.
    pub targets: Vec<(TaskTargets, Vec<bool>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneData>,
    pub val: Vec<SceneData>,
}

fn scene_data(scene: Scene, tasks: &[TaskSpec], radius: usize, rng: &mut ChaCha8Rng) -> SceneData {
    let features = (0..scene.height)
        .flat_map(|r| (0..scene.width).map(move |c| (r, c)))
        .map(|(r, c)| pixel_features(&scene, r, c, radius))
        .collect();
    let targets = tasks
        .iter()
        .map(|t| {
            let noise = Normal::new(0.0, t.label_noise).expect("noise validated");
            let mut jitter = |x: f64| {
                if t.label_noise > 0.0 {
                    x + noise.sample(rng)
                } else {
                    x
                }
            };
            match t.target {
                Target::Semantic => (
                    TaskTargets::Labels(
                        scene
                            .class_map
                            .iter()
                            .map(|&c| {
                                if t.label_noise > 0.0 && rng.random_bool(t.label_noise) {
                                    rng.random_range(0..scene.num_classes)
                                } else {
                                    c as usize
                                }
                            })
                            .collect(),
                    ),
                    vec![true; scene.len()],
                ),
                Target::Depth => (
                    TaskTargets::Scalars(scene.depth_map.iter().map(|&d| jitter(d)).collect()),
                    scene.valid_depth_mask.clone(),
                ),
                Target::Instance => (
                    TaskTargets::Vectors(
                        scene
                            .vector_targets
                            .iter()
                            .map(|v| [jitter(v[0]), jitter(v[1])])
                            .collect(),
                    ),
                    scene.valid_instance_mask.clone(),
                ),
            }
        })
        .collect();
    SceneData {
        scene,
        features,
        targets,
    }
}

impl Dataset {
    /// Generates `num_scenes` scenes from the config seed and holds out a
    /// seeded `val_fraction` of them. Label noise is drawn once, on the
    /// training scenes only.
    pub fn build(config: &TrainConfig) -> Result<Self, SceneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let seeds: Vec<u64> = (0..config.num_scenes).map(|_| rng.random()).collect();
        let mut order: Vec<usize> = (0..config.num_scenes).collect();
        order.shuffle(&mut rng);
        let n_val = ((config.num_scenes as f64 * config.val_fraction).round() as usize)
            .clamp(1, config.num_scenes - 1);
        let mut is_val = vec![false; config.num_scenes];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        let clean: Vec<TaskSpec> = config
            .tasks
            .iter()
            .map(|t| TaskSpec {
                label_noise: 0.0,
                ..t.clone()
            })
            .collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let params = crate::scenes::SceneParams {
                seed,
                ..config.scene.clone()
            };
            let scene = generate_scene(&params)?;
            if is_val[i] {
                val.push(scene_data(scene, &clean, config.patch_radius, &mut rng));
            } else {
                train.push(scene_data(scene, &config.tasks, config.patch_radius, &mut rng));
            }
        }
        Ok(Self { train, val })
    }
}

/// Epoch-wise shuffled `(scene, pixel)` indices over the training scenes.
#[derive(Debug, Clone)]
pub struct PixelSampler {
    pool: Vec<(u32, u32)>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl PixelSampler {
    pub fn new(train: &[SceneData], seed: u64) -> Self {
        let pool = train
            .iter()
            .enumerate()
            .flat_map(|(s, d)| (0..d.scene.len()).map(move |p| (s as u32, p as u32)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut sampler = Self { pool, cursor: 0, rng };
        sampler.pool.shuffle(&mut sampler.rng);
        sampler
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let (s, p) = self.pool[self.cursor];
            out.push((s as usize, p as usize));
            self.cursor += 1;
        }
        out
    }
}
