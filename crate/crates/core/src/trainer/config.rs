//! Run configuration as `key=value` pairs.

use crate::losses::{FixedWeights, TaskKind};
use crate::scenes::SceneParams;
use crate::textio::KvMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for '{key}': {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

/// What a task head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Semantic,
    Depth,
    Instance,
}

impl Target {
    pub fn outputs(self, num_classes: usize) -> usize {
        match self {
            Target::Semantic => num_classes,
            Target::Depth => 1,
            Target::Instance => 2,
        }
    }
}

/// One task of a run. Parsed from `name[:kind][@noise]`; the target follows
/// from the name prefix (`class`, `depth` or `instance`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub target: Target,
    pub kind: TaskKind,
    /// Training-target noise: Gaussian standard deviation for regression,
    /// probability of replacing a label by a uniformly drawn class for
    /// classification.
    pub label_noise: f64,
}

impl TaskSpec {
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (head, noise) = match spec.split_once('@') {
            Some((h, n)) => (h, n.parse::<f64>().map_err(|_| format!("bad noise '{n}'"))?),
            None => (spec, 0.0),
        };
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(format!("noise must be non-negative, got {noise}"));
        }
        let (name, kind) = match head.split_once(':') {
            Some((n, k)) => (n, Some(k)),
            None => (head, None),
        };
        let target = if name.starts_with("class") {
            Target::Semantic
        } else if name.starts_with("depth") {
            Target::Depth
        } else if name.starts_with("instance") {
            Target::Instance
        } else {
            return Err(format!("task '{name}' must start with class, depth or instance"));
        };
        let kind = match (target, kind) {
            (Target::Semantic, None | Some("ce")) => TaskKind::Classification,
            (Target::Semantic, Some(k)) => return Err(format!("classification task cannot use '{k}'")),
            (_, None | Some("l1")) => TaskKind::RegressionL1,
            (_, Some("l2")) => TaskKind::RegressionL2,
            (_, Some(k)) => return Err(format!("unknown regression loss '{k}'")),
        };
        if target == Target::Semantic && noise >= 1.0 {
            return Err(format!("label flip probability must be below 1, got {noise}"));
        }
        Ok(Self {
            name: name.to_string(),
            target,
            kind,
            label_noise: noise,
        })
    }

    fn render(&self) -> String {
        let kind = match self.kind {
            TaskKind::Classification => "ce",
            TaskKind::RegressionL1 => "l1",
            TaskKind::RegressionL2 => "l2",
        };
        if self.label_noise > 0.0 {
            format!("{}:{kind}@{}", self.name, self.label_noise)
        } else {
            format!("{}:{kind}", self.name)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMode {
    Learned,
    Fixed(FixedWeights),
    Unweighted,
    /// Only the named task is trained.
    Single(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassificationForm {
    /// Weighted cross-entropy plus `s/2`.
    Approximate,
    /// Temperature-scaled softmax likelihood.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub scene: SceneParams,
    pub num_scenes: usize,
    pub val_fraction: f64,
    pub tasks: Vec<TaskSpec>,
    pub mode: TrainMode,
    pub iters: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub hidden: Vec<usize>,
    pub head_hidden: usize,
    pub patch_radius: usize,
    /// Initial log variance per task.
    pub s_init: Vec<f64>,
    pub classification_form: ClassificationForm,
    pub metrics_every: usize,
    pub min_pts: usize,
    pub eps_prime: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tasks: Vec<TaskSpec> = ["class", "depth"]
            .iter()
            .map(|t| TaskSpec::parse(t).unwrap())
            .collect();
        Self {
            seed: 1,
            scene: SceneParams::default(),
            num_scenes: 10,
            val_fraction: 0.2,
            s_init: vec![0.0; tasks.len()],
            tasks,
            mode: TrainMode::Learned,
            iters: 2000,
            batch: 32,
            base_lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            hidden: vec![24, 24],
            head_hidden: 0,
            patch_radius: 2,
            classification_form: ClassificationForm::Approximate,
            metrics_every: 250,
            min_pts: 5,
            eps_prime: 2.0,
        }
    }
}

/// Every key understood by [`TrainConfig::apply`].
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "scenes",
    "val_fraction",
    "width",
    "height",
    "num_classes",
    "shapes_min",
    "shapes_max",
    "occluders_min",
    "occluders_max",
    "dist_near",
    "dist_far",
    "split_prob",
    "depth_noise",
    "intensity_noise",
    "hole_fraction",
    "fog",
    "min_instance_pixels",
    "min_separation",
    "size_min",
    "size_max",
    "tasks",
    "mode",
    "weights",
    "single",
    "iters",
    "batch",
    "base_lr",
    "momentum",
    "weight_decay",
    "power",
    "hidden",
    "head_hidden",
    "patch_radius",
    "s_init",
    "classification_form",
    "metrics_every",
    "min_pts",
    "eps_prime",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| invalid(key, value, "not a number of the expected type"))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s.trim()))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies `key=value` overrides in key order. `mode`, `weights` and
    /// `single` are resolved together after all other keys.
    pub fn apply(&mut self, kv: &KvMap) -> Result<(), ConfigError> {
        let mut mode: Option<String> = None;
        let mut weights: Option<Vec<f64>> = None;
        let mut single: Option<String> = None;
        let mut s_init: Option<Vec<f64>> = None;
        for (k, v) in &kv.0 {
            let key = k.as_str();
            let v = v.as_str();
            let sc = &mut self.scene;
            match key {
                "seed" => self.seed = num(key, v)?,
                "scenes" => self.num_scenes = num(key, v)?,
                "val_fraction" => self.val_fraction = num(key, v)?,
                "width" => sc.width = num(key, v)?,
                "height" => sc.height = num(key, v)?,
                "num_classes" => sc.num_classes = num(key, v)?,
                "shapes_min" => sc.shapes.0 = num(key, v)?,
                "shapes_max" => sc.shapes.1 = num(key, v)?,
                "occluders_min" => sc.occluders.0 = num(key, v)?,
                "occluders_max" => sc.occluders.1 = num(key, v)?,
                "dist_near" => sc.distance.0 = num(key, v)?,
                "dist_far" => sc.distance.1 = num(key, v)?,
                "split_prob" => sc.split_probability = num(key, v)?,
                "depth_noise" => sc.depth_noise = num(key, v)?,
                "intensity_noise" => sc.intensity_noise = num(key, v)?,
                "hole_fraction" => sc.hole_fraction = num(key, v)?,
                "fog" => sc.fog = num(key, v)?,
                "min_instance_pixels" => sc.min_instance_pixels = num(key, v)?,
                "min_separation" => sc.min_separation = num(key, v)?,
                "size_min" => sc.object_size.0 = num(key, v)?,
                "size_max" => sc.object_size.1 = num(key, v)?,
                "tasks" => {
                    self.tasks = v
                        .split(',')
                        .map(|t| TaskSpec::parse(t.trim()).map_err(|e| invalid(key, v, e)))
                        .collect::<Result<_, _>>()?;
                }
                "mode" => mode = Some(v.to_string()),
                "weights" => weights = Some(list(key, v)?),
                "single" => single = Some(v.to_string()),
                "iters" => self.iters = num(key, v)?,
                "batch" => self.batch = num(key, v)?,
                "base_lr" => self.base_lr = num(key, v)?,
                "momentum" => self.momentum = num(key, v)?,
                "weight_decay" => self.weight_decay = num(key, v)?,
                "power" => self.power = num(key, v)?,
                "hidden" => self.hidden = list(key, v)?,
                "head_hidden" => self.head_hidden = num(key, v)?,
                "patch_radius" => self.patch_radius = num(key, v)?,
                "s_init" => s_init = Some(list(key, v)?),
                "classification_form" => {
                    self.classification_form = match v {
                        "approx" => ClassificationForm::Approximate,
                        "exact" => ClassificationForm::Exact,
                        _ => return Err(invalid(key, v, "expected approx or exact")),
                    }
                }
                "metrics_every" => self.metrics_every = num(key, v)?,
                "min_pts" => self.min_pts = num(key, v)?,
                "eps_prime" => self.eps_prime = num(key, v)?,
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        self.scene.seed = self.seed;
        let k = self.tasks.len();
        match s_init {
            Some(s) if s.len() == 1 => self.s_init = vec![s[0]; k],
            Some(s) if s.len() == k => self.s_init = s,
            Some(s) => {
                return Err(invalid(
                    "s_init",
                    &join(&s),
                    format!("expected 1 or {k} values"),
                ))
            }
            None if self.s_init.len() != k => self.s_init = vec![self.s_init.first().copied().unwrap_or(0.0); k],
            None => {}
        }
        if let Some(m) = mode {
            self.mode = match m.as_str() {
                "learned" => TrainMode::Learned,
                "unweighted" => TrainMode::Unweighted,
                "fixed" => {
                    let w = weights
                        .clone()
                        .ok_or_else(|| invalid("mode", &m, "fixed mode needs weights"))?;
                    TrainMode::Fixed(FixedWeights::new(w).map_err(|e| invalid("weights", "", e.to_string()))?)
                }
                "single" => TrainMode::Single(
                    single
                        .clone()
                        .ok_or_else(|| invalid("mode", &m, "single mode needs single=<task>"))?,
                ),
                _ => return Err(invalid("mode", &m, "expected learned, fixed, unweighted or single")),
            };
        } else if let Some(w) = weights {
            self.mode = TrainMode::Fixed(FixedWeights::new(w).map_err(|e| invalid("weights", "", e.to_string()))?);
        }
        self.validate()
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| Err(invalid(key, "", reason));
        if self.tasks.is_empty() {
            return bad("tasks", "at least one task is required");
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("tasks", "task names must be unique");
        }
        if self.tasks.iter().filter(|t| t.target == Target::Semantic).count() > 1 {
            return bad("tasks", "at most one classification task");
        }
        match &self.mode {
            TrainMode::Fixed(w) if w.as_slice().len() != self.tasks.len() => {
                return bad("weights", "need one weight per task");
            }
            TrainMode::Single(name) if !self.tasks.iter().any(|t| &t.name == name) => {
                return bad("single", "names no configured task");
            }
            _ => {}
        }
        if self.s_init.iter().any(|s| !s.is_finite()) {
            return bad("s_init", "must be finite");
        }
        if self.num_scenes < 2 {
            return bad("scenes", "need at least 2 scenes for a validation split");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", "must be in (0, 1)");
        }
        if self.iters == 0 || self.batch == 0 || self.metrics_every == 0 {
            return bad("iters", "iters, batch and metrics_every must be positive");
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("base_lr", "optimizer settings out of range");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "need at least one non-empty hidden layer");
        }
        if self.min_pts < 2 || !(self.eps_prime > 0.0) {
            return bad("min_pts", "min_pts >= 2 and eps_prime > 0 required");
        }
        self.scene
            .validate()
            .map_err(|e| invalid("scene", "", e.to_string()))
    }

    /// Resolved configuration for the `config.kv` echo.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        let sc = &self.scene;
        kv.insert("seed", self.seed);
        kv.insert("scenes", self.num_scenes);
        kv.insert("val_fraction", self.val_fraction);
        kv.insert("width", sc.width);
        kv.insert("height", sc.height);
        kv.insert("num_classes", sc.num_classes);
        kv.insert("shapes_min", sc.shapes.0);
        kv.insert("shapes_max", sc.shapes.1);
        kv.insert("occluders_min", sc.occluders.0);
        kv.insert("occluders_max", sc.occluders.1);
        kv.insert("dist_near", sc.distance.0);
        kv.insert("dist_far", sc.distance.1);
        kv.insert("split_prob", sc.split_probability);
        kv.insert("depth_noise", sc.depth_noise);
        kv.insert("intensity_noise", sc.intensity_noise);
        kv.insert("hole_fraction", sc.hole_fraction);
        kv.insert("fog", sc.fog);
        kv.insert("min_instance_pixels", sc.min_instance_pixels);
        kv.insert("min_separation", sc.min_separation);
        kv.insert("size_min", sc.object_size.0);
        kv.insert("size_max", sc.object_size.1);
        kv.insert(
            "tasks",
            self.tasks.iter().map(TaskSpec::render).collect::<Vec<_>>().join(","),
        );
        match &self.mode {
            TrainMode::Learned => kv.insert("mode", "learned"),
            TrainMode::Unweighted => kv.insert("mode", "unweighted"),
            TrainMode::Fixed(w) => {
                kv.insert("mode", "fixed");
                kv.insert("weights", join(w.as_slice()));
            }
            TrainMode::Single(t) => {
                kv.insert("mode", "single");
                kv.insert("single", t);
            }
        }
        kv.insert("iters", self.iters);
        kv.insert("batch", self.batch);
        kv.insert("base_lr", self.base_lr);
        kv.insert("momentum", self.momentum);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("power", self.power);
        kv.insert("hidden", join(&self.hidden));
        kv.insert("head_hidden", self.head_hidden);
        kv.insert("patch_radius", self.patch_radius);
        kv.insert("s_init", join(&self.s_init));
        kv.insert(
            "classification_form",
            match self.classification_form {
                ClassificationForm::Approximate => "approx",
                ClassificationForm::Exact => "exact",
            },
        );
        kv.insert("metrics_every", self.metrics_every);
        kv.insert("min_pts", self.min_pts);
        kv.insert("eps_prime", self.eps_prime);
        kv
    }

    /// Per-task weights for fixed-style modes; `None` for learned.
    pub fn fixed_weights(&self) -> Option<Vec<f64>> {
        let k = self.tasks.len();
        match &self.mode {
            TrainMode::Learned => None,
            TrainMode::Unweighted => Some(vec![1.0 / k as f64; k]),
            TrainMode::Fixed(w) => Some(w.as_slice().to_vec()),
            TrainMode::Single(name) => Some(
                self.tasks
                    .iter()
                    .map(|t| if &t.name == name { 1.0 } else { 0.0 })
                    .collect(),
            ),
        }
    }

    /// Tasks that receive gradient: every task in learned mode, otherwise
    /// those with non-zero weight.
    pub fn active_tasks(&self) -> Vec<bool> {
        match self.fixed_weights() {
            None => vec![true; self.tasks.len()],
            Some(w) => w.iter().map(|&x| x > 0.0).collect(),
        }
    }
}
