//! Procedural multi-task scenes.
//!
//! A scene is a small raster with a sky region (class 0, inverse depth 0), a
//! ground plane, rectangular and disc-shaped objects drawn far-to-near, and
//! thin vertical occluders that can cut an object into disjoint pieces
//! while it keeps a single instance id. Coordinates are `(row, col)` with the
//! origin at the top-left pixel.

mod io;

pub use io::{read_scene, write_scene, SceneIoError};
pub(crate) use io::pgm;

use crate::textio::quantize9;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const SKY_CLASS: u32 = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    Invalid(String),
    #[error("could not place {wanted} objects satisfying size and separation constraints (placed {placed})")]
    Infeasible { wanted: usize, placed: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Inclusive range for the number of objects.
    pub shapes: (usize, usize),
    /// Inclusive range for free-standing occluder bars.
    pub occluders: (usize, usize),
    /// Object distance range (inverse depth is `1 / distance`).
    pub distance: (f64, f64),
    /// Probability that an object gets a bar drawn through its middle.
    pub split_probability: f64,
    /// Standard deviation of additive noise on non-sky inverse depth.
    pub depth_noise: f64,
    /// Standard deviation of additive noise on the rendered intensity.
    pub intensity_noise: f64,
    /// Fraction of pixels whose depth and instance labels are withheld.
    pub hole_fraction: f64,
    /// Smallest visible instance, in pixels.
    pub min_instance_pixels: usize,
    /// Smallest allowed distance between instance centroids, in pixels.
    pub min_separation: f64,
    /// Object half-extent range in pixels at the nearest distance.
    pub object_size: (f64, f64),
    /// Fog density; contrast falls off as `exp(-fog * distance)`.
    pub fog: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 32,
            height: 32,
            num_classes: 4,
            shapes: (2, 4),
            occluders: (0, 1),
            distance: (4.0, 40.0),
            split_probability: 0.3,
            depth_noise: 0.005,
            intensity_noise: 0.02,
            hole_fraction: 0.05,
            min_instance_pixels: 25,
            min_separation: 10.0,
            object_size: (4.0, 9.0),
            fog: 0.04,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Invalid(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "scene must be at least 16x16, got {}x{}",
                self.width, self.height
            ));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        if self.shapes.0 > self.shapes.1 || self.occluders.0 > self.occluders.1 {
            return bad("count ranges must satisfy min <= max".into());
        }
        let (d0, d1) = self.distance;
        if !(d0 > 0.0 && d0 <= d1 && d1.is_finite()) {
            return bad(format!("distance range ({d0}, {d1}) must be positive and ordered"));
        }
        let (s0, s1) = self.object_size;
        if !(s0 >= 0.5 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("object size range ({s0}, {s1}) invalid"));
        }
        for (name, p) in [
            ("split_probability", self.split_probability),
            ("hole_fraction", self.hole_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, v) in [
            ("depth_noise", self.depth_noise),
            ("intensity_noise", self.intensity_noise),
            ("min_separation", self.min_separation),
            ("fog", self.fog),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.min_instance_pixels == 0 {
            return bad("min_instance_pixels must be positive".into());
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if self.shapes.0 > 0 {
            let area = self.min_instance_pixels as f64 * self.shapes.0 as f64;
            let spread = self.min_separation * self.min_separation * self.shapes.0 as f64;
            if area > w * h || spread > 4.0 * w * h {
                return Err(SceneError::Infeasible {
                    wanted: self.shapes.0,
                    placed: 0,
                });
            }
        }
        Ok(())
    }
}

/// Which classes can carry instance ids for `num_classes` classes.
pub fn is_instance_class(class: u32, num_classes: usize) -> bool {
    if num_classes == 2 {
        class == 1
    } else {
        class >= 2 && (class as usize) < num_classes
    }
}

/// Ground and occluder class, absent when there are only two classes.
pub fn stuff_class(num_classes: usize) -> Option<u32> {
    (num_classes >= 3).then_some(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub class_map: Vec<u32>,
    /// Inverse depth, `1 / distance`; exactly 0 on sky.
    pub depth_map: Vec<f64>,
    /// 0 means no instance.
    pub instance_map: Vec<u32>,
    /// `(Δrow, Δcol)` from each pixel to its instance centroid.
    pub vector_targets: Vec<[f64; 2]>,
    pub valid_depth_mask: Vec<bool>,
    pub valid_instance_mask: Vec<bool>,
    /// Rendered grey-level input image.
    pub intensity: Vec<f64>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn num_instances(&self) -> usize {
        let mut ids: Vec<u32> = self.instance_map.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Instance ids whose pixels form more than one 4-connected component.
    pub fn split_instances(&self) -> Vec<u32> {
        let mut seen = vec![false; self.len()];
        let mut components: std::collections::BTreeMap<u32, usize> = Default::default();
        for start in 0..self.len() {
            let id = self.instance_map[start];
            if id == 0 || seen[start] {
                continue;
            }
            *components.entry(id).or_default() += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (r, c) = (p / self.width, p % self.width);
                let mut visit = |q: usize| {
                    if !seen[q] && self.instance_map[q] == id {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if r > 0 {
                    visit(p - self.width);
                }
                if r + 1 < self.height {
                    visit(p + self.width);
                }
                if c > 0 {
                    visit(p - 1);
                }
                if c + 1 < self.width {
                    visit(p + 1);
                }
            }
        }
        components
            .into_iter()
            .filter(|&(_, n)| n > 1)
            .map(|(id, _)| id)
            .collect()
    }

    /// Pixels of instance-capable classes.
    pub fn instance_class_mask(&self) -> Vec<bool> {
        self.class_map
            .iter()
            .map(|&c| is_instance_class(c, self.num_classes))
            .collect()
    }
}

/// Per-pixel `centroid(id) - (row, col)` and the mask of pixels with
/// `id != 0`. Centroids are exact means over each id's pixel set, so split
/// pieces of one id all point at the joint centroid.
pub fn instance_vector_targets(
    instance_map: &[u32],
    width: usize,
) -> (Vec<[f64; 2]>, Vec<bool>) {
    let centroids = centroids(instance_map, width);
    let mut targets = vec![[0.0, 0.0]; instance_map.len()];
    let mut mask = vec![false; instance_map.len()];
    for (p, &id) in instance_map.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let c = centroids[&id];
        let (r, col) = ((p / width) as f64, (p % width) as f64);
        targets[p] = [c[0] - r, c[1] - col];
        mask[p] = true;
    }
    (targets, mask)
}

/// Mean `(row, col)` per non-zero id.
pub fn centroids(instance_map: &[u32], width: usize) -> std::collections::BTreeMap<u32, [f64; 2]> {
    let mut acc: std::collections::BTreeMap<u32, (u64, u64, u64)> = Default::default();
    for (p, &id) in instance_map.iter().enumerate() {
        if id != 0 {
            let e = acc.entry(id).or_default();
            e.0 += (p / width) as u64;
            e.1 += (p % width) as u64;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (r, c, n))| (id, [r as f64 / n as f64, c as f64 / n as f64]))
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { r0: f64, r1: f64, c0: f64, c1: f64 },
    Disc { cr: f64, cc: f64, radius: f64 },
    Bar { c0: usize, c1: usize, r0: usize, r1: usize },
}

impl Shape {
    fn covers(&self, r: usize, c: usize) -> bool {
        let (rf, cf) = (r as f64, c as f64);
        match *self {
            Shape::Rect { r0, r1, c0, c1 } => rf >= r0 && rf <= r1 && cf >= c0 && cf <= c1,
            Shape::Disc { cr, cc, radius } => {
                let (dr, dc) = (rf - cr, cf - cc);
                dr * dr + dc * dc <= radius * radius
            }
            Shape::Bar { c0, c1, r0, r1 } => r >= r0 && r <= r1 && c >= c0 && c <= c1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    shape: Shape,
    class: u32,
    inverse_depth: f64,
    /// Instance slot; `None` for occluders.
    object: Option<usize>,
}

struct Canvas {
    width: usize,
    height: usize,
    horizon: usize,
    class_map: Vec<u32>,
    inv_depth: Vec<f64>,
    owner: Vec<Option<usize>>,
}

impl Canvas {
    fn background(params: &SceneParams, horizon: usize, ground_near: f64) -> Self {
        let (w, h) = (params.width, params.height);
        let mut class_map = vec![SKY_CLASS; w * h];
        let mut inv_depth = vec![0.0; w * h];
        if let Some(stuff) = stuff_class(params.num_classes) {
            for r in horizon..h {
                let v = ground_inverse_depth(r, horizon, h, ground_near);
                for c in 0..w {
                    class_map[r * w + c] = stuff;
                    inv_depth[r * w + c] = v;
                }
            }
        }
        Self {
            width: w,
            height: h,
            horizon,
            class_map,
            inv_depth,
            owner: vec![None; w * h],
        }
    }

    fn paint(&mut self, layers: &[Layer]) {
        for layer in layers {
            for r in 0..self.height {
                for c in 0..self.width {
                    if layer.shape.covers(r, c) {
                        let p = r * self.width + c;
                        self.class_map[p] = layer.class;
                        self.inv_depth[p] = layer.inverse_depth;
                        self.owner[p] = layer.object;
                    }
                }
            }
        }
    }

    /// Visible pixel count and centroid per object slot.
    fn visibility(&self, slots: usize) -> Vec<(usize, [f64; 2])> {
        let mut acc = vec![(0usize, [0.0f64, 0.0f64]); slots];
        for (p, o) in self.owner.iter().enumerate() {
            if let Some(o) = *o {
                acc[o].0 += 1;
                acc[o].1[0] += (p / self.width) as f64;
                acc[o].1[1] += (p % self.width) as f64;
            }
        }
        acc.into_iter()
            .map(|(n, s)| {
                let n_f = n.max(1) as f64;
                (n, [s[0] / n_f, s[1] / n_f])
            })
            .collect()
    }
}

/// Inverse depth of a flat ground plane seen by a level camera: linear in the
/// row offset below the horizon.
fn ground_inverse_depth(row: usize, horizon: usize, height: usize, near: f64) -> f64 {
    near * (row - horizon + 1) as f64 / (height - horizon) as f64
}

/// Layers sorted far to near, occluders last (occluders keep their own depth
/// but always sit in front of objects they cross).
fn sorted_layers(objects: &[Layer], bars: &[Layer]) -> Vec<Layer> {
    let mut all: Vec<Layer> = objects.to_vec();
    all.sort_by(|a, b| a.inverse_depth.total_cmp(&b.inverse_depth));
    all.extend_from_slice(bars);
    all
}

fn constraints_hold(params: &SceneParams, canvas: &Canvas, slots: usize) -> bool {
    let vis = canvas.visibility(slots);
    if vis.iter().any(|&(n, _)| n < params.min_instance_pixels) {
        return false;
    }
    for i in 0..vis.len() {
        for j in i + 1..vis.len() {
            let (a, b) = (vis[i].1, vis[j].1);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            if d < params.min_separation {
                return false;
            }
        }
    }
    true
}

const PLACEMENT_ATTEMPTS: usize = 40;

/// Deterministic scene from `params`: identical parameters give
/// bit-identical scenes.
pub fn generate_scene(params: &SceneParams) -> Result<Scene, SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (w, h) = (params.width, params.height);
    let nc = params.num_classes;
    let has_ground = stuff_class(nc).is_some();
    let horizon = if has_ground { (h as f64 * 0.4).round() as usize } else { h };
    let (d_near, d_far) = params.distance;
    let ground_near = 1.0 / d_near;
    let instance_classes: Vec<u32> = (0..nc as u32).filter(|&c| is_instance_class(c, nc)).collect();

    let wanted = rng.random_range(params.shapes.0..=params.shapes.1);
    let mut objects: Vec<Layer> = Vec::new();
    let mut bars: Vec<Layer> = Vec::new();

    let try_commit = |objects: &[Layer], bars: &[Layer]| {
        let mut canvas = Canvas::background(params, horizon, ground_near);
        canvas.paint(&sorted_layers(objects, bars));
        constraints_hold(params, &canvas, objects.len())
    };

    for _ in 0..wanted {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let distance = rng.random_range(d_near..=d_far);
            let inv = 1.0 / distance;
            let class = instance_classes[rng.random_range(0..instance_classes.len())];
            // Apparent size shrinks with distance.
            let scale = (d_near / distance).sqrt();
            let half = rng.random_range(params.object_size.0..=params.object_size.1) * scale;
            let half = half.max(1.5).min((h as f64 - 1.0) / 2.0);
            let bottom = if has_ground {
                // Contact row where the ground has the object's inverse depth.
                let rows = (h - horizon) as f64;
                (horizon as f64 + inv / ground_near * rows - 1.0).clamp(horizon as f64, h as f64 - 1.0)
            } else {
                rng.random_range(2.0 * half..=h as f64 - 1.0)
            };
            let cc = rng.random_range(0.0..w as f64);
            let shape = if class.is_multiple_of(2) {
                let half_w = half * rng.random_range(0.6..=1.4);
                Shape::Rect {
                    r0: bottom - 2.0 * half,
                    r1: bottom,
                    c0: cc - half_w,
                    c1: cc + half_w,
                }
            } else {
                Shape::Disc {
                    cr: bottom - half,
                    cc,
                    radius: half,
                }
            };
            let layer = Layer {
                shape,
                class,
                inverse_depth: inv,
                object: Some(objects.len()),
            };
            objects.push(layer);
            let mut extra = None;
            if has_ground && rng.random_bool(params.split_probability) {
                extra = Some(split_bar(&layer, params, horizon, &mut rng, nc));
                bars.push(extra.unwrap());
            }
            if try_commit(&objects, &bars) {
                placed = true;
                break;
            }
            objects.pop();
            if extra.is_some() {
                bars.pop();
            }
        }
        if !placed && objects.len() < params.shapes.0 {
            return Err(SceneError::Infeasible {
                wanted,
                placed: objects.len(),
            });
        }
    }

    if has_ground {
        let n_bars = rng.random_range(params.occluders.0..=params.occluders.1);
        for _ in 0..n_bars {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let c0 = rng.random_range(0..w);
                let width = rng.random_range(1..=2usize);
                let top = rng.random_range(0..horizon.max(1));
                let bar = Layer {
                    shape: Shape::Bar {
                        c0,
                        c1: (c0 + width - 1).min(w - 1),
                        r0: top,
                        r1: h - 1,
                    },
                    class: stuff_class(nc).unwrap(),
                    inverse_depth: rng.random_range(1.0 / d_near..=1.5 / d_near),
                    object: None,
                };
                bars.push(bar);
                if try_commit(&objects, &bars) {
                    break;
                }
                bars.pop();
            }
        }
    }

    let mut canvas = Canvas::background(params, horizon, ground_near);
    canvas.paint(&sorted_layers(&objects, &bars));

    // Instance ids in slot order, starting at 1.
    let instance_map: Vec<u32> = canvas
        .owner
        .iter()
        .map(|o| o.map_or(0, |s| s as u32 + 1))
        .collect();
    let (vector_targets, has_instance) = instance_vector_targets(&instance_map, w);

    let depth_noise = Normal::new(0.0, params.depth_noise.max(f64::MIN_POSITIVE)).unwrap();
    let pixel_noise = Normal::new(0.0, params.intensity_noise.max(f64::MIN_POSITIVE)).unwrap();
    let albedo_jitter: Vec<f64> = (0..objects.len()).map(|_| rng.random_range(-0.08..0.08)).collect();

    let n = w * h;
    let mut depth_map = vec![0.0; n];
    let mut intensity = vec![0.0; n];
    let mut valid_depth_mask = vec![true; n];
    let mut valid_instance_mask = vec![false; n];
    for p in 0..n {
        let (r, c) = (p / w, p % w);
        let class = canvas.class_map[p];
        let inv = canvas.inv_depth[p];
        depth_map[p] = if class == SKY_CLASS && inv == 0.0 {
            0.0
        } else {
            let noisy = inv + if params.depth_noise > 0.0 { depth_noise.sample(&mut rng) } else { 0.0 };
            quantize9(noisy.max(0.0))
        };
        let jitter = canvas.owner[p].map_or(0.0, |o| albedo_jitter[o]);
        let clean = render_intensity(class, r, c, inv, canvas.horizon, nc, jitter, params.fog);
        let noise = if params.intensity_noise > 0.0 { pixel_noise.sample(&mut rng) } else { 0.0 };
        intensity[p] = quantize9(clean + noise);
        let hole = params.hole_fraction > 0.0 && rng.random_bool(params.hole_fraction);
        valid_depth_mask[p] = !hole;
        valid_instance_mask[p] = has_instance[p] && !hole;
    }

    Ok(Scene {
        width: w,
        height: h,
        num_classes: nc,
        seed: params.seed,
        class_map: canvas.class_map,
        depth_map,
        instance_map,
        vector_targets,
        valid_depth_mask,
        valid_instance_mask,
        intensity,
    })
}

fn split_bar(object: &Layer, params: &SceneParams, horizon: usize, rng: &mut ChaCha8Rng, nc: usize) -> Layer {
    let (center_col, top) = match object.shape {
        Shape::Rect { r0, c0, c1, .. } => ((c0 + c1) / 2.0, r0),
        Shape::Disc { cr, cc, radius } => (cc, cr - radius),
        Shape::Bar { c0, r0, .. } => (c0 as f64, r0 as f64),
    };
    let c0 = center_col.round().clamp(0.0, params.width as f64 - 1.0) as usize;
    let width = rng.random_range(1..=2usize);
    let r0 = (top.floor().max(0.0) as usize).min(horizon);
    Layer {
        shape: Shape::Bar {
            c0,
            c1: (c0 + width - 1).min(params.width - 1),
            r0: r0.saturating_sub(3),
            r1: params.height - 1,
        },
        class: stuff_class(nc).unwrap(),
        inverse_depth: object.inverse_depth * 1.5,
        object: None,
    }
}

/// Grey level under a uniform fog: `t·albedo + (1 - t)·airlight` with
/// transmission `t = exp(-fog · distance)`. Each class has its own albedo
/// pattern so texture carries class identity while contrast carries depth.
#[allow(clippy::too_many_arguments)]
fn render_intensity(
    class: u32,
    r: usize,
    c: usize,
    inv_depth: f64,
    horizon: usize,
    num_classes: usize,
    jitter: f64,
    fog: f64,
) -> f64 {
    const AIRLIGHT: f64 = 0.8;
    if class == SKY_CLASS && inv_depth == 0.0 {
        // Brighter towards the horizon.
        return AIRLIGHT + 0.1 * (r as f64 / horizon.max(1) as f64);
    }
    let t = (-fog / inv_depth).exp();
    let albedo = if Some(class) == stuff_class(num_classes) {
        0.25 + 0.05 * (((r * 7 + c * 3) % 5) as f64 / 4.0)
    } else {
        let k = class as usize;
        let stripe = match k % 3 {
            0 => (r / 2) % 2,
            1 => (c / 2) % 2,
            _ => (r + c) % 2,
        } as f64;
        let base = 0.15 + 0.6 * (k as f64 / num_classes as f64);
        base + jitter + 0.25 * (stripe - 0.5)
    };
    t * albedo + (1.0 - t) * AIRLIGHT
}
