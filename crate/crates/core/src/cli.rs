//! Command-line surface: `gen`, `train`, `sweep`, `robustness`, `segment`,
//! `eval` and `gradcheck`.
//!
//! Every subcommand accepts `--config <file>` with `key=value` lines; flags
//! use the same names with `-` for `_` and take precedence over the file.

use crate::hough_instance::{segment_detailed, SegmentParams};
use crate::losses::FixedWeights;
use crate::metrics::{self, MetricReport};
use crate::scenes::{self, generate_scene, read_scene, write_scene, Scene};
use crate::textio::{fmt_sig9, parse_f64, KvMap};
use crate::trainer::config::CONFIG_KEYS;
use crate::trainer::experiments::{default_grid, run_init_robustness, run_weight_sweep};
use crate::trainer::gradcheck::{gradcheck, REL_TOL};
use crate::trainer::run::write_run;
use crate::trainer::{train, TrainConfig, TrainError};
use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "failed: {m}"),
        }
    }
}

fn usage(m: impl std::fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => usage(c),
            other => runtime(other),
        }
    }
}

const SCENE_KEYS: &[&str] = &[
    "seed",
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
];

fn keys_for(sub: &str) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = match sub {
        "gen" => [SCENE_KEYS, &["count"]].concat(),
        "train" => CONFIG_KEYS.to_vec(),
        "sweep" => [CONFIG_KEYS, &["grid"]].concat(),
        "robustness" => [CONFIG_KEYS, &["s_inits", "band"]].concat(),
        "segment" => vec!["scene", "seed", "noise", "min_pts", "eps_prime"],
        "eval" => vec!["pred", "gt"],
        "gradcheck" => vec!["seed", "points"],
        _ => Vec::new(),
    };
    keys.sort_unstable();
    keys.dedup();
    keys
}

const ABOUT: &[(&str, &str)] = &[
    ("gen", "Generate synthetic scenes"),
    ("train", "Train one multi-task model"),
    ("sweep", "Fixed-weight grid over two tasks"),
    ("robustness", "Learned weighting from several initial log variances"),
    ("segment", "Instance segmentation of a scene's centroid votes"),
    ("eval", "Compare a predicted scene directory with ground truth"),
    ("gradcheck", "Finite-difference check of the combined objective"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("mtl")
        .about("Multi-task learning with learned task uncertainty on synthetic scenes")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for &(name, about) in ABOUT {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key=value configuration file"))
            .arg(Arg::new("out").long("out").value_name("DIR").help("output directory"));
        for key in keys_for(name) {
            sub = sub.arg(
                Arg::new(key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .allow_hyphen_values(true),
            );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// File values overlaid with explicitly given flags.
fn merged_kv(sub: &str, m: &ArgMatches) -> Result<KvMap, CliError> {
    let allowed = keys_for(sub);
    let mut kv = match m.get_one::<String>("config") {
        Some(path) => KvMap::read(Path::new(path)).map_err(usage)?,
        None => KvMap::default(),
    };
    if let Some(bad) = kv.0.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(usage(format!("unknown key '{bad}' for {sub}")));
    }
    for key in allowed {
        if m.value_source(key) == Some(ValueSource::CommandLine) {
            kv.insert(key, m.get_one::<String>(key).expect("value present"));
        }
    }
    Ok(kv)
}

fn take(kv: &mut KvMap, key: &str) -> Option<String> {
    kv.0.remove(key)
}

fn take_num<T: std::str::FromStr>(kv: &mut KvMap, key: &str, default: T) -> Result<T, CliError> {
    match take(kv, key) {
        Some(v) => v.parse().map_err(|_| usage(format!("invalid value '{v}' for {key}"))),
        None => Ok(default),
    }
}

fn float_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(|t| parse_f64(t.trim()).ok_or_else(|| usage(format!("invalid number '{t}' in {key}"))))
        .collect()
}

fn out_dir(m: &ArgMatches, required: bool) -> Result<Option<PathBuf>, CliError> {
    let out = m.get_one::<String>("out").map(PathBuf::from);
    if required && out.is_none() {
        return Err(usage("--out is required"));
    }
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn metric_header() -> String {
    MetricReport::default()
        .columns()
        .iter()
        .map(|c| c.0)
        .collect::<Vec<_>>()
        .join(",")
}

fn metric_cells(m: Option<&MetricReport>) -> String {
    let report = m.cloned().unwrap_or_default();
    report
        .columns()
        .iter()
        .map(|c| fmt_sig9(c.1))
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_gen(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let mut kv = merged_kv("gen", m)?;
    let count: usize = take_num(&mut kv, "count", 1)?;
    if count == 0 {
        return Err(usage("count must be positive"));
    }
    let config = TrainConfig::from_kv(&kv).map_err(usage)?;
    for i in 0..count {
        let params = scenes::SceneParams {
            seed: config.seed + i as u64,
            ..config.scene.clone()
        };
        let scene = generate_scene(&params).map_err(|e| match e {
            scenes::SceneError::Invalid(_) => usage(e),
            _ => runtime(e),
        })?;
        let dir = if count == 1 { out.clone() } else { out.join(format!("scene_{i:04}")) };
        write_scene(&scene, &dir).map_err(runtime)?;
    }
    Ok(format!("wrote {count} scene(s) to {}", out.display()))
}

fn cmd_train(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let kv = merged_kv("train", m)?;
    let config = TrainConfig::from_kv(&kv).map_err(usage)?;
    match train(&config) {
        Ok(outcome) => {
            outcome.write(&out, &config)?;
            let mut csv = metric_header() + "\n";
            csv += &metric_cells(outcome.record.final_metrics.as_ref());
            csv.push('\n');
            write(&out.join("metrics.csv"), &csv)?;
            Ok(format!(
                "trained {} iterations; final s = [{}]",
                config.iters,
                outcome.record.final_s().iter().map(|&s| fmt_sig9(s)).collect::<Vec<_>>().join(", ")
            ))
        }
        Err(TrainError::Diverged { iter, reason, record }) => {
            write_run(&out, &record, &config)?;
            Err(runtime(format!("diverged at iteration {iter}: {reason}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_sweep(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let mut kv = merged_kv("sweep", m)?;
    let grid = match take(&mut kv, "grid").as_deref() {
        None | Some("default" | "fig2a") => default_grid(),
        Some(list) => float_list("grid", list)?
            .into_iter()
            .map(|w| FixedWeights::new(vec![w, 1.0 - w]).map_err(usage))
            .collect::<Result<_, _>>()?,
    };
    let config = TrainConfig::from_kv(&kv).map_err(usage)?;
    if config.tasks.len() != 2 {
        return Err(usage("sweep needs exactly two tasks"));
    }
    let rows = run_weight_sweep(&config, &grid)?;
    let names = &config.tasks;
    let mut csv = format!("w_{},w_{},status,{}\n", names[0].name, names[1].name, metric_header());
    let mut failures = 0;
    for (i, row) in rows.iter().enumerate() {
        let status = match &row.result {
            Ok(record) => {
                let cell = TrainConfig {
                    mode: crate::trainer::TrainMode::Fixed(grid[i].clone()),
                    ..config.clone()
                };
                write_run(&out.join(format!("cell_{i:02}")), record, &cell)?;
                "ok"
            }
            Err(_) => {
                failures += 1;
                "failed"
            }
        };
        let _ = writeln!(
            csv,
            "{},{},{status},{}",
            fmt_sig9(row.weights[0]),
            fmt_sig9(row.weights[1]),
            metric_cells(row.metrics())
        );
    }
    write(&out.join("sweep.csv"), &csv)?;
    write(&out.join("config.kv"), &config.to_kv().render())?;
    Ok(format!("{} grid points, {failures} failed", rows.len()))
}

fn cmd_robustness(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let mut kv = merged_kv("robustness", m)?;
    let s_inits = match take(&mut kv, "s_inits") {
        Some(v) => float_list("s_inits", &v)?,
        None => vec![-2.0, 0.0, 2.0, 5.0],
    };
    if s_inits.is_empty() || s_inits.iter().any(|s| !s.is_finite()) {
        return Err(usage("s_inits must be finite numbers"));
    }
    let band: f64 = take_num(&mut kv, "band", 0.2)?;
    let config = TrainConfig::from_kv(&kv).map_err(usage)?;
    let report = run_init_robustness(&config, &s_inits, band)?;
    let mut csv = String::from("s_init");
    for t in &config.tasks {
        let _ = write!(csv, ",s_final_{}", t.name);
    }
    csv.push('\n');
    for (i, (s0, record)) in report.s_inits.iter().zip(&report.records).enumerate() {
        let _ = write!(csv, "{}", fmt_sig9(*s0));
        for s in record.final_s() {
            let _ = write!(csv, ",{}", fmt_sig9(s));
        }
        csv.push('\n');
        let run_cfg = TrainConfig {
            s_init: vec![*s0; config.tasks.len()],
            ..config.clone()
        };
        write_run(&out.join(format!("init_{i:02}")), record, &run_cfg)?;
    }
    write(&out.join("robustness.csv"), &csv)?;
    let mut summary = KvMap::default();
    for (t, spread) in config.tasks.iter().zip(&report.final_spread) {
        summary.insert(format!("spread_{}", t.name), fmt_sig9(*spread));
    }
    summary.insert("band", fmt_sig9(band));
    summary.insert("iters", config.iters);
    summary.insert(
        "iters_to_band",
        report.iters_to_band.map_or("none".to_string(), |i| i.to_string()),
    );
    write(&out.join("summary.kv"), &summary.render())?;
    Ok(summary.render().trim_end().to_string())
}

fn cmd_segment(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let mut kv = merged_kv("segment", m)?;
    let dir = take(&mut kv, "scene").ok_or_else(|| usage("--scene is required"))?;
    let seed: u64 = take_num(&mut kv, "seed", 0)?;
    let noise: f64 = take_num(&mut kv, "noise", 0.0)?;
    let min_pts: usize = take_num(&mut kv, "min_pts", 5)?;
    let eps_prime: f64 = take_num(&mut kv, "eps_prime", 2.0)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(usage("noise must be non-negative"));
    }
    let scene = read_scene(Path::new(&dir)).map_err(usage)?;
    let mut vectors = scene.vector_targets.clone();
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("checked");
        for v in &mut vectors {
            v[0] += normal.sample(&mut rng);
            v[1] += normal.sample(&mut rng);
        }
    }
    let mask = scene.instance_class_mask();
    let params = SegmentParams::for_image(scene.width, scene.height, min_pts, eps_prime);
    let seg = segment_detailed(&vectors, &mask, scene.width, params).map_err(usage)?;
    write(&out.join("instances.pgm"), &scenes::pgm(&seg.ids, scene.width, scene.height))?;
    let reach = seg.ordering.as_ref().map_or_else(
        || "position,point_index,reachability,core_distance\n".to_string(),
        |o| o.to_csv(),
    );
    write(&out.join("reachability.csv"), &reach)?;
    let pm = metrics::partition_match(&seg.ids, &scene.instance_map, &mask).map_err(runtime)?;
    let mut summary = KvMap::default();
    summary.insert("instances", seg.num_instances());
    summary.insert("true_instances", scene.num_instances());
    summary.insert("partition_match", fmt_sig9(pm.score));
    write(&out.join("segment.kv"), &summary.render())?;
    Ok(summary.render().trim_end().to_string())
}

fn count_ids(ids: &[u32]) -> usize {
    let mut v: Vec<u32> = ids.iter().copied().filter(|&i| i != 0).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn compare(pred: &Scene, gt: &Scene) -> Result<MetricReport, CliError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(usage("prediction and ground truth differ in size"));
    }
    let iou = metrics::iou(&pred.class_map, &gt.class_map, gt.num_classes.max(pred.num_classes)).map_err(usage)?;
    let depth = metrics::depth_errors(&pred.depth_map, &gt.depth_map, &gt.valid_depth_mask).ok();
    let inst_mask: Vec<bool> = gt.instance_map.iter().map(|&i| i != 0).collect();
    let pm = metrics::partition_match(&pred.instance_map, &gt.instance_map, &inst_mask).map_err(usage)?;
    Ok(MetricReport {
        per_class_iou: iou.per_class,
        mean_iou: Some(iou.mean),
        iou_defined_classes: iou.defined,
        depth_l1: depth.map(|d| d.0),
        depth_rms: depth.map(|d| d.1),
        instance_l1: metrics::vector_l1(&pred.vector_targets, &gt.vector_targets, &gt.valid_instance_mask).ok(),
        instance_count_accuracy: Some(metrics::instance_count_accuracy(&[(
            count_ids(&pred.instance_map),
            count_ids(&gt.instance_map),
        )])),
        partition_match: Some(pm.score),
    })
}

fn cmd_eval(m: &ArgMatches) -> Result<String, CliError> {
    let out = out_dir(m, true)?.expect("required");
    let mut kv = merged_kv("eval", m)?;
    let pred = take(&mut kv, "pred").ok_or_else(|| usage("--pred is required"))?;
    let gt = take(&mut kv, "gt").ok_or_else(|| usage("--gt is required"))?;
    let pred = read_scene(Path::new(&pred)).map_err(usage)?;
    let gt = read_scene(Path::new(&gt)).map_err(usage)?;
    let report = compare(&pred, &gt)?;
    let mut csv = metric_header();
    for c in 0..report.per_class_iou.len() {
        let _ = write!(csv, ",iou_class{c}");
    }
    csv.push('\n');
    csv += &metric_cells(Some(&report));
    for v in &report.per_class_iou {
        let _ = write!(csv, ",{}", v.map_or(String::new(), fmt_sig9));
    }
    csv.push('\n');
    write(&out.join("metrics.csv"), &csv)?;
    let _ = write!(csv, "defined_classes={}", report.iou_defined_classes);
    Ok(csv.trim_end().to_string())
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<(String, bool), CliError> {
    let out = out_dir(m, false)?;
    let mut kv = merged_kv("gradcheck", m)?;
    let seed: u64 = take_num(&mut kv, "seed", 0)?;
    let points: usize = take_num(&mut kv, "points", 100)?;
    if points == 0 {
        return Err(usage("points must be positive"));
    }
    let report = gradcheck(seed, points)?;
    let mut summary = KvMap::default();
    summary.insert("max_rel_error", fmt_sig9(report.max_error));
    summary.insert("points", report.points);
    summary.insert("rejected", report.rejected);
    summary.insert("coordinates", report.coordinates);
    summary.insert("worst", format!("{}:{}", report.worst.0, report.worst.1));
    summary.insert("threshold", fmt_sig9(REL_TOL));
    if let Some(dir) = out {
        write(&dir.join("gradcheck.kv"), &summary.render())?;
    }
    Ok((format!("max relative gradient error {}", fmt_sig9(report.max_error)), report.passed()))
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Messages go to stdout, errors to stderr.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "gen" => cmd_gen(sub),
        "train" => cmd_train(sub),
        "sweep" => cmd_sweep(sub),
        "robustness" => cmd_robustness(sub),
        "segment" => cmd_segment(sub),
        "eval" => cmd_eval(sub),
        "gradcheck" => match cmd_gradcheck(sub) {
            Ok((msg, true)) => Ok(msg),
            Ok((msg, false)) => Err(runtime(format!("{msg} exceeds {}", fmt_sig9(REL_TOL)))),
            Err(e) => Err(e),
        },
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(msg) => {
            println!("{msg}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
