//! Scene directory format.
//!
//! ```text
//! class.pgm, instance.pgm   plain PGM ("P2"), row-major, maxval = max id (at least 1)
//! depth.csv, vecr.csv,      one CSV line per image row, 9 significant digits
//! vecc.csv, intensity.csv
//! masks.csv                 0/1; depth-mask rows followed by instance-mask rows
//! meta.kv                   height, num_classes, seed, width
//! ```
//!
//! Floating fields are written with nine significant digits. Generated
//! scenes hold values that survive that rendering exactly; vector targets
//! that match the centroid-derived values at nine digits are restored to
//! the exact derived values on read.

use super::{instance_vector_targets, Scene};
use crate::textio::{fmt_sig9, parse_f64, render_grid, KvMap, ParseError};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn pgm(values: &[u32], width: usize, height: usize) -> String {
    let maxval = values.iter().copied().max().unwrap_or(0).max(1);
    let mut out = format!("P2\n{width} {height}\n{maxval}\n");
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(u32::to_string).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

fn mask_rows(mask: &[bool], width: usize, out: &mut String) {
    for row in mask.chunks(width) {
        let cells: Vec<&str> = row.iter().map(|&m| if m { "1" } else { "0" }).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
}

/// Every file of a scene directory, in a fixed order.
pub(crate) fn render_files(scene: &Scene) -> Vec<(&'static str, String)> {
    let w = scene.width;
    let grid = |f: &dyn Fn(usize) -> f64| {
        render_grid((0..scene.height).map(|r| (0..w).map(move |c| f(r * w + c)).collect::<Vec<_>>()))
    };
    let mut masks = String::new();
    mask_rows(&scene.valid_depth_mask, w, &mut masks);
    mask_rows(&scene.valid_instance_mask, w, &mut masks);
    let mut meta = KvMap::default();
    meta.insert("height", scene.height);
    meta.insert("num_classes", scene.num_classes);
    meta.insert("seed", scene.seed);
    meta.insert("width", scene.width);
    vec![
        ("class.pgm", pgm(&scene.class_map, w, scene.height)),
        ("depth.csv", grid(&|p| scene.depth_map[p])),
        ("instance.pgm", pgm(&scene.instance_map, w, scene.height)),
        ("intensity.csv", grid(&|p| scene.intensity[p])),
        ("masks.csv", masks),
        ("meta.kv", meta.render()),
        ("vecc.csv", grid(&|p| scene.vector_targets[p][1])),
        ("vecr.csv", grid(&|p| scene.vector_targets[p][0])),
    ]
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<(), SceneIoError> {
    let werr = |path: &Path, source| SceneIoError::Write {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| werr(dir, e))?;
    for (name, text) in render_files(scene) {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| werr(&path, e))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, ParseError> {
    std::fs::read_to_string(path).map_err(|e| ParseError::io(path, e))
}

fn parse_pgm(path: &Path, width: usize, height: usize) -> Result<Vec<u32>, ParseError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| ParseError::malformed(path, 0, format!("truncated before {what}")))
    };
    let (_, magic) = next("magic")?;
    if magic.trim() != "P2" {
        return Err(ParseError::malformed(path, 1, "expected P2 magic"));
    }
    let (i, dims) = next("dimensions")?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| ParseError::malformed(path, i + 1, "bad dimension")))
        .collect::<Result<_, _>>()?;
    if dims != [width, height] {
        return Err(ParseError::malformed(
            path,
            i + 1,
            format!("dimensions {dims:?} do not match meta {width}x{height}"),
        ));
    }
    let (i, maxval) = next("maxval")?;
    let maxval: u32 = maxval
        .trim()
        .parse()
        .map_err(|_| ParseError::malformed(path, i + 1, "bad maxval"))?;
    let mut values = Vec::with_capacity(width * height);
    for r in 0..height {
        let (i, line) = next("pixel rows")?;
        let row: Vec<u32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| ParseError::malformed(path, i + 1, format!("bad value '{t}'"))))
            .collect::<Result<_, _>>()?;
        if row.len() != width {
            return Err(ParseError::malformed(
                path,
                i + 1,
                format!("row {r} has {} values, expected {width}", row.len()),
            ));
        }
        if let Some(v) = row.iter().find(|&&v| v > maxval) {
            return Err(ParseError::malformed(path, i + 1, format!("value {v} exceeds maxval {maxval}")));
        }
        values.extend(row);
    }
    Ok(values)
}

fn parse_csv_rows<T>(
    path: &Path,
    text: &str,
    rows: std::ops::Range<usize>,
    width: usize,
    cell: impl Fn(&str) -> Option<T>,
) -> Result<Vec<T>, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows {
        let line = lines
            .get(r)
            .ok_or_else(|| ParseError::malformed(path, r + 1, "file truncated"))?;
        let mut n = 0;
        for (k, tok) in line.split(',').enumerate() {
            let v = cell(tok).ok_or_else(|| {
                ParseError::malformed(path, r + 1, format!("bad value '{tok}' in column {}", k + 1))
            })?;
            out.push(v);
            n += 1;
        }
        if n != width {
            return Err(ParseError::malformed(
                path,
                r + 1,
                format!("{n} values, expected {width}"),
            ));
        }
    }
    Ok(out)
}

fn parse_float_grid(path: &Path, width: usize, height: usize) -> Result<Vec<f64>, ParseError> {
    let text = read_text(path)?;
    let lines = text.lines().count();
    if lines != height {
        return Err(ParseError::malformed(
            path,
            lines.min(height) + 1,
            format!("{lines} rows, expected {height}"),
        ));
    }
    parse_csv_rows(path, &text, 0..height, width, parse_f64)
}

fn meta_usize(meta: &KvMap, key: &str, path: &Path) -> Result<u64, ParseError> {
    meta.get(key)
        .ok_or_else(|| ParseError::malformed(path, 0, format!("missing key '{key}'")))?
        .parse()
        .map_err(|_| ParseError::malformed(path, 0, format!("key '{key}' is not an integer")))
}

pub fn read_scene(dir: &Path) -> Result<Scene, SceneIoError> {
    let meta_path = dir.join("meta.kv");
    let meta = KvMap::read(&meta_path)?;
    let width = meta_usize(&meta, "width", &meta_path)? as usize;
    let height = meta_usize(&meta, "height", &meta_path)? as usize;
    let num_classes = meta_usize(&meta, "num_classes", &meta_path)? as usize;
    let seed = meta_usize(&meta, "seed", &meta_path)?;
    if width == 0 || height == 0 {
        return Err(ParseError::malformed(&meta_path, 0, "empty raster").into());
    }

    let class_path = dir.join("class.pgm");
    let class_map = parse_pgm(&class_path, width, height)?;
    if let Some(p) = class_map.iter().position(|&c| c as usize >= num_classes) {
        return Err(ParseError::malformed(
            &class_path,
            p / width + 4,
            format!("class {} outside [0, {num_classes})", class_map[p]),
        )
        .into());
    }
    let instance_map = parse_pgm(&dir.join("instance.pgm"), width, height)?;
    let depth_map = parse_float_grid(&dir.join("depth.csv"), width, height)?;
    let intensity = parse_float_grid(&dir.join("intensity.csv"), width, height)?;
    let vecr = parse_float_grid(&dir.join("vecr.csv"), width, height)?;
    let vecc = parse_float_grid(&dir.join("vecc.csv"), width, height)?;

    let mask_path = dir.join("masks.csv");
    let mask_text = read_text(&mask_path)?;
    let bit = |t: &str| match t {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    };
    let valid_depth_mask = parse_csv_rows(&mask_path, &mask_text, 0..height, width, bit)?;
    let valid_instance_mask = parse_csv_rows(&mask_path, &mask_text, height..2 * height, width, bit)?;

    let file_vectors: Vec<[f64; 2]> = vecr.into_iter().zip(vecc).map(|(r, c)| [r, c]).collect();
    let (derived, _) = instance_vector_targets(&instance_map, width);
    let consistent = file_vectors.iter().zip(&derived).all(|(f, d)| {
        fmt_sig9(d[0]) == fmt_sig9(f[0]) && fmt_sig9(d[1]) == fmt_sig9(f[1])
    });
    let vector_targets = if consistent { derived } else { file_vectors };

    Ok(Scene {
        width,
        height,
        num_classes,
        seed,
        class_map,
        depth_map,
        instance_map,
        vector_targets,
        valid_depth_mask,
        valid_instance_mask,
        intensity,
    })
}
