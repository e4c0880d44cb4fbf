use mtl_core::scenes::{generate_scene, read_scene, write_scene, SceneParams};
use sha2::{Digest, Sha256};
use std::path::Path;

const GOLDEN_SEED_42: &str = "7d80558c235f20850f61f5be0d7a400483fe0a2e583533d01ef82842d1203c4e";

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0]);
        h.update(std::fs::read(dir.join(&n)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn golden() -> mtl_core::scenes::Scene {
    generate_scene(&SceneParams {
        seed: 42,
        ..SceneParams::default()
    })
    .unwrap()
}

#[test]
fn seed_42_matches_frozen_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    write_scene(&golden(), tmp.path()).unwrap();
    assert_eq!(dir_digest(tmp.path()), GOLDEN_SEED_42);
}

#[test]
fn golden_scene_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let s = golden();
    write_scene(&s, tmp.path()).unwrap();
    assert_eq!(read_scene(tmp.path()).unwrap(), s);
}
