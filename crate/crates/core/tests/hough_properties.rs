use mtl_core::hough_instance::{nearest_center, segment_instances, SegmentParams};
use mtl_core::scenes::{generate_scene, SceneParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn field() -> impl Strategy<Value = (Vec<[f64; 2]>, Vec<bool>)> {
    (1usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::array::uniform2(-6.0f64..6.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn ids_partition_the_mask((vectors, mask) in field(), min_pts in 2usize..6, eps_prime in 0.5f64..3.0) {
        let width = vectors.len();
        let params = SegmentParams { min_pts, eps: 1e3, eps_prime };
        let ids = segment_instances(&vectors, &mask, width, params).unwrap();
        let any_cluster = ids.iter().any(|&i| i != 0);
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                prop_assert_eq!(ids[i], 0);
            } else if any_cluster {
                prop_assert!(ids[i] != 0);
            }
        }
    }

    #[test]
    fn nearest_center_ignores_vote_order(
        votes in prop::collection::vec(prop::array::uniform2(-10.0f64..10.0), 1..40),
        centers in prop::collection::vec(prop::array::uniform2(-10.0f64..10.0), 1..6),
    ) {
        let forward: Vec<u32> = votes.iter().map(|&v| nearest_center(v, &centers)).collect();
        let mut backward: Vec<u32> = votes.iter().rev().map(|&v| nearest_center(v, &centers)).collect();
        backward.reverse();
        prop_assert_eq!(forward, backward);
    }
}

#[test]
fn instance_count_survives_vote_noise_on_200_scenes() {
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut correct = 0;
    for seed in 0..200 {
        let s = generate_scene(&SceneParams {
            seed,
            ..SceneParams::default()
        })
        .unwrap();
        let noisy: Vec<[f64; 2]> = s
            .vector_targets
            .iter()
            .map(|v| [v[0] + normal.sample(&mut rng), v[1] + normal.sample(&mut rng)])
            .collect();
        let mask = s.instance_class_mask();
        let ids = segment_instances(&noisy, &mask, s.width, SegmentParams::for_image(s.width, s.height, 5, 2.0)).unwrap();
        let mut found: Vec<u32> = ids.into_iter().filter(|&i| i != 0).collect();
        found.sort_unstable();
        found.dedup();
        correct += usize::from(found.len() == s.num_instances());
    }
    assert!(correct >= 190, "{correct} of 200");
}
