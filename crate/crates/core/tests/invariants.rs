use mtl_core::diffcore::{finite_diff_grad, ValueGraph};
use mtl_core::losses::{cross_entropy, weighted_task_loss, ClampLog, TaskHead, TaskKind};
use mtl_core::scenes::{centroids, generate_scene, is_instance_class, SceneParams};
use proptest::prelude::*;

fn term(loss: f64, s: f64, kind: TaskKind) -> (f64, f64) {
    let mut g = ValueGraph::new();
    let mut head = TaskHead::new("t", kind, s);
    let s_node = head.s.bind(&mut g).unwrap();
    let l = g.constant(loss).unwrap();
    let out = weighted_task_loss(&mut g, l, &head, &mut ClampLog::default()).unwrap();
    let v = g.value(out);
    g.backward(out).unwrap();
    (v, g.grad(s_node))
}

fn kind() -> impl Strategy<Value = TaskKind> {
    prop_oneof![
        Just(TaskKind::Classification),
        Just(TaskKind::RegressionL1),
        Just(TaskKind::RegressionL2),
    ]
}

fn ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut g = ValueGraph::new();
    let nodes: Vec<Vec<_>> = logits
        .iter()
        .map(|l| l.iter().map(|&x| g.leaf(x).unwrap()).collect())
        .collect();
    let out = cross_entropy(&mut g, &nodes, labels, &vec![true; labels.len()]).unwrap();
    g.value(out)
}

fn logits_and_labels() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..6, 1usize..8).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(prop::collection::vec(-8.0f64..8.0, c), n),
            prop::collection::vec(0..c, n),
        )
    })
}

proptest! {
    #[test]
    fn weighted_term_is_minimized_at_closed_form_s(loss in 1e-3f64..50.0, s in -4.0f64..4.0, kind in kind()) {
        let s_star = match kind {
            TaskKind::Classification => (2.0 * loss).ln(),
            _ => loss.ln(),
        };
        let (at_star, grad_at_star) = term(loss, s_star, kind);
        let (elsewhere, _) = term(loss, s, kind);
        prop_assert!(grad_at_star.abs() < 1e-9, "{grad_at_star}");
        prop_assert!(at_star <= elsewhere + 1e-12);
    }

    #[test]
    fn s_gradient_matches_closed_form(loss in 0.0f64..50.0, s in -4.0f64..4.0, kind in kind()) {
        let (_, grad) = term(loss, s, kind);
        let data = if kind == TaskKind::Classification { 1.0 } else { 0.5 };
        prop_assert!((grad - (0.5 - data * (-s).exp() * loss)).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_ignores_logit_shift((logits, labels) in logits_and_labels(), shift in -20.0f64..20.0) {
        let base = ce(&logits, &labels);
        let shifted: Vec<Vec<f64>> = logits.iter().map(|l| l.iter().map(|x| x + shift).collect()).collect();
        prop_assert!(base >= 0.0);
        prop_assert!((ce(&shifted, &labels) - base).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn backward_agrees_with_central_differences(xs in prop::array::uniform3(-2.0f64..2.0)) {
        // f = ln(1 + exp(x0·x1)) + exp(x2)·x0 - x1·x2
        let f = |p: &[f64], g: &mut ValueGraph| {
            let v: Vec<_> = p.iter().map(|&x| g.leaf(x).unwrap()).collect();
            let prod = g.mul(v[0], v[1]).unwrap();
            let e = g.exp(prod).unwrap();
            let e1 = g.offset(e, 1.0).unwrap();
            let soft = g.ln(e1).unwrap();
            let e2 = g.exp(v[2]).unwrap();
            let a = g.mul(e2, v[0]).unwrap();
            let b = g.mul(v[1], v[2]).unwrap();
            let sum = g.add(soft, a).unwrap();
            (g.sub(sum, b).unwrap(), v)
        };
        let mut g = ValueGraph::new();
        let (out, vars) = f(&xs, &mut g);
        g.backward(out).unwrap();
        let numeric = finite_diff_grad(
            |p: &[f64]| -> Result<f64, String> {
                let mut g = ValueGraph::new();
                let (o, _) = f(p, &mut g);
                Ok(g.value(o))
            },
            &xs,
            1e-5,
        )
        .unwrap();
        for (v, n) in vars.iter().zip(&numeric) {
            let a = g.grad(*v);
            prop_assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {n}");
        }
    }

    #[test]
    fn generated_scenes_are_consistent(seed in 0u64..10_000) {
        let s = generate_scene(&SceneParams { seed, ..SceneParams::default() }).unwrap();
        let n = s.width * s.height;
        prop_assert_eq!(s.class_map.len(), n);
        let centres = centroids(&s.instance_map, s.width);
        for p in 0..n {
            let class = s.class_map[p];
            prop_assert!((class as usize) < s.num_classes);
            prop_assert!(s.depth_map[p] >= 0.0 && s.intensity[p].is_finite());
            if class == 0 {
                prop_assert_eq!(s.depth_map[p], 0.0);
            }
            let id = s.instance_map[p];
            if id != 0 {
                prop_assert!(is_instance_class(class, s.num_classes));
                let c = centres[&id];
                let (r, col) = ((p / s.width) as f64, (p % s.width) as f64);
                prop_assert!((r + s.vector_targets[p][0] - c[0]).abs() < 1e-6);
                prop_assert!((col + s.vector_targets[p][1] - c[1]).abs() < 1e-6);
            }
            prop_assert!(!s.valid_instance_mask[p] || id != 0);
        }
    }
}
