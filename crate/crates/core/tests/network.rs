use proptest::prelude::*;
use waferssl::model::{backward, forward, update_running_stats, OutputGrads};
use waferssl::verify::{gradient_check_model, gradient_check_model_pooled, model_gradient_check, MODEL_GRAD_TOL};
use waferssl::{init_params, ModelConfig, ParamSet, NUM_CLASSES};

fn small() -> ModelConfig {
    ModelConfig {
        input_height: 12,
        input_width: 10,
        stem_channels: 4,
        blocks: 2,
        embed_dim: 6,
        proj_dim: 3,
    }
}

fn inputs(cfg: &ModelConfig, batch: usize, salt: u64) -> Vec<f64> {
    (0..batch * cfg.input_len())
        .map(|i| (((i as u64 * 2654435761 + salt * 97) % 1000) as f64 / 500.0) - 1.0)
        .collect()
}

fn full_grads(cfg: &ModelConfig, batch: usize, scale: f64) -> OutputGrads {
    let g = |n: usize| Some((0..n).map(|i| scale * ((i % 7) as f64 - 3.0) / 5.0).collect());
    OutputGrads {
        embeddings: g(batch * cfg.embed_dim),
        projections: g(batch * cfg.proj_dim),
        logits: g(batch * NUM_CLASSES),
    }
}

#[test]
fn finite_differences_agree_on_tiny_models() {
    for train in [true, false] {
        let r = model_gradient_check(&gradient_check_model(), 11, train, 1.0).unwrap();
        assert!(r.worst < MODEL_GRAD_TOL, "{r:?}");
    }
    let r = model_gradient_check(&gradient_check_model_pooled(), 11, true, 1.0).unwrap();
    assert!(r.worst < MODEL_GRAD_TOL, "{r:?}");
}

#[test]
fn output_shapes() {
    let cfg = small();
    let p = init_params(&cfg, 0).unwrap();
    let (out, cache) = forward(&p, &inputs(&cfg, 5, 0), 5, true).unwrap();
    assert_eq!(out.embeddings.len(), 5 * cfg.embed_dim);
    assert_eq!(out.projections.len(), 5 * cfg.proj_dim);
    assert_eq!(out.logits.len(), 5 * NUM_CLASSES);
    assert_eq!(cache.batch(), 5);
    assert!(cache.train_mode());
    assert!(forward(&p, &inputs(&cfg, 5, 0)[1..], 5, true).is_err());
    assert!(forward(&p, &[], 0, false).is_err());
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradient() {
    let cfg = small();
    let p = init_params(&cfg, 1).unwrap();
    let (_, cache) = forward(&p, &inputs(&cfg, 3, 1), 3, true).unwrap();
    let g = backward(&p, &cache, &OutputGrads::default()).unwrap();
    assert!(g.params().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_is_linear_in_output_gradient() {
    let cfg = small();
    let p = init_params(&cfg, 2).unwrap();
    let (_, cache) = forward(&p, &inputs(&cfg, 3, 2), 3, true).unwrap();
    let g1 = backward(&p, &cache, &full_grads(&cfg, 3, 1.0)).unwrap();
    let g2 = backward(&p, &cache, &full_grads(&cfg, 3, 2.0)).unwrap();
    for (a, b) in g1.params().iter().zip(g2.params()) {
        for (&x, &y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{}: {x} {y}", a.name);
        }
    }
}

#[test]
fn running_statistics_get_no_gradient() {
    let cfg = small();
    let p = init_params(&cfg, 3).unwrap();
    let (_, cache) = forward(&p, &inputs(&cfg, 4, 3), 4, true).unwrap();
    let g = backward(&p, &cache, &full_grads(&cfg, 4, 1.0)).unwrap();
    for t in g.params().iter().filter(|t| !t.kind.trainable()) {
        assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let cfg = small();
    let mut p = init_params(&cfg, 4).unwrap();
    for name in ["head.weight", "head.bias"] {
        p.get_mut(name).unwrap().data.fill(0.0);
    }
    let (out, _) = forward(&p, &vec![0.0; 2 * cfg.input_len()], 2, false).unwrap();
    assert!(out.logits.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_mode_rows_are_independent_of_the_batch() {
    let cfg = small();
    let p = trained_stats(&cfg);
    let x = inputs(&cfg, 4, 5);
    let n = cfg.input_len();
    let (all, _) = forward(&p, &x, 4, false).unwrap();
    for i in 0..4 {
        let (one, _) = forward(&p, &x[i * n..(i + 1) * n], 1, false).unwrap();
        assert_eq!(one.logits[..], all.logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]);
        assert_eq!(one.projections[..], all.projections[i * cfg.proj_dim..(i + 1) * cfg.proj_dim]);
    }
}

#[test]
fn train_mode_couples_the_batch() {
    let cfg = small();
    let p = init_params(&cfg, 6).unwrap();
    let x = inputs(&cfg, 4, 6);
    let n = cfg.input_len();
    let (all, _) = forward(&p, &x, 4, true).unwrap();
    let (two, _) = forward(&p, &x[..2 * n], 2, true).unwrap();
    assert_ne!(two.logits[..], all.logits[..2 * NUM_CLASSES]);
}

#[test]
fn only_train_passes_move_running_statistics() {
    let cfg = small();
    let mut p = init_params(&cfg, 7).unwrap();
    let before = p.get("stem.bn.running_mean").unwrap().data.clone();
    let (_, cache) = forward(&p, &inputs(&cfg, 3, 7), 3, true).unwrap();
    update_running_stats(&mut p, &cache);
    let after = &p.get("stem.bn.running_mean").unwrap().data;
    assert!(after.iter().zip(&before).all(|(a, b)| a != b));
    // an eval-mode pass leaves them alone
    let (_, eval_cache) = forward(&p, &inputs(&cfg, 3, 7), 3, false).unwrap();
    let mut q = p.clone();
    update_running_stats(&mut q, &eval_cache);
    assert_eq!(p, q);
}

fn trained_stats(cfg: &ModelConfig) -> ParamSet {
    let mut p = init_params(cfg, 8).unwrap();
    for k in 0..3 {
        let (_, cache) = forward(&p, &inputs(cfg, 4, 100 + k), 4, true).unwrap();
        update_running_stats(&mut p, &cache);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn eval_mode_is_permutation_equivariant(rot in 1usize..4, salt in 0u64..1000) {
        let cfg = small();
        let p = trained_stats(&cfg);
        let n = cfg.input_len();
        let x = inputs(&cfg, 4, salt);
        let mut permuted = x[rot * n..].to_vec();
        permuted.extend_from_slice(&x[..rot * n]);
        let (a, _) = forward(&p, &x, 4, false).unwrap();
        let (b, _) = forward(&p, &permuted, 4, false).unwrap();
        for i in 0..4 {
            let j = (i + 4 - rot) % 4;
            prop_assert_eq!(&a.logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES], &b.logits[j * NUM_CLASSES..(j + 1) * NUM_CLASSES]);
        }
    }

    #[test]
    fn eval_mode_duplication_gives_duplicate_rows(salt in 0u64..1000) {
        let cfg = small();
        let p = trained_stats(&cfg);
        let x = inputs(&cfg, 1, salt);
        let doubled: Vec<f64> = x.iter().chain(&x).copied().collect();
        let (out, _) = forward(&p, &doubled, 2, false).unwrap();
        prop_assert_eq!(&out.logits[..NUM_CLASSES], &out.logits[NUM_CLASSES..]);
    }
}
