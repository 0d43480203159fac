use catssl::bootstrap::teacher_targets;
use catssl::masking::{clone_masks, BlockPlacement, MaskSpec, PatchMask};
use catssl::model::{
    batch_grad, batch_loss, init_student, teacher_from_student, ModelConfig, PreparedClip,
};
use catssl::multires::{encode_tokens, MultiResConfig, PosEmbedding};
use catssl::numerics::{grad, ParamSet, Tensor};
use catssl::objective::{LossWeights, Objective};
use catssl::transformer::{encode_layers, TransformerConfig, FINAL_NORM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        multires: MultiResConfig {
            resolutions: vec![2, 4],
            channels: vec![8, 16],
            input_t: 8,
            input_f: 8,
            pos: PosEmbedding::Sinusoidal,
        },
        transformer: TransformerConfig::new(2, 16, 2),
        target_dim: 16,
    }
}

fn clips(
    cfg: &ModelConfig,
    teacher: &ParamSet<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PreparedClip<f64>> {
    let spec = MaskSpec {
        ratio: 0.5,
        block: 1,
        placement: BlockPlacement::Valid,
    };
    (0..n)
        .map(|_| {
            let x = Tensor::randn(&[8, 8], 1.0, rng);
            PreparedClip {
                targets: teacher_targets(teacher, cfg, &x, false).unwrap(),
                spec: x,
                embedding: Tensor::randn(&[16], 1.0, rng),
                masks: clone_masks(rng, "clip", 2, 2, &spec, 3).unwrap().masks,
            }
        })
        .collect()
}

#[test]
fn per_clone_gradients_average_to_the_batch_gradient() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let student: ParamSet<f64> = init_student(&cfg, &mut rng).unwrap();
    let teacher = teacher_from_student(&student);
    let batch = clips(&cfg, &teacher, 2, &mut rng);
    let weights = LossWeights {
        lambda1: 0.7,
        lambda2: 1.3,
        aligned_layer: 1,
        objective: Objective::Cosine,
    };
    let (loss, whole) = grad(&student, |g, b| batch_loss(g, b, &cfg, &weights, &batch)).unwrap();
    let (parts, split) = batch_grad(&student, &cfg, &weights, &batch).unwrap();
    assert!((parts.l_total - loss).abs() <= 1e-12);
    for ((name, a), (_, b)) in whole.iter().zip(split.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(
                (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                "{name}: {x} vs {y}"
            );
        }
    }
    // Pretraining losses read pre-norm states, so the final norm is untouched.
    for suffix in ["gamma", "beta"] {
        let g = split.get(&format!("{FINAL_NORM}.{suffix}")).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
    assert!(split.same_layout(&student));
}

#[test]
fn teacher_is_outside_the_student_graph() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let student: ParamSet<f64> = init_student(&cfg, &mut rng).unwrap();
    let mut teacher = teacher_from_student(&student);
    let batch = clips(&cfg, &teacher, 1, &mut rng);
    let weights = LossWeights::for_layers(2);
    let (_, before) = batch_grad(&student, &cfg, &weights, &batch).unwrap();
    // Moving the teacher after targets are built changes nothing in the step.
    for (_, t) in teacher.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    let (_, after) = batch_grad(&student, &cfg, &weights, &batch).unwrap();
    assert_eq!(before, after);
}

#[test]
fn empty_mask_student_equals_teacher_at_every_layer() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let student: ParamSet<f64> = init_student(&cfg, &mut rng).unwrap();
    let teacher = teacher_from_student(&student);
    let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let none = PatchMask::none(2, 2);
    let s = encode_tokens(&student, &cfg.multires, &x, Some(&none)).unwrap();
    let t = encode_tokens(&teacher, &cfg.multires, &x, None).unwrap();
    assert_eq!(s.tokens, t.tokens);
    let hs = encode_layers(&student, &cfg.transformer, &s.tokens).unwrap();
    let ht = encode_layers(&teacher, &cfg.transformer, &t.tokens).unwrap();
    assert_eq!(hs, ht);
}

#[test]
fn clip_features_are_deterministic_and_distinct() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let student: ParamSet<f64> = init_student(&cfg, &mut rng).unwrap();
    let encoder = teacher_from_student(&student);
    let a = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let b = Tensor::randn(&[8, 8], 1.0, &mut rng);
    let fa = catssl::model::encode_clip(&encoder, &cfg, &a).unwrap();
    assert_eq!(fa.shape(), &[16]);
    assert_eq!(fa, catssl::model::encode_clip(&encoder, &cfg, &a).unwrap());
    assert_ne!(fa, catssl::model::encode_clip(&encoder, &cfg, &b).unwrap());
}
