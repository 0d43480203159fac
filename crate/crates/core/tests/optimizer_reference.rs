use catssl::numerics::{ParamSet, Tensor};
use catssl::optimizer::{AdamWConfig, LrSchedule, OptState};
use proptest::prelude::*;

/// Scalar AdamW written out from the textbook recurrences.
fn reference(p0: f64, a: f64, lr: f64, wd: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.95f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for t in 1..=steps {
        // Gradient of a * (p - 3)^2.
        let g = 2.0 * a * (p - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        p = p - lr * wd * p - lr * mhat / (vhat.sqrt() + eps);
    }
    p
}

#[test]
fn five_steps_on_a_quadratic_match_reference() {
    let starts = [-2.0, 0.5, 10.0];
    let curv = [0.5, 1.0, 4.0];
    let mut params: ParamSet<f64> = ParamSet::new();
    params
        .insert("w", Tensor::new(vec![3], starts.to_vec()).unwrap())
        .unwrap();
    let cfg = AdamWConfig {
        weight_decay: 0.05,
        ..Default::default()
    };
    let mut opt = OptState::new(&params, cfg);
    let lr = 0.1;
    for _ in 0..5 {
        let w = params.get("w").unwrap().data().to_vec();
        let g: Vec<f64> = (0..3).map(|i| 2.0 * curv[i] * (w[i] - 3.0)).collect();
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::new(vec![3], g).unwrap()).unwrap();
        opt.step(&mut params, &grads, lr).unwrap();
    }
    let got = params.get("w").unwrap().data();
    for i in 0..3 {
        let want = reference(starts[i], curv[i], lr, 0.05, 5);
        assert!((got[i] - want).abs() <= 1e-12, "{i}: {} vs {want}", got[i]);
    }
}

proptest! {
    #[test]
    fn update_opposes_the_gradient(g in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        prop_assume!(g.iter().any(|v| v.abs() > 1e-6));
        let n = g.len();
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("w", Tensor::zeros(&[n])).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, beta2: 0.81, ..Default::default() };
        let mut opt = OptState::new(&params, cfg);
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::new(vec![n], g.clone()).unwrap()).unwrap();
        let mut dot = 0.0;
        for _ in 0..3 {
            let before = params.get("w").unwrap().data().to_vec();
            opt.step(&mut params, &grads, 0.01).unwrap();
            let after = params.get("w").unwrap().data();
            dot = (0..n).map(|i| (after[i] - before[i]) * g[i]).sum::<f64>();
            prop_assert!(dot < 0.0);
        }
        prop_assert!(dot.is_finite());
    }

    #[test]
    fn schedule_is_bounded_and_continuous(peak in 1e-4f64..1.0, frac in 0.0f64..0.9, warm in 1u64..50, extra in 1u64..500) {
        let min = peak * frac;
        let s = LrSchedule { peak, min, warmup_steps: warm, total_steps: warm + extra };
        for step in 0..=s.total_steps + 3 {
            let lr = s.lr_at(step);
            prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
            if step >= warm {
                prop_assert!(lr >= min * (1.0 - 1e-12));
            }
        }
        prop_assert!((s.lr_at(warm) - peak).abs() <= 1e-12 * peak);
        let left = peak * (warm - 1) as f64 / warm as f64;
        prop_assert!((s.lr_at(warm) - left - peak / warm as f64).abs() <= 1e-12);
    }
}
