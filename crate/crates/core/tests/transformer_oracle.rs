//! Encoder blocks against a plain-loop reimplementation.

use catssl::numerics::{ParamSet, Tensor};
use catssl::transformer::{block_name, encode_layers, init_transformer, TransformerConfig, LN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn get(p: &ParamSet<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

/// `x W + b` with `W` stored `[in, out]` row-major.
fn affine(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let dout = b.len();
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    b[o] + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w[i * dout + o])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn block(p: &ParamSet<f64>, cfg: &TransformerConfig, j: usize, x: &Mat) -> Mat {
    let n = |part: &str, t: &str| get(p, &block_name(j, &format!("{part}.{t}")));
    let h = norm(x, &n("ln1", "gamma"), &n("ln1", "beta"));
    let q = affine(&h, &n("attn.q", "weight"), &n("attn.q", "bias"));
    let k = affine(&h, &n("attn.k", "weight"), &n("attn.k", "bias"));
    let v = affine(&h, &n("attn.v", "weight"), &n("attn.v", "bias"));
    let (l, d) = (x.len(), cfg.hidden);
    let hd = d / cfg.heads;
    let mut a = vec![vec![0.0; d]; l];
    for head in 0..cfg.heads {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|t| cols.clone().map(|c| q[i][c] * k[t][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                a[i][c] = (0..l).map(|t| e[t] / z * v[t][c]).sum();
            }
        }
    }
    let o = affine(&a, &n("attn.o", "weight"), &n("attn.o", "bias"));
    let x1: Mat = x
        .iter()
        .zip(&o)
        .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect();
    let h = norm(&x1, &n("ln2", "gamma"), &n("ln2", "beta"));
    let m = affine(&h, &n("mlp.fc1", "weight"), &n("mlp.fc1", "bias"));
    let m: Mat = m
        .iter()
        .map(|r| r.iter().map(|&v| gelu(v)).collect())
        .collect();
    let m = affine(&m, &n("mlp.fc2", "weight"), &n("mlp.fc2", "bias"));
    x1.iter()
        .zip(&m)
        .map(|(r, s)| r.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect()
}

#[test]
fn encoder_matches_plain_loops() {
    for (seed, cfg, l) in [
        (1u64, TransformerConfig::new(2, 16, 2), 5usize),
        (2, TransformerConfig::new(3, 12, 3), 7),
        (3, TransformerConfig::new(1, 8, 1), 1),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: ParamSet<f64> = ParamSet::new();
        init_transformer(&cfg, &mut rng, &mut p).unwrap();
        // Perturb norms and biases so every parameter matters.
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let x = Tensor::<f64>::randn(&[l, cfg.hidden], 1.0, &mut rng);
        let stack = encode_layers(&p, &cfg, &x).unwrap();
        let mut cur: Mat = (0..l).map(|i| x.row(i).to_vec()).collect();
        for j in 0..cfg.n_layers {
            cur = block(&p, &cfg, j, &cur);
            let got = &stack.hidden_states[j];
            for i in 0..l {
                for c in 0..cfg.hidden {
                    let diff = (got.row(i)[c] - cur[i][c]).abs();
                    assert!(
                        diff <= 1e-6,
                        "seed {seed} layer {j} [{i},{c}] off by {diff}"
                    );
                }
            }
        }
    }
}
