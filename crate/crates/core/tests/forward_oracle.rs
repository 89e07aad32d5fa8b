//! Forward pass against a deliberately naive nested-loop evaluation.

use flearn::model::{forward, init_model, ModelConfig, ParamSet};
use proptest::prelude::*;

fn mat(p: &ParamSet, name: &str) -> Vec<Vec<f64>> {
    let t = p.get(name).unwrap();
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| t.data()[r * cols + c] as f64).collect())
        .collect()
}

fn vector(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
}

fn apply(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut ms = 0.0;
    for v in x {
        ms += v * v;
    }
    let r = (ms / x.len() as f64 + 1e-5).sqrt();
    (0..x.len()).map(|i| g[i] * x[i] / r).collect()
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

fn naive_forward(p: &ParamSet, ids: &[u32]) -> Vec<Vec<f64>> {
    let cfg = p.config();
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let hd = d / nh;
    let tok = mat(p, "embed.tokens");
    let pos = mat(p, "embed.positions");
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|i| tok[id as usize][i] + pos[t][i]).collect())
        .collect();
    for l in 0..cfg.n_layers {
        let pre = |s: &str| format!("layers.{l}.{s}");
        let g1 = vector(p, &pre("attn_norm"));
        let (wq, wk, wv, wo) = (
            mat(p, &pre("attn.query")),
            mat(p, &pre("attn.key")),
            mat(p, &pre("attn.value")),
            mat(p, &pre("attn.output")),
        );
        let h: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, &g1)).collect();
        let q: Vec<_> = h.iter().map(|x| apply(&wq, x)).collect();
        let k: Vec<_> = h.iter().map(|x| apply(&wk, x)).collect();
        let v: Vec<_> = h.iter().map(|x| apply(&wv, x)).collect();
        let mut next = Vec::new();
        for t in 0..xs.len() {
            let mut att = vec![0.0; d];
            for head in 0..nh {
                let lo = head * hd;
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        (lo..lo + hd).map(|i| q[t][i] * k[s][i]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for s in 0..=t {
                    let w = (scores[s] - m).exp() / z;
                    for i in lo..lo + hd {
                        att[i] += w * v[s][i];
                    }
                }
            }
            let o = apply(&wo, &att);
            let mid: Vec<f64> = (0..d).map(|i| xs[t][i] + o[i]).collect();
            let h2 = rms(&mid, &vector(p, &pre("mlp_norm")));
            let ub = vector(p, &pre("mlp.up_bias"));
            let u: Vec<f64> = apply(&mat(p, &pre("mlp.up")), &h2)
                .iter()
                .zip(&ub)
                .map(|(a, b)| gelu(a + b))
                .collect();
            let db = vector(p, &pre("mlp.down_bias"));
            let down = apply(&mat(p, &pre("mlp.down")), &u);
            next.push((0..d).map(|i| mid[i] + down[i] + db[i]).collect());
        }
        xs = next;
    }
    let head = mat(p, "lm_head");
    let gf = vector(p, "final_norm");
    xs.iter().map(|x| apply(&head, &rms(x, &gf))).collect()
}

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 6,
        seed,
    }
}

#[test]
fn matches_naive_reference() {
    let p = init_model(&tiny(9)).unwrap();
    let ids = [3, 1, 7, 0, 5];
    let fast = forward(&p, &ids).unwrap();
    let slow = naive_forward(&p, &ids);
    for (t, row) in slow.iter().enumerate() {
        for (v, &want) in row.iter().enumerate() {
            let got = fast.row(t)[v] as f64;
            assert!((got - want).abs() <= 1e-5, "[{t},{v}] {got} vs {want}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn agrees_with_reference(seed in 0u64..1000, ids in prop::collection::vec(0u32..8, 1..=6)) {
        let p = init_model(&tiny(seed)).unwrap();
        let fast = forward(&p, &ids).unwrap();
        let slow = naive_forward(&p, &ids);
        for (t, row) in slow.iter().enumerate() {
            for (v, &want) in row.iter().enumerate() {
                prop_assert!((fast.row(t)[v] as f64 - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn causal_masking(seed in 0u64..1000, ids in prop::collection::vec(0u32..8, 2..=6), pos in 0usize..6, tok in 0u32..8) {
        let pos = pos % ids.len();
        let p = init_model(&tiny(seed)).unwrap();
        let base = forward(&p, &ids).unwrap();
        let mut changed = ids.clone();
        changed[pos] = tok;
        let other = forward(&p, &changed).unwrap();
        for t in 0..pos {
            prop_assert_eq!(base.row(t), other.row(t));
        }
    }
}
