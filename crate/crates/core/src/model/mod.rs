//! Tiny decoder-only causal language model.
//!
//! Pre-norm residual blocks (multi-head causal self-attention and a ReLU
//! feed-forward of width `4·d_model`), learned absolute positions and a final
//! layer norm before the vocabulary projection.

pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use config::LMConfig;
pub use forward::{ModelNodes, TokenSeq};
pub use params::{LMParams, ParamGrads};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn tiny(vocab: usize) -> LMConfig {
        LMConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
        }
    }

    fn seq(v: &[u32]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    /// Randomizes every tensor (including gains and biases) so that the
    /// oracle comparison exercises all parameters.
    fn scrambled(cfg: &LMConfig, seed: u64) -> LMParams {
        let base = LMParams::init(cfg, seed).unwrap();
        let mut p = base.clone();
        let mut k = seed as f64;
        for t in p.tensors_mut().unwrap() {
            for v in t.data_mut() {
                k += 1.0;
                *v = (k * 0.618).sin() * 0.8;
            }
        }
        p
    }

    /// Straight-line re-implementation of the forward pass using plain loops.
    fn oracle_logits(p: &LMParams, seq: &[u32]) -> Vec<Vec<f64>> {
        let cfg = p.config();
        let d = cfg.d_model;
        let w = |name: &str| p.get(name).unwrap().data().to_vec();
        let mm = |x: &Vec<Vec<f64>>, m: &[f64], cols: usize| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..cols)
                        .map(|j| row.iter().enumerate().map(|(i, v)| v * m[i * cols + j]).sum())
                        .collect()
                })
                .collect()
        };
        let ln = |x: &Vec<Vec<f64>>, gain: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * gain[j] + bias[j])
                        .collect()
                })
                .collect()
        };
        let tok = w("tok_emb");
        let pos = w("pos_emb");
        let mut x: Vec<Vec<f64>> = seq
            .iter()
            .enumerate()
            .map(|(t, &id)| (0..d).map(|j| tok[id as usize * d + j] + pos[t * d + j]).collect())
            .collect();
        let hd = cfg.head_dim();
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let h = ln(&x, &w(&n("ln1.gain")), &w(&n("ln1.bias")));
            let q = mm(&h, &w(&n("attn.wq")), d);
            let k = mm(&h, &w(&n("attn.wk")), d);
            let v = mm(&h, &w(&n("attn.wv")), d);
            let mut o = vec![vec![0.0; d]; seq.len()];
            for head in 0..cfg.n_heads {
                let c0 = head * hd;
                for t in 0..seq.len() {
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| {
                            (0..hd).map(|j| q[t][c0 + j] * k[s][c0 + j]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..hd {
                        o[t][c0 + j] = (0..=t).map(|s| e[s] / z * v[s][c0 + j]).sum();
                    }
                }
            }
            let o = mm(&o, &w(&n("attn.wo")), d);
            for t in 0..seq.len() {
                for j in 0..d {
                    x[t][j] += o[t][j];
                }
            }
            let h = ln(&x, &w(&n("ln2.gain")), &w(&n("ln2.bias")));
            let f = cfg.ffn_dim();
            let mut a = mm(&h, &w(&n("ffn.w1")), f);
            let b1 = w(&n("ffn.b1"));
            for row in &mut a {
                for (j, v) in row.iter_mut().enumerate() {
                    let x = *v + b1[j];
                    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                    *v = 0.5 * x * (1.0 + u.tanh());
                }
            }
            let out = mm(&a, &w(&n("ffn.w2")), d);
            let b2 = w(&n("ffn.b2"));
            for t in 0..seq.len() {
                for j in 0..d {
                    x[t][j] += out[t][j] + b2[j];
                }
            }
        }
        let h = ln(&x, &w("ln_f.gain"), &w("ln_f.bias"));
        let mut logits = mm(&h, &w("head.w"), cfg.vocab_size);
        let hb = w("head.b");
        for row in &mut logits {
            for (j, v) in row.iter_mut().enumerate() {
                *v += hb[j];
            }
        }
        logits
    }

    fn oracle_per_token(p: &LMParams, prompt: &[u32], completion: &[u32]) -> Vec<f64> {
        let mut full = prompt.to_vec();
        full.extend_from_slice(completion);
        let logits = oracle_logits(p, &full);
        completion
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let row = &logits[prompt.len() - 1 + k];
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row[t as usize] - lse
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny(5);
        let a = LMParams::init(&cfg, 1).unwrap();
        let b = LMParams::init(&cfg, 1).unwrap();
        let c = LMParams::init(&cfg, 2).unwrap();
        assert_eq!(checkpoint::to_bytes(&a).unwrap(), checkpoint::to_bytes(&b).unwrap());
        assert!(a.tensors().iter().zip(c.tensors()).any(|(x, y)| x != y));
        assert!(a.get("head.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = LMConfig {
            d_model: 8,
            n_heads: 3,
            ..tiny(5)
        };
        assert!(matches!(LMParams::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn logits_are_causal() {
        let p = scrambled(&tiny(7), 3);
        let a = p.forward_logits(&seq(&[1, 2, 3, 4, 5, 6])).unwrap();
        for pos in 0..6 {
            let mut s = vec![1, 2, 3, 4, 5, 6];
            s[pos] = 0;
            let b = p.forward_logits(&seq(&s)).unwrap();
            for r in 0..pos {
                assert_eq!(a.row(r), b.row(r), "row {r} changed when perturbing {pos}");
            }
            assert_ne!(a.row(pos), b.row(pos));
        }
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let cfg = LMConfig {
            vocab_size: 16,
            ..tiny(16)
        };
        let p = LMParams::zeros(&cfg).unwrap();
        let lp = p
            .per_token_log_probs(&seq(&[0, 3]), &seq(&[4, 5, 6, 7]))
            .unwrap();
        for v in &lp {
            assert!((v + 16f64.ln()).abs() < 1e-12);
        }
        let total = p.completion_log_prob(&seq(&[0, 3]), &seq(&[4, 5, 6, 7])).unwrap();
        assert!((total + 4.0 * 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let p = LMParams::init(&tiny(9), 11).unwrap();
        let s = seq(&[0, 1, 8, 2]);
        assert_eq!(p.forward_logits(&s).unwrap(), p.forward_logits(&s).unwrap());
    }

    #[test]
    fn per_token_matches_straight_line_oracle() {
        let cfg = tiny(5);
        for seed in 0..5 {
            let p = scrambled(&cfg, seed);
            let prompt = [0, 2, 1];
            let completion = [4, 3, (seed % 5) as u32];
            let got = p.per_token_log_probs(&seq(&prompt), &seq(&completion)).unwrap();
            let want = oracle_per_token(&p, &prompt, &completion);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn single_token_completion_is_softmax_probability() {
        let p = scrambled(&tiny(5), 7);
        let prompt = seq(&[0, 1, 2]);
        let lp = p.completion_log_prob(&prompt, &seq(&[3])).unwrap();
        let per = p.per_token_log_probs(&prompt, &seq(&[3])).unwrap();
        assert_eq!(per, vec![lp]);
        let logits = p.forward_logits(&prompt).unwrap();
        let row = logits.row(2);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((lp.exp() - row[3].exp() / z).abs() < 1e-12);
    }

    #[test]
    fn sequence_log_prob_is_sum_of_tokens_and_non_positive() {
        let p = scrambled(&tiny(6), 2);
        let (x, y) = (seq(&[0, 5, 4]), seq(&[1, 2, 3, 3, 1]));
        let per = p.per_token_log_probs(&x, &y).unwrap();
        let total = p.completion_log_prob(&x, &y).unwrap();
        assert!((per.iter().sum::<f64>() - total).abs() <= 1e-12);
        assert!(total <= 0.0);
    }

    #[test]
    fn length_overflow_is_reported() {
        let p = LMParams::init(&tiny(5), 0).unwrap();
        let long = seq(&[1; 10]);
        assert!(matches!(
            p.per_token_log_probs(&seq(&[0; 7]), &long),
            Err(Error::Length { len: 17, max: 16 })
        ));
        assert!(matches!(
            p.forward_logits(&seq(&[1; 17])),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn snapshot_is_frozen_and_independent() {
        let mut p = LMParams::init(&tiny(5), 4).unwrap();
        let snap = p.snapshot_reference();
        assert!(snap.is_frozen());
        let (x, y) = (seq(&[0, 1]), seq(&[2, 3, 4]));
        let before = snap.completion_log_prob(&x, &y).unwrap();
        for t in p.tensors_mut().unwrap() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1);
        }
        assert_eq!(snap.completion_log_prob(&x, &y).unwrap(), before);
        assert_ne!(p.completion_log_prob(&x, &y).unwrap(), before);
        let snap2 = snap.snapshot_reference();
        assert_eq!(snap2.completion_log_prob(&x, &y).unwrap(), before);
    }

    #[test]
    fn frozen_params_reject_updates_and_gradients() {
        let p = LMParams::init(&tiny(5), 4).unwrap();
        let mut snap = p.snapshot_reference();
        assert!(snap.tensors_mut().is_err());

        let mut g = crate::autodiff::Graph::new();
        let m = ModelNodes::bind(&snap, &mut g).unwrap();
        let lp = m.completion_log_prob(&mut g, &[0, 1], &[2, 3]).unwrap();
        assert!(!g.requires_grad(lp));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let p = LMParams::init(&tiny(7), 9).unwrap().snapshot_reference();
        let bytes = checkpoint::to_bytes(&p).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(checkpoint::load(&path).unwrap(), p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = LMParams::init(&tiny(7), 9).unwrap();
        let mut bytes = checkpoint::to_bytes(&p).unwrap();
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[8] = 9; // version
        assert!(matches!(
            checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(m)) if m.contains("version")
        ));
    }
}
