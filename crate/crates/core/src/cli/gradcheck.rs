//! The self-check suite behind `prefopt gradcheck`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, Graph};
use crate::dataforge::{PairMeta, PreferencePair};
use crate::error::{Error, Result};
use crate::losses::{pair_loss, LossConfig, LossKind, RefLogProbs};
use crate::model::{LMConfig, LMParams, ModelNodes, TokenSeq};
use crate::theory::{
    autodiff_logit_grads, completion_rows, dpo_logit_grad, dpop_logit_grad, dpop_sign_threshold,
    SoftmaxRowPair,
};

pub const GRAD_TOL: f64 = 1e-5;
pub const LOGIT_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub loss_pairs: usize,
    pub logit_pairs: usize,
    pub sign_rows: usize,
    /// Coordinates probed per parameter tensor by finite differences.
    pub coords_per_leaf: usize,
    /// Negates the analytic logit gradient before comparing it.
    pub sign_flip: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            loss_pairs: 50,
            logit_pairs: 100,
            sign_rows: 1000,
            coords_per_leaf: 4,
            sign_flip: false,
        }
    }
}

/// One executed check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub case: usize,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckSummary {
    pub check: String,
    pub n: usize,
    pub n_passed: usize,
    pub worst: f64,
    pub tolerance: f64,
}

/// Model the suite checks against: 16 tokens, width 32, one layer.
pub fn suite_model_config() -> LMConfig {
    LMConfig {
        vocab_size: 16,
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, len: std::ops::Range<usize>, vocab: u32) -> Vec<u32> {
    let n = rng.random_range(len);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Unrelated chosen and rejected completions of random lengths.
pub fn random_pair(rng: &mut ChaCha8Rng, id: u64, vocab: u32) -> PreferencePair {
    let prompt = random_tokens(rng, 1..5, vocab);
    let chosen = random_tokens(rng, 1..9, vocab);
    let rejected = loop {
        let r = random_tokens(rng, 1..9, vocab);
        if r != chosen {
            break r;
        }
    };
    PreferencePair::new(
        id,
        TokenSeq(prompt),
        TokenSeq(chosen),
        TokenSeq(rejected),
        None,
        PairMeta::default(),
    )
    .expect("non-empty by construction")
}

/// Completions that differ in exactly one token, never the last.
pub fn hamming_one_pair(rng: &mut ChaCha8Rng, id: u64, vocab: u32) -> PreferencePair {
    let prompt = random_tokens(rng, 1..5, vocab);
    let chosen = random_tokens(rng, 3..12, vocab);
    let k = chosen.len();
    let m = rng.random_range(0..k - 1);
    let mut rejected = chosen.clone();
    rejected[m] = (chosen[m] + rng.random_range(1..vocab)) % vocab;
    PreferencePair::new(
        id,
        TokenSeq(prompt),
        TokenSeq(chosen),
        TokenSeq(rejected),
        Some(m),
        PairMeta::default(),
    )
    .expect("non-empty by construction")
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Two softmax rows from logits in `[-4, 4]` and a random target.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> SoftmaxRowPair {
    let mut row = || softmax(&(0..n).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>());
    let (s_w, s_l) = (row(), row());
    SoftmaxRowPair::new(s_w, s_l, rng.random_range(0..n)).expect("softmax rows are normalized")
}

fn row(check: &str, case: usize, value: f64, tolerance: f64, passed: bool) -> CheckRow {
    CheckRow {
        check: check.to_string(),
        case,
        value,
        tolerance,
        passed,
    }
}

/// Finite differences against backprop for every loss on random pairs.
pub fn loss_gradient_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let config = suite_model_config();
    let theta = LMParams::init(&config, opts.seed)?;
    let reference = LMParams::init(&config, opts.seed.wrapping_add(1))?.snapshot_reference();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0001);
    let mut rows = Vec::new();
    for case in 0..opts.loss_pairs {
        let pair = random_pair(&mut rng, case as u64, config.vocab_size as u32);
        let refs = RefLogProbs::compute(&reference, &pair)?;
        for kind in LossKind::ALL {
            let cfg = LossConfig::new(kind);
            let err = grad_check(
                |g, ids| {
                    let m = ModelNodes::from_ids(&config, ids.to_vec())?;
                    Ok(pair_loss(g, &m, &pair, Some(refs), &cfg)?.loss)
                },
                theta.tensors(),
                &GradCheckOptions {
                    eps: 1e-5,
                    max_coords_per_leaf: Some(opts.coords_per_leaf),
                    seed: opts.seed.wrapping_add(case as u64),
                },
            )?;
            rows.push(row(&format!("grad_check_{kind}"), case, err, GRAD_TOL, err <= GRAD_TOL));
        }
    }
    Ok(rows)
}

/// Autodiff logit gradients against the closed form past the edit, and
/// exact zeros before it.
pub fn logit_gradient_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let config = suite_model_config();
    let theta = LMParams::init(&config, opts.seed.wrapping_add(2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0002);
    let mut rows = Vec::new();
    for case in 0..opts.logit_pairs {
        let pair = hamming_one_pair(&mut rng, case as u64, config.vocab_size as u32);
        let m = pair.first_edit_index.expect("set by construction");
        let auto = autodiff_logit_grads(&theta, &pair)?;
        let (sw, sl) = completion_rows(&theta, &pair)?;
        let mut dev: f64 = 0.0;
        for k in m + 1..pair.chosen.len() {
            let rows = SoftmaxRowPair::new(
                sw.row(k).to_vec(),
                sl.row(k).to_vec(),
                pair.chosen.tokens()[k] as usize,
            )?;
            let mut analytic = dpo_logit_grad(&rows)?;
            if opts.sign_flip {
                analytic.iter_mut().for_each(|v| *v = -*v);
            }
            for (a, b) in auto.row(k).iter().zip(&analytic) {
                dev = dev.max((a - b).abs());
            }
        }
        rows.push(row("logit_grad", case, dev, LOGIT_TOL, dev <= LOGIT_TOL));
        let prefix = (0..m)
            .flat_map(|k| auto.row(k).iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        rows.push(row("shared_prefix_zero", case, prefix, 0.0, prefix == 0.0));
    }
    Ok(rows)
}

/// Signs of the penalized logit gradient at twice the threshold λ. The
/// value is the smallest margin: target gradient or minus any other.
pub fn sign_theorem_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0003);
    let mut rows = Vec::with_capacity(opts.sign_rows);
    for case in 0..opts.sign_rows {
        let n = rng.random_range(2..17);
        let r = random_rows(&mut rng, n);
        let lambda = 2.0 * dpop_sign_threshold(&r)?;
        let g = dpop_logit_grad(&r, lambda, true)?;
        let i = r.target_index;
        let margin = g
            .iter()
            .enumerate()
            .map(|(j, v)| if j == i { *v } else { -*v })
            .fold(f64::INFINITY, f64::min);
        rows.push(row("dpop_sign", case, margin, 0.0, margin > 0.0));
    }
    Ok(rows)
}

/// DPOP with λ = 0 against DPO: loss values and parameter gradients must
/// agree bit for bit.
pub fn zero_lambda_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let config = suite_model_config();
    let theta = LMParams::init(&config, opts.seed.wrapping_add(3))?;
    let reference = LMParams::init(&config, opts.seed.wrapping_add(4))?.snapshot_reference();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0004);
    let eval = |pair: &PreferencePair, refs: RefLogProbs, cfg: &LossConfig| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let nodes = ModelNodes::bind(&theta, &mut g)?;
        let out = pair_loss(&mut g, &nodes, pair, Some(refs), cfg)?;
        let value = g.scalar(out.loss)?;
        let grads = g.backward(out.loss)?;
        let flat = nodes
            .collect_grads(&g, &grads)
            .tensors
            .iter()
            .flat_map(|t| t.data().to_vec())
            .collect();
        Ok((value, flat))
    };
    let mut rows = Vec::with_capacity(opts.logit_pairs);
    for case in 0..opts.logit_pairs {
        let pair = random_pair(&mut rng, case as u64, config.vocab_size as u32);
        let refs = RefLogProbs::compute(&reference, &pair)?;
        let (dv, dg) = eval(&pair, refs, &LossConfig::new(LossKind::Dpo))?;
        let (pv, pg) = eval(&pair, refs, &LossConfig::new(LossKind::Dpop).with_lambda(0.0))?;
        let gap = dg
            .iter()
            .zip(&pg)
            .map(|(a, b)| (a - b).abs())
            .fold((dv - pv).abs(), f64::max);
        let same = dv.to_bits() == pv.to_bits()
            && dg.iter().zip(&pg).all(|(a, b)| a.to_bits() == b.to_bits());
        rows.push(row("dpop_zero_lambda", case, gap, 0.0, same));
    }
    Ok(rows)
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut rows = loss_gradient_checks(opts)?;
    rows.extend(logit_gradient_checks(opts)?);
    rows.extend(sign_theorem_checks(opts)?);
    rows.extend(zero_lambda_checks(opts)?);
    Ok(rows)
}

/// Per-check counts in first-seen order. `worst` is the largest value,
/// or for the sign check the smallest margin.
pub fn summarize(rows: &[CheckRow]) -> Vec<CheckSummary> {
    let mut out: Vec<CheckSummary> = Vec::new();
    for r in rows {
        let lower_is_worse = r.check == "dpop_sign";
        match out.iter_mut().find(|s| s.check == r.check) {
            Some(s) => {
                s.n += 1;
                s.n_passed += r.passed as usize;
                s.worst = if lower_is_worse {
                    s.worst.min(r.value)
                } else {
                    s.worst.max(r.value)
                };
            }
            None => out.push(CheckSummary {
                check: r.check.clone(),
                n: 1,
                n_passed: r.passed as usize,
                worst: r.value,
                tolerance: r.tolerance,
            }),
        }
    }
    out
}

pub fn write_report_csv<W: Write>(rows: &[CheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["check", "case", "value", "tolerance", "passed"])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_report_csv(rows: &[CheckRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report_csv(rows, std::io::BufWriter::new(file))
}
