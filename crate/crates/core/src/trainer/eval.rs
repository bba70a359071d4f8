use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::Graph;
use crate::dataforge::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{pair_loss, LossConfig, LossDiagnostics, RefLogProbs};
use crate::model::{LMParams, ModelNodes};

/// One row of the metrics CSV. Log-probs are per-token means; log-ratios
/// are sequence-level, as in the losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub train_loss: f64,
    pub mean_chosen_logprob: f64,
    pub mean_rejected_logprob: f64,
    pub mean_log_ratio_w: f64,
    pub mean_log_ratio_l: f64,
    pub preference_accuracy: f64,
    pub mean_penalty: f64,
    pub grad_norm: f64,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))
}

pub fn save_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics_csv(records, std::io::BufWriter::new(file))
}

fn nonempty(pairs: &[PreferencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation needs at least one pair".into()));
    }
    Ok(())
}

/// Value-only loss and diagnostics for one pair.
pub(crate) fn evaluate_pair(
    theta: &LMParams,
    pair: &PreferencePair,
    reference: Option<RefLogProbs>,
    cfg: &LossConfig,
) -> Result<(f64, LossDiagnostics)> {
    let mut g = Graph::new();
    let nodes = ModelNodes::bind_constant(theta, &mut g)?;
    let out = pair_loss(&mut g, &nodes, pair, reference, cfg)?;
    Ok((out.value, out.diagnostics))
}

/// Probe-set summary at `step`. `grad_norm` is the norm of the minibatch
/// gradient that produced the current parameters.
pub(crate) fn probe_metrics(
    theta: &LMParams,
    probe: &[(&PreferencePair, RefLogProbs)],
    cfg: &LossConfig,
    step: usize,
    grad_norm: f64,
) -> Result<MetricsRecord> {
    if probe.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let mut sums = [0.0; 7];
    for &(pair, r) in probe {
        let (loss, d) = evaluate_pair(theta, pair, Some(r), cfg)?;
        // SFT and SLiC leave the rejected side to the diagnostics pass.
        let logp_l = if d.tokens_l == 0 {
            theta.completion_log_prob(&pair.prompt, &pair.rejected)?
        } else {
            d.logp_l
        };
        let wins = if d.logp_w > logp_l {
            1.0
        } else if d.logp_w == logp_l {
            0.5
        } else {
            0.0
        };
        for (s, v) in sums.iter_mut().zip([
            loss,
            d.logp_w / pair.chosen.len() as f64,
            logp_l / pair.rejected.len() as f64,
            d.logp_w - r.chosen,
            logp_l - r.rejected,
            wins,
            d.penalty,
        ]) {
            *s += v;
        }
    }
    let n = probe.len() as f64;
    let [loss, cw, cl, rw, rl, acc, pen] = sums.map(|s| s / n);
    let rec = MetricsRecord {
        step,
        train_loss: loss,
        mean_chosen_logprob: cw,
        mean_rejected_logprob: cl,
        mean_log_ratio_w: rw,
        mean_log_ratio_l: rl,
        preference_accuracy: acc,
        mean_penalty: pen,
        grad_norm,
    };
    let finite = [loss, cw, cl, rw, rl, acc, pen, grad_norm]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Diverged {
            step,
            reason: "non-finite probe metrics".into(),
            last_good: None,
        });
    }
    Ok(rec)
}

/// Fraction of pairs where the chosen completion is strictly more likely;
/// exact ties count one half.
pub fn eval_preference_accuracy(params: &LMParams, pairs: &[PreferencePair]) -> Result<f64> {
    nonempty(pairs)?;
    let mut score = 0.0;
    for p in pairs {
        let w = params.completion_log_prob(&p.prompt, &p.chosen)?;
        let l = params.completion_log_prob(&p.prompt, &p.rejected)?;
        score += if w > l {
            1.0
        } else if w == l {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / pairs.len() as f64)
}

/// Mean over pairs of the chosen completion's log-prob, or of its per-token
/// average when `per_token`.
pub fn mean_chosen_logprob(params: &LMParams, pairs: &[PreferencePair], per_token: bool) -> Result<f64> {
    nonempty(pairs)?;
    let mut total = 0.0;
    for p in pairs {
        let lp = params.completion_log_prob(&p.prompt, &p.chosen)?;
        total += if per_token { lp / p.chosen.len() as f64 } else { lp };
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileEntry {
    pub offset: i64,
    pub mean_logprob_diff: f64,
    pub n_pairs: usize,
}

/// Mean per-token log-prob of the chosen completion by offset from the
/// first edit, shifted so offset −1 reads 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionProfile {
    pub window: usize,
    pub entries: Vec<ProfileEntry>,
}

impl PositionProfile {
    pub fn value_at(&self, offset: i64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.offset == offset)
            .map(|e| e.mean_logprob_diff)
    }

    /// Unweighted mean of the values at offsets in `lo..=hi` that exist.
    pub fn mean_over(&self, lo: i64, hi: i64) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| (lo..=hi).contains(&e.offset))
            .map(|e| e.mean_logprob_diff)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub fn position_profile(
    params: &LMParams,
    pairs: &[PreferencePair],
    window: usize,
) -> Result<PositionProfile> {
    if window == 0 {
        return Err(Error::Contract("profile window must be >= 1".into()));
    }
    nonempty(pairs)?;
    let w = window as i64;
    let width = 2 * window + 1;
    let mut sum = vec![0.0; width];
    let mut count = vec![0usize; width];
    for p in pairs {
        let m = p.first_edit_index.ok_or_else(|| {
            Error::Contract(format!(
                "pair {} has no first_edit_index; forge a calc_chain dataset for position profiles",
                p.id
            ))
        })? as i64;
        let per = params.per_token_log_probs(&p.prompt, &p.chosen)?;
        for o in -w..=w {
            let k = m + o;
            if k >= 0 && (k as usize) < per.len() {
                let slot = (o + w) as usize;
                sum[slot] += per[k as usize];
                count[slot] += 1;
            }
        }
    }
    let anchor_slot = (w - 1) as usize;
    if count[anchor_slot] == 0 {
        return Err(Error::Contract(
            "no pair has a token before its edit, so the profile cannot be anchored".into(),
        ));
    }
    let anchor = sum[anchor_slot] / count[anchor_slot] as f64;
    let entries = (0..width)
        .filter(|&s| count[s] > 0)
        .map(|s| ProfileEntry {
            offset: s as i64 - w,
            mean_logprob_diff: if s == anchor_slot {
                0.0
            } else {
                sum[s] / count[s] as f64 - anchor
            },
            n_pairs: count[s],
        })
        .collect();
    Ok(PositionProfile { window, entries })
}
