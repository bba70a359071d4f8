use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{
    check_sft_assumption, completion_rows, dpo_logit_grad, dpop_logit_grad, max_logit_grad_deviation,
    SoftmaxRowPair,
};
use crate::dataforge::{first_difference, PreferencePair};
use crate::error::{Error, Result};
use crate::model::LMParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientMode {
    Dpo,
    /// `ratio_below_one` is the sequence-level gate, supplied by the caller.
    Dpop { lambda: f64, ratio_below_one: bool },
}

/// Analytic logit gradient at one completion position past the edit.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionGrad {
    pub pair_id: u64,
    pub position: usize,
    pub grad: Vec<f64>,
    pub target_grad: f64,
    pub max_offtarget_grad: f64,
    pub assumption_holds: bool,
    /// Ascent on the objective lowers the correct token's logit.
    pub wrong_way: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientReport {
    pub rows: Vec<PositionGrad>,
    /// Largest autodiff-vs-analytic gap over the single-substitution pairs,
    /// for the DPO form. `None` if no pair qualified.
    pub max_autodiff_deviation: Option<f64>,
}

#[derive(Serialize)]
struct CsvRow {
    pair_id: u64,
    position: usize,
    target_grad_sign: i8,
    max_offtarget_grad: f64,
    assumption_holds: bool,
    wrong_way: bool,
}

impl GradientReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_assumption_holds(&self) -> usize {
        self.rows.iter().filter(|r| r.assumption_holds).count()
    }

    /// Fraction of assumption-satisfying positions flagged wrong-way.
    pub fn wrong_way_fraction(&self) -> Option<f64> {
        let n = self.n_assumption_holds();
        (n > 0).then(|| {
            let bad = self
                .rows
                .iter()
                .filter(|r| r.assumption_holds && r.wrong_way)
                .count();
            bad as f64 / n as f64
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            let sign = if r.target_grad > 0.0 {
                1
            } else if r.target_grad < 0.0 {
                -1
            } else {
                0
            };
            w.serialize(CsvRow {
                pair_id: r.pair_id,
                position: r.position,
                target_grad_sign: sign,
                max_offtarget_grad: r.max_offtarget_grad,
                assumption_holds: r.assumption_holds,
                wrong_way: r.wrong_way,
            })?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "pair_id",
                "position",
                "target_grad_sign",
                "max_offtarget_grad",
                "assumption_holds",
                "wrong_way",
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Analytic logit gradients at every position after the first edit where
/// both completions carry the same token.
pub fn wrong_way_report(
    theta: &LMParams,
    pairs: &[PreferencePair],
    mode: GradientMode,
) -> Result<GradientReport> {
    let mut report = GradientReport::default();
    for pair in pairs {
        let Some(m) = first_difference(&pair.chosen, &pair.rejected) else {
            continue;
        };
        let (sw, sl) = completion_rows(theta, pair)?;
        let (c, r) = (pair.chosen.tokens(), pair.rejected.tokens());
        for k in m + 1..c.len().min(r.len()) {
            if c[k] != r[k] {
                continue;
            }
            let i = c[k] as usize;
            let rows = SoftmaxRowPair::new(sw.row(k).to_vec(), sl.row(k).to_vec(), i)?;
            let grad = match mode {
                GradientMode::Dpo => dpo_logit_grad(&rows)?,
                GradientMode::Dpop {
                    lambda,
                    ratio_below_one,
                } => dpop_logit_grad(&rows, lambda, ratio_below_one)?,
            };
            let max_offtarget_grad = grad
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, g)| *g)
                .fold(f64::NEG_INFINITY, f64::max);
            report.rows.push(PositionGrad {
                pair_id: pair.id,
                position: k,
                target_grad: grad[i],
                max_offtarget_grad,
                assumption_holds: check_sft_assumption(&rows)?,
                wrong_way: grad[i] < 0.0,
                grad,
            });
        }
        if pair.is_same_length() && c.iter().zip(r).filter(|(a, b)| a != b).count() == 1 {
            let dev = max_logit_grad_deviation(theta, pair)?;
            report.max_autodiff_deviation =
                Some(report.max_autodiff_deviation.map_or(dev, |d| d.max(dev)));
        }
    }
    Ok(report)
}
