use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::distance::{hamming_distance, normalized_edit_distance};
use super::PreferencePair;
use crate::error::{Error, Result};

/// Per-pair row of the stats CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairStats {
    pub pair_id: u64,
    pub len_chosen: usize,
    pub len_rejected: usize,
    /// Empty when the completions differ in length.
    pub hamming: Option<usize>,
    pub norm_edit_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub n_pairs: usize,
    pub mean_norm_edit_distance: f64,
    pub median_norm_edit_distance: f64,
    /// Over chosen and rejected completions together.
    pub mean_completion_length: f64,
    pub fraction_hamming1: f64,
    pub per_pair: Vec<PairStats>,
}

pub fn dataset_stats(pairs: &[PreferencePair]) -> Result<DatasetStats> {
    if pairs.is_empty() {
        return Err(Error::Contract("statistics of an empty dataset".into()));
    }
    let per_pair = pairs
        .iter()
        .map(|p| {
            Ok(PairStats {
                pair_id: p.id,
                len_chosen: p.chosen.len(),
                len_rejected: p.rejected.len(),
                hamming: hamming_distance(&p.chosen, &p.rejected).ok(),
                norm_edit_distance: normalized_edit_distance(&p.chosen, &p.rejected)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_pair.len() as f64;
    let mut dists: Vec<f64> = per_pair.iter().map(|s| s.norm_edit_distance).collect();
    let mean = dists.iter().sum::<f64>() / n;
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / 2.0
    };
    let total_len: usize = per_pair.iter().map(|s| s.len_chosen + s.len_rejected).sum();
    let hamming1 = per_pair.iter().filter(|s| s.hamming == Some(1)).count();
    Ok(DatasetStats {
        n_pairs: per_pair.len(),
        mean_norm_edit_distance: mean,
        median_norm_edit_distance: median,
        mean_completion_length: total_len as f64 / (2.0 * n),
        fraction_hamming1: hamming1 as f64 / n,
        per_pair,
    })
}

impl DatasetStats {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.per_pair {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// One header row and one row of the aggregate figures.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "n_pairs",
            "mean_norm_edit_distance",
            "median_norm_edit_distance",
            "mean_completion_length",
            "fraction_hamming1",
        ])?;
        w.serialize((
            self.n_pairs,
            self.mean_norm_edit_distance,
            self.median_norm_edit_distance,
            self.mean_completion_length,
            self.fraction_hamming1,
        ))?;
        w.flush().map_err(|e| Error::Csv(e.into()))
    }

    pub fn save_summary_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_summary_csv(std::io::BufWriter::new(file))
    }
}
