use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::calc::{corrupt_intermediate, gen_calc_chain};
use super::choice::{gen_multiple_choice, pairs_from_multiple_choice};
use super::{PairMeta, PreferencePair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Worked arithmetic with one corrupted intermediate result.
    CalcChain,
    /// Bare final answers against random wrong ones.
    MultipleChoice,
}

impl Generator {
    pub const ALL: [Generator; 2] = [Generator::CalcChain, Generator::MultipleChoice];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::CalcChain => "calc_chain",
            Generator::MultipleChoice => "multiple_choice",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Generator::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Generator::ALL.iter().map(|g| g.as_str()).collect();
                Error::Config(format!(
                    "unknown generator {s:?}; valid generators: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Dataset recipe. `path`, when set, names an existing JSONL file to use
/// instead of generating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: Generator,
    pub seed: u64,
    pub n_pairs: usize,
    pub n_steps: usize,
    pub operand_max: u32,
    /// Wrong answers per multiple-choice question.
    pub n_incorrect: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Generator::CalcChain,
            seed: 0,
            n_pairs: 1000,
            n_steps: 2,
            operand_max: 9,
            n_incorrect: 3,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::Config(format!("n_steps must be >= 2, got {}", self.n_steps)));
        }
        if !(1..=9).contains(&self.operand_max) {
            return Err(Error::Config(format!(
                "operand_max must be in 1..=9, got {}",
                self.operand_max
            )));
        }
        if !(1..=99).contains(&self.n_incorrect) {
            return Err(Error::Config(format!(
                "n_incorrect must be in 1..=99, got {}",
                self.n_incorrect
            )));
        }
        Ok(())
    }
}

/// Seed for item `i` of a stream rooted at `master` (splitmix64 finalizer).
pub fn derive_seed(master: u64, i: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the dataset described by `cfg`. Pair ids are `0..n_pairs`.
pub fn forge(cfg: &DataConfig) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    match cfg.generator {
        Generator::CalcChain => {
            for i in 0..cfg.n_pairs as u64 {
                let seed = derive_seed(cfg.seed, i);
                let (prompt, chosen) = gen_calc_chain(seed, cfg.n_steps, cfg.operand_max)?;
                let (rejected, m) = corrupt_intermediate(&chosen, derive_seed(seed, 1))?;
                let meta = PairMeta {
                    generator: cfg.generator.to_string(),
                    seed,
                };
                pairs.push(PreferencePair::new(i, prompt, chosen, rejected, Some(m), meta)?);
            }
        }
        Generator::MultipleChoice => {
            let mut q = 0;
            while pairs.len() < cfg.n_pairs {
                let seed = derive_seed(cfg.seed, q);
                q += 1;
                let mc = gen_multiple_choice(seed, cfg.n_steps, cfg.operand_max, cfg.n_incorrect)?;
                let meta = PairMeta {
                    generator: cfg.generator.to_string(),
                    seed,
                };
                let (batch, _) = pairs_from_multiple_choice(
                    pairs.len() as u64,
                    &mc.prompt,
                    &mc.correct,
                    &mc.incorrect,
                    &meta,
                )?;
                pairs.extend(batch);
            }
            pairs.truncate(cfg.n_pairs);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataforge::{dataset_stats, parse_calc_chain};

    #[test]
    fn generator_names() {
        for g in Generator::ALL {
            assert_eq!(g.as_str().parse::<Generator>().unwrap(), g);
        }
        let msg = "arc".parse::<Generator>().unwrap_err().to_string();
        assert!(msg.contains("calc_chain") && msg.contains("multiple_choice"));
    }

    #[test]
    fn calc_chain_dataset_is_low_distance() {
        let pairs = forge(&DataConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1000);
        let stats = dataset_stats(&pairs).unwrap();
        assert!(stats.mean_norm_edit_distance <= 0.10, "{stats:?}");
        assert!(stats.fraction_hamming1 >= 0.5);
        for p in &pairs {
            let m = p.first_edit_index.unwrap();
            let (steps, _) = parse_calc_chain(&p.chosen).unwrap();
            // Edit lands before the final answer; everything after the value matches.
            let answer_start = p.chosen.len() - 2;
            assert!(m < answer_start);
            assert_eq!(p.chosen.tokens()[m + 2..], p.rejected.tokens()[m + 2..]);
            assert!(steps.iter().any(|s| s.result_pos == m || s.result_pos + 1 == m));
        }
    }

    #[test]
    fn multiple_choice_dataset_is_high_distance() {
        let cfg = DataConfig {
            generator: Generator::MultipleChoice,
            n_pairs: 600,
            ..DataConfig::default()
        };
        let pairs = forge(&cfg).unwrap();
        assert_eq!(pairs.len(), 600);
        let stats = dataset_stats(&pairs).unwrap();
        assert!(stats.mean_norm_edit_distance >= 0.5, "{stats:?}");
        assert!(pairs.windows(2).all(|w| w[1].id == w[0].id + 1));
    }

    #[test]
    fn forging_is_deterministic() {
        let cfg = DataConfig {
            n_pairs: 50,
            seed: 9,
            ..DataConfig::default()
        };
        assert_eq!(forge(&cfg).unwrap(), forge(&cfg).unwrap());
        let other = DataConfig { seed: 10, ..cfg.clone() };
        assert_ne!(forge(&cfg).unwrap(), forge(&other).unwrap());
    }

    #[test]
    fn derived_seeds_spread() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(0, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
    }
}
