//! Preference datasets at controlled edit distance.
//!
//! Two generators share one arithmetic grammar. `calc_chain` pairs a worked
//! solution with a copy whose intermediate result is corrupted, so the two
//! completions differ in one or two tokens. `multiple_choice` pairs the bare
//! answer with random wrong answers, which differ almost everywhere.

mod alphabet;
mod calc;
mod choice;
mod distance;
mod forge;
mod jsonl;
mod pair;
mod stats;

pub use alphabet::Alphabet;
pub use calc::{
    corrupt_intermediate, gen_calc_chain, parse_calc_chain, sample_problem, CalcProblem, Op, Step,
};
pub use choice::{gen_multiple_choice, pairs_from_multiple_choice, MultipleChoice};
pub use distance::{hamming_distance, levenshtein, normalized_edit_distance};
pub use forge::{derive_seed, forge, DataConfig, Generator};
pub use jsonl::{
    from_jsonl_line, read_jsonl, read_jsonl_from, to_jsonl_line, write_jsonl, write_jsonl_to,
};
pub use pair::{first_difference, PairMeta, PreferencePair};
pub use stats::{dataset_stats, DatasetStats, PairStats};
