use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::calc::sample_problem;
use super::{first_difference, Alphabet, PairMeta, PreferencePair};
use crate::error::{Error, Result};
use crate::model::TokenSeq;

/// A question with one correct and several wrong two-digit answers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultipleChoice {
    pub prompt: TokenSeq,
    pub correct: TokenSeq,
    pub incorrect: Vec<TokenSeq>,
}

/// The calc-chain question answered by its bare final value, with no
/// worked steps. Wrong answers are distinct values drawn uniformly from the
/// other 99.
pub fn gen_multiple_choice(
    seed: u64,
    n_steps: usize,
    operand_max: u32,
    n_incorrect: usize,
) -> Result<MultipleChoice> {
    if !(1..=99).contains(&n_incorrect) {
        return Err(Error::Config(format!(
            "n_incorrect must be in 1..=99, got {n_incorrect}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = sample_problem(rng.random(), n_steps, operand_max)?;
    let values = problem.values().expect("sampled problems stay in range");
    let value = values[values.len() - 1];

    let mut wrong: Vec<u32> = Vec::with_capacity(n_incorrect);
    while wrong.len() < n_incorrect {
        let v = rng.random_range(0..100);
        if v != value && !wrong.contains(&v) {
            wrong.push(v);
        }
    }
    Ok(MultipleChoice {
        prompt: Alphabet::encode_prompt(&problem.render_prompt())?,
        correct: Alphabet::encode(&format!("{value:02}"))?,
        incorrect: wrong
            .iter()
            .map(|v| Alphabet::encode(&format!("{v:02}")))
            .collect::<Result<_>>()?,
    })
}

/// One pair per wrong answer, all sharing the prompt and chosen answer.
///
/// Wrong answers equal to the correct one are dropped; the second return
/// value counts them. Pair ids run from `first_id`.
pub fn pairs_from_multiple_choice(
    first_id: u64,
    prompt: &TokenSeq,
    correct: &TokenSeq,
    incorrect: &[TokenSeq],
    meta: &PairMeta,
) -> Result<(Vec<PreferencePair>, usize)> {
    let mut pairs = Vec::with_capacity(incorrect.len());
    let mut skipped = 0;
    for wrong in incorrect {
        if wrong == correct {
            skipped += 1;
            continue;
        }
        let m = if wrong.len() == correct.len() {
            first_difference(correct, wrong)
        } else {
            None
        };
        pairs.push(PreferencePair::new(
            first_id + pairs.len() as u64,
            prompt.clone(),
            correct.clone(),
            wrong.clone(),
            m,
            meta.clone(),
        )?);
    }
    Ok((pairs, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_wrong_answers_make_three_pairs() {
        let q = gen_multiple_choice(5, 2, 9, 3).unwrap();
        let (pairs, skipped) =
            pairs_from_multiple_choice(10, &q.prompt, &q.correct, &q.incorrect, &PairMeta::default())
                .unwrap();
        assert_eq!((pairs.len(), skipped), (3, 0));
        assert!(pairs.iter().all(|p| p.chosen == q.correct && p.chosen != p.rejected));
        assert_eq!(pairs.iter().map(|p| p.id).collect::<Vec<_>>(), vec![10, 11, 12]);
    }

    #[test]
    fn duplicates_of_the_answer_are_skipped() {
        let prompt = Alphabet::encode_prompt("Q: 02 + 02 = ?").unwrap();
        let correct = Alphabet::encode("04").unwrap();
        let (pairs, skipped) = pairs_from_multiple_choice(
            0,
            &prompt,
            &correct,
            &[correct.clone(), correct.clone()],
            &PairMeta::default(),
        )
        .unwrap();
        assert!(pairs.is_empty());
        assert_eq!(skipped, 2);

        let (pairs, _) = pairs_from_multiple_choice(
            0,
            &prompt,
            &correct,
            &[Alphabet::encode("05").unwrap()],
            &PairMeta::default(),
        )
        .unwrap();
        assert_eq!(pairs[0].first_edit_index, Some(1));
    }

    #[test]
    fn answers_are_correct_and_deterministic() {
        for seed in 0..100 {
            let q = gen_multiple_choice(seed, 2, 9, 3).unwrap();
            let text = Alphabet::decode(&q.prompt).unwrap();
            let mut it = text[3..text.len() - 4].split(' ');
            let mut want: i64 = it.next().unwrap().parse().unwrap();
            while let (Some(op), Some(b)) = (it.next(), it.next()) {
                let b: i64 = b.parse().unwrap();
                want = match op {
                    "+" => want + b,
                    "−" => want - b,
                    _ => want * b,
                };
            }
            let got: i64 = Alphabet::decode(&q.correct).unwrap().parse().unwrap();
            assert_eq!(got, want);
            assert_eq!(q, gen_multiple_choice(seed, 2, 9, 3).unwrap());
        }
    }
}
