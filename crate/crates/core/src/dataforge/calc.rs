//! Arithmetic chains with a worked solution, and their corruption.
//!
//! ```text
//! prompt:  Q: 03 + 04 + 05 = ?
//! chosen:  03 + 04 = 07 ; 07 + 05 = 12 ; ans 12
//! ```
//!
//! Every value is rendered with two digits so that replacing one keeps the
//! completion length fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Alphabet;
use crate::error::{Error, Result};
use crate::model::TokenSeq;

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '−',
            Op::Mul => '×',
        }
    }

    fn from_symbol(c: char) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.symbol() == c)
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }
}

/// One `aa op bb = vv` step of a parsed chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub lhs: u32,
    pub op: Op,
    pub rhs: u32,
    pub result: u32,
    /// Token index of the first digit of `result`.
    pub result_pos: usize,
}

/// Operands and operators of a chain, evaluated left to right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalcProblem {
    pub operands: Vec<u32>,
    pub ops: Vec<Op>,
}

impl CalcProblem {
    /// Running values after each operator, or `None` if one leaves `[0, 99]`.
    pub fn values(&self) -> Option<Vec<u32>> {
        let mut acc = *self.operands.first()? as i64;
        let mut out = Vec::with_capacity(self.ops.len());
        for (op, &b) in self.ops.iter().zip(&self.operands[1..]) {
            acc = op.apply(acc, b as i64);
            if !(0..=99).contains(&acc) {
                return None;
            }
            out.push(acc as u32);
        }
        Some(out)
    }

    pub fn render_prompt(&self) -> String {
        let mut s = String::from("Q: ");
        s.push_str(&format!("{:02}", self.operands[0]));
        for (op, b) in self.ops.iter().zip(&self.operands[1..]) {
            s.push_str(&format!(" {} {:02}", op.symbol(), b));
        }
        s.push_str(" = ?");
        s
    }

    pub fn render_solution(&self) -> Option<String> {
        let values = self.values()?;
        let mut parts = Vec::with_capacity(values.len() + 1);
        let mut acc = self.operands[0];
        for ((op, b), v) in self.ops.iter().zip(&self.operands[1..]).zip(&values) {
            parts.push(format!("{acc:02} {} {b:02} = {v:02}", op.symbol()));
            acc = *v;
        }
        parts.push(format!("ans {acc:02}"));
        Some(parts.join(" ; "))
    }
}

/// Samples a chain of `n_steps` operations on operands in `1..=operand_max`,
/// rejecting draws whose running value leaves two digits.
pub fn gen_calc_chain(seed: u64, n_steps: usize, operand_max: u32) -> Result<(TokenSeq, TokenSeq)> {
    let problem = sample_problem(seed, n_steps, operand_max)?;
    let solution = problem.render_solution().expect("sampled problems stay in range");
    Ok((
        Alphabet::encode_prompt(&problem.render_prompt())?,
        Alphabet::encode(&solution)?,
    ))
}

pub fn sample_problem(seed: u64, n_steps: usize, operand_max: u32) -> Result<CalcProblem> {
    if n_steps < 2 {
        return Err(Error::Config(format!("n_steps must be >= 2, got {n_steps}")));
    }
    if !(1..=9).contains(&operand_max) {
        return Err(Error::Config(format!(
            "operand_max must be in 1..=9, got {operand_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let problem = CalcProblem {
            operands: (0..=n_steps).map(|_| rng.random_range(1..=operand_max)).collect(),
            ops: (0..n_steps).map(|_| Op::ALL[rng.random_range(0..3)]).collect(),
        };
        if problem.values().is_some() {
            return Ok(problem);
        }
    }
    Err(Error::Config(format!(
        "no in-range chain found for n_steps={n_steps}, operand_max={operand_max}"
    )))
}

fn two_digits(s: &str) -> Option<u32> {
    (s.len() == 2 && s.bytes().all(|b| b.is_ascii_digit())).then(|| s.parse().ok())?
}

/// Parses a rendered solution and checks its arithmetic.
///
/// Returns the steps and the final answer. Each step must start from the
/// previous result.
pub fn parse_calc_chain(completion: &TokenSeq) -> Result<(Vec<Step>, u32)> {
    let text = Alphabet::decode(completion)?;
    let bad = |why: &str| Error::Contract(format!("not a calc chain ({why}): {text:?}"));
    let parts: Vec<&str> = text.split(" ; ").collect();
    let (last, eqs) = parts.split_last().ok_or_else(|| bad("empty"))?;
    let answer = last
        .strip_prefix("ans ")
        .and_then(two_digits)
        .ok_or_else(|| bad("missing answer"))?;

    let mut steps = Vec::with_capacity(eqs.len());
    let mut offset = 0;
    for eq in eqs {
        let chars: Vec<char> = eq.chars().collect();
        let field = |a: usize, b: usize| chars.get(a..b).map(|c| c.iter().collect::<String>());
        let lhs = field(0, 2).as_deref().and_then(two_digits);
        let op = chars.get(3).copied().and_then(Op::from_symbol);
        let rhs = field(5, 7).as_deref().and_then(two_digits);
        let result = field(10, 12).as_deref().and_then(two_digits);
        let shape = chars.len() == 12
            && chars[2] == ' '
            && chars[4] == ' '
            && field(7, 10).as_deref() == Some(" = ");
        let (Some(lhs), Some(op), Some(rhs), Some(result), true) = (lhs, op, rhs, result, shape)
        else {
            return Err(bad("malformed step"));
        };
        if op.apply(lhs as i64, rhs as i64) != result as i64 {
            return Err(bad("wrong arithmetic"));
        }
        if let Some(prev) = steps.last().map(|s: &Step| s.result) {
            if prev != lhs {
                return Err(bad("broken chain"));
            }
        }
        steps.push(Step {
            lhs,
            op,
            rhs,
            result,
            result_pos: offset + 10,
        });
        offset += chars.len() + 3;
    }
    if steps.last().map(|s| s.result) != Some(answer) {
        return Err(bad("answer does not match last step"));
    }
    Ok((steps, answer))
}

/// Replaces the result of one non-final step with a different two-digit
/// value. Later text, including the answer, still uses the original value.
///
/// Three times in four only the ones digit changes; otherwise the value is
/// redrawn uniformly from the other 99.
pub fn corrupt_intermediate(chosen: &TokenSeq, seed: u64) -> Result<(TokenSeq, usize)> {
    let (steps, _) = parse_calc_chain(chosen)?;
    if steps.len() < 2 {
        return Err(Error::Contract(
            "chain has no intermediate value to corrupt".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = steps[rng.random_range(0..steps.len() - 1)];
    let old = step.result;
    let new = if rng.random_bool(0.75) {
        let ones = (old % 10 + rng.random_range(1..10)) % 10;
        old / 10 * 10 + ones
    } else {
        (old + rng.random_range(1..100)) % 100
    };
    let mut rejected = chosen.clone();
    let digits = Alphabet::encode(&format!("{new:02}"))?;
    rejected.0[step.result_pos..step.result_pos + 2].copy_from_slice(digits.tokens());
    let m = super::first_difference(chosen, &rejected).expect("value changed");
    Ok((rejected, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_chain() {
        let p = CalcProblem {
            operands: vec![3, 4, 5],
            ops: vec![Op::Add, Op::Add],
        };
        assert_eq!(p.render_prompt(), "Q: 03 + 04 + 05 = ?");
        assert_eq!(
            p.render_solution().unwrap(),
            "03 + 04 = 07 ; 07 + 05 = 12 ; ans 12"
        );
        let mixed = CalcProblem {
            operands: vec![9, 2, 7, 3],
            ops: vec![Op::Sub, Op::Mul, Op::Add],
        };
        assert_eq!(
            mixed.render_solution().unwrap(),
            "09 − 02 = 07 ; 07 × 07 = 49 ; 49 + 03 = 52 ; ans 52"
        );
        let neg = CalcProblem {
            operands: vec![2, 5, 1],
            ops: vec![Op::Sub, Op::Add],
        };
        assert_eq!(neg.values(), None);
    }

    #[test]
    fn generated_chains_parse_and_are_deterministic() {
        for seed in 0..200 {
            let (prompt, chosen) = gen_calc_chain(seed, 3, 9).unwrap();
            assert_eq!(prompt.tokens()[0], Alphabet::BOS);
            let (steps, _) = parse_calc_chain(&chosen).unwrap();
            assert_eq!(steps.len(), 3);
            assert_eq!(gen_calc_chain(seed, 3, 9).unwrap(), (prompt, chosen));
        }
    }

    #[test]
    fn bad_generator_arguments() {
        assert!(gen_calc_chain(0, 1, 9).is_err());
        assert!(gen_calc_chain(0, 2, 10).is_err());
        assert!(gen_calc_chain(0, 2, 0).is_err());
    }

    #[test]
    fn parser_rejects_wrong_arithmetic() {
        let bad = Alphabet::encode("03 + 04 = 08 ; 08 + 05 = 13 ; ans 13").unwrap();
        assert!(parse_calc_chain(&bad).is_err());
        let broken = Alphabet::encode("03 + 04 = 07 ; 06 + 05 = 11 ; ans 11").unwrap();
        assert!(parse_calc_chain(&broken).is_err());
    }

    #[test]
    fn corruption_touches_only_the_chosen_value() {
        let chosen = Alphabet::encode("03 + 04 = 07 ; 07 + 05 = 12 ; ans 12").unwrap();
        for seed in 0..50 {
            let (rejected, m) = corrupt_intermediate(&chosen, seed).unwrap();
            assert_eq!(rejected.len(), chosen.len());
            let diff: Vec<usize> = (0..chosen.len())
                .filter(|&i| chosen.tokens()[i] != rejected.tokens()[i])
                .collect();
            assert!(!diff.is_empty() && diff.iter().all(|&i| i == 10 || i == 11));
            assert_eq!(m, diff[0]);
            assert_eq!(corrupt_intermediate(&chosen, seed).unwrap(), (rejected, m));
        }
        let single = Alphabet::encode("03 + 04 = 07 ; ans 07").unwrap();
        assert!(matches!(
            corrupt_intermediate(&single, 0),
            Err(Error::Contract(_))
        ));
    }
}
