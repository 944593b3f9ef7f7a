//! Boolean label rules over the five causal latent bits.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    /// Latent bit `z_k`, 1-based as in the rule table.
    Var(u8),
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

use Formula::*;

fn z(k: u8) -> Formula {
    Var(k)
}

fn not(f: Formula) -> Formula {
    Not(Box::new(f))
}

impl Formula {
    /// Evaluate against `z_1..z_5` (`bits[0]` is `z_1`).
    pub fn eval(&self, bits: &[bool]) -> bool {
        match self {
            Var(k) => bits[*k as usize - 1],
            Not(f) => !f.eval(bits),
            And(fs) => fs.iter().all(|f| f.eval(bits)),
            Or(fs) => fs.iter().any(|f| f.eval(bits)),
        }
    }

    /// Number of variable occurrences.
    pub fn literals(&self) -> usize {
        match self {
            Var(_) => 1,
            Not(f) => f.literals(),
            And(fs) | Or(fs) => fs.iter().map(Formula::literals).sum(),
        }
    }

    fn max_var(&self) -> u8 {
        match self {
            Var(k) => *k,
            Not(f) => f.max_var(),
            And(fs) | Or(fs) => fs.iter().map(Formula::max_var).max().unwrap_or(0),
        }
    }

    fn fmt_operand(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            And(_) | Or(_) => write!(f, "({self})"),
            _ => write!(f, "{self}"),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var(k) => write!(f, "z{k}"),
            Not(inner) => {
                write!(f, "NOT ")?;
                inner.fmt_operand(f)
            }
            And(fs) | Or(fs) => {
                let op = if matches!(self, And(_)) { " AND " } else { " OR " };
                for (i, x) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "{op}")?;
                    }
                    x.fmt_operand(f)?;
                }
                Ok(())
            }
        }
    }
}

/// The frozen 15-rule table. Only rule 1 is fixed externally; the others
/// are ours, each over two or three literals of `z_1..z_5`.
pub fn rule_table() -> Vec<Formula> {
    vec![
        Or(vec![not(And(vec![z(1), z(3)])), z(4)]),
        And(vec![z(1), z(2)]),
        Or(vec![z(2), z(3)]),
        And(vec![z(1), not(z(5))]),
        And(vec![z(3), z(4), not(z(2))]),
        Or(vec![z(4), z(5)]),
        And(vec![not(z(1)), z(2)]),
        And(vec![Or(vec![z(1), z(5)]), z(3)]),
        And(vec![z(2), z(5)]),
        not(Or(vec![z(3), z(4)])),
        Or(vec![z(1), And(vec![z(2), z(4)])]),
        Or(vec![not(z(5)), z(3)]),
        And(vec![z(4), not(z(3))]),
        And(vec![Or(vec![z(2), z(4)]), not(z(1))]),
        And(vec![z(5), Or(vec![z(1), z(3)])]),
    ]
}

/// Check a table is usable for the toy generator.
pub fn validate_table(table: &[Formula]) -> Result<(), String> {
    if table.len() != 15 {
        return Err(format!("rule table needs 15 entries, got {}", table.len()));
    }
    for (i, r) in table.iter().enumerate() {
        let m = r.max_var();
        if m == 0 || m > 5 {
            return Err(format!("rule {} references z{m}; only z1..z5 are allowed", i + 1));
        }
    }
    Ok(())
}

/// Apply every rule to the first five bits of `z` (bit `s` = `z_{s+1}`).
pub fn labels_from_latents(table: &[Formula], z: u16) -> u16 {
    let bits: Vec<bool> = (0..5).map(|s| z >> s & 1 == 1).collect();
    table
        .iter()
        .enumerate()
        .fold(0u16, |acc, (i, r)| if r.eval(&bits) { acc | 1 << i } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_rule_matches_published_form() {
        let r = &rule_table()[0];
        assert_eq!(r.to_string(), "NOT (z1 AND z3) OR z4");
        // z1=1, z3=1, z4=0 -> y1 = 0
        assert!(!r.eval(&[true, false, true, false, false]));
        assert!(r.eval(&[true, false, true, true, false]));
        assert!(r.eval(&[false, false, true, false, false]));
    }

    #[test]
    fn table_is_valid_and_small() {
        let t = rule_table();
        validate_table(&t).unwrap();
        for r in &t {
            assert!((2..=3).contains(&r.literals()), "{r}");
        }
    }

    #[test]
    fn rules_are_not_constant() {
        for r in rule_table() {
            let outs: Vec<bool> = (0..32u16)
                .map(|z| r.eval(&(0..5).map(|s| z >> s & 1 == 1).collect::<Vec<_>>()))
                .collect();
            assert!(outs.iter().any(|&b| b) && outs.iter().any(|&b| !b), "{r}");
        }
    }
}
