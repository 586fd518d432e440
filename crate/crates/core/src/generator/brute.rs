//! Exhaustive rule enumeration, used as an oracle for the policy search.

use super::{GenError, RuleScorer};
use crate::logic::{Pred, PredicateLibrary, Rule, TemporalRelation};

/// Largest candidate count [`brute_force_subproblem`] accepts by default.
pub const DEFAULT_BUDGET: f64 = 2e6;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub rule: Rule,
    pub reward: f64,
    pub n_candidates: usize,
}

/// Every canonical rule with `1..=max_len` body predicates drawn from the
/// non-head predicates, each pair carrying one of `Before(u, v)`,
/// `Before(v, u)`, `Equal`, `None`.
pub fn enumerate_rules(lib: &PredicateLibrary, head: Pred, max_len: usize) -> Vec<Rule> {
    let preds = lib.body_predicates();
    let mut out = Vec::new();
    let mut subset = Vec::new();
    subsets(&preds, 0, max_len, &mut subset, &mut |body| {
        let pairs: Vec<(Pred, Pred)> = (0..body.len())
            .flat_map(|i| (i + 1..body.len()).map(move |j| (i, j)))
            .map(|(i, j)| (body[i], body[j]))
            .collect();
        let total = 4usize.pow(pairs.len() as u32);
        for code in 0..total {
            let mut c = code;
            let rels = pairs.iter().map(|&(u, v)| {
                let choice = c % 4;
                c /= 4;
                match choice {
                    0 => ((u, v), TemporalRelation::Before),
                    1 => ((v, u), TemporalRelation::Before),
                    2 => ((u, v), TemporalRelation::Equal),
                    _ => ((u, v), TemporalRelation::None),
                }
            });
            let rule = Rule::new(head, body.to_vec(), rels.collect::<Vec<_>>()).expect("enumerated rule is valid");
            out.push(rule.canonicalize());
        }
    });
    out
}

fn subsets(preds: &[Pred], start: usize, max_len: usize, cur: &mut Vec<Pred>, f: &mut impl FnMut(&[Pred])) {
    for i in start..preds.len() {
        cur.push(preds[i]);
        f(cur);
        if cur.len() < max_len {
            subsets(preds, i + 1, max_len, cur, f);
        }
        cur.pop();
    }
}

/// Scores every rule from [`enumerate_rules`] and returns the best; ties go
/// to the lexicographically smallest rule text.
pub fn brute_force_subproblem(
    scorer: &dyn RuleScorer,
    lib: &PredicateLibrary,
    head: Pred,
    max_len: usize,
    budget: f64,
) -> Result<BruteForceResult, GenError> {
    if max_len == 0 {
        return Err(GenError::BadConfig("max_len must be at least 1".into()));
    }
    let n = lib.body_predicates().len() as f64;
    let pairs = (max_len * (max_len - 1) / 2) as f64;
    let size = n.powf(max_len as f64) * 4f64.powf(pairs);
    if size > budget {
        return Err(GenError::BudgetExceeded(size, budget));
    }
    let rules = enumerate_rules(lib, head, max_len);
    let n_candidates = rules.len();
    let mut best: Option<(Rule, f64, String)> = None;
    for rule in rules {
        let r = scorer.reward(&rule)?;
        let text = rule.to_dsl(lib);
        let better = match &best {
            None => true,
            Some((_, v, t)) => r > *v || (r == *v && text < *t),
        };
        if better {
            best = Some((rule, r, text));
        }
    }
    let (rule, reward, _) = best.ok_or_else(|| GenError::BadConfig("library has no body predicates".into()))?;
    Ok(BruteForceResult {
        rule,
        reward,
        n_candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn two_predicates_give_six_rules() {
        let l = PredicateLibrary::new(["A", "B", "Y"], ["Y"]).unwrap();
        let rules = enumerate_rules(&l, 2, 2);
        assert_eq!(rules.len(), 6);
        let set: HashSet<_> = rules.iter().collect();
        assert_eq!(set.len(), 6);
        let text: HashSet<String> = rules.iter().map(|r| r.to_dsl(&l)).collect();
        for want in [
            "Y <- A",
            "Y <- B",
            "Y <- A ^ B : A before B",
            "Y <- A ^ B : B before A",
            "Y <- A ^ B : A equal B",
            "Y <- A ^ B",
        ] {
            assert!(text.contains(want), "{want} missing from {text:?}");
        }
    }

    #[test]
    fn counts_match_combinatorics() {
        let l = PredicateLibrary::new(["A", "B", "C", "D", "E", "Y"], ["Y"]).unwrap();
        // C(5,1) + C(5,2) 4 + C(5,3) 4^3
        assert_eq!(enumerate_rules(&l, 5, 3).len(), 5 + 10 * 4 + 10 * 64);
        assert!(enumerate_rules(&l, 5, 3).iter().all(Rule::is_canonical));
    }

    #[test]
    fn single_length_is_argmax_over_predicates() {
        let l = PredicateLibrary::new(["A", "B", "C", "Y"], ["Y"]).unwrap();
        let s = |r: &Rule| [0.3, 0.9, 0.1][r.body()[0]];
        let res = brute_force_subproblem(&s, &l, 3, 1, DEFAULT_BUDGET).unwrap();
        assert_eq!(res.rule, Rule::unary(3, 1));
        assert_eq!(res.reward, 0.9);
        assert_eq!(res.n_candidates, 3);
    }

    #[test]
    fn ties_break_on_text() {
        let l = PredicateLibrary::new(["A", "B", "Y"], ["Y"]).unwrap();
        let s = |_: &Rule| 1.0;
        let res = brute_force_subproblem(&s, &l, 2, 2, DEFAULT_BUDGET).unwrap();
        assert_eq!(res.rule.to_dsl(&l), "Y <- A");
    }

    #[test]
    fn budget_is_enforced() {
        let names: Vec<String> = (0..30).map(|i| format!("P{i}")).chain(["Y".to_string()]).collect();
        let l = PredicateLibrary::new(names, vec!["Y".to_string()]).unwrap();
        let s = |_: &Rule| 0.0;
        assert!(matches!(
            brute_force_subproblem(&s, &l, 30, 4, DEFAULT_BUDGET),
            Err(GenError::BudgetExceeded(..))
        ));
    }
}
