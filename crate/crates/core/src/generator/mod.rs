//! Rule search for the pricing subproblem.
//!
//! A recurrent policy emits a rule as a token sequence in pre-order: a body
//! predicate, then one relation token for each previously chosen predicate,
//! then the next predicate, and so on until the end token or the length cap.
//! Dynamic masks make every sampled sequence decode to a valid rule. The
//! policy is trained with the risk-seeking policy gradient on rewards equal
//! to minus the dual price of the decoded rule.

mod brute;
mod checkpoint;
mod policy;
mod search;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use brute::{brute_force_subproblem, enumerate_rules, BruteForceResult, DEFAULT_BUDGET};
pub use checkpoint::{load_policy, save_policy, NamedArray, PolicyCheckpoint};
pub use policy::{PolicyDims, PolicyParams, Rollout};
pub use search::{
    quantile_nearest_rank, risk_seeking_gradient, risk_seeking_update, search_policy, solve_subproblem, PolicyInit,
    RiskSeekingStats, RuleScorer, SubproblemConfig, SubproblemResult, SubproblemStop, DUPLICATE_PENALTY,
};

use crate::logic::{Pred, PredicateLibrary, Rule, TemporalRelation};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("malformed token sequence: {0}")]
    MalformedTokenSequence(String),
    #[error("batch of {n} rollouts is smaller than ceil(1/epsilon) = {need}")]
    BatchTooSmall { n: usize, need: usize },
    #[error("epsilon must lie in (0, 1], got {0}")]
    BadEpsilon(f64),
    #[error("{0} candidate rules exceed the enumeration budget of {1}")]
    BudgetExceeded(f64, f64),
    #[error("policy vocabulary does not match the predicate library")]
    VocabMismatch,
    #[error("corrupt policy checkpoint: {0}")]
    CorruptFile(String),
    #[error("invalid generator configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tlpp(#[from] crate::tlpp::TlppError),
}

/// Output of one policy step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Pred(Pred),
    Rel(TemporalRelation),
    End,
}

pub(crate) fn rel_index(r: TemporalRelation) -> usize {
    match r {
        TemporalRelation::Before => 0,
        TemporalRelation::After => 1,
        TemporalRelation::Equal => 2,
        TemporalRelation::None => 3,
    }
}

/// Predicate tokens (one per library predicate), four relation tokens and an
/// end token, plus a start symbol that is only ever an input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    n_preds: usize,
    eligible: Vec<bool>,
    fingerprint: String,
}

impl TokenVocab {
    pub fn new(lib: &PredicateLibrary) -> Self {
        Self {
            n_preds: lib.len(),
            eligible: (0..lib.len()).map(|p| !lib.is_head(p)).collect(),
            fingerprint: lib.fingerprint(),
        }
    }

    pub fn n_preds(&self) -> usize {
        self.n_preds
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// May `p` appear in a rule body?
    pub fn eligible(&self, p: Pred) -> bool {
        self.eligible.get(p).copied().unwrap_or(false)
    }

    /// Rows of the input embedding table.
    pub fn n_inputs(&self) -> usize {
        self.n_preds + 6
    }

    /// Width of the predicate head: predicates plus the end token.
    pub fn n_pred_outputs(&self) -> usize {
        self.n_preds + 1
    }

    pub(crate) fn input_index(&self, t: Token) -> usize {
        match t {
            Token::Pred(p) => p,
            Token::Rel(r) => self.n_preds + rel_index(r),
            Token::End => self.n_preds + 4,
        }
    }

    pub(crate) fn bos(&self) -> usize {
        self.n_preds + 5
    }
}

/// Whether a rollout may stop early with the end token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// End token allowed once the body has at least one predicate.
    #[default]
    EndToken,
    /// Always run to `max_len` body predicates (or until the library runs out).
    Fixed,
}

/// Shape of the rules a rollout may produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutSpec {
    pub head: Pred,
    pub max_len: usize,
    pub mode: LengthMode,
    /// Body predicates forced at the start; they carry no log-probability.
    pub fixed_prefix: Vec<Pred>,
}

impl RolloutSpec {
    pub fn new(head: Pred, max_len: usize) -> Self {
        Self {
            head,
            max_len,
            mode: LengthMode::EndToken,
            fixed_prefix: Vec::new(),
        }
    }

    pub fn validate(&self, vocab: &TokenVocab) -> Result<(), GenError> {
        if self.max_len == 0 {
            return Err(GenError::BadConfig("max_len must be at least 1".into()));
        }
        if self.fixed_prefix.len() > self.max_len {
            return Err(GenError::BadConfig("fixed prefix longer than max_len".into()));
        }
        for (i, &p) in self.fixed_prefix.iter().enumerate() {
            if !vocab.eligible(p) || self.fixed_prefix[..i].contains(&p) {
                return Err(GenError::BadConfig(format!("bad fixed prefix predicate #{p}")));
            }
        }
        if !(0..vocab.n_preds()).any(|p| vocab.eligible(p)) {
            return Err(GenError::BadConfig("library has no body predicates".into()));
        }
        Ok(())
    }
}

/// What the next step of a rollout decides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Slot {
    /// Choose a body predicate (or end); `Some` if forced by the prefix.
    Predicate(Option<Pred>),
    /// Relation between the earlier predicate `query` and the newest one.
    Relation { query: Pred },
    /// Rollout complete.
    Finished,
}

/// Mask bookkeeping during generation.
#[derive(Debug, Clone)]
pub struct MaskState {
    chosen: Vec<bool>,
    body: Vec<Pred>,
    pending: VecDeque<Pred>,
    done: bool,
}

impl MaskState {
    pub fn new(vocab: &TokenVocab) -> Self {
        Self {
            chosen: vec![false; vocab.n_preds()],
            body: Vec::new(),
            pending: VecDeque::new(),
            done: false,
        }
    }

    pub fn body(&self) -> &[Pred] {
        &self.body
    }

    pub fn is_chosen(&self, p: Pred) -> bool {
        self.chosen[p]
    }

    fn any_available(&self, vocab: &TokenVocab) -> bool {
        (0..vocab.n_preds()).any(|p| vocab.eligible(p) && !self.chosen[p])
    }

    pub(crate) fn slot(&self, vocab: &TokenVocab, spec: &RolloutSpec) -> Slot {
        if self.done {
            return Slot::Finished;
        }
        if let Some(&q) = self.pending.front() {
            return Slot::Relation { query: q };
        }
        if self.body.len() >= spec.max_len || !self.any_available(vocab) {
            return Slot::Finished;
        }
        match spec.fixed_prefix.get(self.body.len()) {
            Some(&p) => Slot::Predicate(Some(p)),
            None => Slot::Predicate(None),
        }
    }

    /// Allowed outputs of the predicate head (predicates, then end).
    pub(crate) fn predicate_mask(&self, vocab: &TokenVocab, spec: &RolloutSpec) -> Vec<bool> {
        let mut m: Vec<bool> = (0..vocab.n_preds())
            .map(|p| vocab.eligible(p) && !self.chosen[p])
            .collect();
        m.push(!self.body.is_empty() && spec.mode == LengthMode::EndToken);
        m
    }

    pub(crate) fn push_pred(&mut self, p: Pred) {
        self.chosen[p] = true;
        self.pending = self.body.iter().copied().collect();
        self.body.push(p);
    }

    pub(crate) fn push_rel(&mut self) -> Pred {
        self.pending.pop_front().expect("relation slot")
    }

    pub(crate) fn finish(&mut self) {
        self.done = true;
    }
}

/// Turns a token sequence into a canonical rule. A relation token following
/// predicate `i` binds the earlier predicate `j` (in selection order) to `i`
/// as `rel(j, i)`. A trailing end token is optional.
pub fn decode_tokens(tokens: &[Token], head: Pred, lib: &PredicateLibrary) -> Result<Rule, GenError> {
    let bad = |m: String| Err(GenError::MalformedTokenSequence(m));
    let mut body: Vec<Pred> = Vec::new();
    let mut rels = Vec::new();
    let mut pending: VecDeque<Pred> = VecDeque::new();
    let mut newest = None;
    let mut ended = false;
    for (i, &t) in tokens.iter().enumerate() {
        if ended {
            return bad(format!("token {i} after end"));
        }
        match (t, pending.front().copied()) {
            (Token::Rel(r), Some(q)) => {
                pending.pop_front();
                rels.push(((q, newest.expect("newest set")), r));
            }
            (Token::Rel(_), None) => return bad(format!("relation token {i} in a predicate slot")),
            (_, Some(_)) => return bad(format!("token {i} must be a relation")),
            (Token::Pred(p), None) => {
                if p >= lib.len() {
                    return bad(format!("predicate #{p} outside library"));
                }
                if body.contains(&p) {
                    return bad(format!("predicate `{}` repeated", lib.name(p)));
                }
                pending = body.iter().copied().collect();
                newest = Some(p);
                body.push(p);
            }
            (Token::End, None) => {
                if body.is_empty() {
                    return bad("end token before any predicate".into());
                }
                ended = true;
            }
        }
    }
    if !pending.is_empty() {
        return bad("missing relation tokens".into());
    }
    Rule::new(head, body, rels)
        .map(|r| r.canonicalize())
        .map_err(|e| GenError::MalformedTokenSequence(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use TemporalRelation::*;

    fn lib() -> PredicateLibrary {
        PredicateLibrary::new(["A", "B", "C", "Y"], ["Y"]).unwrap()
    }

    #[test]
    fn decode_examples() {
        let l = lib();
        let r = decode_tokens(&[Token::Pred(0), Token::Pred(1), Token::Rel(Before), Token::End], 3, &l).unwrap();
        assert_eq!(r.to_dsl(&l), "Y <- A ^ B : A before B");
        let r = decode_tokens(
            &[
                Token::Pred(0),
                Token::Pred(1),
                Token::Rel(None),
                Token::Pred(2),
                Token::Rel(Before),
                Token::Rel(Equal),
            ],
            3,
            &l,
        )
        .unwrap();
        assert_eq!(r.relation(0, 1), Some(None));
        assert_eq!(r.relation(0, 2), Some(Before));
        assert_eq!(r.relation(1, 2), Some(Equal));
        assert_eq!(decode_tokens(&[Token::Pred(2)], 3, &l).unwrap(), Rule::unary(3, 2));
    }

    #[test]
    fn decode_rejects_malformed() {
        let l = lib();
        let cases: &[&[Token]] = &[
            &[Token::Pred(0), Token::Pred(0)],
            &[Token::End],
            &[Token::Rel(Before)],
            &[Token::Pred(0), Token::Pred(1)],
            &[Token::Pred(0), Token::Pred(1), Token::Pred(2)],
            &[Token::Pred(0), Token::End, Token::Pred(1)],
            &[Token::Pred(9)],
        ];
        for c in cases {
            assert!(matches!(decode_tokens(c, 3, &l), Err(GenError::MalformedTokenSequence(_))), "{c:?}");
        }
    }

    #[test]
    fn masks_forbid_chosen_and_heads() {
        let l = lib();
        let v = TokenVocab::new(&l);
        let spec = RolloutSpec::new(3, 3);
        let mut m = MaskState::new(&v);
        // end is unavailable before the first predicate; head Y never available
        assert_eq!(m.predicate_mask(&v, &spec), vec![true, true, true, false, false]);
        m.push_pred(0);
        assert_eq!(m.predicate_mask(&v, &spec), vec![false, true, true, false, true]);
        let fixed = RolloutSpec {
            mode: LengthMode::Fixed,
            ..spec.clone()
        };
        assert!(!m.predicate_mask(&v, &fixed)[4]);
        m.push_pred(1);
        assert_eq!(m.slot(&v, &spec), Slot::Relation { query: 0 });
    }
}
