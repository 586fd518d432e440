//! Rule representation: predicate libraries, pairwise temporal relations,
//! rules with a head and a conjunctive body, canonical form and rule-set
//! comparison.

mod dsl;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dsl::{parse_rule, parse_rule_file, GRAMMAR};

/// Default tolerance under which two timestamps count as `Equal`.
pub const DEFAULT_EQ_TOL: f64 = 1e-2;

/// Index of a predicate in a [`PredicateLibrary`].
pub type Pred = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogicError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("predicate `{0}` appears more than once in the body")]
    DuplicateBodyPredicate(String),
    #[error("conflicting relations stated for `{0}` and `{1}`")]
    ConflictingRelation(String, String),
    #[error("relation mentions `{0}`, which is not in the rule body")]
    PredicateNotInBody(String),
    #[error("a predicate cannot be related to itself (`{0}`)")]
    SelfRelation(String),
    #[error("`{0}` is not a head predicate of the library")]
    NotAHead(String),
    #[error("rule body is empty")]
    EmptyBody,
    #[error("relations must cover every body pair exactly once: {0}")]
    BadRelations(String),
    #[error("invalid predicate library: {0}")]
    BadLibrary(String),
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<LogicError>,
    },
}

/// Ordered set of predicate names. Indices are positions in `names`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLibrary")]
pub struct PredicateLibrary {
    names: Vec<String>,
    heads: Vec<String>,
}

#[derive(Deserialize)]
struct RawLibrary {
    names: Vec<String>,
    #[serde(default)]
    heads: Vec<String>,
}

impl TryFrom<RawLibrary> for PredicateLibrary {
    type Error = LogicError;

    fn try_from(raw: RawLibrary) -> Result<Self, LogicError> {
        Self::new(raw.names, raw.heads)
    }
}

impl PredicateLibrary {
    pub fn new<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        heads: impl IntoIterator<Item = S>,
    ) -> Result<Self, LogicError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let heads: Vec<String> = heads.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || !n.chars().all(dsl::is_ident_char) {
                return Err(LogicError::BadLibrary(format!("invalid predicate name `{n}`")));
            }
            if !seen.insert(n.as_str()) {
                return Err(LogicError::BadLibrary(format!("duplicate predicate `{n}`")));
            }
        }
        let mut head_seen = HashSet::new();
        for h in &heads {
            if !seen.contains(h.as_str()) {
                return Err(LogicError::BadLibrary(format!("head `{h}` is not a predicate")));
            }
            if !head_seen.insert(h.as_str()) {
                return Err(LogicError::BadLibrary(format!("duplicate head `{h}`")));
            }
        }
        Ok(Self { names, heads })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn head_names(&self) -> &[String] {
        &self.heads
    }

    pub fn index_of(&self, name: &str) -> Option<Pred> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, p: Pred) -> &str {
        &self.names[p]
    }

    pub fn is_head(&self, p: Pred) -> bool {
        self.heads.iter().any(|h| h == &self.names[p])
    }

    /// Predicates that may appear in rule bodies (everything that is not a head).
    pub fn body_predicates(&self) -> Vec<Pred> {
        (0..self.names.len()).filter(|&p| !self.is_head(p)).collect()
    }

    /// Stable fingerprint of names and head designation, used to tie
    /// checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for n in &self.heads {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Pairwise temporal relation between two body predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemporalRelation {
    Before,
    After,
    Equal,
    None,
}

impl TemporalRelation {
    pub const ALL: [TemporalRelation; 4] = [Self::Before, Self::After, Self::Equal, Self::None];

    pub fn inverse(self) -> Self {
        match self {
            Self::Before => Self::After,
            Self::After => Self::Before,
            r => r,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Self::Before => "before",
            Self::After => "after",
            Self::Equal => "equal",
            Self::None => "none",
        }
    }
}

/// Whether `rel(u, v)` holds for events at `t_u` and `t_v`.
///
/// `Equal` owns the closed band `|t_u - t_v| <= eq_tol`; `Before` and
/// `After` are strict outside it, so the three partition the outcomes.
pub fn relation_holds(rel: TemporalRelation, t_u: f64, t_v: f64, eq_tol: f64) -> bool {
    match rel {
        TemporalRelation::Before => t_v - t_u > eq_tol,
        TemporalRelation::After => t_u - t_v > eq_tol,
        TemporalRelation::Equal => (t_u - t_v).abs() <= eq_tol,
        TemporalRelation::None => true,
    }
}

/// `head <- body_1 ^ ... ^ body_n` with one relation per unordered body pair.
///
/// A relation entry keyed `(u, v)` reads `rel(u, v)`. Exactly one of `(u, v)`
/// and `(v, u)` is present for each pair of distinct body predicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rule {
    head: Pred,
    body: Vec<Pred>,
    relations: BTreeMap<(Pred, Pred), TemporalRelation>,
}

impl Rule {
    /// Builds a rule, checking the structural invariants. Relations for pairs
    /// that are not mentioned default to `None`.
    pub fn new(
        head: Pred,
        body: Vec<Pred>,
        relations: impl IntoIterator<Item = ((Pred, Pred), TemporalRelation)>,
    ) -> Result<Self, LogicError> {
        if body.is_empty() {
            return Err(LogicError::EmptyBody);
        }
        let mut seen = BTreeSet::new();
        for &p in &body {
            if !seen.insert(p) {
                return Err(LogicError::DuplicateBodyPredicate(format!("#{p}")));
            }
        }
        let mut rel_map: BTreeMap<(Pred, Pred), TemporalRelation> = BTreeMap::new();
        for ((u, v), r) in relations {
            if u == v {
                return Err(LogicError::SelfRelation(format!("#{u}")));
            }
            if !seen.contains(&u) || !seen.contains(&v) {
                return Err(LogicError::BadRelations(format!("pair ({u},{v}) outside body")));
            }
            if rel_map.contains_key(&(u, v)) || rel_map.contains_key(&(v, u)) {
                return Err(LogicError::BadRelations(format!("pair ({u},{v}) given twice")));
            }
            rel_map.insert((u, v), r);
        }
        for (i, &u) in body.iter().enumerate() {
            for &v in &body[i + 1..] {
                if !rel_map.contains_key(&(u, v)) && !rel_map.contains_key(&(v, u)) {
                    rel_map.insert((u, v), TemporalRelation::None);
                }
            }
        }
        Ok(Self {
            head,
            body,
            relations: rel_map,
        })
    }

    /// Single-predicate rule `head <- p`.
    pub fn unary(head: Pred, p: Pred) -> Self {
        Self {
            head,
            body: vec![p],
            relations: BTreeMap::new(),
        }
    }

    pub fn head(&self) -> Pred {
        self.head
    }

    pub fn body(&self) -> &[Pred] {
        &self.body
    }

    /// Rule length `c_f`, the number of body predicates.
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn relations(&self) -> impl Iterator<Item = ((Pred, Pred), TemporalRelation)> + '_ {
        self.relations.iter().map(|(&k, &r)| (k, r))
    }

    /// `rel(u, v)` oriented as asked.
    pub fn relation(&self, u: Pred, v: Pred) -> Option<TemporalRelation> {
        if let Some(&r) = self.relations.get(&(u, v)) {
            Some(r)
        } else {
            self.relations.get(&(v, u)).map(|r| r.inverse())
        }
    }

    /// Body sorted by predicate index; `After(u, v)` rewritten as
    /// `Before(v, u)`; `Equal`/`None` keyed with the smaller index first.
    pub fn canonicalize(&self) -> Rule {
        let mut body = self.body.clone();
        body.sort_unstable();
        let relations = self
            .relations
            .iter()
            .map(|(&(u, v), &r)| match r {
                TemporalRelation::Before => ((u, v), r),
                TemporalRelation::After => ((v, u), TemporalRelation::Before),
                _ => ((u.min(v), u.max(v)), r),
            })
            .collect();
        Rule {
            head: self.head,
            body,
            relations,
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    /// DSL text, e.g. `Y <- A ^ B : A before B`. `None` relations are omitted.
    pub fn to_dsl(&self, lib: &PredicateLibrary) -> String {
        let mut s = format!("{} <- ", lib.name(self.head));
        let body: Vec<&str> = self.body.iter().map(|&p| lib.name(p)).collect();
        s.push_str(&body.join(" ^ "));
        let rels: Vec<String> = self
            .relations
            .iter()
            .filter(|(_, r)| **r != TemporalRelation::None)
            .map(|(&(u, v), r)| format!("{} {} {}", lib.name(u), r.keyword(), lib.name(v)))
            .collect();
        if !rels.is_empty() {
            s.push_str(" : ");
            s.push_str(&rels.join(", "));
        }
        s
    }

    pub fn display<'a>(&'a self, lib: &'a PredicateLibrary) -> RuleDisplay<'a> {
        RuleDisplay { rule: self, lib }
    }
}

pub struct RuleDisplay<'a> {
    rule: &'a Rule,
    lib: &'a PredicateLibrary,
}

impl fmt::Display for RuleDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rule.to_dsl(self.lib))
    }
}

/// Weighted rule collection for one head predicate with base term `b0`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedRuleSet {
    pub head: Pred,
    pub rules: Vec<Rule>,
    pub weights: Vec<f64>,
    pub b0: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleSetError {
    #[error("rule and weight counts differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("weight {0} of rule {1} is negative or not finite")]
    BadWeight(f64, usize),
    #[error("rule {0} duplicates an earlier rule")]
    DuplicateRule(usize),
    #[error("rule {0} has a different head")]
    HeadMismatch(usize),
}

impl WeightedRuleSet {
    pub fn new(head: Pred, rules: Vec<Rule>, weights: Vec<f64>, b0: f64) -> Result<Self, RuleSetError> {
        if rules.len() != weights.len() {
            return Err(RuleSetError::LengthMismatch(rules.len(), weights.len()));
        }
        let rules: Vec<Rule> = rules.iter().map(Rule::canonicalize).collect();
        let mut seen = HashSet::new();
        for (i, r) in rules.iter().enumerate() {
            if r.head() != head {
                return Err(RuleSetError::HeadMismatch(i));
            }
            if !seen.insert(r.clone()) {
                return Err(RuleSetError::DuplicateRule(i));
            }
            if !(weights[i] >= 0.0 && weights[i].is_finite()) {
                return Err(RuleSetError::BadWeight(weights[i], i));
            }
        }
        Ok(Self {
            head,
            rules,
            weights,
            b0,
        })
    }

    /// No rules, intensity `exp(b0)`.
    pub fn base_only(head: Pred, b0: f64) -> Self {
        Self {
            head,
            rules: Vec::new(),
            weights: Vec::new(),
            b0,
        }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// |A ∩ B| / |A ∪ B| under canonical equality; 1 when both are empty.
pub fn jaccard(a: &[Rule], b: &[Rule]) -> f64 {
    let sa: HashSet<Rule> = a.iter().map(Rule::canonicalize).collect();
    let sb: HashSet<Rule> = b.iter().map(Rule::canonicalize).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
