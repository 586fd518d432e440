//! Synthetic event data from a known model.
//!
//! Body predicates are independent homogeneous Poisson processes, with an
//! optional copy mechanism that places an event on a second predicate at the
//! same instant so that `Equal` relations have groundings. Head events are
//! then drawn from the log-linear intensity of the true rule set: exactly on
//! the piecewise-constant segments of the count kernel, and by thinning
//! against the segment-start value for the decaying kernel.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{parse_rule, LogicError, Pred, PredicateLibrary, WeightedRuleSet, DEFAULT_EQ_TOL};
use crate::tlpp::{Dataset, EvalConfig, EventSequence, Groundings, Kernel};

/// Largest expected number of head events on one segment before sampling is
/// abandoned.
pub const MAX_SEGMENT_EVENTS: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    BadSpec(String),
    #[error("intensity unbounded: {0}")]
    IntensityUnbounded(String),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A rule with its weight, written in the rule language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEntry {
    pub rule: String,
    pub weight: f64,
}

fn default_rate() -> f64 {
    0.2
}

fn default_eq_tol() -> f64 {
    DEFAULT_EQ_TOL
}

/// JSON form of [`SimSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpecFile {
    pub predicates: Vec<String>,
    pub head: String,
    #[serde(default)]
    pub rules: Vec<RuleEntry>,
    #[serde(default)]
    pub b0: f64,
    /// Rate of every body predicate not listed in `rates`.
    #[serde(default = "default_rate")]
    pub body_rate: f64,
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
    pub horizon: f64,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "default_eq_tol")]
    pub eq_tol: f64,
    #[serde(default)]
    pub p_eq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub lib: PredicateLibrary,
    pub truth: WeightedRuleSet,
    /// Poisson rate per predicate; ignored for the head.
    pub rates: Vec<f64>,
    pub horizon: f64,
    pub cfg: EvalConfig,
    /// Probability that a body event is copied onto one other body predicate.
    pub p_eq: f64,
}

impl SimSpec {
    pub fn new(
        lib: PredicateLibrary,
        truth: WeightedRuleSet,
        rates: Vec<f64>,
        horizon: f64,
        cfg: EvalConfig,
        p_eq: f64,
    ) -> Result<Self, SimError> {
        let bad = |m: String| Err(SimError::BadSpec(m));
        if !lib.is_head(truth.head) || lib.head_names().len() != 1 {
            return bad("the library must declare exactly the truth head as head".into());
        }
        if rates.len() != lib.len() {
            return bad(format!("{} rates for {} predicates", rates.len(), lib.len()));
        }
        for p in lib.body_predicates() {
            if !(rates[p].is_finite() && rates[p] > 0.0) {
                return bad(format!("rate of `{}` must be positive, got {}", lib.name(p), rates[p]));
            }
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return bad(format!("horizon must be positive, got {horizon}"));
        }
        if !(0.0..=1.0).contains(&p_eq) {
            return bad(format!("p_eq must lie in [0, 1], got {p_eq}"));
        }
        if !truth.b0.is_finite() {
            return bad("b0 must be finite".into());
        }
        for (r, &w) in truth.rules.iter().zip(&truth.weights) {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("weight {w} of `{}` must be non-negative", r.to_dsl(&lib)));
            }
            if r.body().iter().any(|&p| lib.is_head(p)) {
                return bad(format!("`{}` has a head predicate in its body", r.to_dsl(&lib)));
            }
        }
        if let Kernel::ExpDecay { beta } = cfg.kernel {
            if !(beta.is_finite() && beta > 0.0) {
                return bad(format!("decay rate must be positive, got {beta}"));
            }
        }
        Ok(Self {
            lib,
            truth,
            rates,
            horizon,
            cfg,
            p_eq,
        })
    }

    pub fn from_file(file: &SimSpecFile) -> Result<Self, SimError> {
        let lib = PredicateLibrary::new(file.predicates.clone(), vec![file.head.clone()])?;
        let head = lib.index_of(&file.head).expect("validated head");
        let mut rules = Vec::with_capacity(file.rules.len());
        let mut weights = Vec::with_capacity(file.rules.len());
        for tr in &file.rules {
            rules.push(parse_rule(&tr.rule, &lib)?);
            weights.push(tr.weight);
        }
        let truth =
            WeightedRuleSet::new(head, rules, weights, file.b0).map_err(|e| SimError::BadSpec(e.to_string()))?;
        for name in file.rates.keys() {
            if lib.index_of(name).is_none() {
                return Err(SimError::BadSpec(format!("rate given for unknown predicate `{name}`")));
            }
        }
        let rates = lib
            .names()
            .iter()
            .map(|n| file.rates.get(n).copied().unwrap_or(file.body_rate))
            .collect();
        let cfg = EvalConfig {
            kernel: file.kernel,
            eq_tol: file.eq_tol,
            ..EvalConfig::default()
        };
        Self::new(lib, truth, rates, file.horizon, cfg, file.p_eq)
    }

    pub fn head(&self) -> Pred {
        self.truth.head
    }

    pub fn manifest(&self) -> TruthManifest {
        TruthManifest {
            head: self.lib.name(self.head()).to_string(),
            b0: self.truth.b0,
            kernel: self.cfg.kernel,
            eq_tol: self.cfg.eq_tol,
            rules: self
                .truth
                .rules
                .iter()
                .zip(&self.truth.weights)
                .map(|(r, &w)| RuleEntry {
                    rule: r.to_dsl(&self.lib),
                    weight: w,
                })
                .collect(),
        }
    }
}

/// The generating model, as written to `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub head: String,
    pub b0: f64,
    pub kernel: Kernel,
    pub eq_tol: f64,
    pub rules: Vec<RuleEntry>,
}

impl TruthManifest {
    pub fn rule_set(&self, lib: &PredicateLibrary) -> Result<WeightedRuleSet, SimError> {
        let head = lib
            .index_of(&self.head)
            .ok_or_else(|| SimError::BadSpec(format!("unknown head `{}`", self.head)))?;
        let mut rules = Vec::new();
        let mut weights = Vec::new();
        for tr in &self.rules {
            rules.push(parse_rule(&tr.rule, lib)?);
            weights.push(tr.weight);
        }
        WeightedRuleSet::new(head, rules, weights, self.b0).map_err(|e| SimError::BadSpec(e.to_string()))
    }

    /// Rules in the rule language, one per line.
    pub fn rules_text(&self) -> String {
        self.rules.iter().map(|r| format!("{}\n", r.rule)).collect()
    }
}

/// Bookkeeping of the head sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub head_events: usize,
    /// Thinning proposals (zero for the count kernel).
    pub proposals: usize,
    pub accepted: usize,
    /// Proposals whose intensity exceeded the segment bound.
    pub bound_violations: usize,
}

impl SimStats {
    pub fn acceptance_ratio(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    fn add(mut self, o: Self) -> Self {
        self.head_events += o.head_events;
        self.proposals += o.proposals;
        self.accepted += o.accepted;
        self.bound_violations += o.bound_violations;
        self
    }
}

fn exponential(rng: &mut impl Rng, rate: f64) -> f64 {
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

/// Body events of one sequence; the head stays empty.
pub fn simulate_body(spec: &SimSpec, id: impl Into<String>, rng: &mut impl Rng) -> EventSequence {
    let body = spec.lib.body_predicates();
    let mut events = vec![Vec::new(); spec.lib.len()];
    for &p in &body {
        let mut t = 0.0;
        loop {
            t += exponential(rng, spec.rates[p]);
            if t > spec.horizon {
                break;
            }
            events[p].push(t);
        }
    }
    if spec.p_eq > 0.0 && body.len() > 1 {
        let originals = events.clone();
        for &p in &body {
            for &t in &originals[p] {
                if rng.gen::<f64>() < spec.p_eq {
                    let own = body.iter().position(|&q| q == p).expect("body predicate");
                    let mut k = rng.gen_range(0..body.len() - 1);
                    if k >= own {
                        k += 1;
                    }
                    events[body[k]].push(t);
                }
            }
        }
    }
    EventSequence::new(id, spec.horizon, events).expect("simulated times lie in [0, T]")
}

/// Adds head events drawn from the true intensity given the body events.
pub fn simulate_head(spec: &SimSpec, body: &EventSequence, rng: &mut impl Rng) -> Result<(EventSequence, SimStats), SimError> {
    let truth = &spec.truth;
    let groundings: Vec<Groundings> = truth
        .rules
        .iter()
        .map(|r| Groundings::compute(r, body, spec.cfg.kernel, spec.cfg.eq_tol))
        .collect();
    let mut breaks: Vec<f64> = groundings
        .iter()
        .flat_map(|g| g.completions().iter().copied())
        .filter(|&t| t > 0.0 && t < spec.horizon)
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let starts: Vec<f64> = std::iter::once(0.0).chain(breaks.iter().copied()).collect();
    let eta = |values: &mut dyn FnMut(&Groundings) -> f64| -> f64 {
        truth.b0 + groundings.iter().zip(&truth.weights).map(|(g, w)| w * values(g)).sum::<f64>()
    };
    let mut head = Vec::new();
    let mut stats = SimStats::default();
    for (k, &a) in starts.iter().enumerate() {
        let b = starts.get(k + 1).copied().unwrap_or(spec.horizon);
        let bound = spec
            .cfg
            .guard(eta(&mut |g| g.value_after(a)))
            .map_err(|e| SimError::IntensityUnbounded(e.to_string()))?;
        if bound * (b - a) > MAX_SEGMENT_EVENTS {
            return Err(SimError::IntensityUnbounded(format!(
                "intensity {bound:.3e} on [{a}, {b}) of `{}`",
                body.id
            )));
        }
        let mut t = a;
        match spec.cfg.kernel {
            Kernel::Count => loop {
                t += exponential(rng, bound);
                if t >= b {
                    break;
                }
                head.push(t);
            },
            Kernel::ExpDecay { .. } => loop {
                t += exponential(rng, bound);
                if t >= b {
                    break;
                }
                stats.proposals += 1;
                let lam = spec
                    .cfg
                    .guard(eta(&mut |g| g.value(t)))
                    .map_err(|e| SimError::IntensityUnbounded(e.to_string()))?;
                if lam > bound * (1.0 + 1e-12) {
                    stats.bound_violations += 1;
                }
                if rng.gen::<f64>() * bound < lam {
                    stats.accepted += 1;
                    head.push(t);
                }
            },
        }
    }
    stats.head_events = head.len();
    let mut events = body.events.clone();
    events[truth.head] = head;
    let seq = EventSequence::new(body.id.clone(), spec.horizon, events).expect("head times lie in [0, T)");
    Ok((seq, stats))
}

/// Rng of sequence `index`: the seed selects the key, the index the stream.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn sequence_id(index: usize) -> String {
    format!("seq-{index:04}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub dataset: Dataset,
    pub manifest: TruthManifest,
    pub stats: SimStats,
}

/// `n` sequences; identical for a given seed whatever the thread count.
pub fn generate_dataset(spec: &SimSpec, n: usize, seed: u64) -> Result<Simulated, SimError> {
    let parts: Vec<(EventSequence, SimStats)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sequence_rng(seed, i);
            let body = simulate_body(spec, sequence_id(i), &mut rng);
            simulate_head(spec, &body, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let stats = parts.iter().fold(SimStats::default(), |acc, (_, s)| acc.add(*s));
    Ok(Simulated {
        dataset: Dataset {
            horizon: spec.horizon,
            sequences: parts.into_iter().map(|(s, _)| s).collect(),
        },
        manifest: spec.manifest(),
        stats,
    })
}

/// Writes `data.json`, `truth.rules` and `truth.json` into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, sim: &Simulated, lib: &PredicateLibrary) -> Result<(), SimError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let data = serde_json::to_string(&sim.dataset.to_file(lib)).expect("dataset serializes");
    fs::write(dir.join("data.json"), data)?;
    fs::write(dir.join("truth.rules"), sim.manifest.rules_text())?;
    let truth = serde_json::to_string_pretty(&sim.manifest).expect("manifest serializes");
    fs::write(dir.join("truth.json"), truth)?;
    Ok(())
}
