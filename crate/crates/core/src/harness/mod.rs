//! The alternating learner, evaluation metrics and the file formats used by
//! the command-line tool.
//!
//! [`fit`] starts from the base rate alone and repeatedly asks the rule
//! search for the rule with the most negative dual price. A rule is added
//! when its price is below `-acceptance_margin`; the master problem is then
//! re-solved from the previous optimum with the new weight at zero, so the
//! objective never increases from one outer iteration to the next.

mod files;
mod metrics;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use files::{load_dataset, read_model, rule_check, write_model, write_trace_csv, ModelFile, TRACE_HEADER};
pub use metrics::{
    evaluate_prediction, evaluate_recovery, mean_gap_baseline, Anchor, Metrics, PredictionReport, Recovery,
};

use crate::generator::{solve_subproblem, GenError, PolicyInit, PolicyParams, SubproblemConfig};
use crate::logic::{LogicError, Pred, PredicateLibrary, Rule, WeightedRuleSet, DEFAULT_EQ_TOL};
use crate::master::{solve_rmp, FittedRmp, MasterConfig, MasterError, RegularizerSpec};
use crate::simulator::SimError;
use crate::tlpp::{Dataset, EvalConfig, Kernel, PredictConfig, TlppError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("the dataset has no `{0}` events")]
    NoHeadEvents(String),
    #[error("the test set has no head events to predict")]
    EmptyTestSet,
    #[error("malformed input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Tlpp(#[from] TlppError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every knob of a run. Missing JSON fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: Kernel,
    pub eq_tol: f64,
    pub quad_order: usize,
    pub exponent_cap: f64,
    /// Length penalty per unit weight, applied to the per-sequence objective.
    pub lambda0: f64,
    pub master: MasterConfig,
    /// Rule search settings; `subproblem.max_len` caps the rule length.
    pub subproblem: SubproblemConfig,
    pub max_rules: usize,
    /// Start every rule search from fresh policy parameters.
    pub reset_policy: bool,
    pub seed: u64,
    /// Body predicates every generated rule starts with.
    pub fixed_prefix: Vec<String>,
    /// Wall-clock limit checked between outer iterations.
    pub time_budget_secs: Option<f64>,
    /// A rule is added when its dual price is below `-acceptance_margin`.
    pub acceptance_margin: f64,
    /// Learned rules with weight at or below this are dropped from the model.
    pub prune_tol: f64,
    pub predict: PredictConfig,
    pub anchor: Anchor,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            kernel: eval.kernel,
            eq_tol: DEFAULT_EQ_TOL,
            quad_order: eval.quad_order,
            exponent_cap: eval.exponent_cap,
            lambda0: RegularizerSpec::default().lambda0,
            master: MasterConfig::default(),
            subproblem: SubproblemConfig::default(),
            max_rules: 10,
            reset_policy: true,
            seed: 0,
            fixed_prefix: Vec::new(),
            time_budget_secs: None,
            acceptance_margin: 1e-4,
            prune_tol: 1e-6,
            predict: PredictConfig::default(),
            anchor: Anchor::PreviousHead,
        }
    }
}

impl RunConfig {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kernel: self.kernel,
            eq_tol: self.eq_tol,
            quad_order: self.quad_order,
            exponent_cap: self.exponent_cap,
        }
    }

    pub fn regularizer(&self) -> RegularizerSpec {
        RegularizerSpec { lambda0: self.lambda0 }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::BadConfig(m.into()));
        if let Kernel::ExpDecay { beta } = self.kernel {
            if !(beta.is_finite() && beta > 0.0) {
                return bad("kernel beta must be positive");
            }
        }
        if !(self.eq_tol.is_finite() && self.eq_tol >= 0.0) {
            return bad("eq_tol must be non-negative");
        }
        if self.quad_order == 0 || self.quad_order > 64 {
            return bad("quad_order must lie in 1..=64");
        }
        if !(self.exponent_cap.is_finite() && self.exponent_cap > 0.0) {
            return bad("exponent_cap must be positive");
        }
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return bad("lambda0 must be non-negative");
        }
        if !(self.master.lr > 0.0 && self.master.tol > 0.0 && self.master.max_iters > 0) {
            return bad("master lr, tol and max_iters must be positive");
        }
        if !(self.acceptance_margin.is_finite() && self.acceptance_margin >= 0.0) {
            return bad("acceptance_margin must be non-negative");
        }
        if !(self.prune_tol.is_finite() && self.prune_tol >= 0.0) {
            return bad("prune_tol must be non-negative");
        }
        if let Some(t) = self.time_budget_secs {
            if !(t > 0.0) {
                return bad("time_budget_secs must be positive");
            }
        }
        if self.predict.grid_points < 2 || self.predict.window.is_some_and(|w| !(w > 0.0)) {
            return bad("predict needs grid_points >= 2 and a positive window");
        }
        self.subproblem.validate()?;
        Ok(())
    }
}

/// Why the outer loop ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The best rule found has no negative dual price beyond the margin.
    Optimal,
    MaxRules,
    TimeBudget,
    /// A solver failed; the report holds everything up to that point.
    Error(String),
}

/// State after one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub wall_secs: f64,
    pub loglik: f64,
    pub objective: f64,
    /// Rule added in this iteration (none for the base-rate fit).
    pub rule: Option<String>,
    pub reward: Option<f64>,
    pub weights: Vec<f64>,
    pub b0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub lib: PredicateLibrary,
    /// Rules with weight above `prune_tol`.
    pub model: WeightedRuleSet,
    /// Every added rule with its final weight.
    pub all_rules: WeightedRuleSet,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
    /// Best rule of the last search and its reward.
    pub last_candidate: Option<(Rule, f64)>,
    pub fitted: FittedRmp,
}

impl RunReport {
    pub fn model_file(&self, config: &RunConfig) -> ModelFile {
        ModelFile::new(&self.lib, &self.model, config)
    }
}

fn prefix_indices(lib: &PredicateLibrary, names: &[String]) -> Result<Vec<Pred>, HarnessError> {
    names
        .iter()
        .map(|n| {
            lib.index_of(n)
                .ok_or_else(|| HarnessError::BadConfig(format!("unknown fixed-prefix predicate `{n}`")))
        })
        .collect()
}

/// Learns a weighted rule set for `head` by alternating rule search and
/// master-problem re-solves.
pub fn fit(dataset: &Dataset, lib: &PredicateLibrary, head: Pred, config: &RunConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    if head >= lib.len() || !lib.is_head(head) {
        return Err(HarnessError::BadConfig("target is not a head predicate of the library".into()));
    }
    if dataset.count_events(head) == 0 {
        return Err(HarnessError::NoHeadEvents(lib.name(head).to_string()));
    }
    let prefix = prefix_indices(lib, &config.fixed_prefix)?;
    let cfg = config.eval_config();
    let reg = config.regularizer();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut rules: Vec<Rule> = Vec::new();
    let mut fitted = solve_rmp(head, &rules, dataset, &reg, None, &config.master, &cfg)?;
    let row = |iter: usize, f: &FittedRmp, rule: Option<String>, reward: Option<f64>| TraceRow {
        iter,
        wall_secs: start.elapsed().as_secs_f64(),
        loglik: f.loglik,
        objective: f.objective,
        rule,
        reward,
        weights: f.weights.clone(),
        b0: f.b0,
    };
    let mut trace = vec![row(0, &fitted, None, None)];
    let mut policy: Option<PolicyParams> = None;
    let mut last_candidate = None;

    let stop = loop {
        if rules.len() >= config.max_rules {
            break StopReason::MaxRules;
        }
        if config.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
            break StopReason::TimeBudget;
        }
        let init = match (&policy, config.reset_policy) {
            (Some(p), false) => PolicyInit::Reuse(p.clone()),
            _ => PolicyInit::Fresh,
        };
        let res = match solve_subproblem(
            init,
            &fitted,
            &rules,
            dataset,
            &reg,
            &cfg,
            lib,
            head,
            &prefix,
            &config.subproblem,
            &mut rng,
        ) {
            Ok(r) => r,
            Err(e) => break StopReason::Error(e.to_string()),
        };
        policy = Some(res.policy);
        last_candidate = Some((res.rule.clone(), res.reward));
        if res.reward <= config.acceptance_margin {
            break StopReason::Optimal;
        }
        rules.push(res.rule.clone());
        let warm: Vec<f64> = fitted.weights.iter().copied().chain([0.0]).collect();
        match solve_rmp(head, &rules, dataset, &reg, Some((&warm, fitted.b0)), &config.master, &cfg) {
            Ok(f) => fitted = f,
            Err(e) => {
                rules.pop();
                break StopReason::Error(e.to_string());
            }
        }
        trace.push(row(trace.len(), &fitted, Some(res.rule.to_dsl(lib)), Some(res.reward)));
    };

    let all_rules = fitted.model(head, &rules);
    let keep: Vec<usize> = (0..rules.len()).filter(|&i| fitted.weights[i] > config.prune_tol).collect();
    let model = WeightedRuleSet {
        head,
        rules: keep.iter().map(|&i| rules[i].clone()).collect(),
        weights: keep.iter().map(|&i| fitted.weights[i]).collect(),
        b0: fitted.b0,
    };
    Ok(RunReport {
        lib: lib.clone(),
        model,
        all_rules,
        trace,
        stop,
        last_candidate,
        fitted,
    })
}

/// Result of the exhaustive rule search against a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub rule: String,
    pub reward: f64,
    pub dual_price: f64,
    pub n_candidates: usize,
    /// No rule has a dual price below `-acceptance_margin`.
    pub optimal: bool,
}

/// Re-solves the master problem for the rules of `model` (starting from its
/// weights) and enumerates every rule up to `max_len` to find the lowest
/// dual price.
pub fn oracle(
    dataset: &Dataset,
    model: &ModelFile,
    config: &RunConfig,
    max_len: usize,
    budget: f64,
) -> Result<OracleReport, HarnessError> {
    let set = model.rule_set()?;
    let cfg = EvalConfig {
        kernel: model.kernel,
        eq_tol: model.eq_tol,
        ..config.eval_config()
    };
    let reg = RegularizerSpec { lambda0: model.lambda0 };
    let fitted = solve_rmp(set.head, &set.rules, dataset, &reg, Some((&set.weights, set.b0)), &config.master, &cfg)?;
    let pricer = crate::master::Pricer::new(set.head, &fitted, &set.rules, dataset, &reg, &cfg)?;
    let bf = crate::generator::brute_force_subproblem(&pricer, &model.library, set.head, max_len, budget)?;
    Ok(OracleReport {
        rule: bf.rule.to_dsl(&model.library),
        reward: bf.reward,
        dual_price: -bf.reward,
        n_candidates: bf.n_candidates,
        optimal: bf.reward <= config.acceptance_margin,
    })
}
