//! Restricted master problem: penalized maximum likelihood over the weights
//! of the current rule set with `w >= 0`, and the dual prices that tell
//! whether a rule outside the set would improve it.
//!
//! The objective is `-loglik(w, b0) / M + lambda0 * sum_f c_f w_f` where `M`
//! is the number of sequences and `c_f` the rule length. Averaging over
//! sequences keeps `lambda0` meaningful across dataset sizes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{Rule, WeightedRuleSet};
use crate::tlpp::{grad_loglik, Dataset, Design, EvalConfig, PricingContext, TlppError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasterError {
    #[error("rule {0} duplicates an earlier rule")]
    DuplicateRule(usize),
    #[error("the starting point is infeasible: {0}")]
    BadStart(TlppError),
    #[error(transparent)]
    Tlpp(#[from] TlppError),
}

/// `Omega(w) = lambda0 * sum_f c_f w_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub lambda0: f64,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self { lambda0: 0.05 }
    }
}

impl RegularizerSpec {
    pub fn penalty(&self, rules: &[Rule], w: &[f64]) -> f64 {
        self.lambda0 * rules.iter().zip(w).map(|(r, w)| r.len() as f64 * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MasterConfig {
    /// First trial step of the projected-gradient iteration.
    pub lr: f64,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MasterConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            tol: 1e-6,
            max_iters: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// Line search could not make progress before reaching `tol`.
    Stalled,
}

/// Solution of one restricted master problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedRmp {
    pub weights: Vec<f64>,
    pub b0: f64,
    pub objective: f64,
    /// Summed log-likelihood at the solution.
    pub loglik: f64,
    /// `(iteration, objective)` for every accepted step, starting with the
    /// initial point at iteration 0.
    pub trace: Vec<(usize, f64)>,
    /// Objective gradient per rule at the solution, i.e. the dual prices.
    pub gradient: Vec<f64>,
    pub grad_b0: f64,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl FittedRmp {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn model(&self, head: usize, rules: &[Rule]) -> WeightedRuleSet {
        WeightedRuleSet {
            head,
            rules: rules.to_vec(),
            weights: self.weights.clone(),
            b0: self.b0,
        }
    }
}

struct Objective<'a> {
    design: Design,
    lengths: Vec<f64>,
    reg: &'a RegularizerSpec,
    m: f64,
}

impl Objective<'_> {
    fn value(&self, w: &[f64], b0: f64) -> Result<(f64, f64), TlppError> {
        let ll = self.design.loglik(w, b0)?;
        Ok((-ll / self.m + self.penalty(w), ll))
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        self.reg.lambda0 * self.lengths.iter().zip(w).map(|(c, w)| c * w).sum::<f64>()
    }

    /// `(objective, loglik, grad_w, grad_b0)`.
    fn eval(&self, w: &[f64], b0: f64) -> Result<(f64, f64, Vec<f64>, f64), TlppError> {
        let (ll, g) = self.design.loglik_grad(w, b0)?;
        let gw = g
            .w
            .iter()
            .zip(&self.lengths)
            .map(|(g, c)| -g / self.m + self.reg.lambda0 * c)
            .collect();
        Ok((-ll / self.m + self.penalty(w), ll, gw, -g.b0 / self.m))
    }
}

fn projected_gradient_norm(w: &[f64], gw: &[f64], gb: f64) -> f64 {
    w.iter()
        .zip(gw)
        .map(|(&w, &g)| (w - (w - g).max(0.0)).abs())
        .fold(gb.abs(), f64::max)
}

fn check_distinct(rules: &[Rule]) -> Result<(), MasterError> {
    let mut seen = HashSet::new();
    for (i, r) in rules.iter().enumerate() {
        if !seen.insert(r.canonicalize()) {
            return Err(MasterError::DuplicateRule(i));
        }
    }
    Ok(())
}

const ARMIJO: f64 = 1e-4;

/// Solves the restricted master problem by projected gradient descent with
/// Armijo backtracking (step halving). Trial steps come from the
/// Barzilai-Borwein estimate of the last accepted step, the first one from
/// `config.lr`. Only accepted steps move the iterate, so the objective trace
/// is non-increasing.
///
/// `warm_start` seeds `(w, b0)`; rules beyond its length start at zero.
pub fn solve_rmp(
    head: usize,
    rules: &[Rule],
    dataset: &Dataset,
    reg: &RegularizerSpec,
    warm_start: Option<(&[f64], f64)>,
    config: &MasterConfig,
    cfg: &EvalConfig,
) -> Result<FittedRmp, MasterError> {
    check_distinct(rules)?;
    let design = Design::build(rules, head, dataset, cfg)?;
    let obj = Objective {
        design,
        lengths: rules.iter().map(|r| r.len() as f64).collect(),
        reg,
        m: dataset.len() as f64,
    };
    let k = rules.len();
    let (mut w, mut b0) = match warm_start {
        Some((ws, b)) => {
            let mut w: Vec<f64> = ws.iter().take(k).map(|v| v.max(0.0)).collect();
            w.resize(k, 0.0);
            (w, b)
        }
        None => (vec![0.0; k], 0.0),
    };
    let (mut f, mut ll, mut gw, mut gb) = obj.eval(&w, b0).map_err(MasterError::BadStart)?;
    let mut trace = vec![(0, f)];
    let mut step = config.lr;
    let mut status = SolveStatus::MaxIterations;
    let mut it = 0;
    while it < config.max_iters {
        if projected_gradient_norm(&w, &gw, gb) < config.tol {
            status = SolveStatus::Converged;
            break;
        }
        it += 1;
        let mut accepted = None;
        while step > 1e-18 {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| (w - step * g).max(0.0)).collect();
            let b_new = b0 - step * gb;
            let decrease = w_new
                .iter()
                .zip(&w)
                .zip(&gw)
                .map(|((wn, w), g)| g * (wn - w))
                .sum::<f64>()
                + gb * (b_new - b0);
            match obj.value(&w_new, b_new) {
                Ok((f_new, _)) if f_new <= f + ARMIJO * decrease => {
                    accepted = Some((w_new, b_new));
                    break;
                }
                // overflow on a long trial step is handled like a failed Armijo test
                _ => step *= 0.5,
            }
        }
        let Some((w_new, b_new)) = accepted else {
            status = SolveStatus::Stalled;
            break;
        };
        let (f_new, ll_new, gw_new, gb_new) = obj.eval(&w_new, b_new)?;
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..k {
            let s = w_new[i] - w[i];
            ss += s * s;
            sy += s * (gw_new[i] - gw[i]);
        }
        let s = b_new - b0;
        ss += s * s;
        sy += s * (gb_new - gb);
        step = if sy > 0.0 && ss > 0.0 {
            (ss / sy).clamp(1e-12, 1e12)
        } else {
            (step * 2.0).min(1e12)
        };
        (w, b0, f, ll, gw, gb) = (w_new, b_new, f_new, ll_new, gw_new, gb_new);
        trace.push((it, f));
    }
    if status == SolveStatus::MaxIterations && projected_gradient_norm(&w, &gw, gb) < config.tol {
        status = SolveStatus::Converged;
    }
    Ok(FittedRmp {
        weights: w,
        b0,
        objective: f,
        loglik: ll,
        trace,
        gradient: gw,
        grad_b0: gb,
        status,
        iterations: it,
    })
}

/// Prices rules against a fixed RMP solution.
pub struct Pricer {
    ctx: PricingContext,
    rules: Vec<Rule>,
    nu: Vec<f64>,
    reg: RegularizerSpec,
    m: f64,
}

impl Pricer {
    pub fn new(
        head: usize,
        fitted: &FittedRmp,
        rules: &[Rule],
        dataset: &Dataset,
        reg: &RegularizerSpec,
        cfg: &EvalConfig,
    ) -> Result<Self, TlppError> {
        let model = fitted.model(head, rules);
        Ok(Self {
            ctx: PricingContext::new(&model, dataset, cfg)?,
            rules: rules.iter().map(Rule::canonicalize).collect(),
            nu: fitted.gradient.clone(),
            reg: *reg,
            m: dataset.len() as f64,
        })
    }

    /// Index of `rule` in the current set, if present.
    pub fn position(&self, rule: &Rule) -> Option<usize> {
        let c = rule.canonicalize();
        self.rules.iter().position(|r| *r == c)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn regularizer(&self) -> &RegularizerSpec {
        &self.reg
    }

    /// `nu_f = -(1/M) d loglik / d w_f + lambda0 * c_f` at the RMP solution,
    /// with a rule outside the set taken at `w_f = 0`. Negative means adding
    /// the rule lowers the objective.
    pub fn dual_price(&self, candidate: &Rule) -> Result<f64, TlppError> {
        if let Some(i) = self.position(candidate) {
            return Ok(self.nu[i]);
        }
        let g = self.ctx.gradient(candidate)?;
        Ok(-g / self.m + self.reg.lambda0 * candidate.len() as f64)
    }
}

/// One-off dual price; see [`Pricer::dual_price`].
pub fn dual_price(
    candidate: &Rule,
    head: usize,
    fitted: &FittedRmp,
    rules: &[Rule],
    dataset: &Dataset,
    reg: &RegularizerSpec,
    cfg: &EvalConfig,
) -> Result<f64, TlppError> {
    Pricer::new(head, fitted, rules, dataset, reg, cfg)?.dual_price(candidate)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Positive weight whose dual price is not close to zero.
    ActiveNotStationary { rule: usize, weight: f64, nu: f64 },
    /// Zero weight whose dual price is clearly negative.
    InactiveNegativePrice { rule: usize, weight: f64, nu: f64 },
    /// `d objective / d b0` away from zero.
    BaseNotStationary { grad: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub nu: Vec<f64>,
    pub grad_b0: f64,
    pub violations: Vec<Violation>,
}

impl OptimalityReport {
    pub fn is_optimal(&self) -> bool {
        self.violations.is_empty()
    }
}

/// KKT check, recomputing gradients from the data: rules with `w > tol` need
/// `|nu| <= 10 tol`, rules with `w <= tol` need `nu >= -10 tol`, and `b0`
/// needs `|d/db0| <= 10 tol`.
pub fn check_optimality(
    head: usize,
    fitted: &FittedRmp,
    rules: &[Rule],
    dataset: &Dataset,
    reg: &RegularizerSpec,
    cfg: &EvalConfig,
    tol: f64,
) -> Result<OptimalityReport, TlppError> {
    let m = dataset.len() as f64;
    let g = grad_loglik(&fitted.model(head, rules), dataset, cfg)?;
    let nu: Vec<f64> = g
        .w
        .iter()
        .zip(rules)
        .map(|(g, r)| -g / m + reg.lambda0 * r.len() as f64)
        .collect();
    let grad_b0 = -g.b0 / m;
    let mut violations = Vec::new();
    for (i, (&w, &v)) in fitted.weights.iter().zip(&nu).enumerate() {
        if w > tol && v.abs() > 10.0 * tol {
            violations.push(Violation::ActiveNotStationary { rule: i, weight: w, nu: v });
        } else if w <= tol && v < -10.0 * tol {
            violations.push(Violation::InactiveNegativePrice { rule: i, weight: w, nu: v });
        }
    }
    if grad_b0.abs() > 10.0 * tol {
        violations.push(Violation::BaseNotStationary { grad: grad_b0 });
    }
    Ok(OptimalityReport {
        nu,
        grad_b0,
        violations,
    })
}
