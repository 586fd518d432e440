//! Logic-informed temporal point process: features, intensity, exact
//! log-likelihood with analytic gradients, and next-event prediction.
//!
//! The intensity of the head predicate is
//! `lambda(t) = exp(b0 + sum_f w_f * phi_f(t))`, where `phi_f(t)` aggregates
//! the valid groundings of rule `f` completed strictly before `t`.
//!
//! Integrals of `lambda` are taken interval by interval between grounding
//! completion times. Under the count kernel the intensity is constant on each
//! interval and the integral is exact; under the decaying kernel each
//! interval gets a Gauss-Legendre rule.

mod data;
mod features;
mod predict;
mod quad;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{Dataset, DatasetFile, EventRecord, EventSequence, SequenceFile};
pub use features::{feature, feature_trace, valid_groundings, FeatureTrace, Groundings, Kernel};
pub use predict::{predict_next_event_time, PredictConfig};
pub use quad::gauss_legendre;

use crate::logic::{Rule, WeightedRuleSet};
use crate::reduce::pairwise_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TlppError {
    #[error("feature traces are only available for the count kernel")]
    UnsupportedKernel,
    #[error("log-intensity {exponent:.3} exceeds the cap {cap}; parameters are diverging")]
    Overflow { exponent: f64, cap: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown predicate `{0}` in data")]
    UnknownPredicate(String),
    #[error("invalid data: {0}")]
    Data(String),
}

/// Settings shared by every likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub kernel: Kernel,
    pub eq_tol: f64,
    /// Gauss-Legendre nodes per interval for the decaying kernel.
    pub quad_order: usize,
    /// Largest admissible log-intensity.
    pub exponent_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Count,
            eq_tol: crate::logic::DEFAULT_EQ_TOL,
            quad_order: 8,
            exponent_cap: 30.0,
        }
    }
}

impl EvalConfig {
    pub fn with_kernel(kernel: Kernel) -> Self {
        Self {
            kernel,
            ..Self::default()
        }
    }

    pub(crate) fn guard(&self, exponent: f64) -> Result<f64, TlppError> {
        if exponent > self.exponent_cap || exponent.is_nan() {
            Err(TlppError::Overflow {
                exponent,
                cap: self.exponent_cap,
            })
        } else {
            Ok(exponent.exp())
        }
    }
}

/// `exp(b0 + sum_f w_f phi_f(t))`, features computed by direct enumeration.
pub fn intensity(model: &WeightedRuleSet, seq: &EventSequence, t: f64, cfg: &EvalConfig) -> Result<f64, TlppError> {
    let eta = model.b0
        + model
            .rules
            .iter()
            .zip(&model.weights)
            .map(|(r, w)| w * feature(r, seq, t, cfg.kernel, cfg.eq_tol))
            .sum::<f64>();
    cfg.guard(eta)
}

/// Integration nodes `(t, weight)` covering `[0, horizon]`, split at every
/// completion time in `breaks`.
pub(crate) fn integration_nodes<'a>(
    breaks: impl IntoIterator<Item = &'a [f64]>,
    horizon: f64,
    cfg: &EvalConfig,
) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = breaks
        .into_iter()
        .flat_map(|b| b.iter().copied())
        .filter(|&t| t > 0.0 && t < horizon)
        .collect();
    cuts.push(0.0);
    cuts.push(horizon);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut nodes = Vec::new();
    match cfg.kernel {
        Kernel::Count => {
            for w in cuts.windows(2) {
                nodes.push((0.5 * (w[0] + w[1]), w[1] - w[0]));
            }
        }
        Kernel::ExpDecay { .. } => {
            let gl = gauss_legendre(cfg.quad_order);
            for w in cuts.windows(2) {
                let half = 0.5 * (w[1] - w[0]);
                let mid = 0.5 * (w[1] + w[0]);
                for &(x, wt) in &gl {
                    nodes.push((mid + half * x, half * wt));
                }
            }
        }
    }
    nodes
}

/// Cached groundings of a rule set on one sequence.
#[derive(Debug, Clone)]
pub(crate) struct SeqState {
    pub groundings: Vec<Groundings>,
    pub head_times: Vec<f64>,
    pub horizon: f64,
}

impl SeqState {
    pub fn new(rules: &[Rule], head: usize, seq: &EventSequence, cfg: &EvalConfig) -> Self {
        Self {
            groundings: rules
                .iter()
                .map(|r| Groundings::compute(r, seq, cfg.kernel, cfg.eq_tol))
                .collect(),
            head_times: seq.times(head).to_vec(),
            horizon: seq.horizon,
        }
    }

    fn features(&self, t: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.groundings.iter().map(|g| g.value(t)));
    }

    fn nodes(&self, extra: Option<&Groundings>, cfg: &EvalConfig) -> Vec<(f64, f64)> {
        integration_nodes(
            self.groundings
                .iter()
                .chain(extra)
                .map(|g| g.completions()),
            self.horizon,
            cfg,
        )
    }

    fn eta(&self, t: f64, w: &[f64], b0: f64) -> f64 {
        b0 + self.groundings.iter().zip(w).map(|(g, w)| w * g.value(t)).sum::<f64>()
    }

    /// `(loglik, d/dw, d/db0)` of this sequence.
    fn terms(&self, w: &[f64], b0: f64, cfg: &EvalConfig) -> Result<(f64, Vec<f64>, f64), TlppError> {
        let k = self.groundings.len();
        let mut gw = vec![0.0; k];
        let mut x = Vec::with_capacity(k);
        let mut ll_terms = Vec::with_capacity(self.head_times.len() + 16);
        for &t in &self.head_times {
            self.features(t, &mut x);
            let eta = b0 + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            cfg.guard(eta)?;
            ll_terms.push(eta);
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g += xi;
            }
        }
        let mut gb = self.head_times.len() as f64;
        for (t, wt) in self.nodes(None, cfg) {
            self.features(t, &mut x);
            let eta = b0 + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let lam = cfg.guard(eta)? * wt;
            ll_terms.push(-lam);
            gb -= lam;
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g -= xi * lam;
            }
        }
        Ok((pairwise_sum(&ll_terms), gw, gb))
    }

    /// `d loglik / d w_c` of a rule not in the set, at `w_c = 0`.
    fn candidate_gradient(&self, cand: &Groundings, w: &[f64], b0: f64, cfg: &EvalConfig) -> Result<f64, TlppError> {
        let mut terms = Vec::with_capacity(self.head_times.len() + 16);
        for &t in &self.head_times {
            terms.push(cand.value(t));
        }
        for (t, wt) in self.nodes(Some(cand), cfg) {
            let phi = cand.value(t);
            if phi != 0.0 {
                terms.push(-phi * cfg.guard(self.eta(t, w, b0))? * wt);
            }
        }
        Ok(pairwise_sum(&terms))
    }
}

fn check_model(model: &WeightedRuleSet, dataset: &Dataset) -> Result<(), TlppError> {
    if dataset.is_empty() {
        return Err(TlppError::EmptyDataset);
    }
    debug_assert!(model.rules.iter().all(|r| r.head() == model.head));
    Ok(())
}

fn states(rules: &[Rule], head: usize, dataset: &Dataset, cfg: &EvalConfig) -> Vec<SeqState> {
    dataset
        .sequences
        .par_iter()
        .map(|s| SeqState::new(rules, head, s, cfg))
        .collect()
}

/// Sum over sequences of `sum_i log lambda(t_i) - int_0^T lambda`.
pub fn log_likelihood(model: &WeightedRuleSet, dataset: &Dataset, cfg: &EvalConfig) -> Result<f64, TlppError> {
    Ok(loglik_and_grad(model, dataset, cfg)?.0)
}

/// Gradient of [`log_likelihood`] with respect to the rule weights and `b0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglikGradient {
    pub w: Vec<f64>,
    pub b0: f64,
}

pub fn grad_loglik(model: &WeightedRuleSet, dataset: &Dataset, cfg: &EvalConfig) -> Result<LoglikGradient, TlppError> {
    Ok(loglik_and_grad(model, dataset, cfg)?.1)
}

pub fn loglik_and_grad(
    model: &WeightedRuleSet,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<(f64, LoglikGradient), TlppError> {
    check_model(model, dataset)?;
    let st = states(&model.rules, model.head, dataset, cfg);
    let parts: Vec<(f64, Vec<f64>, f64)> = st
        .par_iter()
        .map(|s| s.terms(&model.weights, model.b0, cfg))
        .collect::<Result<_, _>>()?;
    let k = model.len();
    let ll = pairwise_sum(&parts.iter().map(|p| p.0).collect::<Vec<_>>());
    let w = (0..k)
        .map(|f| pairwise_sum(&parts.iter().map(|p| p.1[f]).collect::<Vec<_>>()))
        .collect();
    let b0 = pairwise_sum(&parts.iter().map(|p| p.2).collect::<Vec<_>>());
    Ok((ll, LoglikGradient { w, b0 }))
}

/// `int_0^T lambda` for one sequence via grounding traces.
pub fn integrated_intensity(model: &WeightedRuleSet, seq: &EventSequence, cfg: &EvalConfig) -> Result<f64, TlppError> {
    let st = SeqState::new(&model.rules, model.head, seq, cfg);
    let terms = st
        .nodes(None, cfg)
        .into_iter()
        .map(|(t, wt)| Ok(cfg.guard(st.eta(t, &model.weights, model.b0))? * wt))
        .collect::<Result<Vec<_>, TlppError>>()?;
    Ok(pairwise_sum(&terms))
}

/// The likelihood of a fixed rule set compiled into weighted feature rows,
/// so that evaluating `(loglik, gradient)` at new parameters does not touch
/// the event data again. Rows with identical features are merged.
#[derive(Debug, Clone)]
pub struct Design {
    n_rules: usize,
    n_sequences: usize,
    cap: f64,
    // (multiplicity, features) for head events
    events: Vec<(f64, Vec<f64>)>,
    // (quadrature weight, features) for the compensator
    nodes: Vec<(f64, Vec<f64>)>,
}

impl Design {
    pub fn build(rules: &[Rule], head: usize, dataset: &Dataset, cfg: &EvalConfig) -> Result<Self, TlppError> {
        if dataset.is_empty() {
            return Err(TlppError::EmptyDataset);
        }
        let per_seq: Vec<(Vec<Vec<f64>>, Vec<(f64, Vec<f64>)>)> = dataset
            .sequences
            .par_iter()
            .map(|seq| {
                let st = SeqState::new(rules, head, seq, cfg);
                let mut x = Vec::new();
                let ev = st
                    .head_times
                    .iter()
                    .map(|&t| {
                        st.features(t, &mut x);
                        x.clone()
                    })
                    .collect();
                let nd = st
                    .nodes(None, cfg)
                    .into_iter()
                    .map(|(t, wt)| {
                        st.features(t, &mut x);
                        (wt, x.clone())
                    })
                    .collect();
                (ev, nd)
            })
            .collect();
        let merge = matches!(cfg.kernel, Kernel::Count);
        let mut ev_map: BTreeMap<Vec<u64>, (f64, Vec<f64>)> = BTreeMap::new();
        let mut nd_map: BTreeMap<Vec<u64>, (f64, Vec<f64>)> = BTreeMap::new();
        let mut events = Vec::new();
        let mut nodes = Vec::new();
        let key = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        for (ev, nd) in per_seq {
            for x in ev {
                // event rows merge for both kernels; they enter linearly
                ev_map.entry(key(&x)).or_insert_with(|| (0.0, x)).0 += 1.0;
            }
            for (wt, x) in nd {
                if merge {
                    nd_map.entry(key(&x)).or_insert_with(|| (0.0, x)).0 += wt;
                } else {
                    nodes.push((wt, x));
                }
            }
        }
        events.extend(ev_map.into_values());
        if merge {
            nodes.extend(nd_map.into_values());
        }
        Ok(Self {
            n_rules: rules.len(),
            n_sequences: dataset.len(),
            cap: cfg.exponent_cap,
            events,
            nodes,
        })
    }

    pub fn n_rules(&self) -> usize {
        self.n_rules
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn n_events(&self) -> f64 {
        self.events.iter().map(|e| e.0).sum()
    }

    fn eta(x: &[f64], w: &[f64], b0: f64) -> f64 {
        b0 + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
    }

    fn guard(&self, eta: f64) -> Result<f64, TlppError> {
        if eta > self.cap || eta.is_nan() {
            Err(TlppError::Overflow { exponent: eta, cap: self.cap })
        } else {
            Ok(eta.exp())
        }
    }

    pub fn loglik(&self, w: &[f64], b0: f64) -> Result<f64, TlppError> {
        let mut terms = Vec::with_capacity(self.events.len() + self.nodes.len());
        for (m, x) in &self.events {
            let eta = Self::eta(x, w, b0);
            self.guard(eta)?;
            terms.push(m * eta);
        }
        for (wt, x) in &self.nodes {
            terms.push(-wt * self.guard(Self::eta(x, w, b0))?);
        }
        Ok(pairwise_sum(&terms))
    }

    pub fn loglik_grad(&self, w: &[f64], b0: f64) -> Result<(f64, LoglikGradient), TlppError> {
        let mut terms = Vec::with_capacity(self.events.len() + self.nodes.len());
        let mut gw = vec![0.0; self.n_rules];
        let mut gb = 0.0;
        for (m, x) in &self.events {
            let eta = Self::eta(x, w, b0);
            self.guard(eta)?;
            terms.push(m * eta);
            gb += m;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += m * xi;
            }
        }
        for (wt, x) in &self.nodes {
            let lam = wt * self.guard(Self::eta(x, w, b0))?;
            terms.push(-lam);
            gb -= lam;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g -= lam * xi;
            }
        }
        Ok((pairwise_sum(&terms), LoglikGradient { w: gw, b0: gb }))
    }
}

/// Fitted model state on a dataset, for evaluating `d loglik / d w_c` of
/// rules outside the model at `w_c = 0`.
#[derive(Debug, Clone)]
pub struct PricingContext {
    weights: Vec<f64>,
    b0: f64,
    cfg: EvalConfig,
    states: Vec<SeqState>,
    seqs: Vec<EventSequence>,
}

impl PricingContext {
    pub fn new(model: &WeightedRuleSet, dataset: &Dataset, cfg: &EvalConfig) -> Result<Self, TlppError> {
        check_model(model, dataset)?;
        Ok(Self {
            weights: model.weights.clone(),
            b0: model.b0,
            cfg: *cfg,
            states: states(&model.rules, model.head, dataset, cfg),
            seqs: dataset.sequences.clone(),
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn config(&self) -> &EvalConfig {
        &self.cfg
    }

    /// Summed over sequences.
    pub fn gradient(&self, candidate: &Rule) -> Result<f64, TlppError> {
        let parts: Vec<f64> = self
            .states
            .par_iter()
            .zip(&self.seqs)
            .map(|(st, seq)| {
                let g = Groundings::compute(candidate, seq, self.cfg.kernel, self.cfg.eq_tol);
                if g.is_empty() {
                    Ok(0.0)
                } else {
                    st.candidate_gradient(&g, &self.weights, self.b0, &self.cfg)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(pairwise_sum(&parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::TemporalRelation;

    fn seq(events: Vec<Vec<f64>>, horizon: f64) -> EventSequence {
        EventSequence::new("s", horizon, events).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let cfg = EvalConfig::default();
        let s = seq(vec![vec![1.0], vec![]], 2.0);
        assert_eq!(intensity(&WeightedRuleSet::base_only(1, 0.0), &s, 1.5, &cfg).unwrap(), 1.0);
        let m = WeightedRuleSet::new(1, vec![Rule::unary(1, 0)], vec![2f64.ln()], 0.0).unwrap();
        assert!((intensity(&m, &s, 1.5, &cfg).unwrap() - 2.0).abs() < 1e-15);
        let m3 = WeightedRuleSet::base_only(1, 3f64.ln());
        for t in [0.0, 0.7, 2.0] {
            assert!((intensity(&m3, &s, t, &cfg).unwrap() - 3.0).abs() < 1e-15);
        }
        let hot = WeightedRuleSet::new(1, vec![Rule::unary(1, 0)], vec![40.0], 0.0).unwrap();
        assert!(matches!(intensity(&hot, &s, 1.5, &cfg), Err(TlppError::Overflow { .. })));
    }

    #[test]
    fn loglik_examples() {
        let cfg = EvalConfig::default();
        let ds = |head: Vec<f64>| Dataset {
            horizon: 2.0,
            sequences: vec![seq(vec![vec![], head], 2.0)],
        };
        let m = WeightedRuleSet::base_only(1, 0.0);
        assert!((log_likelihood(&m, &ds(vec![]), &cfg).unwrap() + 2.0).abs() < 1e-14);
        assert!((log_likelihood(&m, &ds(vec![1.0]), &cfg).unwrap() + 2.0).abs() < 1e-14);
        let m2 = WeightedRuleSet::base_only(1, 2f64.ln());
        let got = log_likelihood(&m2, &ds(vec![1.0]), &cfg).unwrap();
        assert!((got - (2f64.ln() - 4.0)).abs() < 1e-14);
        let empty = Dataset { horizon: 1.0, sequences: vec![] };
        assert_eq!(log_likelihood(&m, &empty, &cfg), Err(TlppError::EmptyDataset));
    }

    #[test]
    fn homogeneous_gradient_and_zero_feature_rule() {
        let cfg = EvalConfig::default();
        let d = Dataset {
            horizon: 3.0,
            sequences: vec![seq(vec![vec![], vec![0.5, 1.0, 2.5]], 3.0)],
        };
        let b0 = 0.3f64;
        let g = grad_loglik(&WeightedRuleSet::base_only(1, b0), &d, &cfg).unwrap();
        assert!((g.b0 - (3.0 - b0.exp() * 3.0)).abs() < 1e-12);
        // predicate 0 never occurs, so its rule has phi = 0
        let m = WeightedRuleSet::new(1, vec![Rule::unary(1, 0)], vec![0.4], b0).unwrap();
        assert_eq!(grad_loglik(&m, &d, &cfg).unwrap().w, vec![0.0]);
    }

    #[test]
    fn design_matches_direct_path() {
        let cfg = EvalConfig::default();
        let r1 = Rule::new(3, vec![0, 1], [((0, 1), TemporalRelation::Before)]).unwrap();
        let r2 = Rule::unary(3, 2);
        let d = Dataset {
            horizon: 6.0,
            sequences: vec![
                seq(vec![vec![1.0, 4.0], vec![2.0, 3.0, 5.0], vec![0.5], vec![2.5, 5.5]], 6.0),
                seq(vec![vec![0.2], vec![0.1, 3.3], vec![], vec![4.0]], 6.0),
            ],
        };
        let m = WeightedRuleSet::new(3, vec![r1.clone(), r2.clone()], vec![0.3, 0.2], -0.4).unwrap();
        let (ll, g) = loglik_and_grad(&m, &d, &cfg).unwrap();
        let des = Design::build(&[r1, r2], 3, &d, &cfg).unwrap();
        let (ll2, g2) = des.loglik_grad(&m.weights, m.b0).unwrap();
        assert!((ll - ll2).abs() < 1e-12);
        assert!((g.b0 - g2.b0).abs() < 1e-12);
        for (a, b) in g.w.iter().zip(&g2.w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(des.n_events(), 3.0);
    }

    #[test]
    fn pricing_equals_gradient_of_extended_model() {
        for kernel in [Kernel::Count, Kernel::ExpDecay { beta: 0.7 }] {
            let cfg = EvalConfig::with_kernel(kernel);
            let r1 = Rule::unary(3, 0);
            let cand = Rule::new(3, vec![1, 2], [((1, 2), TemporalRelation::Before)]).unwrap();
            let d = Dataset {
                horizon: 6.0,
                sequences: vec![
                    seq(vec![vec![1.0, 4.0], vec![2.0, 3.0], vec![2.5, 5.0], vec![2.7, 5.5]], 6.0),
                    seq(vec![vec![0.2], vec![0.1], vec![3.3], vec![4.0]], 6.0),
                ],
            };
            let m = WeightedRuleSet::new(3, vec![r1.clone()], vec![0.5], -0.2).unwrap();
            let ctx = PricingContext::new(&m, &d, &cfg).unwrap();
            let direct = ctx.gradient(&cand).unwrap();
            let ext = WeightedRuleSet::new(3, vec![r1, cand], vec![0.5, 0.0], -0.2).unwrap();
            let g = grad_loglik(&ext, &d, &cfg).unwrap();
            assert!((direct - g.w[1]).abs() < 1e-12, "{kernel:?}: {direct} vs {}", g.w[1]);
        }
    }
}
