//! Valid groundings of a rule body and the logic-informed features built
//! from them.

use serde::{Deserialize, Serialize};

use super::{EventSequence, TlppError};
use crate::logic::{relation_holds, Rule};

/// How a valid grounding contributes to the feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// Each valid grounding contributes 1.
    Count,
    /// Each grounding contributes `prod_u exp(-beta (t - t_u))`.
    ExpDecay { beta: f64 },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Count
    }
}

/// Depth-first walk over groundings, one event per body predicate in body
/// order, each strictly before `limit`. Visits in lexicographic order.
fn walk(rule: &Rule, seq: &EventSequence, limit: f64, eq_tol: f64, visit: &mut impl FnMut(&[f64])) {
    let body = rule.body();
    // relations[i] lists (j, rel(body[j], body[i])) for j < i
    let checks: Vec<Vec<(usize, crate::logic::TemporalRelation)>> = (0..body.len())
        .map(|i| {
            (0..i)
                .filter_map(|j| {
                    let r = rule.relation(body[j], body[i]).expect("pair present");
                    (r != crate::logic::TemporalRelation::None).then_some((j, r))
                })
                .collect()
        })
        .collect();
    let lists: Vec<&[f64]> = body
        .iter()
        .map(|&p| {
            let ts = seq.times(p);
            &ts[..ts.partition_point(|&x| x < limit)]
        })
        .collect();
    if lists.iter().any(|l| l.is_empty()) {
        return;
    }
    let mut cur = vec![0.0; body.len()];
    fn rec(
        depth: usize,
        lists: &[&[f64]],
        checks: &[Vec<(usize, crate::logic::TemporalRelation)>],
        eq_tol: f64,
        cur: &mut Vec<f64>,
        visit: &mut impl FnMut(&[f64]),
    ) {
        if depth == lists.len() {
            visit(cur);
            return;
        }
        for &t in lists[depth] {
            if checks[depth].iter().all(|&(j, r)| relation_holds(r, cur[j], t, eq_tol)) {
                cur[depth] = t;
                rec(depth + 1, lists, checks, eq_tol, cur, visit);
            }
        }
    }
    rec(0, &lists, &checks, eq_tol, &mut cur, visit);
}

/// All valid groundings with every event strictly before `t`, in
/// lexicographic order of the body-ordered time tuples.
pub fn valid_groundings(rule: &Rule, seq: &EventSequence, t: f64, eq_tol: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    walk(rule, seq, t, eq_tol, &mut |g| out.push(g.to_vec()));
    out
}

/// Feature value at `t` computed directly from the enumerated groundings.
pub fn feature(rule: &Rule, seq: &EventSequence, t: f64, kernel: Kernel, eq_tol: f64) -> f64 {
    let mut acc = 0.0;
    walk(rule, seq, t, eq_tol, &mut |g| {
        acc += match kernel {
            Kernel::Count => 1.0,
            Kernel::ExpDecay { beta } => g.iter().map(|&tu| (-beta * (t - tu)).exp()).product(),
        }
    });
    acc
}

/// Groundings of one rule on one sequence, reduced to what the feature
/// needs: sorted completion times (latest event of each grounding) and, for
/// the decaying kernel, a running decayed sum anchored at each completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Groundings {
    kernel: Kernel,
    arity: usize,
    completions: Vec<f64>,
    // decayed[k] = sum_{g <= k} exp(-beta (arity * m_k - s_g))
    decayed: Vec<f64>,
}

impl Groundings {
    pub fn compute(rule: &Rule, seq: &EventSequence, kernel: Kernel, eq_tol: f64) -> Self {
        let mut raw: Vec<(f64, f64)> = Vec::new();
        walk(rule, seq, f64::INFINITY, eq_tol, &mut |g| {
            let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            raw.push((m, g.iter().sum()));
        });
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let arity = rule.len();
        let completions: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let decayed = match kernel {
            Kernel::Count => Vec::new(),
            Kernel::ExpDecay { beta } => {
                let c = arity as f64;
                let mut acc: Vec<f64> = Vec::with_capacity(raw.len());
                for (k, &(m, s)) in raw.iter().enumerate() {
                    let own = (-beta * (c * m - s)).exp();
                    let prev = if k == 0 {
                        0.0
                    } else {
                        acc[k - 1] * (-beta * c * (m - raw[k - 1].0)).exp()
                    };
                    acc.push(prev + own);
                }
                acc
            }
        };
        Self {
            kernel,
            arity,
            completions,
            decayed,
        }
    }

    /// Completion times, sorted, with multiplicity.
    pub fn completions(&self) -> &[f64] {
        &self.completions
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// Number of groundings complete strictly before `t`.
    pub fn count_before(&self, t: f64) -> usize {
        self.completions.partition_point(|&m| m < t)
    }

    /// Feature value at `t` (history strictly before `t`).
    pub fn value(&self, t: f64) -> f64 {
        let k = self.count_before(t);
        match self.kernel {
            Kernel::Count => k as f64,
            Kernel::ExpDecay { beta } => {
                if k == 0 {
                    0.0
                } else {
                    self.decayed[k - 1] * (-beta * self.arity as f64 * (t - self.completions[k - 1])).exp()
                }
            }
        }
    }

    /// Right-limit of the feature at `t`, counting groundings complete at `t`.
    pub fn value_after(&self, t: f64) -> f64 {
        let k = self.completions.partition_point(|&m| m <= t);
        match self.kernel {
            Kernel::Count => k as f64,
            Kernel::ExpDecay { beta } => {
                if k == 0 {
                    0.0
                } else {
                    self.decayed[k - 1] * (-beta * self.arity as f64 * (t - self.completions[k - 1])).exp()
                }
            }
        }
    }
}

/// Piecewise-constant Count-kernel feature over `[0, horizon]`.
///
/// `values[0]` holds on `[0, breakpoints[0])`, `values[k]` on
/// `[breakpoints[k-1], breakpoints[k])`, the last value up to the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrace {
    pub horizon: f64,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl FeatureTrace {
    /// Feature at `t` with the same strict-history convention as
    /// [`feature`]: at a breakpoint itself the earlier value applies.
    pub fn value_at(&self, t: f64) -> f64 {
        self.values[self.breakpoints.partition_point(|&b| b < t)]
    }

    /// Integral of the feature over `[0, horizon]`.
    pub fn integral(&self) -> f64 {
        let mut acc = 0.0;
        let mut prev = 0.0;
        for (k, &b) in self.breakpoints.iter().enumerate() {
            acc += self.values[k] * (b - prev);
            prev = b;
        }
        acc + self.values[self.breakpoints.len()] * (self.horizon - prev)
    }
}

pub fn feature_trace(rule: &Rule, seq: &EventSequence, kernel: Kernel, eq_tol: f64) -> Result<FeatureTrace, TlppError> {
    if kernel != Kernel::Count {
        return Err(TlppError::UnsupportedKernel);
    }
    let g = Groundings::compute(rule, seq, kernel, eq_tol);
    let mut breakpoints = Vec::new();
    let mut values = vec![0.0];
    let mut count = 0.0;
    for &m in g.completions() {
        count += 1.0;
        if breakpoints.last() == Some(&m) {
            *values.last_mut().unwrap() = count;
        } else {
            breakpoints.push(m);
            values.push(count);
        }
    }
    Ok(FeatureTrace {
        horizon: seq.horizon,
        breakpoints,
        values,
    })
}
