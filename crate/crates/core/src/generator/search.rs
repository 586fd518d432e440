//! Risk-seeking policy gradient and the subproblem search loop.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GenError, LengthMode, PolicyParams, Rollout, RolloutSpec};
use crate::logic::{Pred, PredicateLibrary, Rule};
use crate::master::{FittedRmp, Pricer, RegularizerSpec};
use crate::tlpp::{Dataset, EvalConfig};

/// Reward given to a rule that is already in the master problem.
pub const DUPLICATE_PENALTY: f64 = -1.0;

/// Maps a candidate rule to its reward.
pub trait RuleScorer {
    fn reward(&self, rule: &Rule) -> Result<f64, GenError>;
}

/// Reward is minus the dual price; rules already in the set get
/// [`DUPLICATE_PENALTY`].
impl RuleScorer for Pricer {
    fn reward(&self, rule: &Rule) -> Result<f64, GenError> {
        if self.position(rule).is_some() {
            return Ok(DUPLICATE_PENALTY);
        }
        Ok(-self.dual_price(rule)?)
    }
}

impl<F: Fn(&Rule) -> f64> RuleScorer for F {
    fn reward(&self, rule: &Rule) -> Result<f64, GenError> {
        Ok(self(rule))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubproblemConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub entropy_coef: f64,
    /// Stop after this many consecutive iterations with the same greedy rule,
    /// provided it is also the best rule seen.
    pub early_stop: usize,
    /// Stop when the gradient norm falls below this.
    pub grad_tol: f64,
    pub max_len: usize,
    pub length_mode: LengthMode,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for SubproblemConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_iters: 300,
            lr: 1e-2,
            epsilon: 0.3,
            entropy_coef: 0.01,
            early_stop: 10,
            grad_tol: 1e-8,
            max_len: 3,
            length_mode: LengthMode::EndToken,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl SubproblemConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(GenError::BadEpsilon(self.epsilon));
        }
        let need = (1.0 / self.epsilon).ceil() as usize;
        if self.batch_size < need {
            return Err(GenError::BatchTooSmall {
                n: self.batch_size,
                need,
            });
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GenError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(GenError::BadConfig("entropy_coef must be non-negative".into()));
        }
        if self.max_len == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(GenError::BadConfig("max_len and policy dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Where the policy of a subproblem starts.
#[derive(Debug, Clone)]
pub enum PolicyInit {
    /// New random parameters drawn from the search rng.
    Fresh,
    Reuse(PolicyParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubproblemStop {
    MaxIterations,
    GradientNorm,
    IdenticalRules,
}

#[derive(Debug, Clone)]
pub struct SubproblemResult {
    /// Best rule sampled over the whole search.
    pub rule: Rule,
    pub reward: f64,
    pub policy: PolicyParams,
    pub iterations: usize,
    pub stop: SubproblemStop,
    /// Distinct rules scored.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskSeekingStats {
    /// Empirical `(1 - epsilon)`-quantile of the batch rewards.
    pub quantile: f64,
    /// Rollouts with reward at or above the quantile.
    pub n_elite: usize,
    /// No reward exceeds the quantile, so only the entropy term moves the
    /// policy.
    pub degenerate: bool,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
}

/// Nearest-rank `q`-quantile: the `ceil(q N)`-th smallest value (rank
/// clamped to `1..=N`).
pub fn quantile_nearest_rank(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty batch");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    v[rank - 1]
}

/// `g = 1/(eps N) sum_i (R_i - q) 1{R_i >= q} grad log pi(tau_i)
///      + entropy_coef grad (mean rollout entropy)`.
pub fn risk_seeking_gradient(
    policy: &PolicyParams,
    spec: &RolloutSpec,
    batch: &[Rollout],
    epsilon: f64,
    entropy_coef: f64,
) -> Result<(Vec<f64>, RiskSeekingStats), GenError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(GenError::BadEpsilon(epsilon));
    }
    let n = batch.len();
    let need = (1.0 / epsilon).ceil() as usize;
    if n < need || n == 0 {
        return Err(GenError::BatchTooSmall { n, need: need.max(1) });
    }
    let rewards: Vec<f64> = batch.iter().map(|r| r.reward).collect();
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GenError::BadConfig("rollout reward not set".into()));
    }
    let q = quantile_nearest_rank(&rewards, 1.0 - epsilon);
    let scale = 1.0 / (epsilon * n as f64);
    let mut g = vec![0.0; policy.n_params()];
    let mut n_elite = 0;
    for ro in batch {
        let a = if ro.reward >= q {
            n_elite += 1;
            scale * (ro.reward - q)
        } else {
            0.0
        };
        let b = entropy_coef / n as f64;
        if a != 0.0 || b != 0.0 {
            policy.accumulate_grad(spec, &ro.tokens, a, b, &mut g)?;
        }
    }
    let stats = RiskSeekingStats {
        quantile: q,
        n_elite,
        degenerate: !rewards.iter().any(|&r| r > q),
        mean_reward: rewards.iter().sum::<f64>() / n as f64,
        max_reward: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_entropy: batch.iter().map(Rollout::entropy).sum::<f64>() / n as f64,
        grad_norm: g.iter().map(|x| x * x).sum::<f64>().sqrt(),
    };
    Ok((g, stats))
}

/// Gradient ascent step `theta += lr * g`.
pub fn risk_seeking_update(
    policy: &mut PolicyParams,
    spec: &RolloutSpec,
    batch: &[Rollout],
    epsilon: f64,
    lr: f64,
    entropy_coef: f64,
) -> Result<RiskSeekingStats, GenError> {
    let (g, stats) = risk_seeking_gradient(policy, spec, batch, epsilon, entropy_coef)?;
    for (t, d) in policy.params_mut().iter_mut().zip(&g) {
        *t += lr * d;
    }
    Ok(stats)
}

/// Rollout, reward, update until a stopping rule fires; returns the best
/// rule ever sampled.
pub fn search_policy(
    init: PolicyInit,
    scorer: &dyn RuleScorer,
    lib: &PredicateLibrary,
    head: Pred,
    fixed_prefix: &[Pred],
    config: &SubproblemConfig,
    rng: &mut impl Rng,
) -> Result<SubproblemResult, GenError> {
    config.validate()?;
    let mut policy = match init {
        PolicyInit::Fresh => PolicyParams::fresh(lib, config.embed_dim, config.hidden_dim, rng),
        PolicyInit::Reuse(p) => {
            if p.vocab().fingerprint() != lib.fingerprint() {
                return Err(GenError::VocabMismatch);
            }
            p
        }
    };
    let spec = RolloutSpec {
        head,
        max_len: config.max_len,
        mode: config.length_mode,
        fixed_prefix: fixed_prefix.to_vec(),
    };
    spec.validate(policy.vocab())?;
    if !lib.is_head(head) {
        return Err(GenError::BadConfig(format!("`{}` is not a head predicate", lib.name(head))));
    }

    let mut cache: HashMap<Rule, f64> = HashMap::new();
    let mut score = |rule: &Rule| -> Result<f64, GenError> {
        if let Some(&r) = cache.get(rule) {
            return Ok(r);
        }
        let r = scorer.reward(rule)?;
        cache.insert(rule.clone(), r);
        Ok(r)
    };
    let mut best: Option<(Rule, f64)> = None;
    let mut last_greedy: Option<Rule> = None;
    let mut streak = 0;
    let mut stop = SubproblemStop::MaxIterations;
    let mut iterations = 0;
    for _ in 0..config.max_iters {
        iterations += 1;
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let mut ro = policy.rollout(lib, &spec, rng);
            ro.reward = score(&ro.rule)?;
            batch.push(ro);
        }
        for ro in &batch {
            let better = match &best {
                None => true,
                Some((r, v)) => ro.reward > *v || (ro.reward == *v && ro.rule < *r),
            };
            if better {
                best = Some((ro.rule.clone(), ro.reward));
            }
        }
        let stats = risk_seeking_update(&mut policy, &spec, &batch, config.epsilon, config.lr, config.entropy_coef)?;
        let greedy = policy.greedy(lib, &spec).rule;
        if last_greedy.as_ref() == Some(&greedy) {
            streak += 1;
        } else {
            streak = 1;
            last_greedy = Some(greedy.clone());
        }
        let greedy_reward = score(&greedy)?;
        if best.as_ref().is_some_and(|(_, v)| greedy_reward > *v) {
            best = Some((greedy.clone(), greedy_reward));
        }
        let greedy_is_best = best.as_ref().is_some_and(|(r, _)| *r == greedy);
        if streak >= config.early_stop && greedy_is_best {
            stop = SubproblemStop::IdenticalRules;
            break;
        }
        if stats.grad_norm < config.grad_tol {
            stop = SubproblemStop::GradientNorm;
            break;
        }
    }
    let (rule, reward) = best.expect("at least one iteration");
    Ok(SubproblemResult {
        rule,
        reward,
        policy,
        iterations,
        stop,
        evaluations: cache.len(),
    })
}

/// Searches for the rule with the lowest dual price against a fitted master
/// problem.
#[allow(clippy::too_many_arguments)]
pub fn solve_subproblem(
    init: PolicyInit,
    fitted: &FittedRmp,
    rules: &[Rule],
    dataset: &Dataset,
    reg: &RegularizerSpec,
    cfg: &EvalConfig,
    lib: &PredicateLibrary,
    head: Pred,
    fixed_prefix: &[Pred],
    config: &SubproblemConfig,
    rng: &mut impl Rng,
) -> Result<SubproblemResult, GenError> {
    let pricer = Pricer::new(head, fitted, rules, dataset, reg, cfg)?;
    search_policy(init, &pricer, lib, head, fixed_prefix, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{brute_force_subproblem, Token, DEFAULT_BUDGET};
    use crate::logic::TemporalRelation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lib(n: usize) -> PredicateLibrary {
        let mut names: Vec<String> = (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect();
        names.push("Y".into());
        PredicateLibrary::new(names, vec!["Y".to_string()]).unwrap()
    }

    #[test]
    fn nearest_rank_quantile() {
        let v = [5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(quantile_nearest_rank(&v, 0.7), 4.0);
        assert_eq!(quantile_nearest_rank(&v, 0.0), 1.0);
        assert_eq!(quantile_nearest_rank(&v, 1.0), 5.0);
        assert_eq!(quantile_nearest_rank(&v, 0.2), 1.0);
    }

    fn batch(pol: &PolicyParams, l: &PredicateLibrary, spec: &RolloutSpec, n: usize, seed: u64) -> Vec<Rollout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut r = pol.rollout(l, spec, &mut rng);
                r.reward = (i % 7) as f64 * 0.1 - 0.2;
                r
            })
            .collect()
    }

    #[test]
    fn equal_rewards_leave_only_entropy() {
        let l = lib(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pol = PolicyParams::fresh(&l, 4, 6, &mut rng);
        let spec = RolloutSpec::new(3, 2);
        let mut b = batch(&pol, &l, &spec, 20, 1);
        b.iter_mut().for_each(|r| r.reward = 0.4);
        let (g, st) = risk_seeking_gradient(&pol, &spec, &b, 0.3, 0.0).unwrap();
        assert!(st.degenerate);
        assert!(g.iter().all(|&x| x == 0.0));
        let (g, _) = risk_seeking_gradient(&pol, &spec, &b, 0.3, 0.5).unwrap();
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn small_batches_and_bad_epsilon_are_rejected() {
        let l = lib(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pol = PolicyParams::fresh(&l, 4, 6, &mut rng);
        let spec = RolloutSpec::new(3, 2);
        let b = batch(&pol, &l, &spec, 3, 1);
        assert!(matches!(
            risk_seeking_gradient(&pol, &spec, &b, 0.3, 0.0),
            Err(GenError::BatchTooSmall { n: 3, need: 4 })
        ));
        assert!(matches!(risk_seeking_gradient(&pol, &spec, &b, 0.0, 0.0), Err(GenError::BadEpsilon(_))));
        assert!(matches!(risk_seeking_gradient(&pol, &spec, &b, 1.5, 0.0), Err(GenError::BadEpsilon(_))));
    }

    #[test]
    fn epsilon_one_is_reinforce_with_minimum_baseline() {
        let l = lib(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pol = PolicyParams::fresh(&l, 4, 6, &mut rng);
        let spec = RolloutSpec::new(3, 3);
        let b = batch(&pol, &l, &spec, 30, 2);
        let (g, st) = risk_seeking_gradient(&pol, &spec, &b, 1.0, 0.0).unwrap();
        let min = b.iter().map(|r| r.reward).fold(f64::INFINITY, f64::min);
        assert_eq!(st.quantile, min);
        assert_eq!(st.n_elite, b.len());
        let mut want = vec![0.0; pol.n_params()];
        for r in &b {
            pol.accumulate_grad(&spec, &r.tokens, (r.reward - min) / b.len() as f64, 0.0, &mut want)
                .unwrap();
        }
        for (x, y) in g.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn update_moves_toward_elite_rules() {
        let l = lib(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pol = PolicyParams::fresh(&l, 4, 6, &mut rng);
        let spec = RolloutSpec::new(2, 1);
        let a = vec![Token::Pred(0), Token::End];
        let before = pol.log_prob(&spec, &a).unwrap();
        for i in 0..50 {
            let mut b = batch(&pol, &l, &spec, 16, 100 + i);
            for r in b.iter_mut() {
                r.reward = if r.rule.body() == [0] { 1.0 } else { 0.0 };
            }
            risk_seeking_update(&mut pol, &spec, &b, 0.3, 0.5, 0.0).unwrap();
        }
        assert!(pol.log_prob(&spec, &a).unwrap() > before);
    }

    #[test]
    fn search_finds_planted_optimum() {
        let l = lib(4);
        let target = Rule::new(4, vec![1, 3], [((3, 1), TemporalRelation::Before)]).unwrap().canonicalize();
        let scorer = |r: &Rule| -> f64 {
            if *r == target {
                1.0
            } else {
                let shared = r.body().iter().filter(|p| target.body().contains(p)).count();
                0.2 * shared as f64 - 0.1 * r.len() as f64
            }
        };
        let bf = brute_force_subproblem(&scorer, &l, 4, 3, DEFAULT_BUDGET).unwrap();
        assert_eq!(bf.rule, target);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = search_policy(PolicyInit::Fresh, &scorer, &l, 4, &[], &SubproblemConfig::default(), &mut rng).unwrap();
        assert_eq!(res.rule, target);
        assert_eq!(res.reward, 1.0);
        assert!(res.evaluations > 1);
    }

    #[test]
    fn search_is_deterministic_under_seed() {
        let l = lib(3);
        let scorer = |r: &Rule| r.body().iter().map(|&p| p as f64).sum::<f64>() - r.len() as f64 * 0.7;
        let cfg = SubproblemConfig {
            max_iters: 20,
            ..Default::default()
        };
        let run = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let r = search_policy(PolicyInit::Fresh, &scorer, &l, 3, &[], &cfg, &mut rng).unwrap();
            (r.rule, r.iterations, r.policy.params().to_vec())
        };
        assert_eq!(run(5), run(5));
    }
}
