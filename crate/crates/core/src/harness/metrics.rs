use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::logic::{jaccard, Pred, Rule, WeightedRuleSet};
use crate::reduce::pairwise_sum;
use crate::tlpp::{predict_next_event_time, Dataset, EvalConfig, EventSequence, PredictConfig};

/// Rule-recovery scores against a known rule set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub jaccard: f64,
    /// Mean `|w_learned - w_true|` over the union of both rule sets, a rule
    /// missing from one side counting as weight zero there.
    pub weight_mae: f64,
}

/// Metrics JSON written by the `eval` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub jaccard: f64,
    pub weight_mae: f64,
    pub pred_mae: Option<f64>,
}

pub fn evaluate_recovery(learned: &WeightedRuleSet, truth: &WeightedRuleSet) -> Recovery {
    let mut union: BTreeMap<Rule, (f64, f64)> = BTreeMap::new();
    for (r, &w) in learned.rules.iter().zip(&learned.weights) {
        union.entry(r.canonicalize()).or_default().0 += w;
    }
    for (r, &w) in truth.rules.iter().zip(&truth.weights) {
        union.entry(r.canonicalize()).or_default().1 += w;
    }
    let weight_mae = if union.is_empty() {
        0.0
    } else {
        union.values().map(|(a, b)| (a - b).abs()).sum::<f64>() / union.len() as f64
    };
    Recovery {
        jaccard: jaccard(&learned.rules, &truth.rules),
        weight_mae,
    }
}

/// Where the prediction of a head event starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// The previous head event of the sequence, or time zero for the first.
    #[default]
    PreviousHead,
    SequenceStart,
}

impl Anchor {
    fn at(self, heads: &[f64], i: usize) -> f64 {
        match self {
            Anchor::PreviousHead if i > 0 => heads[i - 1],
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub mae: f64,
    pub n_predictions: usize,
}

fn targets(test: &Dataset, head: Pred) -> Vec<(usize, usize)> {
    test.sequences
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.times(head).len()).map(move |i| (s, i)))
        .collect()
}

/// Events strictly before `t`, with the horizon moved to `t`.
fn history_before(seq: &EventSequence, t: f64) -> EventSequence {
    let events = seq
        .events
        .iter()
        .map(|ts| ts.iter().copied().filter(|&x| x < t).collect())
        .collect();
    EventSequence::new(seq.id.clone(), t, events).expect("truncated history is valid")
}

/// Predicts every head event of `test` from the history strictly before it
/// and reports the mean absolute error of the predicted times.
pub fn evaluate_prediction(
    model: &WeightedRuleSet,
    test: &Dataset,
    cfg: &EvalConfig,
    pcfg: &PredictConfig,
    anchor: Anchor,
) -> Result<PredictionReport, HarnessError> {
    let head = model.head;
    let jobs = targets(test, head);
    if jobs.is_empty() {
        return Err(HarnessError::EmptyTestSet);
    }
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(s, i)| {
            let seq = &test.sequences[s];
            let heads = seq.times(head);
            let t = heads[i];
            let from = anchor.at(heads, i);
            let prefix = history_before(seq, t);
            predict_next_event_time(model, &prefix, from, cfg, pcfg).map(|p| (p - t).abs())
        })
        .collect::<Result<_, _>>()?;
    Ok(PredictionReport {
        mae: pairwise_sum(&errors) / errors.len() as f64,
        n_predictions: errors.len(),
    })
}

/// MAE of predicting `anchor + g` for every head event of `test`, where `g`
/// is the mean anchor-to-event gap in `train`.
pub fn mean_gap_baseline(train: &Dataset, test: &Dataset, head: Pred, anchor: Anchor) -> Result<PredictionReport, HarnessError> {
    let gaps = |d: &Dataset| -> Vec<(f64, f64)> {
        targets(d, head)
            .into_iter()
            .map(|(s, i)| {
                let heads = d.sequences[s].times(head);
                (anchor.at(heads, i), heads[i])
            })
            .collect()
    };
    let train_gaps = gaps(train);
    let test_gaps = gaps(test);
    if test_gaps.is_empty() || train_gaps.is_empty() {
        return Err(HarnessError::EmptyTestSet);
    }
    let g = pairwise_sum(&train_gaps.iter().map(|(a, t)| t - a).collect::<Vec<_>>()) / train_gaps.len() as f64;
    let errors: Vec<f64> = test_gaps.iter().map(|(a, t)| (a + g - t).abs()).collect();
    Ok(PredictionReport {
        mae: pairwise_sum(&errors) / errors.len() as f64,
        n_predictions: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logic::TemporalRelation;

    fn rules() -> (Rule, Rule) {
        (
            Rule::unary(3, 0),
            Rule::new(3, vec![0, 1], [((0, 1), TemporalRelation::Before)]).unwrap(),
        )
    }

    #[test]
    fn recovery_examples() {
        let (r1, r2) = rules();
        let truth = WeightedRuleSet::new(3, vec![r1.clone(), r2.clone()], vec![0.5, 0.8], 0.0).unwrap();
        assert_eq!(
            evaluate_recovery(&truth, &truth),
            Recovery {
                jaccard: 1.0,
                weight_mae: 0.0
            }
        );
        let one = WeightedRuleSet::new(3, vec![r2.clone()], vec![0.8], 0.0).unwrap();
        let none = WeightedRuleSet::base_only(3, 0.0);
        let rec = evaluate_recovery(&none, &one);
        assert_eq!((rec.jaccard, rec.weight_mae), (0.0, 0.8));
        let learned = WeightedRuleSet::new(3, vec![r2, r1], vec![0.5, 0.8], 0.0).unwrap();
        let rec = evaluate_recovery(&learned, &truth);
        assert_eq!(rec.jaccard, 1.0);
        assert!((rec.weight_mae - 0.3).abs() < 1e-12);
        let shifted = WeightedRuleSet::new(3, truth.rules.clone(), vec![0.6, 0.5], 0.0).unwrap();
        assert!((evaluate_recovery(&shifted, &truth).weight_mae - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let model = WeightedRuleSet::base_only(1, 0.0);
        let empty = Dataset {
            horizon: 1.0,
            sequences: vec![EventSequence::empty("s", 1.0, 2)],
        };
        let r = evaluate_prediction(&model, &empty, &EvalConfig::default(), &PredictConfig::default(), Anchor::PreviousHead);
        assert!(matches!(r, Err(HarnessError::EmptyTestSet)));
    }

    #[test]
    fn anchors() {
        let seq = EventSequence::new("s", 10.0, vec![vec![], vec![2.0, 5.0]]).unwrap();
        let d = Dataset {
            horizon: 10.0,
            sequences: vec![seq],
        };
        let model = WeightedRuleSet::base_only(1, 0.0);
        let pcfg = PredictConfig {
            window: Some(60.0),
            grid_points: 20_000,
        };
        let cfg = EvalConfig::default();
        // unit rate predicts anchor + 1
        let r = evaluate_prediction(&model, &d, &cfg, &pcfg, Anchor::PreviousHead).unwrap();
        assert!((r.mae - (1.0 + 2.0) / 2.0).abs() < 1e-3, "{}", r.mae);
        let r = evaluate_prediction(&model, &d, &cfg, &pcfg, Anchor::SequenceStart).unwrap();
        assert!((r.mae - (1.0 + 4.0) / 2.0).abs() < 1e-3, "{}", r.mae);
        let b = mean_gap_baseline(&d, &d, 1, Anchor::PreviousHead).unwrap();
        assert!((b.mae - 0.5).abs() < 1e-12);
    }
}
