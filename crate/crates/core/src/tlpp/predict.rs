use serde::{Deserialize, Serialize};

use super::{EvalConfig, EventSequence, SeqState, TlppError};
use crate::logic::WeightedRuleSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    /// Truncation window after the anchor. `None` uses `30 / lambda(from)`.
    pub window: Option<f64>,
    /// Grid points over the window.
    pub grid_points: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            window: None,
            grid_points: 2000,
        }
    }
}

/// Expected time of the next head event after `from`, given the events in
/// `prefix` (each event only influences the intensity after it occurs).
///
/// Computes `E[t] = from + int_from^H S(t) dt` with `S(t) = exp(-int_from^t
/// lambda)`, which equals `int t lambda S dt + H S(H)` on the truncated
/// window `[from, H]`.
pub fn predict_next_event_time(
    model: &WeightedRuleSet,
    prefix: &EventSequence,
    from: f64,
    cfg: &EvalConfig,
    pcfg: &PredictConfig,
) -> Result<f64, TlppError> {
    let st = SeqState::new(&model.rules, model.head, prefix, cfg);
    let lam = |t: f64| cfg.guard(st.eta(t, &model.weights, model.b0));
    let window = match pcfg.window {
        Some(w) => w,
        None => {
            let l0 = st.groundings.iter().zip(&model.weights).map(|(g, w)| w * g.value_after(from)).sum::<f64>();
            30.0 / cfg.guard(model.b0 + l0)?
        }
    };
    let n = pcfg.grid_points.max(2);
    let h = window / n as f64;
    let mut cum = 0.0;
    let mut surv_prev = 1.0;
    let mut area = 0.0;
    for k in 0..n {
        let mid = from + (k as f64 + 0.5) * h;
        cum += h * lam(mid)?;
        let surv = (-cum).exp();
        area += 0.5 * h * (surv_prev + surv);
        surv_prev = surv;
    }
    Ok(from + area)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rates() {
        let cfg = EvalConfig::default();
        let s = EventSequence::empty("s", 100.0, 2);
        let m1 = WeightedRuleSet::base_only(1, 0.0);
        let e1 = predict_next_event_time(&m1, &s, 0.0, &cfg, &PredictConfig::default()).unwrap();
        assert!((e1 - 1.0).abs() < 1e-3, "{e1}");
        let m2 = WeightedRuleSet::base_only(1, 2f64.ln());
        let e2 = predict_next_event_time(&m2, &s, 3.0, &cfg, &PredictConfig::default()).unwrap();
        assert!((e2 - 3.5).abs() < 1e-3, "{e2}");
        let fixed = PredictConfig { window: Some(50.0), grid_points: 4000 };
        let e3 = predict_next_event_time(&m1, &s, 0.0, &cfg, &fixed).unwrap();
        assert!((e3 - 1.0).abs() < 1e-4, "{e3}");
    }
}
