use serde::{Deserialize, Serialize};

use super::TlppError;
use crate::logic::{Pred, PredicateLibrary};

/// Timestamped events of one sequence, grouped per predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub id: String,
    pub horizon: f64,
    /// `events[p]` holds the sorted times of predicate `p`.
    pub events: Vec<Vec<f64>>,
}

impl EventSequence {
    pub fn empty(id: impl Into<String>, horizon: f64, n_preds: usize) -> Self {
        Self {
            id: id.into(),
            horizon,
            events: vec![Vec::new(); n_preds],
        }
    }

    /// Builds a sequence from per-predicate time lists, sorting each list and
    /// checking that every time is finite and within `[0, horizon]`.
    pub fn new(id: impl Into<String>, horizon: f64, mut events: Vec<Vec<f64>>) -> Result<Self, TlppError> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(TlppError::Data(format!("invalid horizon {horizon}")));
        }
        for times in &mut events {
            if let Some(&t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0 && **t <= horizon)) {
                return Err(TlppError::Data(format!("event time {t} outside [0, {horizon}]")));
            }
            times.sort_by(f64::total_cmp);
        }
        Ok(Self {
            id: id.into(),
            horizon,
            events,
        })
    }

    pub fn times(&self, p: Pred) -> &[f64] {
        self.events.get(p).map_or(&[], Vec::as_slice)
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    /// Copy holding only events strictly before `t` (horizon unchanged).
    pub fn truncated_before(&self, t: f64) -> Self {
        Self {
            id: self.id.clone(),
            horizon: self.horizon,
            events: self
                .events
                .iter()
                .map(|ts| ts[..ts.partition_point(|&x| x < t)].to_vec())
                .collect(),
        }
    }
}

/// A collection of sequences sharing a predicate library and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub horizon: f64,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn count_events(&self, p: Pred) -> usize {
        self.sequences.iter().map(|s| s.times(p).len()).sum()
    }

    pub fn from_file(file: &DatasetFile, lib: &PredicateLibrary) -> Result<Self, TlppError> {
        let mut sequences = Vec::with_capacity(file.sequences.len());
        for s in &file.sequences {
            let mut events = vec![Vec::new(); lib.len()];
            for e in &s.events {
                let p = lib
                    .index_of(&e.pred)
                    .ok_or_else(|| TlppError::UnknownPredicate(e.pred.clone()))?;
                events[p].push(e.t);
            }
            sequences.push(
                EventSequence::new(s.id.clone(), file.horizon, events)
                    .map_err(|e| TlppError::Data(format!("sequence `{}`: {e}", s.id)))?,
            );
        }
        Ok(Self {
            horizon: file.horizon,
            sequences,
        })
    }

    /// Events are written in time order; ties keep predicate-index order.
    pub fn to_file(&self, lib: &PredicateLibrary) -> DatasetFile {
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let mut events: Vec<(f64, usize)> = s
                    .events
                    .iter()
                    .enumerate()
                    .flat_map(|(p, ts)| ts.iter().map(move |&t| (t, p)))
                    .collect();
                events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                SequenceFile {
                    id: s.id.clone(),
                    events: events
                        .into_iter()
                        .map(|(t, p)| EventRecord {
                            pred: lib.name(p).to_string(),
                            t,
                        })
                        .collect(),
                }
            })
            .collect();
        DatasetFile {
            library: Some(lib.clone()),
            horizon: self.horizon,
            sequences,
        }
    }
}

/// On-disk dataset:
/// `{"library": {"names": [..], "heads": [..]}, "horizon": T,
///   "sequences": [{"id": str, "events": [{"pred": str, "t": float}]}]}`.
/// The library is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library: Option<PredicateLibrary>,
    pub horizon: f64,
    pub sequences: Vec<SequenceFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub id: String,
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub pred: String,
    pub t: f64,
}

impl DatasetFile {
    /// Distinct predicate names in first-appearance order.
    pub fn predicate_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.sequences {
            for e in &s.events {
                if !out.contains(&e.pred) {
                    out.push(e.pred.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_times() {
        assert!(EventSequence::new("s", 2.0, vec![vec![0.5, 2.5]]).is_err());
        assert!(EventSequence::new("s", 2.0, vec![vec![f64::NAN]]).is_err());
        let s = EventSequence::new("s", 2.0, vec![vec![1.5, 0.5]]).unwrap();
        assert_eq!(s.times(0), &[0.5, 1.5]);
    }

    #[test]
    fn json_round_trip_and_unknown_predicate() {
        let lib = PredicateLibrary::new(["A", "Y"], ["Y"]).unwrap();
        let text = r#"{"horizon": 3.0, "sequences": [
            {"id": "a", "events": [{"pred": "Y", "t": 2.0}, {"pred": "A", "t": 1.0}]}]}"#;
        let f: DatasetFile = serde_json::from_str(text).unwrap();
        let d = Dataset::from_file(&f, &lib).unwrap();
        assert_eq!(d.sequences[0].times(0), &[1.0]);
        assert_eq!(Dataset::from_file(&d.to_file(&lib), &lib).unwrap(), d);

        let other = PredicateLibrary::new(["B", "Y"], ["Y"]).unwrap();
        assert!(matches!(Dataset::from_file(&f, &other), Err(TlppError::UnknownPredicate(p)) if p == "A"));
    }

    #[test]
    fn truncation_is_strict() {
        let s = EventSequence::new("s", 5.0, vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(s.truncated_before(2.0).times(0), &[1.0]);
    }
}
