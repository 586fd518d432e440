use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunConfig, TraceRow};
use crate::logic::{parse_rule, Pred, PredicateLibrary, Rule, WeightedRuleSet};
use crate::simulator::RuleEntry;
use crate::tlpp::{valid_groundings, Dataset, DatasetFile, EvalConfig, Kernel};

pub const TRACE_HEADER: [&str; 6] = ["iter", "wall_secs", "loglik", "objective", "rule", "reward"];

/// Reads a dataset and resolves its predicate library and head.
///
/// A library stored in the file is used as is; `head`, when given, must name
/// one of its predicates and becomes the only head. Without a stored library
/// the predicates are taken from the events (first appearance order) and
/// `head` is required.
pub fn load_dataset(path: impl AsRef<Path>, head: Option<&str>) -> Result<(Dataset, PredicateLibrary, Pred), HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| HarnessError::BadInput(format!("{}: {e}", path.display())))?;
    let lib = match (&file.library, head) {
        (Some(lib), None) => {
            if lib.head_names().len() != 1 {
                return Err(HarnessError::BadInput(format!(
                    "{} declares {} heads; choose one",
                    path.display(),
                    lib.head_names().len()
                )));
            }
            lib.clone()
        }
        (Some(lib), Some(h)) => {
            if lib.index_of(h).is_none() {
                return Err(HarnessError::BadInput(format!("`{h}` is not a predicate of {}", path.display())));
            }
            PredicateLibrary::new(lib.names().to_vec(), vec![h.to_string()])?
        }
        (None, Some(h)) => {
            let mut names = file.predicate_names();
            if !names.iter().any(|n| n == h) {
                names.push(h.to_string());
            }
            PredicateLibrary::new(names, vec![h.to_string()])?
        }
        (None, None) => {
            return Err(HarnessError::BadInput(format!(
                "{} has no predicate library; name the head predicate",
                path.display()
            )))
        }
    };
    let head = lib.index_of(&lib.head_names()[0]).expect("head is a predicate");
    let dataset = Dataset::from_file(&file, &lib)?;
    Ok((dataset, lib, head))
}

/// A learned model on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub library: PredicateLibrary,
    pub head: String,
    pub b0: f64,
    pub kernel: Kernel,
    pub eq_tol: f64,
    pub lambda0: f64,
    pub rules: Vec<RuleEntry>,
}

impl ModelFile {
    pub fn new(lib: &PredicateLibrary, model: &WeightedRuleSet, config: &RunConfig) -> Self {
        Self {
            library: lib.clone(),
            head: lib.name(model.head).to_string(),
            b0: model.b0,
            kernel: config.kernel,
            eq_tol: config.eq_tol,
            lambda0: config.lambda0,
            rules: model
                .rules
                .iter()
                .zip(&model.weights)
                .map(|(r, &w)| RuleEntry {
                    rule: r.to_dsl(lib),
                    weight: w,
                })
                .collect(),
        }
    }

    pub fn rule_set(&self) -> Result<WeightedRuleSet, HarnessError> {
        let head = self
            .library
            .index_of(&self.head)
            .ok_or_else(|| HarnessError::BadInput(format!("unknown head `{}`", self.head)))?;
        let mut rules = Vec::with_capacity(self.rules.len());
        let mut weights = Vec::with_capacity(self.rules.len());
        for e in &self.rules {
            rules.push(parse_rule(&e.rule, &self.library)?);
            weights.push(e.weight);
        }
        WeightedRuleSet::new(head, rules, weights, self.b0).map_err(|e| HarnessError::BadInput(e.to_string()))
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            kernel: self.kernel,
            eq_tol: self.eq_tol,
            ..EvalConfig::default()
        }
    }
}

pub fn write_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    fs::write(path, serde_json::to_string_pretty(model).expect("model serializes"))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let m: ModelFile =
        serde_json::from_str(&text).map_err(|e| HarnessError::BadInput(format!("{}: {e}", path.display())))?;
    m.rule_set()?;
    Ok(m)
}

/// CSV with columns `iter,wall_secs,loglik,objective,rule,reward`; the first
/// row (base rate only) leaves `rule` and `reward` empty.
pub fn write_trace_csv(rows: &[TraceRow], out: impl Write) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| HarnessError::Io(std::io::Error::other(e));
    w.write_record(TRACE_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.wall_secs.to_string(),
            r.loglik.to_string(),
            r.objective.to_string(),
            r.rule.clone().unwrap_or_default(),
            r.reward.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `text` and counts its valid groundings over each whole sequence.
pub fn rule_check(
    text: &str,
    dataset: &Dataset,
    lib: &PredicateLibrary,
    eq_tol: f64,
) -> Result<(Rule, Vec<(String, usize)>), HarnessError> {
    let rule = parse_rule(text, lib)?;
    let counts = dataset
        .sequences
        .iter()
        .map(|s| (s.id.clone(), valid_groundings(&rule, s, f64::INFINITY, eq_tol).len()))
        .collect();
    Ok((rule, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tlpp::EventSequence;

    fn fig2() -> (Dataset, PredicateLibrary) {
        let lib = PredicateLibrary::new(["A", "B", "Y"], ["Y"]).unwrap();
        let s = EventSequence::new("s0", 6.0, vec![vec![1.0, 4.0], vec![2.0, 3.0, 5.0], vec![5.5]]).unwrap();
        (
            Dataset {
                horizon: 6.0,
                sequences: vec![s],
            },
            lib,
        )
    }

    #[test]
    fn dataset_library_resolution() {
        let (d, lib) = fig2();
        let dir = tempfile::tempdir().unwrap();
        let with = dir.path().join("with.json");
        fs::write(&with, serde_json::to_string(&d.to_file(&lib)).unwrap()).unwrap();
        let (d2, lib2, head) = load_dataset(&with, None).unwrap();
        assert_eq!((d2, lib2.clone(), head), (d.clone(), lib.clone(), 2));
        let (_, lib3, head) = load_dataset(&with, Some("A")).unwrap();
        assert_eq!((lib3.head_names(), head), (&["A".to_string()][..], 0));

        let mut bare = d.to_file(&lib);
        bare.library = None;
        let without = dir.path().join("without.json");
        fs::write(&without, serde_json::to_string(&bare).unwrap()).unwrap();
        assert!(matches!(load_dataset(&without, None), Err(HarnessError::BadInput(_))));
        let (_, lib4, head) = load_dataset(&without, Some("Z")).unwrap();
        assert_eq!(lib4.names(), &["A", "B", "Y", "Z"]);
        assert_eq!(head, 3);

        fs::write(&without, "[1, 2").unwrap();
        assert!(matches!(load_dataset(&without, Some("Y")), Err(HarnessError::BadInput(_))));
    }

    #[test]
    fn rule_check_counts_fig2() {
        let (d, lib) = fig2();
        let (rule, counts) = rule_check("Y <- A ^ B : A before B", &d, &lib, 0.01).unwrap();
        assert_eq!(rule.len(), 2);
        assert_eq!(counts, vec![("s0".to_string(), 4)]);
        assert!(rule_check("Y <- A ^ Q", &d, &lib, 0.01).is_err());
    }

    #[test]
    fn trace_csv_quotes_rules() {
        let rows = vec![
            TraceRow {
                iter: 0,
                wall_secs: 0.5,
                loglik: -3.0,
                objective: 1.5,
                rule: None,
                reward: None,
                weights: vec![],
                b0: 0.0,
            },
            TraceRow {
                iter: 1,
                wall_secs: 1.0,
                loglik: -2.0,
                objective: 1.0,
                rule: Some("Y <- A ^ B ^ C : A before B, B before C".into()),
                reward: Some(0.25),
                weights: vec![0.4],
                b0: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iter,wall_secs,loglik,objective,rule,reward"));
        assert_eq!(lines.next(), Some("0,0.5,-3,1.5,,"));
        assert_eq!(lines.next(), Some("1,1,-2,1,\"Y <- A ^ B ^ C : A before B, B before C\",0.25"));
    }

    #[test]
    fn model_round_trip() {
        let (_, lib) = fig2();
        let rule = parse_rule("Y <- B ^ A : A before B", &lib).unwrap();
        let model = WeightedRuleSet::new(2, vec![rule], vec![0.7], -0.3).unwrap();
        let mf = ModelFile::new(&lib, &model, &RunConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_model(&mf, &p).unwrap();
        let back = read_model(&p).unwrap();
        assert_eq!(back, mf);
        assert_eq!(back.rule_set().unwrap(), model);
    }
}
