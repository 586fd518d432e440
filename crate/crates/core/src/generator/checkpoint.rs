//! JSON policy checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenError, PolicyDims, PolicyParams, TokenVocab};
use crate::logic::PredicateLibrary;

const FORMAT: &str = "tlrl-policy";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// On-disk form of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    /// Fingerprint of the predicate library the policy was trained on.
    pub vocab_hash: String,
    pub dims: PolicyDims,
    pub arrays: Vec<NamedArray>,
}

impl PolicyCheckpoint {
    pub fn from_policy(policy: &PolicyParams) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            vocab_hash: policy.vocab().fingerprint().to_string(),
            dims: policy.dims(),
            arrays: policy
                .arrays()
                .into_iter()
                .map(|(name, r, c, data)| NamedArray {
                    name: name.into(),
                    shape: [r, c],
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_policy(self, lib: &PredicateLibrary) -> Result<PolicyParams, GenError> {
        let corrupt = |m: String| Err(GenError::CorruptFile(m));
        if self.format != FORMAT {
            return corrupt(format!("unknown format `{}`", self.format));
        }
        if self.version != VERSION {
            return corrupt(format!("unsupported version {}", self.version));
        }
        let vocab = TokenVocab::new(lib);
        if self.vocab_hash != vocab.fingerprint() || self.dims.n_preds != vocab.n_preds() {
            return Err(GenError::VocabMismatch);
        }
        let layout = self.dims.layout();
        if layout.len() != self.arrays.len() {
            return corrupt(format!("expected {} arrays, found {}", layout.len(), self.arrays.len()));
        }
        let mut theta = Vec::with_capacity(self.dims.n_params());
        for ((name, r, c), a) in layout.into_iter().zip(self.arrays) {
            if a.name != name || a.shape != [r, c] || a.data.len() != r * c {
                return corrupt(format!("array `{}` does not match `{name}` [{r}, {c}]", a.name));
            }
            if a.data.iter().any(|v| !v.is_finite()) {
                return corrupt(format!("array `{name}` has non-finite entries"));
            }
            theta.extend(a.data);
        }
        Ok(PolicyParams::from_parts(self.dims, vocab, theta))
    }
}

pub fn save_policy(policy: &PolicyParams, path: impl AsRef<Path>) -> Result<(), GenError> {
    if policy.params().iter().any(|v| !v.is_finite()) {
        return Err(GenError::BadConfig("policy has non-finite parameters".into()));
    }
    let json = serde_json::to_string(&PolicyCheckpoint::from_policy(policy))
        .map_err(|e| GenError::CorruptFile(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Loads a checkpoint, rejecting it unless it was trained on `lib`.
pub fn load_policy(path: impl AsRef<Path>, lib: &PredicateLibrary) -> Result<PolicyParams, GenError> {
    let text = fs::read_to_string(path)?;
    let ck: PolicyCheckpoint = serde_json::from_str(&text).map_err(|e| GenError::CorruptFile(e.to_string()))?;
    ck.into_policy(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::RolloutSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lib() -> PredicateLibrary {
        PredicateLibrary::new(["A", "B", "C", "Y"], ["Y"]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let l = lib();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PolicyParams::fresh(&l, 16, 32, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_policy(&p, &path).unwrap();
        let q = load_policy(&path, &l).unwrap();
        assert!(p.params().iter().zip(q.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p, q);

        let spec = RolloutSpec::new(3, 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(p.rollout(&l, &spec, &mut r1).tokens, q.rollout(&l, &spec, &mut r2).tokens);
        }
    }

    #[test]
    fn other_library_is_rejected() {
        let l = lib();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PolicyParams::fresh(&l, 4, 4, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_policy(&p, &path).unwrap();
        let other = PredicateLibrary::new(["A", "B", "D", "Y"], ["Y"]).unwrap();
        assert!(matches!(load_policy(&path, &other), Err(GenError::VocabMismatch)));
    }

    #[test]
    fn damaged_files_are_corrupt() {
        let l = lib();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_policy(&path, &l), Err(GenError::CorruptFile(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ck = PolicyCheckpoint::from_policy(&PolicyParams::fresh(&l, 4, 4, &mut rng));
        ck.arrays[2].data.pop();
        fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
        assert!(matches!(load_policy(&path, &l), Err(GenError::CorruptFile(_))));
    }
}
