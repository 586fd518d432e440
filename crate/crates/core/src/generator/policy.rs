//! Recurrent token policy with masked softmax heads and backpropagation
//! through the unrolled rollout.
//!
//! The cell is a single-layer GRU:
//!
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! n  = tanh(Wn x + bn + r * (Un h + bhn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! The input `x` is the embedding of the previous token; at a relation slot
//! the embedding of the earlier predicate being related is added. The
//! predicate head scores predicates and the end token, the relation head
//! scores the four relations. Masked entries get probability exactly zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{decode_tokens, rel_index, GenError, MaskState, RolloutSpec, Slot, Token, TokenVocab};
use crate::logic::{Pred, PredicateLibrary, Rule, TemporalRelation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub n_preds: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl PolicyDims {
    /// `(name, rows, cols)` of every parameter array, in storage order.
    pub(crate) fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let (e, h) = (self.embed, self.hidden);
        vec![
            ("embedding", self.n_preds + 6, e),
            ("w_z", h, e),
            ("u_z", h, h),
            ("b_z", h, 1),
            ("w_r", h, e),
            ("u_r", h, h),
            ("b_r", h, 1),
            ("w_n", h, e),
            ("u_n", h, h),
            ("b_n", h, 1),
            ("b_hn", h, 1),
            ("pred_out", self.n_preds + 1, h),
            ("pred_bias", self.n_preds + 1, 1),
            ("rel_out", 4, h),
            ("rel_bias", 4, 1),
        ]
    }

    pub(crate) fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Clone, Copy)]
struct Offsets {
    emb: usize,
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wn: usize,
    un: usize,
    bn: usize,
    bhn: usize,
    po: usize,
    pb: usize,
    ro: usize,
    rb: usize,
}

impl Offsets {
    fn new(d: &PolicyDims) -> Self {
        let mut off = [0usize; 15];
        let mut acc = 0;
        for (i, (_, r, c)) in d.layout().iter().enumerate() {
            off[i] = acc;
            acc += r * c;
        }
        Self {
            emb: off[0],
            wz: off[1],
            uz: off[2],
            bz: off[3],
            wr: off[4],
            ur: off[5],
            br: off[6],
            wn: off[7],
            un: off[8],
            bn: off[9],
            bhn: off[10],
            po: off[11],
            pb: off[12],
            ro: off[13],
            rb: off[14],
        }
    }
}

/// Policy parameters, stored as one flat array in [`PolicyDims::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub(crate) dims: PolicyDims,
    pub(crate) vocab: TokenVocab,
    pub(crate) theta: Vec<f64>,
}

/// One sampled rule with the bookkeeping needed for the policy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<Token>,
    /// Log-probability of each sampled step (forced steps are absent).
    pub log_probs: Vec<f64>,
    /// Entropy of the masked distribution at each sampled step.
    pub entropies: Vec<f64>,
    pub rule: Rule,
    pub reward: f64,
}

impl Rollout {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn entropy(&self) -> f64 {
        self.entropies.iter().sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cached activations of one recurrent step.
struct StepCache {
    input: usize,
    query: Option<Pred>,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
    /// `None` for forced steps.
    out: Option<StepOutput>,
}

struct StepOutput {
    relation_head: bool,
    allowed: Vec<bool>,
    probs: Vec<f64>,
    action: usize,
}

/// How actions are chosen during a forward pass.
enum Driver<'a, R: Rng> {
    Sample(&'a mut R),
    Greedy,
    Replay(&'a [Token]),
}

impl PolicyParams {
    /// Fresh parameters: uniform in `[-s, s]` with `s = 1/sqrt(hidden)` for
    /// the cell, smaller for embeddings and output heads.
    pub fn fresh(lib: &PredicateLibrary, embed: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let vocab = TokenVocab::new(lib);
        let dims = PolicyDims {
            n_preds: vocab.n_preds(),
            embed,
            hidden,
        };
        let s_cell = 1.0 / (hidden as f64).sqrt();
        let mut theta = Vec::with_capacity(dims.n_params());
        for (name, r, c) in dims.layout() {
            let s = match name {
                "embedding" => 0.5,
                "pred_out" | "rel_out" => 0.1,
                n if n.starts_with('b') || n.ends_with("bias") => 0.0,
                _ => s_cell,
            };
            for _ in 0..r * c {
                theta.push(if s == 0.0 { 0.0 } else { rng.gen_range(-s..s) });
            }
        }
        Self { dims, vocab, theta }
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn vocab(&self) -> &TokenVocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn from_parts(dims: PolicyDims, vocab: TokenVocab, theta: Vec<f64>) -> Self {
        Self { dims, vocab, theta }
    }

    /// Named slices of the parameter vector.
    pub fn arrays(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let mut acc = 0;
        self.dims
            .layout()
            .into_iter()
            .map(|(n, r, c)| {
                let s = &self.theta[acc..acc + r * c];
                acc += r * c;
                (n, r, c, s)
            })
            .collect()
    }

    fn cell(&self, o: &Offsets, input: usize, query: Option<Pred>, h_prev: &[f64]) -> StepCache {
        let (e, hd) = (self.dims.embed, self.dims.hidden);
        let t = &self.theta;
        let mut x: Vec<f64> = t[o.emb + input * e..o.emb + (input + 1) * e].to_vec();
        if let Some(q) = query {
            for (xi, v) in x.iter_mut().zip(&t[o.emb + q * e..o.emb + (q + 1) * e]) {
                *xi += v;
            }
        }
        let affine = |w: usize, u: usize, b: usize, i: usize| {
            let mut a = t[b + i];
            a += t[w + i * e..w + (i + 1) * e].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            (a, t[u + i * hd..u + (i + 1) * hd].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>())
        };
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        let mut u = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for i in 0..hd {
            let (a, b) = affine(o.wz, o.uz, o.bz, i);
            z[i] = sigmoid(a + b);
            let (a, b) = affine(o.wr, o.ur, o.br, i);
            r[i] = sigmoid(a + b);
            let (a, b) = affine(o.wn, o.un, o.bn, i);
            u[i] = b + t[o.bhn + i];
            n[i] = (a + r[i] * u[i]).tanh();
            h[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
        }
        StepCache {
            input,
            query,
            x,
            h_prev: h_prev.to_vec(),
            z,
            r,
            u,
            n,
            h,
            out: None,
        }
    }

    fn logits(&self, o: &Offsets, relation_head: bool, h: &[f64]) -> Vec<f64> {
        let hd = self.dims.hidden;
        let (w, b, k) = if relation_head {
            (o.ro, o.rb, 4)
        } else {
            (o.po, o.pb, self.dims.n_preds + 1)
        };
        (0..k)
            .map(|i| self.theta[b + i] + self.theta[w + i * hd..w + (i + 1) * hd].iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn masked_softmax(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
        let mx = logits
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits
            .iter()
            .zip(allowed)
            .map(|(l, &a)| if a { (l - mx).exp() } else { 0.0 })
            .collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    /// Runs the policy over one rollout; returns tokens and per-step caches.
    fn forward<R: Rng>(&self, spec: &RolloutSpec, mut driver: Driver<'_, R>) -> Result<(Vec<Token>, Vec<StepCache>), GenError> {
        let o = Offsets::new(&self.dims);
        let vocab = &self.vocab;
        let mut mask = MaskState::new(vocab);
        let mut h = vec![0.0; self.dims.hidden];
        let mut prev = vocab.bos();
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        let mut replay_pos = 0;
        loop {
            match mask.slot(vocab, spec) {
                Slot::Finished => {
                    if tokens.last() != Some(&Token::End) {
                        // the length cap ends the rule; a replayed end token is optional
                        if let Driver::Replay(ts) = &driver {
                            match ts.get(replay_pos) {
                                Some(Token::End) => replay_pos += 1,
                                Some(t) => {
                                    return Err(GenError::MalformedTokenSequence(format!("expected end, found {t:?}")))
                                }
                                None => {}
                            }
                        }
                        tokens.push(Token::End);
                    }
                    break;
                }
                Slot::Predicate(Some(p)) => {
                    if let Some(t) = next_replay(&driver, &mut replay_pos, "forced predicate")? {
                        if t != Token::Pred(p) {
                            return Err(GenError::MalformedTokenSequence("fixed prefix mismatch".into()));
                        }
                    }
                    let c = self.cell(&o, prev, None, &h);
                    h = c.h.clone();
                    steps.push(c);
                    mask.push_pred(p);
                    tokens.push(Token::Pred(p));
                    prev = vocab.input_index(Token::Pred(p));
                }
                slot @ (Slot::Predicate(None) | Slot::Relation { .. }) => {
                    let (relation_head, query) = match slot {
                        Slot::Relation { query } => (true, Some(query)),
                        _ => (false, None),
                    };
                    let mut c = self.cell(&o, prev, query, &h);
                    let logits = self.logits(&o, relation_head, &c.h);
                    let allowed = if relation_head {
                        vec![true; 4]
                    } else {
                        mask.predicate_mask(vocab, spec)
                    };
                    let probs = Self::masked_softmax(&logits, &allowed);
                    let action = match &mut driver {
                        Driver::Sample(rng) => {
                            let u: f64 = rng.gen();
                            let mut acc = 0.0;
                            let mut pick = None;
                            for (i, &p) in probs.iter().enumerate() {
                                if allowed[i] {
                                    acc += p;
                                    pick = Some(i);
                                    if u < acc {
                                        break;
                                    }
                                }
                            }
                            pick.expect("at least one allowed token")
                        }
                        Driver::Greedy => {
                            let mut best = usize::MAX;
                            for (i, &p) in probs.iter().enumerate() {
                                if allowed[i] && (best == usize::MAX || p > probs[best]) {
                                    best = i;
                                }
                            }
                            best
                        }
                        Driver::Replay(_) => {
                            let t = next_replay(&driver, &mut replay_pos, "sampled token")?.expect("replay");
                            let a = match (relation_head, t) {
                                (true, Token::Rel(r)) => rel_index(r),
                                (false, Token::Pred(p)) if p < vocab.n_preds() => p,
                                (false, Token::End) => vocab.n_preds(),
                                _ => return Err(GenError::MalformedTokenSequence(format!("unexpected {t:?}"))),
                            };
                            if !allowed[a] {
                                return Err(GenError::MalformedTokenSequence(format!("{t:?} is masked")));
                            }
                            a
                        }
                    };
                    let token = if relation_head {
                        mask.push_rel();
                        Token::Rel(TemporalRelation::ALL[action])
                    } else if action == vocab.n_preds() {
                        mask.finish();
                        Token::End
                    } else {
                        mask.push_pred(action);
                        Token::Pred(action)
                    };
                    h = c.h.clone();
                    c.out = Some(StepOutput {
                        relation_head,
                        allowed,
                        probs,
                        action,
                    });
                    steps.push(c);
                    tokens.push(token);
                    prev = vocab.input_index(token);
                }
            }
        }
        if let Driver::Replay(ts) = driver {
            if replay_pos < ts.len() {
                return Err(GenError::MalformedTokenSequence("trailing tokens".into()));
            }
        }
        Ok((tokens, steps))
    }

    fn finish_rollout(&self, lib: &PredicateLibrary, spec: &RolloutSpec, tokens: Vec<Token>, steps: &[StepCache]) -> Rollout {
        let mut log_probs = Vec::new();
        let mut entropies = Vec::new();
        for s in steps {
            if let Some(out) = &s.out {
                log_probs.push(out.probs[out.action].ln());
                entropies.push(entropy(&out.probs));
            }
        }
        let rule = decode_tokens(&tokens, spec.head, lib).expect("masked rollouts decode");
        Rollout {
            tokens,
            log_probs,
            entropies,
            rule,
            reward: f64::NAN,
        }
    }

    /// Samples one rule. The reward is left unset (`NaN`).
    pub fn rollout(&self, lib: &PredicateLibrary, spec: &RolloutSpec, rng: &mut impl Rng) -> Rollout {
        let (tokens, steps) = self.forward(spec, Driver::Sample(rng)).expect("sampling cannot fail");
        self.finish_rollout(lib, spec, tokens, &steps)
    }

    /// Most likely token at every step.
    pub fn greedy(&self, lib: &PredicateLibrary, spec: &RolloutSpec) -> Rollout {
        let (tokens, steps) = self
            .forward::<rand::rngs::mock::StepRng>(spec, Driver::Greedy)
            .expect("greedy cannot fail");
        self.finish_rollout(lib, spec, tokens, &steps)
    }

    /// Log-probability of a token sequence under the masks of `spec`.
    pub fn log_prob(&self, spec: &RolloutSpec, tokens: &[Token]) -> Result<f64, GenError> {
        let (_, steps) = self.forward::<rand::rngs::mock::StepRng>(spec, Driver::Replay(tokens))?;
        Ok(steps
            .iter()
            .filter_map(|s| s.out.as_ref().map(|o| o.probs[o.action].ln()))
            .sum())
    }

    /// Adds `d/dtheta [coef_logp * log pi(tokens) + coef_ent * sum of step
    /// entropies]` into `grad`.
    pub fn accumulate_grad(
        &self,
        spec: &RolloutSpec,
        tokens: &[Token],
        coef_logp: f64,
        coef_ent: f64,
        grad: &mut [f64],
    ) -> Result<(), GenError> {
        let (_, steps) = self.forward::<rand::rngs::mock::StepRng>(spec, Driver::Replay(tokens))?;
        let o = Offsets::new(&self.dims);
        let (e, hd) = (self.dims.embed, self.dims.hidden);
        let t = &self.theta;
        let mut dh_next = vec![0.0; hd];
        for s in steps.iter().rev() {
            let mut dh = dh_next.clone();
            if let Some(out) = &s.out {
                let h_ent = entropy(&out.probs);
                let (w, b) = if out.relation_head { (o.ro, o.rb) } else { (o.po, o.pb) };
                for (i, &p) in out.probs.iter().enumerate() {
                    if !out.allowed[i] {
                        continue;
                    }
                    let onehot = if i == out.action { 1.0 } else { 0.0 };
                    let mut dl = coef_logp * (onehot - p);
                    if p > 0.0 {
                        dl -= coef_ent * p * (p.ln() + h_ent);
                    }
                    if dl == 0.0 {
                        continue;
                    }
                    grad[b + i] += dl;
                    for j in 0..hd {
                        grad[w + i * hd + j] += dl * s.h[j];
                        dh[j] += dl * t[w + i * hd + j];
                    }
                }
            }
            let mut dx = vec![0.0; e];
            let mut dh_prev = vec![0.0; hd];
            for i in 0..hd {
                let (z, r, n, u) = (s.z[i], s.r[i], s.n[i], s.u[i]);
                let dn = dh[i] * (1.0 - z);
                let dz = dh[i] * (s.h_prev[i] - n);
                dh_prev[i] += dh[i] * z;
                let dan = dn * (1.0 - n * n);
                let du = dan * r;
                let dar = dan * u * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                grad[o.bn + i] += dan;
                grad[o.bhn + i] += du;
                grad[o.br + i] += dar;
                grad[o.bz + i] += daz;
                for k in 0..e {
                    grad[o.wn + i * e + k] += dan * s.x[k];
                    grad[o.wr + i * e + k] += dar * s.x[k];
                    grad[o.wz + i * e + k] += daz * s.x[k];
                    dx[k] += dan * t[o.wn + i * e + k] + dar * t[o.wr + i * e + k] + daz * t[o.wz + i * e + k];
                }
                for k in 0..hd {
                    grad[o.un + i * hd + k] += du * s.h_prev[k];
                    grad[o.ur + i * hd + k] += dar * s.h_prev[k];
                    grad[o.uz + i * hd + k] += daz * s.h_prev[k];
                    dh_prev[k] += du * t[o.un + i * hd + k] + dar * t[o.ur + i * hd + k] + daz * t[o.uz + i * hd + k];
                }
            }
            for k in 0..e {
                grad[o.emb + s.input * e + k] += dx[k];
                if let Some(q) = s.query {
                    grad[o.emb + q * e + k] += dx[k];
                }
            }
            dh_next = dh_prev;
        }
        Ok(())
    }
}

/// Next token of a replayed sequence; `None` when not replaying.
fn next_replay<R: Rng>(driver: &Driver<'_, R>, pos: &mut usize, what: &str) -> Result<Option<Token>, GenError> {
    match driver {
        Driver::Replay(ts) => {
            let t = ts.get(*pos).copied();
            *pos += 1;
            t.map(Some)
                .ok_or_else(|| GenError::MalformedTokenSequence(format!("sequence ends before {what}")))
        }
        _ => Ok(None),
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}
