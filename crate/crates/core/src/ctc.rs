//! CTC loss, greedy decoding and token error rate.

use serde::{Deserialize, Serialize};

use crate::tensor::kernels::log_add_exp;
use crate::tensor::{CustomBackward, Tape, Tensor, TensorError, Var};

pub const BLANK: usize = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CtcError {
    #[error("target contains the blank id")]
    BlankInTarget,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("input length {len} exceeds {frames} frames")]
    InputLength { len: usize, frames: usize },
    #[error("{refs} references but {hyps} hypotheses")]
    CountMismatch { refs: usize, hyps: usize },
    #[error("references contain no tokens")]
    EmptyReferences,
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Token inventory with the blank at id 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// `tokens` excludes the blank, which is prepended.
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all = vec!["<blank>".to_string()];
        for t in tokens {
            let t = t.into();
            if all.contains(&t) {
                return Err(CtcError::DuplicateToken(t));
            }
            all.push(t);
        }
        Ok(Vocab { tokens: all })
    }

    /// Tokens named `1..=n`.
    pub fn numbered(n: usize) -> Self {
        Vocab::new((1..=n).map(|i| i.to_string())).expect("numbers are unique")
    }

    /// Size including the blank.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .filter(|&i| i != BLANK)
    }
}

/// Greedy output: token ids without blanks, plus the summed frame
/// log-probabilities of the argmax path.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

fn check_target(target: &[usize], v: usize) -> Result<()> {
    for &k in target {
        if k == BLANK {
            return Err(CtcError::BlankInTarget);
        }
        if k >= v {
            return Err(CtcError::TokenOutOfRange { token: k, vocab: v });
        }
    }
    Ok(())
}

/// Frames needed to emit `target`: one per token plus a blank between
/// repeated neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

struct Lattice {
    /// Blank-interleaved label sequence.
    ext: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

fn lattice(lp: &[f64], v: usize, target: &[usize], t_len: usize) -> Lattice {
    let mut ext = vec![BLANK];
    for &k in target {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let at = |t: usize, s: usize| t * s_len + s;
    let mut alpha = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];
    if t_len == 0 {
        let log_p = if target.is_empty() { 0.0 } else { ninf };
        return Lattice {
            ext,
            alpha,
            beta,
            log_p,
        };
    }
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    alpha[at(0, 0)] = lp[ext[0]];
    if s_len > 1 {
        alpha[at(0, 1)] = lp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[at(t - 1, s)];
            if s >= 1 {
                a = log_add_exp(a, alpha[at(t - 1, s - 1)]);
            }
            if skip(s) {
                a = log_add_exp(a, alpha[at(t - 1, s - 2)]);
            }
            alpha[at(t, s)] = a + lp[t * v + ext[s]];
        }
    }

    let last = t_len - 1;
    beta[at(last, s_len - 1)] = lp[last * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[at(last, s_len - 2)] = lp[last * v + ext[s_len - 2]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[at(t + 1, s)];
            if s + 1 < s_len {
                b = log_add_exp(b, beta[at(t + 1, s + 1)]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add_exp(b, beta[at(t + 1, s + 2)]);
            }
            beta[at(t, s)] = b + lp[t * v + ext[s]];
        }
    }

    let mut log_p = alpha[at(last, s_len - 1)];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[at(last, s_len - 2)]);
    }
    Lattice {
        ext,
        alpha,
        beta,
        log_p,
    }
}

struct CtcBackward {
    v: usize,
    t_len: usize,
    ext: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

impl CustomBackward for CtcBackward {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&[f64]],
        _output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let lp = inputs[0];
        let mut g = vec![0.0; lp.len()];
        if !self.log_p.is_finite() {
            return vec![Some(g)];
        }
        let s_len = self.ext.len();
        for t in 0..self.t_len {
            for s in 0..s_len {
                let i = t * s_len + s;
                let k = self.ext[s];
                let occ = self.alpha[i] + self.beta[i] - lp[t * self.v + k] - self.log_p;
                if occ > f64::NEG_INFINITY {
                    g[t * self.v + k] -= grad_out[0] * occ.exp();
                }
            }
        }
        vec![Some(g)]
    }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs: [T, V]`, using the first `input_len` frames. An unreachable
/// target yields `+inf` with zero gradient.
pub fn ctc_loss(
    tape: &mut Tape,
    log_probs: Var,
    target: &[usize],
    input_len: usize,
) -> Result<Var> {
    let shape = tape.shape(log_probs)?.to_vec();
    let [frames, v] = shape[..] else {
        return Err(
            TensorError::Invalid(format!("ctc log-probs must be [T, V], got {shape:?}")).into(),
        );
    };
    if input_len > frames {
        return Err(CtcError::InputLength {
            len: input_len,
            frames,
        });
    }
    check_target(target, v)?;
    let lp = tape.value(log_probs)?;
    let lat = lattice(&lp[..input_len * v], v, target, input_len);
    if !lat.log_p.is_finite() {
        log::warn!(
            "ctc target of {} tokens cannot be emitted in {} frames",
            target.len(),
            input_len
        );
    }
    let op = CtcBackward {
        v,
        t_len: input_len,
        ext: lat.ext,
        alpha: lat.alpha,
        beta: lat.beta,
        log_p: lat.log_p,
    };
    Ok(tape.custom(&[log_probs], &[], vec![-op.log_p], Box::new(op))?)
}

/// [`ctc_loss`] divided by the target length (empty targets count as one).
pub fn ctc_loss_per_token(
    tape: &mut Tape,
    log_probs: Var,
    target: &[usize],
    input_len: usize,
) -> Result<Var> {
    let l = ctc_loss(tape, log_probs, target, input_len)?;
    Ok(tape.scale(l, 1.0 / target.len().max(1) as f64)?)
}

/// Frame argmax (ties to the lowest id), merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor, input_len: usize) -> Result<Hypothesis> {
    let [frames, v] = *log_probs.shape() else {
        return Err(TensorError::Invalid(format!(
            "ctc log-probs must be [T, V], got {:?}",
            log_probs.shape()
        ))
        .into());
    };
    if input_len > frames {
        return Err(CtcError::InputLength {
            len: input_len,
            frames,
        });
    }
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = None;
    for row in log_probs.data().chunks(v.max(1)).take(input_len) {
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        score += row[best];
        if best != BLANK && prev != Some(best) {
            tokens.push(best);
        }
        prev = Some(best);
    }
    Ok(Hypothesis { tokens, score })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=hyp.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = (up + 1).min(row[j] + 1).min(diag + usize::from(r != h));
            diag = up;
        }
    }
    row[hyp.len()]
}

/// Total edit distance over total reference length.
pub fn error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(CtcError::CountMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mass: usize = refs.iter().map(Vec::len).sum();
    if mass == 0 {
        return Err(CtcError::EmptyReferences);
    }
    let errors: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    Ok(errors as f64 / mass as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_tensor(probs: &[f64], t: usize, v: usize) -> Tensor {
        Tensor::new(&[t, v], probs.iter().map(|p| p.ln()).collect()).unwrap()
    }

    fn loss(lp: &Tensor, target: &[usize]) -> f64 {
        let mut tape = Tape::new(DType::F64);
        let x = tape.leaf(lp);
        let l = ctc_loss(&mut tape, x, target, lp.shape()[0]).unwrap();
        tape.scalar(l).unwrap()
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if k != BLANK && prev != Some(k) {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sum of path probabilities per collapsed label sequence.
    fn enumerate(lp: &Tensor) -> Vec<(Vec<usize>, f64)> {
        let [t, v] = *lp.shape() else { unreachable!() };
        let mut out: Vec<(Vec<usize>, f64)> = Vec::new();
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..t)
                .map(|_| {
                    let k = c % v;
                    c /= v;
                    k
                })
                .collect();
            let p: f64 = path
                .iter()
                .enumerate()
                .map(|(i, &k)| lp.data()[i * v + k].exp())
                .product();
            let y = collapse(&path);
            match out.iter_mut().find(|(l, _)| *l == y) {
                Some(e) => e.1 += p,
                None => out.push((y, p)),
            }
        }
        out
    }

    fn random_dist(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut vals = Vec::new();
        for _ in 0..t {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = row.iter().sum();
            vals.extend(row.iter().map(|x| (x / z).ln()));
        }
        Tensor::new(&[t, v], vals).unwrap()
    }

    #[test]
    fn hand_examples() {
        assert!((loss(&log_tensor(&[0.5, 0.5], 1, 2), &[1]) - -(0.5f64.ln())).abs() < 1e-12);
        assert!((loss(&log_tensor(&[0.5; 4], 2, 2), &[1]) - -(0.75f64.ln())).abs() < 1e-12);
        let lp = log_tensor(&[0.2, 0.8, 0.6, 0.4, 0.9, 0.1], 3, 2);
        let expect = -(0.2f64.ln() + 0.6f64.ln() + 0.9f64.ln());
        assert!((loss(&lp, &[]) - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=4 {
            for v in 2..=3 {
                let lp = random_dist(t, v, &mut rng);
                let paths = enumerate(&lp);
                let mut targets: Vec<Vec<usize>> = vec![vec![]];
                for a in 1..v {
                    targets.push(vec![a]);
                    for b in 1..v {
                        targets.push(vec![a, b]);
                    }
                }
                for target in targets {
                    let p: f64 = paths
                        .iter()
                        .filter(|(l, _)| *l == target)
                        .map(|(_, p)| p)
                        .sum();
                    let l = loss(&lp, &target);
                    if p == 0.0 {
                        assert_eq!(l, f64::INFINITY);
                    } else {
                        assert!((l - -p.ln()).abs() < 1e-9, "t={t} v={v} {target:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=3 {
            for v in 2..=3 {
                let lp = random_dist(t, v, &mut rng);
                let total: f64 = enumerate(&lp)
                    .iter()
                    .map(|(y, _)| (-loss(&lp, y)).exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infeasible_target_is_infinite_with_zero_gradient() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.leaf(&log_tensor(&[0.5; 4], 2, 2).requires_grad(true));
        let l = ctc_loss(&mut tape, x, &[1, 1], 2).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), f64::INFINITY);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(min_frames(&[1, 1]), 3);
    }

    #[test]
    fn target_validation() {
        let mut tape = Tape::new(DType::F64);
        let x = tape.leaf(&log_tensor(&[0.5; 4], 2, 2));
        assert_eq!(
            ctc_loss(&mut tape, x, &[0], 2).unwrap_err(),
            CtcError::BlankInTarget
        );
        assert!(matches!(
            ctc_loss(&mut tape, x, &[2], 2),
            Err(CtcError::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            ctc_loss(&mut tape, x, &[1], 3),
            Err(CtcError::InputLength { .. })
        ));
    }

    #[test]
    fn frames_past_input_len_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = random_dist(6, 3, &mut rng);
        let short = Tensor::new(&[4, 3], lp.data()[..12].to_vec()).unwrap();
        let mut tape = Tape::new(DType::F64);
        let x = tape.leaf(&lp.clone().requires_grad(true));
        let l = ctc_loss(&mut tape, x, &[1, 2], 4).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), loss(&short, &[1, 2]));
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().unwrap()[12..]
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn per_token_normalization() {
        let lp = log_tensor(&[0.5; 8], 4, 2);
        let mut tape = Tape::new(DType::F64);
        let x = tape.leaf(&lp);
        let raw = ctc_loss(&mut tape, x, &[1, 1], 4).unwrap();
        let norm = ctc_loss_per_token(&mut tape, x, &[1, 1], 4).unwrap();
        assert!((tape.scalar(raw).unwrap() / 2.0 - tape.scalar(norm).unwrap()).abs() < 1e-15);
    }

    fn path_logits(path: &[usize], v: usize) -> Tensor {
        let mut d = vec![-5.0; path.len() * v];
        for (t, &k) in path.iter().enumerate() {
            d[t * v + k] = -0.1;
        }
        Tensor::new(&[path.len(), v], d).unwrap()
    }

    #[test]
    fn greedy_examples() {
        let h = ctc_greedy_decode(&path_logits(&[1, 1, 0, 2], 3), 4).unwrap();
        assert_eq!(h.tokens, vec![1, 2]);
        assert!((h.score - -0.4).abs() < 1e-12);
        assert!(ctc_greedy_decode(&path_logits(&[0, 0, 0], 3), 3)
            .unwrap()
            .tokens
            .is_empty());
        assert_eq!(
            ctc_greedy_decode(&path_logits(&[1, 0, 1], 3), 3)
                .unwrap()
                .tokens,
            vec![1, 1]
        );
        let tie = Tensor::new(&[1, 3], vec![-1.0, -0.5, -0.5]).unwrap();
        assert_eq!(ctc_greedy_decode(&tie, 1).unwrap().tokens, vec![1]);
        assert_eq!(
            ctc_greedy_decode(&path_logits(&[1, 2, 2], 3), 1)
                .unwrap()
                .tokens,
            vec![1]
        );
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        let (a, b): (Vec<char>, Vec<char>) =
            ("kitten".chars().collect(), "sitting".chars().collect());
        assert_eq!(edit_distance(&a, &b), 3);
        assert_eq!(edit_distance::<u8>(&[], &[1, 2, 3]), 3);
        assert_eq!(edit_distance::<u8>(&[1, 2], &[]), 2);
    }

    #[test]
    fn error_rate_examples() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]];
        assert_eq!(error_rate(&refs, &refs).unwrap(), 0.0);
        let mut hyps = refs.clone();
        hyps[1][2] = 7;
        assert!((error_rate(&refs, &hyps).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(error_rate(&refs, &[vec![], vec![]]).unwrap(), 1.0);
        assert!(matches!(
            error_rate(&refs, &hyps[..1]),
            Err(CtcError::CountMismatch { .. })
        ));
        assert_eq!(
            error_rate::<usize>(&[vec![]], &[vec![1]]).unwrap_err(),
            CtcError::EmptyReferences
        );
    }

    #[test]
    fn vocab() {
        let v = Vocab::numbered(3);
        assert_eq!(v.size(), 4);
        assert_eq!(v.id("2"), Some(2));
        assert_eq!(v.id("<blank>"), None);
        assert!(Vocab::new(["a", "a"]).is_err());
    }
}
