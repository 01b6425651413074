use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masking::{sample_masks, MaskConfig};
use super::{Result, SslError};
use crate::model::{HeadConfig, ModelInput, ModelView};
use crate::tensor::{CustomBackward, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub mask: MaskConfig,
    /// Distractors per masked position.
    pub negatives: usize,
    /// Cosine-similarity temperature.
    pub tau: f64,
    /// Gumbel temperature, annealed linearly from `gumbel_tau_max` to
    /// `gumbel_tau_min` over a run.
    pub gumbel_tau_max: f64,
    pub gumbel_tau_min: f64,
    pub diversity_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            mask: MaskConfig::default(),
            negatives: 10,
            tau: 0.1,
            gumbel_tau_max: 2.0,
            gumbel_tau_min: 0.5,
            diversity_weight: 0.1,
        }
    }
}

impl ContrastiveConfig {
    /// Gumbel temperature at `progress ∈ [0, 1]` of the run.
    pub fn gumbel_tau(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.gumbel_tau_max + (self.gumbel_tau_min - self.gumbel_tau_max) * p
    }
}

/// Mean over positions `u` of the cross-entropy of picking the positive
/// `q[pos[u]]` among itself and `q[negs[u][..]]`, scored by cosine
/// similarity with `y[u]` divided by `tau`.
pub fn contrastive_loss(
    tape: &mut Tape,
    y: Var,
    q: Var,
    pos: &[usize],
    negs: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    let u_count = tape.shape(y)?[0];
    if pos.len() != u_count || negs.len() != u_count {
        return Err(SslError::Invalid(format!(
            "{u_count} predictions but {} positives and {} negative lists",
            pos.len(),
            negs.len()
        )));
    }
    if u_count == 0 {
        return Err(SslError::Invalid("no masked positions".into()));
    }
    if tau <= 0.0 {
        return Err(SslError::Invalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    let mut total: Option<Var> = None;
    for u in 0..u_count {
        if negs[u].is_empty() {
            return Err(SslError::Invalid(format!("position {u} has no negatives")));
        }
        let mut idx = vec![pos[u]];
        idx.extend(&negs[u]);
        let cands = tape.gather(q, &idx)?;
        let anchor = tape.gather(y, &vec![u; idx.len()])?;
        let sim = tape.cosine_similarity(anchor, cands)?;
        let logits = tape.reshape(sim, &[1, idx.len()])?;
        let logits = tape.scale(logits, 1.0 / tau)?;
        let ce = tape.cross_entropy(logits, &[0])?;
        let ce = tape.sum(ce)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    Ok(tape.scale(total.expect("u_count > 0"), 1.0 / u_count as f64)?)
}

/// For each of `m` positions, up to `count` distinct other positions drawn
/// uniformly.
pub fn sample_negatives(m: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..m)
        .map(|u| {
            let take = count.min(m.saturating_sub(1));
            index::sample(rng, m - 1, take)
                .into_iter()
                .map(|i| if i >= u { i + 1 } else { i })
                .collect()
        })
        .collect()
}

pub struct GumbelOutput {
    /// `[N, d_code]`, each row exactly a codebook row.
    pub quantized: Var,
    /// Noisy tempered distribution the gradient flows through, `[N, V]`.
    pub soft: Var,
    /// Noise-free code distribution, `[N, V]`, for the diversity term.
    pub probs: Var,
    pub codes: Vec<usize>,
}

/// Forward value of the hard one-hot, gradient of the soft distribution.
struct StraightThrough;

impl CustomBackward for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(
        &self,
        grad_out: &[f64],
        _inputs: &[&[f64]],
        _output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad_out.to_vec())]
    }
}

/// Gumbel-softmax code selection with a straight-through estimator.
pub fn gumbel_quantize(
    tape: &mut Tape,
    logits: Var,
    codebook: Var,
    tau: f64,
    seed: u64,
) -> Result<GumbelOutput> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(SslError::Invalid(format!(
            "Gumbel temperature {tau} must be positive"
        )));
    }
    let shape = tape.shape(logits)?.to_vec();
    let [n, v] = shape[..] else {
        return Err(SslError::Invalid(format!(
            "code logits must be [N, V], got {shape:?}"
        )));
    };
    if v == 0 || tape.shape(codebook)?[0] != v {
        return Err(SslError::Invalid(
            "codebook size does not match the code logits".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n * v)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    let noise = tape.constant(&Tensor::new(&[n, v], noise)?);
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.scale(noisy, 1.0 / tau)?;
    let soft = tape.softmax(scaled, 1, None)?;
    let probs = tape.softmax(logits, 1, None)?;

    let sv = tape.value(scaled)?;
    let codes: Vec<usize> = sv
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut hard = vec![0.0; n * v];
    for (r, &c) in codes.iter().enumerate() {
        hard[r * v + c] = 1.0;
    }
    let st = tape.custom(&[soft], &[n, v], hard, Box::new(StraightThrough))?;
    let quantized = tape.matmul(st, codebook)?;
    Ok(GumbelOutput {
        quantized,
        soft,
        probs,
        codes,
    })
}

/// `(V − exp(H(p̄))) / V` with `p̄` the mean of the rows of `probs`.
pub fn diversity_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let shape = tape.shape(probs)?.to_vec();
    let [n, v] = shape[..] else {
        return Err(SslError::Invalid(format!(
            "probabilities must be [N, V], got {shape:?}"
        )));
    };
    if n == 0 || v == 0 {
        return Err(SslError::Invalid("empty probability batch".into()));
    }
    let total = tape.sum_axis(probs, 0)?;
    let mean = tape.scale(total, 1.0 / n as f64)?;
    let safe = tape.add_scalar(mean, 1e-30)?;
    let logp = tape.log(safe)?;
    let plogp = tape.mul(mean, logp)?;
    let neg_h = tape.sum(plogp)?;
    let h = tape.neg(neg_h)?;
    let perplexity = tape.exp(h)?;
    let scaled = tape.scale(perplexity, -1.0 / v as f64)?;
    Ok(tape.add_scalar(scaled, 1.0)?)
}

/// Masked contrastive prediction of quantized latents plus the weighted
/// diversity term, for one utterance.
pub fn contrastive_objective(
    tape: &mut Tape,
    view: &ModelView<'_>,
    input: &ModelInput,
    cfg: &ContrastiveConfig,
    gumbel_tau: f64,
    seed: u64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if !matches!(view.config.head, HeadConfig::Contrastive { .. }) {
        return Err(SslError::Invalid("model head is not contrastive".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let z = view.subsample(tape, input, rng.as_deref_mut())?;
    let t = tape.shape(z)?[0];
    let code_logits = view.head(tape, "gen.quant", z)?;
    let codebook = view
        .params
        .bind(tape, &view.prefixes.resolve("gen.codebook"))?;
    let g = gumbel_quantize(tape, code_logits, codebook, gumbel_tau, seeds.random())?;
    let div = diversity_loss(tape, g.probs)?;
    let div = tape.scale(div, cfg.diversity_weight)?;

    let mask = sample_masks(t, &cfg.mask, seeds.random());
    let masked: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
    if masked.len() < 2 {
        return Ok(div);
    }
    let c = view.encode(tape, z, Some(&mask), rng)?;
    let y = view.head(tape, "gen.proj", c)?;
    let y_m = tape.gather(y, &masked)?;
    let q_m = tape.gather(g.quantized, &masked)?;
    let pos: Vec<usize> = (0..masked.len()).collect();
    let negs = sample_negatives(masked.len(), cfg.negatives, &mut seeds);
    let l = contrastive_loss(tape, y_m, q_m, &pos, &negs, cfg.tau)?;
    Ok(tape.add(l, div)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, ModelConfig};
    use crate::tensor::DType;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(&[rows, cols], v).unwrap()
    }

    #[test]
    fn ties_give_log_of_candidate_count() {
        let mut tape = Tape::new(DType::F64);
        let y = tape.leaf(&t(1, 2, vec![1.0, 0.0]));
        let q = tape.leaf(&t(2, 2, vec![0.0, 1.0, 0.0, -1.0]));
        let l = contrastive_loss(&mut tape, y, q, &[0], &[vec![1]], 0.1).unwrap();
        assert!((tape.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-12);

        let k = 5;
        let q = tape.leaf(&t(k + 1, 2, [1.0, 1.0].repeat(k + 1)));
        let l = contrastive_loss(&mut tape, y, q, &[0], &[(1..=k).collect()], 0.1).unwrap();
        assert!((tape.scalar(l).unwrap() - ((k + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturates_when_positive_dominates() {
        let mut tape = Tape::new(DType::F64);
        let y = tape.leaf(&t(1, 2, vec![1.0, 0.0]));
        let q = tape.leaf(&t(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        // similarity gap 2 at tau 0.05 is a logit gap of 40
        let l = contrastive_loss(&mut tape, y, q, &[0], &[vec![1]], 0.05).unwrap();
        let v = tape.scalar(l).unwrap();
        assert!((0.0..1e-9).contains(&v), "{v}");
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let mut tape = Tape::new(DType::F64);
        let y = tape.leaf(&t(1, 2, vec![0.0, 0.0]));
        let q = tape.leaf(&t(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let err = contrastive_loss(&mut tape, y, q, &[0], &[vec![1]], 0.1).unwrap_err();
        assert_eq!(err.to_string(), "degenerate similarity input");
    }

    #[test]
    fn negatives_exclude_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(6, 10, &mut rng);
        for (u, n) in negs.iter().enumerate() {
            assert_eq!(n.len(), 5);
            assert!(!n.contains(&u));
        }
        let negs = sample_negatives(30, 10, &mut rng);
        assert!(negs
            .iter()
            .all(|n| n.len() == 10 && n.iter().all(|&i| i < 30)));
    }

    #[test]
    fn gumbel_picks_dominant_code_and_returns_a_row() {
        let cb = t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        for seed in 0..20 {
            let mut tape = Tape::new(DType::F32);
            let logits = tape.leaf(&t(1, 3, vec![0.0, 40.0, 0.0]));
            let codebook = tape.leaf(&cb);
            let g = gumbel_quantize(&mut tape, logits, codebook, 1.0, seed).unwrap();
            assert_eq!(g.codes, vec![1]);
            assert_eq!(tape.value(g.quantized).unwrap(), &[3.0, 4.0]);
        }
        let mut tape = Tape::new(DType::F64);
        let logits = tape.leaf(&t(4, 3, (0..12).map(|i| (i as f64).sin()).collect()));
        let codebook = tape.leaf(&cb);
        let g = gumbel_quantize(&mut tape, logits, codebook, 0.7, 3).unwrap();
        let q = tape.value(g.quantized).unwrap().to_vec();
        for (r, &c) in g.codes.iter().enumerate() {
            assert_eq!(&q[r * 2..r * 2 + 2], &cb.data()[c * 2..c * 2 + 2]);
        }
        assert!(gumbel_quantize(&mut tape, logits, codebook, 0.0, 3).is_err());
    }

    #[test]
    fn hot_temperature_is_near_uniform() {
        let mut tape = Tape::new(DType::F64);
        let logits = tape.leaf(&Tensor::zeros(&[2, 4], DType::F64));
        let codebook = tape.leaf(&Tensor::full(&[4, 2], 1.0, DType::F64));
        let g = gumbel_quantize(&mut tape, logits, codebook, 1e6, 1).unwrap();
        for &p in tape.value(g.soft).unwrap() {
            assert!((p - 0.25).abs() < 1e-4);
        }
    }

    #[test]
    fn straight_through_gradient_is_the_soft_gradient() {
        let mut tape = Tape::new(DType::F64);
        let logits = tape.leaf(&t(1, 3, vec![0.2, -0.1, 0.4]).requires_grad(true));
        let codebook = tape.leaf(&t(3, 1, vec![1.0, 2.0, 3.0]));
        let g = gumbel_quantize(&mut tape, logits, codebook, 1.0, 0).unwrap();
        let s = tape.sum(g.quantized).unwrap();
        tape.backward(s).unwrap();
        assert!(tape
            .grad(logits)
            .unwrap()
            .unwrap()
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn diversity_examples() {
        let mut tape = Tape::new(DType::F64);
        let uniform = tape.leaf(&Tensor::full(&[3, 4], 0.25, DType::F64));
        let l = diversity_loss(&mut tape, uniform).unwrap();
        assert!(tape.scalar(l).unwrap().abs() < 1e-12);
        let onehot = tape.leaf(&t(2, 4, vec![0., 1., 0., 0., 0., 1., 0., 0.]));
        let l = diversity_loss(&mut tape, onehot).unwrap();
        assert!((tape.scalar(l).unwrap() - 0.75).abs() < 1e-12);
        let half = tape.leaf(&t(2, 2, vec![1., 0., 0., 1.]));
        let l = diversity_loss(&mut tape, half).unwrap();
        assert!(tape.scalar(l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn objective_runs_and_is_deterministic() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            mask_mode: crate::model::MaskMode::Full,
            head: HeadConfig::Contrastive {
                codebook_size: 8,
                d_code: 6,
            },
            ..ModelConfig::toy()
        };
        let b = Backbone::build(&cfg, 0).unwrap();
        let x = ModelInput::Features(t(
            48,
            8,
            (0..384).map(|i| (i as f64 * 0.13).cos()).collect(),
        ));
        let c = ContrastiveConfig {
            mask: MaskConfig {
                prob: 0.2,
                span: 2,
                force: true,
            },
            ..Default::default()
        };
        let run = || {
            let mut tape = Tape::new(DType::F32);
            let l = contrastive_objective(&mut tape, &b.view(), &x, &c, 1.0, 11, None).unwrap();
            tape.scalar(l).unwrap()
        };
        let a = run();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a.to_bits(), run().to_bits());
        assert!((c.gumbel_tau(0.0) - 2.0).abs() < 1e-15 && (c.gumbel_tau(1.0) - 0.5).abs() < 1e-15);
    }
}
