//! Finite-difference gradient checks for every differentiable primitive and
//! every loss, run over a range of seeds on small random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::ctc_loss;
use crate::model::{
    adapter_forward, build_biapc_pair, Backbone, HeadConfig, MaskMode, ModelConfig, ModelView,
    ParamStore, SharingScheme,
};
use crate::model::{Group, ModelInput};
use crate::ssl::{
    apc_loss, contrastive_loss, diversity_loss, eapc_objective, ebiapc_loss, hubert_loss,
    sample_negatives, Norm, Reduction, ShiftSpec, StackedTargets,
};
use crate::tensor::{
    finite_diff_gradcheck, ConvPadding, DType, GradcheckReport, Tape, Tensor, Var,
};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const GRADCHECK_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    /// First error raised by the case, if any.
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

type Case = fn(u64) -> crate::Result<GradcheckReport>;

/// Names of every case, primitives first.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|(n, _)| *n).collect()
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", add),
        ("sub", sub),
        ("mul", mul),
        ("matmul", matmul),
        ("transpose", transpose),
        ("reshape", reshape),
        ("concat", concat),
        ("slice", slice),
        ("exp", exp),
        ("log", log),
        ("abs", abs),
        ("relu", relu),
        ("gelu", gelu),
        ("softmax", softmax),
        ("log_softmax", log_softmax),
        ("layer_norm", layer_norm),
        ("conv1d", conv1d),
        ("embedding", embedding),
        ("masked_fill", masked_fill),
        ("reductions", reductions),
        ("cosine_similarity", cosine),
        ("cross_entropy", cross_entropy),
        ("adapter", adapter),
        ("apc", apc),
        ("eapc", eapc),
        ("ebiapc", ebiapc),
        ("contrastive_diversity", contrastive),
        ("hubert", hubert),
        ("ctc", ctc),
    ]
}

/// Run every case for seeds `0..seeds`; cases whose name does not contain
/// `filter` are skipped.
pub fn gradcheck_suite(seeds: u64, filter: Option<&str>) -> Vec<CaseResult> {
    cases()
        .into_iter()
        .filter(|(name, _)| filter.is_none_or(|f| name.contains(f)))
        .map(|(name, case)| {
            let mut res = CaseResult {
                name,
                seeds,
                max_rel_err: 0.0,
                worst_seed: 0,
                error: None,
            };
            for seed in 0..seeds {
                match case(seed) {
                    Ok(r) if r.max_rel_err.is_nan() => {
                        res.error = Some(format!("seed {seed}: NaN relative error"));
                        break;
                    }
                    Ok(r) if r.max_rel_err > res.max_rel_err || seed == 0 => {
                        res.max_rel_err = r.max_rel_err;
                        res.worst_seed = seed;
                    }
                    Ok(_) => {}
                    Err(e) => {
                        res.error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            res
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164)
}

fn dim(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=6)
}

fn shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = r.random_range(1..=3);
    (0..rank).map(|_| dim(r)).collect()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::with_dtype(
        shape,
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
        DType::F64,
    )
    .expect("sized")
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.5, 1.5)
}

/// Values bounded away from zero, for kinked functions.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape, 0.05, 1.5);
    for x in t.data_mut() {
        if r.random::<bool>() {
            *x = -*x;
        }
    }
    t
}

/// Scalar probe `Σ w ⊙ y` with fixed random weights, so every output
/// coordinate gets a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let s = tape.shape(y)?.to_vec();
    let w = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7072), &s, -1.0, 1.0);
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p)?)
}

fn check<F>(f: F, inputs: &[Tensor]) -> crate::Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    // The checker works on tensor errors; carry richer errors through a cell.
    let err = std::cell::RefCell::new(None);
    let g = |tape: &mut Tape, v: &[Var]| {
        f(tape, v).map_err(|e| {
            let msg = e.to_string();
            *err.borrow_mut() = Some(e);
            crate::tensor::TensorError::Invalid(msg)
        })
    };
    match finite_diff_gradcheck(g, inputs, GRADCHECK_EPS) {
        Ok(r) => Ok(r),
        Err(e) => Err(err.into_inner().unwrap_or(crate::Error::Tensor(e))),
    }
}

fn unary(
    seed: u64,
    x: Tensor,
    op: fn(&mut Tape, Var) -> crate::tensor::Result<Var>,
) -> crate::Result<GradcheckReport> {
    check(
        |t, v| {
            let y = op(t, v[0])?;
            probe(t, y, seed)
        },
        &[x],
    )
}

fn add(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    // Broadcast the second operand over the leading axis half the time.
    let s2 = if r.random::<bool>() {
        s[s.len() - 1..].to_vec()
    } else {
        s.clone()
    };
    let (a, b) = (normal(r, &s), normal(r, &s2));
    check(
        |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, seed)
        },
        &[a, b],
    )
}

fn sub(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let (a, b) = (normal(r, &s), normal(r, &s));
    check(
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, seed)
        },
        &[a, b],
    )
}

fn mul(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let s2 = if r.random::<bool>() {
        s[s.len() - 1..].to_vec()
    } else {
        s.clone()
    };
    let (a, b) = (normal(r, &s), normal(r, &s2));
    check(
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            let y = t.scale(y, 0.7)?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[a, b],
    )
}

fn matmul(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (m, k, n) = (dim(r), dim(r), dim(r));
    let batched = r.random::<bool>();
    let (a, b) = if batched {
        let bsz = dim(r);
        (normal(r, &[bsz, m, k]), normal(r, &[bsz, k, n]))
    } else {
        (normal(r, &[m, k]), normal(r, &[k, n]))
    };
    check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, seed)
        },
        &[a, b],
    )
}

fn transpose(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let rank = r.random_range(2..=3);
    let s: Vec<usize> = (0..rank).map(|_| dim(r)).collect();
    unary(seed, normal(r, &s), Tape::transpose)
}

fn reshape(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let n: usize = s.iter().product();
    check(
        |t, v| {
            let y = t.reshape(v[0], &[n])?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[normal(r, &s)],
    )
}

fn concat(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let axis = r.random_range(0..s.len());
    let mut s2 = s.clone();
    s2[axis] = dim(r);
    let (a, b) = (normal(r, &s), normal(r, &s2));
    check(
        |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], axis)?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[a, b],
    )
}

fn slice(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let axis = r.random_range(0..s.len());
    let start = r.random_range(0..s[axis]);
    let len = r.random_range(1..=s[axis] - start);
    check(
        |t, v| {
            let y = t.slice(v[0], axis, start, len)?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[normal(r, &s)],
    )
}

fn exp(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    unary(seed, normal(r, &s), Tape::exp)
}

fn log(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    unary(seed, uniform(r, &s, 0.2, 3.0), Tape::log)
}

fn abs(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    unary(seed, off_zero(r, &s), Tape::abs)
}

fn relu(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    unary(seed, off_zero(r, &s), Tape::relu)
}

fn gelu(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    unary(seed, uniform(r, &s, -3.0, 3.0), Tape::gelu)
}

fn softmax(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let axis = r.random_range(0..s.len());
    let last = *s.last().expect("rank >= 1");
    // Key-padding style mask over the last axis; never masks a whole row.
    let masked = (r.random::<bool>() && axis == s.len() - 1 && last > 1).then(|| {
        let keep = r.random_range(1..last);
        let m: Vec<f64> = (0..last).map(|j| (j >= keep) as u8 as f64).collect();
        Tensor::new(&[last], m).expect("sized")
    });
    check(
        |t, v| {
            let y = t.softmax(v[0], axis, masked.as_ref())?;
            probe(t, y, seed)
        },
        &[normal(r, &s)],
    )
}

fn log_softmax(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let axis = r.random_range(0..s.len());
    check(
        |t, v| {
            let y = t.log_softmax(v[0], axis)?;
            probe(t, y, seed)
        },
        &[normal(r, &s)],
    )
}

fn layer_norm(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let mut s = shape(r);
    let last = s.len() - 1;
    s[last] = r.random_range(2..=6);
    let d = s[last];
    let (x, g, b) = (normal(r, &s), uniform(r, &[d], 0.5, 1.5), normal(r, &[d]));
    check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, seed)
        },
        &[x, g, b],
    )
}

fn conv1d(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (len, cin, cout, w) = (dim(r), dim(r), dim(r), r.random_range(1..=3));
    let stride = r.random_range(1..=2);
    let padding = [ConvPadding::Causal, ConvPadding::Same, ConvPadding::None][r.random_range(0..3)];
    let len = len.max(w);
    let (x, k) = (normal(r, &[len, cin]), normal(r, &[w, cin, cout]));
    check(
        |t, v| {
            let y = t.conv1d(v[0], v[1], stride, padding)?;
            probe(t, y, seed)
        },
        &[x, k],
    )
}

fn embedding(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (rows, d) = (dim(r), dim(r));
    let idx: Vec<usize> = (0..dim(r) + 2).map(|_| r.random_range(0..rows)).collect();
    check(
        |t, v| {
            let y = t.gather(v[0], &idx)?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[normal(r, &[rows, d])],
    )
}

fn masked_fill(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let n: usize = s.iter().product();
    let m = Tensor::new(&s, (0..n).map(|_| r.random_range(0..2) as f64).collect())?;
    check(
        |t, v| {
            let y = t.masked_fill(v[0], &m, 0.5)?;
            let y = t.square(y)?;
            probe(t, y, seed)
        },
        &[normal(r, &s)],
    )
}

fn reductions(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let s = shape(r);
    let axis = r.random_range(0..s.len());
    check(
        |t, v| {
            let a = t.sum_axis(v[0], axis)?;
            let a = t.square(a)?;
            let a = probe(t, a, seed)?;
            let sq = t.square(v[0])?;
            let m = t.mean(sq)?;
            let s = t.sum(v[0])?;
            let s = t.scale(s, 0.3)?;
            let y = t.add(a, m)?;
            Ok(t.add(y, s)?)
        },
        &[normal(r, &s)],
    )
}

fn cosine(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d) = (dim(r), dim(r).max(2));
    check(
        |t, v| {
            let y = t.cosine_similarity(v[0], v[1])?;
            probe(t, y, seed)
        },
        &[off_zero(r, &[n, d]), off_zero(r, &[n, d])],
    )
}

fn cross_entropy(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, c) = (dim(r), dim(r).max(2));
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    check(
        |t, v| {
            let y = t.cross_entropy(v[0], &targets)?;
            probe(t, y, seed)
        },
        &[normal(r, &[n, c])],
    )
}

fn tiny_config(head: HeadConfig, mask_mode: MaskMode, seed: u64) -> ModelConfig {
    let r = &mut rng(seed ^ 0x636f6e66);
    ModelConfig {
        frontend: crate::model::Frontend::Filterbank,
        feature_dim: r.random_range(2..=4),
        d_model: 4,
        n_heads: 2,
        n_blocks: 1,
        ffn_dim: r.random_range(3..=6),
        subsample_factor: [1, 2][r.random_range(0..2)],
        conv_kernel: r.random_range(1..=3),
        mask_mode,
        d_ada: r.random::<bool>().then_some(2),
        dropout: 0.0,
        head,
        dtype: DType::F64,
    }
}

/// All parameters of `store` as gradcheck inputs, in name order.
fn store_inputs(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    store
        .iter()
        .map(|(n, p)| (n.to_string(), p.tensor.cast(DType::F64)))
        .unzip()
}

fn bind_all(tape: &mut Tape, names: &[String], vars: &[Var]) -> crate::Result<()> {
    for (n, &v) in names.iter().zip(vars) {
        tape.bind(n, v)?;
    }
    Ok(())
}

fn features(r: &mut ChaCha8Rng, t: usize, d: usize) -> ModelInput {
    ModelInput::Features(normal(r, &[t, d]))
}

fn adapter(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (n, d, a) = (dim(r), r.random_range(2..=6), dim(r));
    let mut store = ParamStore::new();
    store.insert("ada.ln.gamma", uniform(r, &[d], 0.5, 1.5), Group::Adapter);
    store.insert("ada.ln.beta", normal(r, &[d]), Group::Adapter);
    store.insert("ada.down.weight", normal(r, &[d, a]), Group::Adapter);
    store.insert("ada.down.bias", normal(r, &[a]), Group::Adapter);
    store.insert("ada.up.weight", normal(r, &[a, d]), Group::Adapter);
    store.insert("ada.up.bias", normal(r, &[d]), Group::Adapter);
    let (names, mut inputs) = store_inputs(&store);
    inputs.push(normal(r, &[n, d]));
    check(
        |t, v| {
            bind_all(t, &names, v)?;
            let y = adapter_forward(t, &store, "ada", v[v.len() - 1])?;
            probe(t, y, seed)
        },
        &inputs,
    )
}

fn apc(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (t_raw, d, f) = (r.random_range(3..=8), dim(r), r.random_range(1..=2));
    let z = StackedTargets::from_frames(&normal(r, &[t_raw, d]), f)?;
    let rows = z.data.shape()[0];
    let n = r.random_range(1..rows.max(2));
    let p = if r.random::<bool>() {
        Norm::L1
    } else {
        Norm::L2
    };
    let reduction = if r.random::<bool>() {
        Reduction::Sum
    } else {
        Reduction::Mean
    };
    // Keep every residual clear of the L1 kink.
    let mut y = normal(r, &[rows, d * f]);
    for (yi, zi) in y.data_mut().iter_mut().zip(z.data.data()) {
        if (*yi - zi).abs() < 0.05 {
            *yi += 0.1;
        }
    }
    check(|t, v| Ok(apc_loss(t, v[0], &z, n, p, reduction)?), &[y])
}

fn eapc(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let k = r.random_range(1..=2);
    let spec = ShiftSpec {
        s: r.random_range(1..=2),
        k,
        p: Norm::L2,
    };
    let cfg = tiny_config(HeadConfig::Apc { lags: k }, MaskMode::Causal, seed);
    let model = Backbone::build(&cfg, seed)?;
    let t_raw = r.random_range(4..=8);
    let input = features(r, t_raw, cfg.feature_dim);
    let (names, inputs) = store_inputs(&model.params);
    check(
        |t, v| {
            bind_all(t, &names, v)?;
            Ok(eapc_objective(
                t,
                &model.view(),
                &input,
                &spec,
                Reduction::Mean,
                None,
            )?)
        },
        &inputs,
    )
}

fn ebiapc(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let spec = ShiftSpec {
        s: 1,
        k: r.random_range(1..=2),
        p: Norm::L2,
    };
    let schemes = [
        SharingScheme::None,
        SharingScheme::ShareGenerator,
        SharingScheme::ShareGenEncoder,
        SharingScheme::ShareAll,
    ];
    let scheme = schemes[r.random_range(0..schemes.len())];
    let cfg = tiny_config(HeadConfig::Apc { lags: spec.k }, MaskMode::Causal, seed);
    let pair = build_biapc_pair(&cfg, scheme, seed)?;
    let t_raw = r.random_range(4..=8);
    let input = features(r, t_raw, cfg.feature_dim);
    let (names, inputs) = store_inputs(&pair.params);
    check(
        |t, v| {
            bind_all(t, &names, v)?;
            Ok(ebiapc_loss(t, &pair, &input, &spec, Reduction::Mean, None)?)
        },
        &inputs,
    )
}

/// Contrastive term over predictions and quantized targets plus the
/// diversity term over code logits. The straight-through quantizer between
/// them has a surrogate gradient by design and is left out.
fn contrastive(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let (u, d, v_codes) = (
        r.random_range(2..=5),
        r.random_range(2..=5),
        r.random_range(2..=5),
    );
    let negs = sample_negatives(u, r.random_range(1..=3), r);
    let pos: Vec<usize> = (0..u).collect();
    let tau = r.random_range(0.1..1.0);
    let weight = r.random_range(0.05..0.5);
    let n_logits = r.random_range(1..=4);
    check(
        |t, v| {
            let c = contrastive_loss(t, v[0], v[1], &pos, &negs, tau)?;
            let probs = t.softmax(v[2], 1, None)?;
            let div = diversity_loss(t, probs)?;
            let div = t.scale(div, weight)?;
            Ok(t.add(c, div)?)
        },
        &[
            off_zero(r, &[u, d]),
            off_zero(r, &[u, d]),
            normal(r, &[n_logits, v_codes]),
        ],
    )
}

fn hubert(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let units = r.random_range(2..=4);
    let cfg = tiny_config(HeadConfig::Hubert { units }, MaskMode::Full, seed);
    let model = Backbone::build(&cfg, seed)?;
    let t_raw = r.random_range(4..=8);
    let input = features(r, t_raw, cfg.feature_dim);
    let steps = input.len().div_ceil(cfg.subsample_factor);
    let labels: Vec<usize> = (0..steps).map(|_| r.random_range(0..units)).collect();
    let mask: Vec<bool> = (0..steps).map(|_| r.random::<bool>()).collect();
    let alpha = r.random_range(0.0..=1.0);
    let (names, inputs) = store_inputs(&model.params);
    let view: ModelView<'_> = model.view();
    check(
        |t, v| {
            bind_all(t, &names, v)?;
            let z = view.subsample(t, &input, None)?;
            let c = view.encode(t, z, Some(&mask), None)?;
            let logits = view.head(t, "gen.hubert", c)?;
            Ok(hubert_loss(t, logits, &labels, &mask, alpha)?)
        },
        &inputs,
    )
}

fn ctc(seed: u64) -> crate::Result<GradcheckReport> {
    let r = &mut rng(seed);
    let v = r.random_range(2..=5);
    let len = r.random_range(0..=3);
    let mut target: Vec<usize> = (0..len).map(|_| r.random_range(1..v)).collect();
    if r.random::<bool>() && len >= 2 {
        target[1] = target[0];
    }
    let frames = crate::ctc::min_frames(&target) + r.random_range(0..=4);
    let frames = frames.max(1);
    let input_len = r.random_range(crate::ctc::min_frames(&target).max(1)..=frames);
    check(
        |t, x| {
            let lp = t.log_softmax(x[0], 1)?;
            Ok(ctc_loss(t, lp, &target, input_len)?)
        },
        &[normal(r, &[frames, v])],
    )
}
