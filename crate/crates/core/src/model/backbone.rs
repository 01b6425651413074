use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Ctx;
use super::params::{module_of, xavier_uniform, Group, Module, ParamStore};
use super::{Frontend, HeadConfig, MaskMode, ModelConfig, ModelError, Result};
use crate::features::{FeatureMatrix, Waveform};
use crate::tensor::{ConvPadding, DType, Tape, Tensor, TensorError, Var};

/// Raw-sample frontend: three stride-2 convolutions with this kernel width.
pub const LEARNED_CONV_KERNEL: usize = 8;
const LEARNED_CONV_LAYERS: usize = 3;

/// One utterance as the model consumes it.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    /// Filter-bank frames, `[T, D]`.
    Features(Tensor),
    /// Raw samples, `[N, 1]`.
    Waveform(Tensor),
}

impl ModelInput {
    pub fn from_features(f: &FeatureMatrix, dtype: DType) -> Self {
        ModelInput::Features(f.to_tensor(dtype))
    }

    pub fn from_waveform(w: &Waveform, dtype: DType) -> Self {
        let data = w.samples.iter().map(|&s| s as f64).collect();
        ModelInput::Waveform(
            Tensor::with_dtype(&[w.len(), 1], data, dtype).expect("length matches"),
        )
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            ModelInput::Features(t) | ModelInput::Waveform(t) => t,
        }
    }

    /// Number of input steps (frames or samples).
    pub fn len(&self) -> usize {
        self.tensor().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn map(&self, f: impl FnOnce(&Tensor) -> Tensor) -> Self {
        match self {
            ModelInput::Features(t) => ModelInput::Features(f(t)),
            ModelInput::Waveform(t) => ModelInput::Waveform(f(t)),
        }
    }

    /// First `len` steps.
    pub fn truncated(&self, len: usize) -> Self {
        self.map(|t| {
            let c = t.shape()[1];
            let len = len.min(t.shape()[0]);
            Tensor::with_dtype(&[len, c], t.data()[..len * c].to_vec(), t.dtype())
                .expect("length matches")
        })
    }

    /// Time-reversed copy.
    pub fn reversed(&self) -> Self {
        self.map(|t| {
            let c = t.shape()[1];
            let data = t.data().chunks(c.max(1)).rev().flatten().copied().collect();
            Tensor::with_dtype(t.shape(), data, t.dtype()).expect("length matches")
        })
    }
}

/// Name prefixes applied per module when binding parameters. Bi-APC views
/// use `l2r.`/`r2l.` on unshared modules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModulePrefixes {
    pub frontend: String,
    pub encoder: String,
    pub generator: String,
}

impl ModulePrefixes {
    pub fn resolve(&self, bare: &str) -> String {
        let p = match module_of(bare) {
            Module::Frontend => &self.frontend,
            Module::Encoder | Module::Adapter => &self.encoder,
            Module::Generator => &self.generator,
        };
        format!("{p}{bare}")
    }
}

/// Allow-matrices `[T, T]`, one per sequence. A nonzero entry `(q, k)`
/// lets query `q` attend to key `k`. Keys at or past the valid length are
/// never allowed; padded query rows see the valid keys so that softmax
/// stays defined.
pub fn attention_mask(mode: MaskMode, t: usize, lengths: &[usize]) -> Result<Vec<Tensor>> {
    lengths
        .iter()
        .map(|&len| {
            if len > t {
                return Err(ModelError::InvalidConfig(format!(
                    "length {len} exceeds padded length {t}"
                )));
            }
            let mut m = vec![0.0; t * t];
            for q in 0..t {
                for k in 0..len {
                    let ok = match mode {
                        MaskMode::Full => true,
                        MaskMode::Causal => k <= q,
                    };
                    if ok {
                        m[q * t + k] = 1.0;
                    }
                }
            }
            Ok(Tensor::new(&[t, t], m)?)
        })
        .collect()
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize, dtype: DType) -> Tensor {
    let mut v = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            v[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::with_dtype(&[t, d], v, dtype).expect("length matches")
}

/// A single model: conv frontend, encoder, optional adapters, one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Read-only handle used for forward passes.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
    pub prefixes: &'a ModulePrefixes,
}

static NO_PREFIX: ModulePrefixes = ModulePrefixes {
    frontend: String::new(),
    encoder: String::new(),
    generator: String::new(),
};

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    group: Group,
}

impl Init<'_> {
    fn xavier(&mut self, name: String, shape: &[usize]) {
        let t = xavier_uniform(shape, self.dtype, &mut self.rng);
        self.store.insert(name, t, self.group);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.store
            .insert(name, Tensor::zeros(shape, self.dtype), self.group);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.xavier(format!("{prefix}.weight"), &[fan_in, fan_out]);
        self.zeros(format!("{prefix}.bias"), &[fan_out]);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store.insert(
            format!("{prefix}.gamma"),
            Tensor::full(&[d], 1.0, self.dtype),
            self.group,
        );
        self.zeros(format!("{prefix}.beta"), &[d]);
    }

    fn conv(&mut self, prefix: &str, w: usize, cin: usize, cout: usize) {
        self.xavier(format!("{prefix}.kernel"), &[w, cin, cout]);
        self.zeros(format!("{prefix}.bias"), &[cout]);
    }

    fn head(&mut self, cfg: &ModelConfig, head: HeadConfig) {
        let d = cfg.d_model;
        match head {
            HeadConfig::None => {}
            HeadConfig::Apc { lags } => {
                for i in 0..lags {
                    self.linear(&format!("gen.apc{i}"), d, cfg.stacked_dim());
                }
            }
            HeadConfig::Contrastive {
                codebook_size,
                d_code,
            } => {
                self.linear("gen.proj", d, d_code);
                self.linear("gen.quant", d, codebook_size);
                self.xavier("gen.codebook".into(), &[codebook_size, d_code]);
            }
            HeadConfig::Hubert { units } => self.linear("gen.hubert", d, units),
            HeadConfig::Ctc { vocab } => self.linear("ctc", d, vocab),
        }
    }

    /// Adapters take Xavier weights and biases; their norms start at identity.
    fn adapters(&mut self, n: usize, d: usize, d_ada: usize) {
        for i in 0..n {
            let p = format!("ada{i}");
            self.layer_norm(&format!("{p}.ln"), d);
            self.xavier(format!("{p}.down.weight"), &[d, d_ada]);
            self.xavier(format!("{p}.down.bias"), &[d_ada]);
            self.xavier(format!("{p}.up.weight"), &[d_ada, d]);
            self.xavier(format!("{p}.up.bias"), &[d]);
        }
    }
}

impl Backbone {
    /// Build and initialize every parameter deterministically from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: config.dtype,
            group: Group::Backbone,
        };
        let (d, w) = (config.d_model, config.conv_kernel);
        match config.frontend {
            Frontend::Filterbank => {
                init.conv("frontend.conv0", w, config.feature_dim, d);
                init.conv("frontend.conv1", w, d, d);
            }
            Frontend::LearnedConv => {
                for i in 0..LEARNED_CONV_LAYERS {
                    let cin = if i == 0 { 1 } else { d };
                    init.conv(&format!("frontend.conv{i}"), LEARNED_CONV_KERNEL, cin, d);
                }
            }
        }
        init.xavier("mask_emb".into(), &[d]);
        for b in 0..config.n_blocks {
            let p = format!("block{b}");
            init.layer_norm(&format!("{p}.ln1"), d);
            for m in ["q", "k", "v", "o"] {
                init.linear(&format!("{p}.attn.{m}"), d, d);
            }
            init.layer_norm(&format!("{p}.ln2"), d);
            init.linear(&format!("{p}.ff1"), d, config.ffn_dim);
            init.linear(&format!("{p}.ff2"), config.ffn_dim, d);
        }
        init.layer_norm("final_ln", d);
        if let Some(a) = config.d_ada {
            init.group = Group::Adapter;
            init.adapters(config.n_blocks + 1, d, a);
        }
        init.group = Group::Generator;
        init.head(config, config.head);
        Ok(Backbone {
            config: config.clone(),
            params: store,
        })
    }

    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            config: &self.config,
            params: &self.params,
            prefixes: &NO_PREFIX,
        }
    }

    pub fn has_adapters(&self) -> bool {
        self.params.has_group(Group::Adapter)
    }

    /// Add one adapter after the conv block and one after each encoder
    /// block. Existing tensors are untouched.
    pub fn insert_adapters(&mut self, d_ada: usize, seed: u64) -> Result<()> {
        if self.has_adapters() {
            return Err(ModelError::AdaptersPresent);
        }
        if d_ada == 0 {
            return Err(ModelError::InvalidConfig("d_ada must be positive".into()));
        }
        let mut init = Init {
            store: &mut self.params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: self.config.dtype,
            group: Group::Adapter,
        };
        init.adapters(self.config.n_blocks + 1, self.config.d_model, d_ada);
        self.config.d_ada = Some(d_ada);
        Ok(())
    }

    /// Drop all adapter tensors and draw fresh ones of the same width.
    pub fn reinit_adapters(&mut self, seed: u64) -> Result<()> {
        let d_ada = self.config.d_ada.ok_or_else(|| {
            ModelError::Structure("model has no adapters to re-initialize".into())
        })?;
        self.params.remove_group(Group::Adapter);
        self.insert_adapters(d_ada, seed)
    }

    /// Swap the generator for a freshly initialized `head`.
    pub fn replace_head(&mut self, head: HeadConfig, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.head = head;
        cfg.validate()?;
        self.params.remove_group(Group::Generator);
        let mut init = Init {
            store: &mut self.params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: cfg.dtype,
            group: Group::Generator,
        };
        init.head(&cfg, head);
        self.config = cfg;
        Ok(())
    }

    /// Make exactly the named groups trainable.
    pub fn set_trainable(&mut self, groups: &[Group]) -> Result<()> {
        self.params.set_trainable(groups)
    }

    /// Like [`Backbone::set_trainable`] but from group names.
    pub fn set_trainable_by_name(&mut self, names: &[&str]) -> Result<()> {
        let groups = names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<Group>>>()?;
        self.set_trainable(&groups)
    }
}

impl<'a> ModelView<'a> {
    fn ctx<'t>(&self, tape: &'t mut Tape, rng: Option<&'t mut ChaCha8Rng>) -> Ctx<'t>
    where
        'a: 't,
    {
        let mut ctx = Ctx::new(tape, self.params, self.prefixes);
        ctx.dropout = rng.map(|r| (self.config.dropout, r));
        ctx
    }

    fn padding(&self) -> ConvPadding {
        match self.config.mask_mode {
            MaskMode::Causal => ConvPadding::Causal,
            MaskMode::Full => ConvPadding::Same,
        }
    }

    fn has_adapters(&self) -> bool {
        self.config.d_ada.is_some()
            && self
                .params
                .contains(&self.prefixes.resolve("ada0.ln.gamma"))
    }

    /// Conv block (plus the first adapter): `[T, C]` input to latents
    /// `[T′, d_model]`.
    pub fn subsample(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        match (self.config.frontend, input) {
            (Frontend::Filterbank, ModelInput::Features(t)) => {
                if t.shape().len() != 2 || t.shape()[1] != self.config.feature_dim {
                    return Err(TensorError::ShapeMismatch {
                        op: "frontend",
                        lhs: t.shape().to_vec(),
                        rhs: vec![t.shape()[0], self.config.feature_dim],
                    }
                    .into());
                }
            }
            (Frontend::LearnedConv, ModelInput::Waveform(_)) => {}
            (Frontend::Filterbank, _) => return Err(ModelError::InputKind("filterbank")),
            (Frontend::LearnedConv, _) => return Err(ModelError::InputKind("learned_conv")),
        }
        let padding = self.padding();
        let adapters = self.has_adapters();
        let mut ctx = self.ctx(tape, rng);
        let mut x = ctx.tape.constant(input.tensor());
        let strides: Vec<usize> = match self.config.frontend {
            Frontend::Filterbank => self.config.conv_strides().to_vec(),
            Frontend::LearnedConv => vec![2; LEARNED_CONV_LAYERS],
        };
        for (i, s) in strides.into_iter().enumerate() {
            x = ctx.conv(&format!("frontend.conv{i}"), x, s, padding)?;
            x = ctx.tape.gelu(x)?;
        }
        if adapters {
            x = ctx.adapter("ada0", x)?;
        }
        Ok(x)
    }

    /// Replace the latents at `mask` rows with the learned mask embedding.
    pub fn apply_mask(&self, tape: &mut Tape, z: Var, mask: &[bool]) -> Result<Var> {
        let t = tape.shape(z)?[0];
        if mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "apply_mask",
                lhs: vec![t],
                rhs: vec![mask.len()],
            }
            .into());
        }
        let dtype = tape.dtype();
        let col = Tensor::with_dtype(
            &[t, 1],
            mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
            dtype,
        )?;
        let emb = self.params.bind(tape, &self.prefixes.resolve("mask_emb"))?;
        let kept = tape.masked_fill(z, &col, 0.0)?;
        let m = tape.constant(&col);
        let fill = tape.mul(m, emb)?;
        Ok(tape.add(kept, fill)?)
    }

    /// Encoder stack over latents `[T′, d]`: optional masking, positions,
    /// blocks (each followed by its adapter) and the final norm.
    pub fn encode(
        &self,
        tape: &mut Tape,
        z: Var,
        mask: Option<&[bool]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let z = match mask {
            Some(m) => self.apply_mask(tape, z, m)?,
            None => z,
        };
        let t = tape.shape(z)?[0];
        let d = self.config.d_model;
        let adapters = self.has_adapters();
        let allow = attention_mask(self.config.mask_mode, t, &[t])?.remove(0);
        let mut ctx = self.ctx(tape, rng);
        let pe = ctx
            .tape
            .constant(&positional_encoding(t, d, ctx.tape.dtype()));
        let mut h = ctx.tape.add(z, pe)?;
        h = ctx.dropout(h)?;
        if t > 0 {
            for b in 0..self.config.n_blocks {
                h = ctx.encoder_block(&format!("block{b}"), h, self.config.n_heads, &allow)?;
                if adapters {
                    h = ctx.adapter(&format!("ada{}", b + 1), h)?;
                }
            }
        }
        ctx.layer_norm("final_ln", h)
    }

    /// Hidden states `[T′, d_model]` for one utterance.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let z = self.subsample(tape, input, rng.as_deref_mut())?;
        self.encode(tape, z, None, rng)
    }

    /// Forward a padded batch: each input is cut to its length, encoded on
    /// its own, and the results are zero-padded into `[B, T′max, d]`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        inputs: &[ModelInput],
        lengths: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        if inputs.len() != lengths.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} inputs but {} lengths",
                inputs.len(),
                lengths.len()
            )));
        }
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut out_lens = Vec::with_capacity(inputs.len());
        for (x, &len) in inputs.iter().zip(lengths) {
            if len > x.len() {
                return Err(ModelError::InvalidConfig(format!(
                    "length {len} exceeds padded length {}",
                    x.len()
                )));
            }
            let h = self.forward(tape, &x.truncated(len), None)?;
            out_lens.push(tape.shape(h)?[0]);
            hidden.push(h);
        }
        let t_max = out_lens.iter().copied().max().unwrap_or(0);
        let d = self.config.d_model;
        let dtype = tape.dtype();
        let mut padded = Vec::with_capacity(hidden.len());
        for (h, &t) in hidden.into_iter().zip(&out_lens) {
            let full = if t < t_max {
                let pad = tape.constant(&Tensor::zeros(&[t_max - t, d], dtype));
                tape.concat(&[h, pad], 0)?
            } else {
                h
            };
            padded.push(full);
        }
        let b = padded.len();
        let stacked = match b {
            0 => tape.constant(&Tensor::zeros(&[0, t_max, d], dtype)),
            1 => padded[0],
            _ => tape.concat(&padded, 0)?,
        };
        Ok((tape.reshape(stacked, &[b, t_max, d])?, out_lens))
    }

    /// Apply a linear head stored under `name` (e.g. `gen.apc0`, `ctc`).
    pub fn head(&self, tape: &mut Tape, name: &str, h: Var) -> Result<Var> {
        self.ctx(tape, None).linear(name, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            ffn_dim: 32,
            ..ModelConfig::toy()
        }
    }

    fn features(t: usize, d: usize, seed: u64, dtype: DType) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        ModelInput::Features(Tensor::with_dtype(&[t, d], v, dtype).unwrap())
    }

    // Closed-form parameter count written out independently of the builder.
    fn expected_count(c: &ModelConfig) -> usize {
        let (d, f, w, din) = (c.d_model, c.ffn_dim, c.conv_kernel, c.feature_dim);
        let conv = (w * din * d + d) + (w * d * d + d);
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let enc = d + c.n_blocks * block + 2 * d;
        let ada = c
            .d_ada
            .map_or(0, |a| (c.n_blocks + 1) * (2 * d * a + a + 3 * d));
        let head = match c.head {
            HeadConfig::Apc { lags } => lags * (d * c.stacked_dim() + c.stacked_dim()),
            HeadConfig::Contrastive {
                codebook_size: v,
                d_code: q,
            } => (d * q + q) + (d * v + v) + v * q,
            HeadConfig::Hubert { units } => d * units + units,
            HeadConfig::Ctc { vocab } => d * vocab + vocab,
            HeadConfig::None => 0,
        };
        conv + enc + ada + head
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let heads = [
            HeadConfig::Apc { lags: 1 },
            HeadConfig::Apc { lags: 3 },
            HeadConfig::Contrastive {
                codebook_size: 4,
                d_code: 6,
            },
            HeadConfig::Hubert { units: 5 },
            HeadConfig::Ctc { vocab: 9 },
            HeadConfig::None,
        ];
        for head in heads {
            for d_ada in [None, Some(4)] {
                for sf in [1, 2, 4] {
                    let cfg = ModelConfig {
                        head,
                        d_ada,
                        subsample_factor: sf,
                        ..small()
                    };
                    let b = Backbone::build(&cfg, 0).unwrap();
                    assert_eq!(b.params.count(None), expected_count(&cfg), "{cfg:?}");
                }
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Backbone::build(&small(), 7).unwrap();
        let b = Backbone::build(&small(), 7).unwrap();
        let c = Backbone::build(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.params.checksum(Group::Backbone),
            c.params.checksum(Group::Backbone)
        );
    }

    #[test]
    fn no_adapters_unless_requested() {
        let b = Backbone::build(&small(), 0).unwrap();
        assert!(!b.params.has_group(Group::Adapter));
    }

    #[test]
    fn invalid_divisibility() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..small()
        };
        assert!(matches!(
            Backbone::build(&cfg, 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn attention_mask_examples() {
        let m = attention_mask(MaskMode::Causal, 3, &[3]).unwrap();
        assert_eq!(m[0].data(), &[1., 0., 0., 1., 1., 0., 1., 1., 1.]);
        let m = attention_mask(MaskMode::Full, 3, &[2]).unwrap();
        for q in 0..3 {
            assert_eq!(m[0].data()[q * 3 + 2], 0.0);
            assert_eq!(&m[0].data()[q * 3..q * 3 + 2], &[1.0, 1.0]);
        }
        assert_eq!(
            attention_mask(MaskMode::Causal, 1, &[1]).unwrap()[0].data(),
            &[1.0]
        );
        assert!(attention_mask(MaskMode::Full, 2, &[3]).is_err());
    }

    #[test]
    fn subsampled_length() {
        let b = Backbone::build(&small(), 0).unwrap();
        let mut tape = Tape::new(DType::F32);
        let h = b
            .view()
            .forward(&mut tape, &features(16, 8, 1, DType::F32), None)
            .unwrap();
        assert_eq!(tape.shape(h).unwrap(), &[4, 16]);
        let h = b
            .view()
            .forward(&mut tape, &features(17, 8, 1, DType::F32), None)
            .unwrap();
        assert_eq!(tape.shape(h).unwrap()[0], 5);
    }

    #[test]
    fn causal_outputs_ignore_later_frames() {
        let cfg = ModelConfig {
            dtype: DType::F64,
            ..small()
        };
        let b = Backbone::build(&cfg, 3).unwrap();
        let x = features(16, 8, 2, DType::F64);
        let mut y = x.tensor().clone();
        for v in &mut y.data_mut()[12 * 8..] {
            *v += 0.7;
        }
        let mut tape = Tape::new(DType::F64);
        let h0 = b.view().forward(&mut tape, &x, None).unwrap();
        let h1 = b
            .view()
            .forward(&mut tape, &ModelInput::Features(y), None)
            .unwrap();
        let (a, c) = (tape.value(h0).unwrap(), tape.value(h1).unwrap());
        for i in 0..3 * 16 {
            assert!((a[i] - c[i]).abs() < 1e-10);
        }
        assert!((3 * 16..4 * 16).any(|i| (a[i] - c[i]).abs() > 1e-6));
    }

    #[test]
    fn full_mode_sees_the_future() {
        let cfg = ModelConfig {
            dtype: DType::F64,
            mask_mode: MaskMode::Full,
            ..small()
        };
        let b = Backbone::build(&cfg, 3).unwrap();
        let x = features(16, 8, 2, DType::F64);
        let mut y = x.tensor().clone();
        y.data_mut()[15 * 8] += 1.0;
        let mut tape = Tape::new(DType::F64);
        let h0 = b.view().forward(&mut tape, &x, None).unwrap();
        let h1 = b
            .view()
            .forward(&mut tape, &ModelInput::Features(y), None)
            .unwrap();
        assert!((tape.value(h0).unwrap()[0] - tape.value(h1).unwrap()[0]).abs() > 1e-9);
    }

    #[test]
    fn zero_up_projection_adapters_are_identity() {
        let cfg = ModelConfig {
            dtype: DType::F64,
            ..small()
        };
        let plain = Backbone::build(&cfg, 5).unwrap();
        let mut with = plain.clone();
        with.insert_adapters(4, 9).unwrap();
        for (name, p) in with.params.iter_mut() {
            if name.contains(".up.") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = features(12, 8, 1, DType::F64);
        let mut tape = Tape::new(DType::F64);
        let a = plain.view().forward(&mut tape, &x, None).unwrap();
        let b = with.view().forward(&mut tape, &x, None).unwrap();
        assert_eq!(tape.value(a).unwrap(), tape.value(b).unwrap());
    }

    #[test]
    fn adapter_insertion() {
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            ..small()
        };
        let mut b = Backbone::build(&cfg, 0).unwrap();
        let before_f = b.params.checksum(Group::Backbone);
        let before_g = b.params.checksum(Group::Generator);
        let n0 = b.params.count(None);
        b.insert_adapters(8, 1).unwrap();
        assert_eq!(b.params.count(Some(Group::Adapter)), 3 * 1224);
        assert_eq!(b.params.count(None) - n0, 3 * 1224);
        assert_eq!(
            b.params
                .names()
                .filter(|n| n.ends_with(".ln.gamma"))
                .count(),
            3
        );
        assert_eq!(b.params.checksum(Group::Backbone), before_f);
        assert_eq!(b.params.checksum(Group::Generator), before_g);
        assert!(matches!(
            b.insert_adapters(8, 1),
            Err(ModelError::AdaptersPresent)
        ));
    }

    #[test]
    fn head_replacement() {
        let mut b = Backbone::build(&small(), 0).unwrap();
        b.replace_head(HeadConfig::Ctc { vocab: 9 }, 1).unwrap();
        assert!(!b.params.names().any(|n| n.starts_with("gen.")));
        let mut tape = Tape::new(DType::F32);
        let v = b.view();
        let h = v
            .forward(&mut tape, &features(8, 8, 0, DType::F32), None)
            .unwrap();
        let logits = v.head(&mut tape, "ctc", h).unwrap();
        assert_eq!(tape.shape(logits).unwrap(), &[2, 9]);
    }

    #[test]
    fn wrong_input_kind() {
        let b = Backbone::build(&small(), 0).unwrap();
        let w = ModelInput::Waveform(Tensor::zeros(&[64, 1], DType::F32));
        let mut tape = Tape::new(DType::F32);
        assert!(matches!(
            b.view().forward(&mut tape, &w, None),
            Err(ModelError::InputKind(_))
        ));

        let cfg = ModelConfig {
            frontend: Frontend::LearnedConv,
            head: HeadConfig::None,
            ..small()
        };
        let lc = Backbone::build(&cfg, 0).unwrap();
        assert!(matches!(
            lc.view()
                .forward(&mut tape, &features(8, 8, 0, DType::F32), None),
            Err(ModelError::InputKind(_))
        ));
        let h = lc.view().forward(&mut tape, &w, None).unwrap();
        assert_eq!(tape.shape(h).unwrap(), &[8, 16]);
    }

    #[test]
    fn batch_forward_pads_and_matches_single() {
        let cfg = ModelConfig {
            dtype: DType::F64,
            ..small()
        };
        let b = Backbone::build(&cfg, 0).unwrap();
        let long = features(16, 8, 1, DType::F64);
        let short = features(8, 8, 2, DType::F64);
        let mut padded = short.tensor().data().to_vec();
        padded.resize(16 * 8, 0.0);
        let short_padded = ModelInput::Features(Tensor::new(&[16, 8], padded).unwrap());
        let mut tape = Tape::new(DType::F64);
        let (h, lens) = b
            .view()
            .forward_batch(&mut tape, &[long, short_padded], &[16, 8])
            .unwrap();
        assert_eq!(lens, vec![4, 2]);
        assert_eq!(tape.shape(h).unwrap(), &[2, 4, 16]);
        let single = b.view().forward(&mut tape, &short, None).unwrap();
        let hv = tape.value(h).unwrap().to_vec();
        assert_eq!(&hv[64..64 + 32], tape.value(single).unwrap());
        assert!(hv[64 + 32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_trainable_by_group_names() {
        let mut b = Backbone::build(&small(), 0).unwrap();
        assert!(matches!(
            b.set_trainable_by_name(&["encoder"]),
            Err(ModelError::UnknownGroup(_))
        ));
        assert!(matches!(
            b.set_trainable_by_name(&[]),
            Err(ModelError::NoTrainable)
        ));
        b.set_trainable_by_name(&["generator"]).unwrap();
        assert_eq!(b.params.trainable_groups(), vec![Group::Generator]);
    }
}
