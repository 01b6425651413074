use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Provenance, RngState, StageRecord};
use super::schedule::{NoamSchedule, Schedule};
use super::{Result, TrainError};
use crate::ctc::{ctc_loss_per_token, min_frames, Vocab};
use crate::data::{make_batches, Batch, DataError, Utterance};
use crate::features::{spec_augment, FeatureMatrix, SpecAugConfig};
use crate::model::{
    build_biapc_pair, Backbone, BiApcPair, Group, HeadConfig, MaskMode, ModelConfig, ModelInput,
    ParamStore, SharingScheme,
};
use crate::ssl::{
    contrastive_objective, eapc_objective, ebiapc_loss, hubert_objective, kmeans_fit, unit_labels,
    KMeansModel, Objective, Reduction, StackedTargets,
};
use crate::tensor::{AdamConfig, AdamState, DType, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Saft,
    DraftAdapt,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Saft => "saft",
            Stage::DraftAdapt => "draft_adapt",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "saft" => Ok(Stage::Saft),
            "draft_adapt" | "draft" => Ok(Stage::DraftAdapt),
            "finetune" => Ok(Stage::Finetune),
            other => Err(TrainError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Every group is updated.
    #[default]
    Full,
    /// Adapters keep their adapted values; backbone and new head train.
    AdaptersFrozen,
    /// Only adapters and the new head train.
    AdaptersOnly,
    /// Adapters are redrawn, then everything trains.
    RandomAdapters,
    /// Fresh adapters go into a model that never had any, then everything
    /// trains.
    PlusRaBaseline,
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::Full => "full",
            FinetuneMode::AdaptersFrozen => "adapters_frozen",
            FinetuneMode::AdaptersOnly => "adapters_only",
            FinetuneMode::RandomAdapters => "random_adapters",
            FinetuneMode::PlusRaBaseline => "plus_ra_baseline",
        })
    }
}

impl FromStr for FinetuneMode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "adapters_frozen" => Ok(FinetuneMode::AdaptersFrozen),
            "adapters_only" => Ok(FinetuneMode::AdaptersOnly),
            "random_adapters" => Ok(FinetuneMode::RandomAdapters),
            "plus_ra" | "plus_ra_baseline" => Ok(FinetuneMode::PlusRaBaseline),
            other => Err(TrainError::Config(format!(
                "unknown finetune mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    /// Self-supervised loss. Required for pretraining; adaptation stages
    /// fall back to the loss stored in the initial checkpoint; finetuning
    /// always uses CTC and rejects a value here.
    pub objective: Option<Objective>,
    /// Label recorded in the provenance history.
    pub corpus: String,
    /// Architecture for pretraining and for finetuning from scratch.
    pub model: ModelConfig,
    /// Module sharing for Bi-APC pretraining.
    pub scheme: SharingScheme,
    /// Optional explicit trainable groups; must agree with the stage.
    pub trainable: Option<Vec<Group>>,
    /// `None` selects [`default_schedule`].
    pub schedule: Option<Schedule>,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_mode: FinetuneMode,
    pub d_ada: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Check every forward value for NaN/Inf.
    pub verification: bool,
    pub vocab: Option<Vocab>,
    pub spec_augment: Option<SpecAugConfig>,
    /// SAFT peak learning rate relative to pretraining.
    pub saft_lr_ratio: f64,
    /// Codebook shape for a contrastive head built at pretraining.
    pub codebook_size: usize,
    pub d_code: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        StageConfig {
            stage: Stage::Pretrain,
            objective: None,
            corpus: String::new(),
            model: ModelConfig::toy(),
            scheme: SharingScheme::None,
            trainable: None,
            schedule: None,
            steps: 100,
            batch_size: 8,
            seed: 0,
            finetune_mode: FinetuneMode::Full,
            d_ada: 8,
            grad_clip: 5.0,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            verification: false,
            vocab: None,
            spec_augment: None,
            saft_lr_ratio: 0.5,
            codebook_size: 32,
            d_code: 32,
        }
    }
}

/// Noam schedule whose warmup covers a tenth of the run.
pub fn default_schedule(stage: Stage, d_model: usize, steps: u64) -> Schedule {
    // Adaptation runs far gentler than pretraining: at the pretraining rate
    // the target-domain SSL updates undo what pretraining learned.
    let factor = match stage {
        Stage::Pretrain | Stage::Finetune => 1.0,
        Stage::Saft | Stage::DraftAdapt => 0.03,
    };
    Schedule::Noam(NoamSchedule {
        factor,
        warmup: (steps / 10).max(1),
        d_model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

impl StageOutput {
    pub fn metrics_jsonl(&self) -> String {
        self.metrics
            .iter()
            .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
            .collect()
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        fs::write(path, self.metrics_jsonl())?;
        Ok(())
    }
}

enum Trainee {
    Single(Backbone),
    Pair(BiApcPair),
}

impl Trainee {
    fn params(&self) -> &ParamStore {
        match self {
            Trainee::Single(m) => &m.params,
            Trainee::Pair(p) => &p.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Trainee::Single(m) => &mut m.params,
            Trainee::Pair(p) => &mut p.params,
        }
    }

    fn single(&self) -> Result<&Backbone> {
        match self {
            Trainee::Single(m) => Ok(m),
            Trainee::Pair(_) => Err(TrainError::Config("objective needs a single model".into())),
        }
    }
}

enum Task {
    Ssl(Objective),
    Ctc,
}

const TRAIN_STREAM: u64 = 1;
const ADAPTER_SEED: u64 = 0xada;
const HEAD_SEED: u64 = 0x9e;
const KMEANS_SEED: u64 = 0x6b;

fn head_for(obj: &Objective, current: HeadConfig, cfg: &StageConfig) -> HeadConfig {
    match obj {
        Objective::Eapc(s) | Objective::Ebiapc(s) => HeadConfig::Apc { lags: s.k },
        Objective::Contrastive(_) => match current {
            HeadConfig::Contrastive { .. } => current,
            _ => HeadConfig::Contrastive {
                codebook_size: cfg.codebook_size,
                d_code: cfg.d_code,
            },
        },
        Objective::Hubert(h) => HeadConfig::Hubert { units: h.clusters },
    }
}

fn check_objective(obj: &Objective) -> Result<()> {
    match obj {
        Objective::Eapc(s) | Objective::Ebiapc(s) => s.validate()?,
        Objective::Hubert(h) if h.clusters == 0 => {
            return Err(TrainError::Config("hubert needs clusters".into()))
        }
        _ => {}
    }
    Ok(())
}

/// Stacked frames `Z′` of every complete group in `data`.
fn stacked_points(data: &[Utterance], factor: usize) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut width = 0;
    for u in data {
        let ModelInput::Features(x) = &u.input else {
            return Err(TrainError::Config(
                "unit discovery needs filter-bank inputs".into(),
            ));
        };
        let z = StackedTargets::from_frames(x, factor)?;
        width = z.width();
        rows.extend_from_slice(&z.data.data()[..z.valid_len * width]);
    }
    let n = rows.len().checked_div(width).unwrap_or(0);
    Ok(Tensor::with_dtype(&[n, width], rows, DType::F64)?)
}

fn fit_units(
    data: &[Utterance],
    model: &ModelConfig,
    h: &crate::ssl::HubertConfig,
    seed: u64,
) -> Result<KMeansModel> {
    let pts = stacked_points(data, model.subsample_factor)?;
    Ok(kmeans_fit(
        &pts,
        h.clusters,
        h.kmeans_iters,
        seed ^ KMEANS_SEED,
    )?)
}

fn stage_objective(cfg: &StageConfig, init: &Checkpoint) -> Result<Objective> {
    let obj = cfg
        .objective
        .clone()
        .or_else(|| init.objective.clone())
        .ok_or_else(|| {
            TrainError::Config(format!(
                "the {} stage needs a self-supervised objective",
                cfg.stage
            ))
        })?;
    check_objective(&obj)?;
    if init.provenance.asr_head {
        return Err(TrainError::Config(
            "cannot run self-supervised adaptation on a finetuned model".into(),
        ));
    }
    let want = head_for(&obj, init.model.config.head, cfg);
    if want != init.model.config.head {
        return Err(TrainError::Config(format!(
            "objective {} needs head {want:?}, checkpoint has {:?}",
            obj.name(),
            init.model.config.head
        )));
    }
    Ok(obj)
}

struct Prepared {
    trainee: Trainee,
    task: Task,
    kmeans: Option<KMeansModel>,
    vocab: Option<Vocab>,
    trainable: Vec<Group>,
    /// Groups whose tensors were freshly drawn at this stage.
    fresh: Vec<Group>,
}

fn prepare(cfg: &StageConfig, init: Option<&Checkpoint>, data: &[Utterance]) -> Result<Prepared> {
    match cfg.stage {
        Stage::Pretrain => {
            if init.is_some() {
                return Err(TrainError::Config(
                    "pretraining starts from a freshly initialized model".into(),
                ));
            }
            let obj = cfg
                .objective
                .clone()
                .ok_or_else(|| TrainError::Config("pretraining needs an objective".into()))?;
            check_objective(&obj)?;
            if cfg.model.d_ada.is_some() {
                return Err(TrainError::Config(
                    "adapters are inserted at the adaptation stage, not before".into(),
                ));
            }
            let mut mcfg = cfg.model.clone();
            mcfg.head = head_for(&obj, mcfg.head, cfg);
            let trainee = match obj {
                Objective::Ebiapc(_) => {
                    if mcfg.mask_mode != MaskMode::Causal {
                        return Err(TrainError::Config(
                            "bidirectional APC needs causal directions".into(),
                        ));
                    }
                    Trainee::Pair(build_biapc_pair(&mcfg, cfg.scheme, cfg.seed)?)
                }
                _ => Trainee::Single(Backbone::build(&mcfg, cfg.seed)?),
            };
            let kmeans = match &obj {
                Objective::Hubert(h) => Some(fit_units(data, &mcfg, h, cfg.seed)?),
                _ => None,
            };
            Ok(Prepared {
                trainee,
                task: Task::Ssl(obj),
                kmeans,
                vocab: None,
                trainable: vec![Group::Backbone, Group::Generator],
                fresh: vec![Group::Backbone, Group::Generator],
            })
        }
        Stage::Saft | Stage::DraftAdapt => {
            let init = init.ok_or(TrainError::MissingInit(cfg.stage))?;
            let obj = stage_objective(cfg, init)?;
            let mut model = init.model.clone();
            let mut fresh = Vec::new();
            let trainable = if cfg.stage == Stage::Saft {
                Group::ALL
                    .into_iter()
                    .filter(|&g| model.params.has_group(g))
                    .collect()
            } else {
                match model.config.d_ada {
                    Some(existing) if existing != cfg.d_ada => {
                        return Err(TrainError::AdapterWidth {
                            existing,
                            requested: cfg.d_ada,
                        })
                    }
                    Some(_) => {}
                    None => {
                        model.insert_adapters(cfg.d_ada, cfg.seed ^ ADAPTER_SEED)?;
                        fresh.push(Group::Adapter);
                    }
                }
                vec![Group::Adapter]
            };
            // Units for the target data come from a fresh clustering of it.
            let kmeans = match &obj {
                Objective::Hubert(h) => Some(fit_units(data, &model.config, h, cfg.seed)?),
                _ => None,
            };
            Ok(Prepared {
                trainee: Trainee::Single(model),
                task: Task::Ssl(obj),
                kmeans,
                vocab: init.vocab.clone(),
                trainable,
                fresh,
            })
        }
        Stage::Finetune => {
            if cfg.objective.is_some() {
                return Err(TrainError::Config(
                    "finetuning always uses the CTC loss".into(),
                ));
            }
            let vocab = cfg
                .vocab
                .clone()
                .or_else(|| init.and_then(|c| c.vocab.clone()))
                .ok_or(TrainError::MissingVocab)?;
            if let Some(u) = data
                .iter()
                .find(|u| u.transcript.iter().any(|&k| k == 0 || k >= vocab.size()))
            {
                return Err(TrainError::Config(format!(
                    "utterance {} has tokens outside the {}-symbol vocabulary",
                    u.id,
                    vocab.size()
                )));
            }
            let mut fresh = vec![Group::Generator];
            let mut model = match init {
                Some(c) => c.model.clone(),
                None => {
                    let mut mcfg = cfg.model.clone();
                    mcfg.head = HeadConfig::Ctc {
                        vocab: vocab.size(),
                    };
                    fresh.push(Group::Backbone);
                    if mcfg.d_ada.is_some() {
                        fresh.push(Group::Adapter);
                    }
                    Backbone::build(&mcfg, cfg.seed)?
                }
            };
            let has = model.has_adapters();
            let need_adapters = |what: &str| {
                if has {
                    Ok(())
                } else {
                    Err(TrainError::Config(format!(
                        "{what} needs a model with adapters"
                    )))
                }
            };
            let trainable = match cfg.finetune_mode {
                FinetuneMode::Full => Group::ALL.to_vec(),
                FinetuneMode::AdaptersFrozen => {
                    need_adapters("adapters_frozen")?;
                    vec![Group::Backbone, Group::Generator]
                }
                FinetuneMode::AdaptersOnly => {
                    need_adapters("adapters_only")?;
                    vec![Group::Adapter, Group::Generator]
                }
                FinetuneMode::RandomAdapters => {
                    need_adapters("random_adapters")?;
                    model.reinit_adapters(cfg.seed ^ ADAPTER_SEED)?;
                    fresh.push(Group::Adapter);
                    Group::ALL.to_vec()
                }
                FinetuneMode::PlusRaBaseline => {
                    model.insert_adapters(cfg.d_ada, cfg.seed ^ ADAPTER_SEED)?;
                    fresh.push(Group::Adapter);
                    Group::ALL.to_vec()
                }
            };
            model.replace_head(
                HeadConfig::Ctc {
                    vocab: vocab.size(),
                },
                cfg.seed ^ HEAD_SEED,
            )?;
            Ok(Prepared {
                trainee: Trainee::Single(model),
                task: Task::Ctc,
                kmeans: None,
                vocab: Some(vocab),
                trainable,
                fresh,
            })
        }
    }
}

fn advance(prev: &Provenance, p: &Prepared, stage: Stage, record: StageRecord) -> Provenance {
    let bump = |g: Group, v: u32| {
        let base = if p.fresh.contains(&g) { 0 } else { v };
        base + u32::from(p.trainable.contains(&g))
    };
    let has_ada = p.trainee.params().has_group(Group::Adapter);
    let mut next = Provenance {
        stage_index: prev.stage_index + 1,
        backbone: bump(Group::Backbone, prev.backbone),
        adapter: has_ada.then(|| bump(Group::Adapter, prev.adapter.unwrap_or(0))),
        generator: bump(Group::Generator, prev.generator),
        asr_head: prev.asr_head || stage == Stage::Finetune,
        history: prev.history.clone(),
    };
    next.history.push(record);
    next
}

fn to_features(x: &Tensor) -> FeatureMatrix {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    FeatureMatrix::new(
        t,
        d,
        x.data().iter().map(|&v| v as f32).collect(),
        10.0,
        25.0,
    )
}

#[allow(clippy::too_many_arguments)]
fn utterance_loss(
    tape: &mut Tape,
    trainee: &Trainee,
    task: &Task,
    input: &ModelInput,
    target: &[usize],
    labels: Option<&[usize]>,
    progress: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Var>> {
    let loss = match task {
        Task::Ssl(Objective::Eapc(spec)) => eapc_objective(
            tape,
            &trainee.single()?.view(),
            input,
            spec,
            Reduction::Mean,
            Some(rng),
        )?,
        Task::Ssl(Objective::Ebiapc(spec)) => match trainee {
            Trainee::Pair(p) => ebiapc_loss(tape, p, input, spec, Reduction::Mean, Some(rng))?,
            // After averaging, one model serves both directions.
            Trainee::Single(m) => {
                let v = m.view();
                let fwd = eapc_objective(tape, &v, input, spec, Reduction::Mean, Some(rng))?;
                let bwd = eapc_objective(
                    tape,
                    &v,
                    &input.reversed(),
                    spec,
                    Reduction::Mean,
                    Some(rng),
                )?;
                tape.add(fwd, bwd)?
            }
        },
        Task::Ssl(Objective::Contrastive(c)) => {
            let seed = rng.random();
            contrastive_objective(
                tape,
                &trainee.single()?.view(),
                input,
                c,
                c.gumbel_tau(progress),
                seed,
                Some(rng),
            )?
        }
        Task::Ssl(Objective::Hubert(h)) => {
            let labels = labels.ok_or_else(|| TrainError::Config("missing unit labels".into()))?;
            let seed = rng.random();
            hubert_objective(
                tape,
                &trainee.single()?.view(),
                input,
                labels,
                h,
                seed,
                Some(rng),
            )?
        }
        Task::Ctc => {
            let view = trainee.single()?.view();
            let h = view.forward(tape, input, Some(rng))?;
            let logits = view.head(tape, "ctc", h)?;
            let lp = tape.log_softmax(logits, 1)?;
            let frames = tape.shape(lp)?[0];
            if min_frames(target) > frames {
                log::warn!(
                    "skipping an utterance: {} model steps cannot emit {} tokens",
                    frames,
                    target.len()
                );
                return Ok(None);
            }
            ctc_loss_per_token(tape, lp, target, frames)?
        }
    };
    Ok(Some(loss))
}

/// Execute one training stage and return the resulting checkpoint plus
/// the per-step metrics.
pub fn run_stage(
    cfg: &StageConfig,
    init: Option<&Checkpoint>,
    data: &[Utterance],
) -> Result<StageOutput> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(TrainError::Config(
            "steps and batch_size must be positive".into(),
        ));
    }
    if cfg.grad_clip.is_nan() || cfg.grad_clip <= 0.0 {
        return Err(TrainError::Config("grad_clip must be positive".into()));
    }
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    let mut prep = prepare(cfg, init, data)?;
    if let Some(req) = &cfg.trainable {
        let mut a = req.clone();
        a.sort();
        a.dedup();
        let mut b = prep.trainable.clone();
        b.sort();
        if a != b {
            return Err(TrainError::Trainable {
                stage: cfg.stage,
                requested: req.clone(),
                required: prep.trainable.clone(),
            });
        }
    }
    prep.trainee.params_mut().set_trainable(&prep.trainable)?;

    let d_model = match &prep.trainee {
        Trainee::Single(m) => m.config.d_model,
        Trainee::Pair(p) => p.config.d_model,
    };
    let schedule = match cfg.schedule {
        Some(s) => s,
        None => {
            let base = default_schedule(cfg.stage, d_model, cfg.steps);
            if cfg.stage == Stage::Saft {
                base.scaled(cfg.saft_lr_ratio)
            } else {
                base
            }
        }
    };
    let dtype = prep
        .trainee
        .params()
        .iter()
        .next()
        .map(|(_, p)| p.tensor.dtype())
        .unwrap_or_default();

    let labels: HashMap<&str, Vec<usize>> = match (&prep.kmeans, &prep.task) {
        (Some(km), Task::Ssl(Objective::Hubert(_))) => {
            let factor = prep.trainee.single()?.config.subsample_factor;
            data.iter()
                .map(|u| Ok((u.id.as_str(), unit_labels(km, u.input.tensor(), factor)?)))
                .collect::<Result<_>>()?
        }
        _ => HashMap::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.0,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    });
    let mut queue: VecDeque<Batch> = VecDeque::new();
    let mut epoch = 0u64;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let by_id: HashMap<&str, &Utterance> = data.iter().map(|u| (u.id.as_str(), u)).collect();

    for step in 1..=cfg.steps {
        if queue.is_empty() {
            let seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(epoch);
            queue.extend(make_batches(data, cfg.batch_size, seed)?);
            epoch += 1;
        }
        let batch = queue.pop_front().expect("refilled above");
        let lr = schedule.lr(step, cfg.steps)?;
        let progress = if cfg.steps > 1 {
            (step - 1) as f64 / (cfg.steps - 1) as f64
        } else {
            1.0
        };

        let mut tape = Tape::new(dtype).with_verification(cfg.verification);
        let mut losses = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let mut input = batch.unpadded(i);
            if let (Task::Ctc, Some(sa), ModelInput::Features(x)) =
                (&prep.task, &cfg.spec_augment, &input)
            {
                let aug = spec_augment(&to_features(x), sa, rng.random());
                input = ModelInput::from_features(&aug, dtype);
            }
            let id = batch.ids[i].as_str();
            let target = &by_id[id].transcript;
            let l = utterance_loss(
                &mut tape,
                &prep.trainee,
                &prep.task,
                &input,
                target,
                labels.get(id).map(Vec::as_slice),
                progress,
                &mut rng,
            )?;
            losses.extend(l);
        }
        if losses.is_empty() {
            return Err(TrainError::Config(format!(
                "no utterance in the batch at step {step} is usable"
            )));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / losses.len() as f64)?;
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(TrainError::NonFinite(step));
        }
        tape.backward(loss)?;
        let params = prep.trainee.params_mut();
        params.zero_grad();
        params.accumulate_grads(&tape)?;
        params.clip_grad_norm(cfg.grad_clip);
        adam.config.lr = lr;
        params.adam_step(&mut adam)?;
        metrics.push(MetricRecord {
            step,
            stage: cfg.stage,
            loss: value,
            lr,
            seed: cfg.seed,
        });
    }

    let record = StageRecord {
        stage: cfg.stage,
        objective: match &prep.task {
            Task::Ssl(o) => Some(o.name().to_string()),
            Task::Ctc => Some("ctc".to_string()),
        },
        corpus: cfg.corpus.clone(),
        steps: cfg.steps,
        schedule,
        seed: cfg.seed,
    };
    let prev = init.map(|c| c.provenance.clone()).unwrap_or_default();
    let provenance = advance(&prev, &prep, cfg.stage, record);
    let objective = match &prep.task {
        Task::Ssl(o) => Some(o.clone()),
        Task::Ctc => init.and_then(|c| c.objective.clone()),
    };
    let mut model = match prep.trainee {
        Trainee::Single(m) => m,
        Trainee::Pair(p) => p.average_directions()?,
    };
    model.params.zero_grad();
    Ok(StageOutput {
        checkpoint: Checkpoint {
            model,
            provenance,
            objective,
            kmeans: prep.kmeans,
            vocab: prep.vocab,
            rng: RngState::capture(&rng),
            stage_config: Some(serde_json::to_value(cfg)?),
        },
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, SynthConfig, Synthesizer};
    use crate::ssl::{HubertConfig, ShiftSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            n_blocks: 1,
            ..ModelConfig::toy()
        }
    }

    fn corpus(domain: Domain, n: usize) -> Vec<Utterance> {
        let cfg = SynthConfig {
            max_tokens: 4,
            ..SynthConfig::default()
        };
        let s = Synthesizer::new(&cfg).unwrap();
        (0..n)
            .map(|i| {
                let (t, f) = s.feature_utterance(domain, 0, i);
                Utterance {
                    id: format!("{domain}{i}"),
                    input: ModelInput::from_features(&f, DType::F32),
                    transcript: t,
                    domain,
                }
            })
            .collect()
    }

    fn pretrain_cfg(obj: Objective) -> StageConfig {
        StageConfig {
            objective: Some(obj),
            model: tiny_model(),
            steps: 4,
            batch_size: 3,
            d_ada: 4,
            ..StageConfig::default()
        }
    }

    #[test]
    fn draft_adapt_only_moves_adapters() {
        let src = corpus(Domain::Source, 6);
        let tgt = corpus(Domain::Target, 6);
        let pre = run_stage(
            &pretrain_cfg(Objective::Eapc(ShiftSpec::default())),
            None,
            &src,
        )
        .unwrap();
        assert_eq!(pre.checkpoint.provenance.to_string(), "{θ_f¹, θ_g¹}");
        let cfg = StageConfig {
            stage: Stage::DraftAdapt,
            objective: None,
            ..pretrain_cfg(Objective::Eapc(ShiftSpec::default()))
        };
        let ada = run_stage(&cfg, Some(&pre.checkpoint), &tgt).unwrap();
        let (a, b) = (pre.checkpoint.checksums(), ada.checkpoint.checksums());
        assert_eq!(a[&Group::Backbone], b[&Group::Backbone]);
        assert_eq!(a[&Group::Generator], b[&Group::Generator]);
        let fresh = Backbone::build(&ada.checkpoint.model.config, 0).unwrap();
        let mut inserted = pre.checkpoint.model.clone();
        inserted
            .insert_adapters(4, cfg.seed ^ ADAPTER_SEED)
            .unwrap();
        assert_ne!(inserted.params.checksum(Group::Adapter), b[&Group::Adapter]);
        assert_eq!(
            fresh.params.count(Some(Group::Adapter)),
            ada.checkpoint.model.params.count(Some(Group::Adapter))
        );
        assert_eq!(
            ada.checkpoint.provenance.to_string(),
            "{θ_f¹, θ_ada¹, θ_g¹}"
        );
        assert!(pre
            .checkpoint
            .provenance
            .precedes(&ada.checkpoint.provenance));

        let wider = StageConfig {
            d_ada: 8,
            ..cfg.clone()
        };
        assert!(matches!(
            run_stage(&wider, Some(&ada.checkpoint), &tgt),
            Err(TrainError::AdapterWidth {
                existing: 4,
                requested: 8
            })
        ));
        let wrong = StageConfig {
            trainable: Some(vec![Group::Backbone]),
            ..cfg
        };
        assert!(matches!(
            run_stage(&wrong, Some(&pre.checkpoint), &tgt),
            Err(TrainError::Trainable { .. })
        ));
    }

    #[test]
    fn finetune_swaps_the_head_and_needs_a_vocab() {
        let src = corpus(Domain::Source, 4);
        let pre = run_stage(
            &pretrain_cfg(Objective::Eapc(ShiftSpec {
                s: 2,
                k: 2,
                ..ShiftSpec::default()
            })),
            None,
            &src,
        )
        .unwrap();
        assert_eq!(
            pre.checkpoint.model.config.head,
            HeadConfig::Apc { lags: 2 }
        );
        let cfg = StageConfig {
            stage: Stage::Finetune,
            objective: None,
            model: tiny_model(),
            steps: 3,
            batch_size: 2,
            ..StageConfig::default()
        };
        assert!(matches!(
            run_stage(&cfg, Some(&pre.checkpoint), &src),
            Err(TrainError::MissingVocab)
        ));
        let cfg = StageConfig {
            vocab: Some(Vocab::numbered(8)),
            ..cfg
        };
        let ft = run_stage(&cfg, Some(&pre.checkpoint), &src).unwrap();
        let m = &ft.checkpoint.model;
        assert_eq!(m.config.head, HeadConfig::Ctc { vocab: 9 });
        assert!(m.params.names().all(|n| !n.starts_with("gen.")));
        let mut tape = Tape::new(DType::F32);
        let h = m.view().forward(&mut tape, &src[0].input, None).unwrap();
        let y = m.view().head(&mut tape, "ctc", h).unwrap();
        assert_eq!(tape.shape(y).unwrap()[1], 9);
        assert_eq!(ft.checkpoint.provenance.to_string(), "{θ_f², θ_g′¹}");
        // Scratch baseline needs no checkpoint.
        let scratch = run_stage(&cfg, None, &src).unwrap();
        assert_eq!(scratch.checkpoint.provenance.to_string(), "{θ_f¹, θ_g′¹}");
        assert!(matches!(
            run_stage(
                &StageConfig {
                    finetune_mode: FinetuneMode::AdaptersOnly,
                    ..cfg
                },
                Some(&pre.checkpoint),
                &src
            ),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn stages_need_an_init_and_runs_are_deterministic() {
        let src = corpus(Domain::Source, 5);
        let saft = StageConfig {
            stage: Stage::Saft,
            ..pretrain_cfg(Objective::Eapc(ShiftSpec::default()))
        };
        assert!(matches!(
            run_stage(&saft, None, &src),
            Err(TrainError::MissingInit(Stage::Saft))
        ));
        let cfg = StageConfig {
            verification: true,
            ..pretrain_cfg(Objective::Eapc(ShiftSpec::default()))
        };
        let a = run_stage(&cfg, None, &src).unwrap();
        let b = run_stage(&cfg, None, &src).unwrap();
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
        assert_eq!(a.metrics_jsonl(), b.metrics_jsonl());
        assert_eq!(a.metrics.len(), 4);
        let line: serde_json::Value =
            serde_json::from_str(a.metrics_jsonl().lines().next().unwrap()).unwrap();
        let keys: Vec<&str> = line
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(keys, ["loss", "lr", "seed", "stage", "step"]);

        let s = run_stage(&saft, Some(&a.checkpoint), &src).unwrap();
        assert_eq!(s.checkpoint.provenance.to_string(), "{θ_f², θ_g²}");
        let draft_lr = default_schedule(Stage::DraftAdapt, saft.model.d_model, saft.steps)
            .lr(2, saft.steps)
            .unwrap();
        assert!((s.metrics[1].lr - 0.5 * draft_lr).abs() < 1e-15);
    }

    #[test]
    fn every_objective_trains() {
        let src = corpus(Domain::Source, 4);
        let hub = HubertConfig {
            clusters: 4,
            kmeans_iters: 5,
            ..HubertConfig::default()
        };
        for obj in [
            Objective::Ebiapc(ShiftSpec::default()),
            Objective::Contrastive(Default::default()),
            Objective::Hubert(hub),
        ] {
            let out = run_stage(&pretrain_cfg(obj.clone()), None, &src).unwrap();
            assert!(
                out.metrics.iter().all(|m| m.loss.is_finite()),
                "{}",
                obj.name()
            );
            assert_eq!(
                out.checkpoint.kmeans.is_some(),
                matches!(obj, Objective::Hubert(_))
            );
            assert!(out
                .checkpoint
                .model
                .params
                .names()
                .all(|n| !n.starts_with("l2r.")));
            let adapt = StageConfig {
                stage: Stage::DraftAdapt,
                objective: None,
                ..pretrain_cfg(obj.clone())
            };
            run_stage(&adapt, Some(&out.checkpoint), &src).unwrap();
        }
    }
}
