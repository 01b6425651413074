use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::schedule::Schedule;
use super::stage::{run_stage, FinetuneMode, MetricRecord, Stage, StageConfig};
use super::Result;
use crate::ctc::Vocab;
use crate::data::{evaluate, EvalReport, Utterance};
use crate::model::{ModelConfig, SharingScheme};
use crate::ssl::{Objective, ShiftSpec};

/// A complete route from initialization to an evaluated ASR model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Pretrain, adapter-only adaptation on target data, full finetune.
    Draft,
    /// Pretrain, whole-model adaptation on target data, full finetune.
    Saft,
    /// Pretrain, then finetune directly.
    NoAdaptation,
    /// Finetune a freshly initialized model.
    Scratch,
    /// Pretrain, then finetune with freshly inserted adapters.
    PlusRa,
    /// DRAFT with adapters frozen during finetuning.
    DraftAdaptersFrozen,
    /// DRAFT with adapters redrawn before finetuning.
    DraftRandomAdapters,
}

impl Pipeline {
    pub const ALL: [Pipeline; 7] = [
        Pipeline::Draft,
        Pipeline::Saft,
        Pipeline::NoAdaptation,
        Pipeline::Scratch,
        Pipeline::PlusRa,
        Pipeline::DraftAdaptersFrozen,
        Pipeline::DraftRandomAdapters,
    ];

    fn adaptation(self) -> Option<Stage> {
        match self {
            Pipeline::Draft | Pipeline::DraftAdaptersFrozen | Pipeline::DraftRandomAdapters => {
                Some(Stage::DraftAdapt)
            }
            Pipeline::Saft => Some(Stage::Saft),
            _ => None,
        }
    }

    fn finetune_mode(self) -> FinetuneMode {
        match self {
            Pipeline::PlusRa => FinetuneMode::PlusRaBaseline,
            Pipeline::DraftAdaptersFrozen => FinetuneMode::AdaptersFrozen,
            Pipeline::DraftRandomAdapters => FinetuneMode::RandomAdapters,
            _ => FinetuneMode::Full,
        }
    }
}

impl std::fmt::Display for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::String(s)) => f.write_str(&s),
            _ => unreachable!("unit variants serialize as strings"),
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = super::TrainError;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| super::TrainError::Config(format!("unknown pipeline {s:?}")))
    }
}

/// Shared settings for every stage of a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub model: ModelConfig,
    pub objective: Objective,
    pub scheme: SharingScheme,
    pub pretrain_steps: u64,
    pub adapt_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
    pub d_ada: usize,
    pub seed: u64,
    pub vocab: Vocab,
    pub verification: bool,
    /// Per-stage overrides of the default schedules.
    pub pretrain_schedule: Option<Schedule>,
    pub adapt_schedule: Option<Schedule>,
    pub finetune_schedule: Option<Schedule>,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            model: ModelConfig::toy(),
            objective: Objective::Eapc(ShiftSpec::default()),
            scheme: SharingScheme::None,
            pretrain_steps: 300,
            adapt_steps: 150,
            finetune_steps: 80,
            batch_size: 8,
            d_ada: 8,
            seed: 0,
            vocab: Vocab::numbered(8),
            verification: false,
            pretrain_schedule: None,
            adapt_schedule: None,
            finetune_schedule: None,
        }
    }
}

impl Recipe {
    pub fn stage(&self, stage: Stage) -> StageConfig {
        let (steps, corpus, schedule) = match stage {
            Stage::Pretrain => (self.pretrain_steps, "source", self.pretrain_schedule),
            Stage::Saft => (
                self.adapt_steps,
                "target",
                self.adapt_schedule.map(|s| s.scaled(0.5)),
            ),
            Stage::DraftAdapt => (self.adapt_steps, "target", self.adapt_schedule),
            Stage::Finetune => (self.finetune_steps, "target", self.finetune_schedule),
        };
        StageConfig {
            stage,
            objective: (stage == Stage::Pretrain).then(|| self.objective.clone()),
            corpus: corpus.into(),
            model: self.model.clone(),
            scheme: self.scheme,
            schedule,
            steps,
            batch_size: self.batch_size,
            seed: self.seed,
            d_ada: self.d_ada,
            verification: self.verification,
            vocab: (stage == Stage::Finetune).then(|| self.vocab.clone()),
            ..StageConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub pipeline: Pipeline,
    pub pretrained: Option<Checkpoint>,
    pub adapted: Option<Checkpoint>,
    pub finetuned: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    pub report: EvalReport,
}

/// Run every stage of `pipeline` and evaluate on `test`. A pretrained
/// checkpoint may be passed in to share it between pipelines.
pub fn run_pipeline(
    pipeline: Pipeline,
    recipe: &Recipe,
    source: &[Utterance],
    target: &[Utterance],
    test: &[Utterance],
    pretrained: Option<&Checkpoint>,
) -> Result<PipelineResult> {
    let mut metrics = Vec::new();
    let pre = match (pipeline, pretrained) {
        (Pipeline::Scratch, _) => None,
        (_, Some(c)) => Some(c.clone()),
        (_, None) => {
            let out = run_stage(&recipe.stage(Stage::Pretrain), None, source)?;
            metrics.extend(out.metrics);
            Some(out.checkpoint)
        }
    };
    let adapted = match pipeline.adaptation() {
        Some(stage) => {
            let out = run_stage(&recipe.stage(stage), pre.as_ref(), target)?;
            metrics.extend(out.metrics);
            Some(out.checkpoint)
        }
        None => None,
    };
    let ft_cfg = StageConfig {
        finetune_mode: pipeline.finetune_mode(),
        ..recipe.stage(Stage::Finetune)
    };
    let out = run_stage(&ft_cfg, adapted.as_ref().or(pre.as_ref()), target)?;
    metrics.extend(out.metrics);
    let report = evaluate(&out.checkpoint.model, test, &recipe.vocab)?;
    Ok(PipelineResult {
        pipeline,
        pretrained: pre,
        adapted,
        finetuned: out.checkpoint,
        metrics,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_names_parse() {
        assert_eq!("draft".parse::<Pipeline>().unwrap(), Pipeline::Draft);
        assert_eq!(
            "no_adaptation".parse::<Pipeline>().unwrap(),
            Pipeline::NoAdaptation
        );
        assert!("other".parse::<Pipeline>().is_err());
        for p in Pipeline::ALL {
            assert_eq!(p.to_string().parse::<Pipeline>().unwrap(), p);
        }
        assert_eq!(Pipeline::NoAdaptation.to_string(), "no_adaptation");
    }

    #[test]
    fn recipe_stages_follow_the_contract() {
        let r = Recipe::default();
        assert!(r.stage(Stage::Pretrain).objective.is_some());
        assert!(r.stage(Stage::DraftAdapt).objective.is_none());
        assert!(r.stage(Stage::Finetune).vocab.is_some());
        assert_eq!(r.stage(Stage::Saft).corpus, "target");
    }
}
