use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result, Utterance};
use crate::ctc::{ctc_greedy_decode, edit_distance, error_rate, Vocab};
use crate::model::{Backbone, HeadConfig};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token error rate: total edit distance over total reference tokens.
    pub ter: f64,
    pub errors: usize,
    pub reference_tokens: usize,
    pub utterances: Vec<UtteranceReport>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Greedy CTC decoding of every utterance and the resulting token error rate.
pub fn evaluate(model: &Backbone, utts: &[Utterance], vocab: &Vocab) -> Result<EvalReport> {
    let model_vocab = match model.config.head {
        HeadConfig::Ctc { vocab } => vocab,
        _ => {
            return Err(DataError::Invalid(
                "model has no CTC head; finetune it first".into(),
            ))
        }
    };
    if model_vocab != vocab.size() {
        return Err(DataError::VocabMismatch {
            model: model_vocab,
            expected: vocab.size(),
        });
    }
    if utts.is_empty() {
        return Err(DataError::Empty);
    }
    let view = model.view();
    let mut reports = Vec::with_capacity(utts.len());
    for u in utts {
        let mut tape = Tape::new(model.config.dtype);
        let h = view.forward(&mut tape, &u.input, None)?;
        let logits = view.head(&mut tape, "ctc", h)?;
        let lp = tape.log_softmax(logits, 1)?;
        let lp = tape.tensor(lp)?;
        let hyp = ctc_greedy_decode(&lp, lp.shape()[0])?;
        reports.push(UtteranceReport {
            id: u.id.clone(),
            errors: edit_distance(&u.transcript, &hyp.tokens),
            reference: u.transcript.clone(),
            hypothesis: hyp.tokens,
        });
    }
    let refs: Vec<Vec<usize>> = reports.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<Vec<usize>> = reports.iter().map(|r| r.hypothesis.clone()).collect();
    Ok(EvalReport {
        ter: error_rate(&refs, &hyps)?,
        errors: reports.iter().map(|r| r.errors).sum(),
        reference_tokens: refs.iter().map(Vec::len).sum(),
        utterances: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::model::{ModelConfig, ModelInput};
    use crate::tensor::{DType, Tensor};

    fn ctc_model(vocab: usize) -> Backbone {
        let cfg = ModelConfig {
            head: HeadConfig::Ctc { vocab },
            d_model: 16,
            ffn_dim: 16,
            n_heads: 2,
            n_blocks: 1,
            ..ModelConfig::toy()
        };
        Backbone::build(&cfg, 0).unwrap()
    }

    fn utt(i: usize) -> Utterance {
        let data = (0..24 * 8).map(|k| ((k * 13 + i) as f64).sin()).collect();
        Utterance {
            id: format!("u{i}"),
            input: ModelInput::Features(Tensor::with_dtype(&[24, 8], data, DType::F32).unwrap()),
            transcript: vec![1, 2, 3],
            domain: Domain::Target,
        }
    }

    #[test]
    fn untrained_model_reports_per_utterance() {
        let m = ctc_model(9);
        let r = evaluate(&m, &[utt(0), utt(1)], &Vocab::numbered(8)).unwrap();
        assert_eq!(r.utterances.len(), 2);
        assert_eq!(r.reference_tokens, 6);
        assert_eq!(r.ter, r.errors as f64 / 6.0);
        let json: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(json, r);
    }

    #[test]
    fn errors_on_empty_and_mismatch() {
        let m = ctc_model(9);
        assert_eq!(
            evaluate(&m, &[], &Vocab::numbered(8))
                .unwrap_err()
                .to_string(),
            "no utterances"
        );
        assert!(matches!(
            evaluate(&m, &[utt(0)], &Vocab::numbered(5)),
            Err(DataError::VocabMismatch {
                model: 9,
                expected: 6
            })
        ));
        let apc = Backbone::build(&ModelConfig::toy(), 0).unwrap();
        assert!(evaluate(&apc, &[utt(0)], &Vocab::numbered(8)).is_err());
    }
}
