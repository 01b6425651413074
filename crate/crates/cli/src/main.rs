mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use speechssl::data::{
    evaluate, gen_corpus, load_manifest, load_utterances, write_manifest, KvConfig, Manifest,
    Utterance,
};
use speechssl::features::{log_mel, read_waveform, write_features};
use speechssl::oracle::{gradcheck_suite, GRADCHECK_TOLERANCE};
use speechssl::train::{
    load_checkpoint, run_pipeline, run_stage, save_checkpoint, FinetuneMode, Pipeline, Stage,
    StageConfig, StageOutput,
};

/// Self-supervised speech pretraining, residual-adapter domain adaptation
/// and CTC finetuning on synthetic domain-shifted corpora.
#[derive(Parser)]
#[command(name = "speechssl", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Settings {
    /// `key = value` settings file; '#' starts a comment.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set d_model=32` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    overrides: Vec<(String, String)>,
    /// Random seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Settings {
    fn load(&self, extra: &[(&str, Option<String>)]) -> Result<KvConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        for (k, v) in extra {
            if let Some(v) = v {
                overrides.push((k.to_string(), v.clone()));
            }
        }
        config::load(self.config.as_deref(), &overrides)
    }
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: Settings,
    /// Training manifest.
    #[arg(long, value_name = "TSV")]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Per-step metrics as JSON lines; defaults to `<out>.metrics.jsonl`.
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    /// Training steps; overrides `steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Utterances per batch; overrides `batch_size`.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source, target and held-out target corpora with manifests.
    GenCorpus {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// `features` or `waveform`; overrides `emit`.
        #[arg(long)]
        emit: Option<String>,
    },
    /// Turn a waveform manifest into log-mel feature files.
    Featurize {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, value_name = "TSV")]
        manifest: PathBuf,
        /// Directory for the feature files and the new manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Self-supervised pretraining from a fresh model.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// apc, eapc, ebiapc, contrastive or hubert; overrides `objective`.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Self-supervised adaptation on target data.
    Adapt {
        #[command(flatten)]
        train: TrainArgs,
        /// `draft` trains inserted adapters only; `saft` retrains the whole model.
        #[arg(long, value_parser = ["draft", "saft"])]
        mode: String,
        /// Pretrained checkpoint.
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
    },
    /// CTC finetuning; without `--init` the model starts from scratch.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// full, adapters_frozen, adapters_only, random_adapters or plus_ra.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
    },
    /// Greedy-decode a manifest and report the token error rate.
    Evaluate {
        #[command(flatten)]
        settings: Settings,
        /// Finetuned checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "TSV")]
        manifest: PathBuf,
        /// JSON report with per-utterance hypotheses.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive and loss.
    Gradcheck {
        /// Seeds per case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Run one pipeline for each value of a setting and tabulate the TER.
    Sweep {
        #[command(flatten)]
        settings: Settings,
        /// Setting to vary, e.g. `shift_s` or `d_ada`.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// draft, saft, no_adaptation, scratch, plus_ra, draft_adapters_frozen or draft_random_adapters.
        #[arg(long, default_value = "draft")]
        pipeline: String,
        #[arg(long, value_name = "TSV")]
        source: PathBuf,
        #[arg(long, value_name = "TSV")]
        target: PathBuf,
        #[arg(long, value_name = "TSV")]
        test: PathBuf,
        /// Directory for `sweep.csv` and per-value reports.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus {
            settings,
            out,
            emit,
        } => {
            let kv = settings.load(&[("emit", emit)])?;
            let m = gen_corpus(&config::synth(&kv)?, &out)?;
            println!(
                "wrote {} source, {} target and {} test utterances to {}",
                m.source.len(),
                m.target.len(),
                m.target_test.len(),
                out.display()
            );
        }
        Command::Featurize {
            settings,
            manifest,
            out,
        } => featurize(&settings.load(&[])?, &manifest, &out)?,
        Command::Pretrain { train, objective } => {
            let kv = train.settings.load(&[("objective", objective)])?;
            let utts = utterances(&kv, &train.manifest)?;
            let mut cfg = stage_config(&kv, &train, Stage::Pretrain, &utts)?;
            cfg.objective = Some(config::objective(&kv)?);
            cfg.scheme = config::scheme(&kv)?;
            let out = run_stage(&cfg, None, &utts)?;
            finish(&train, &out)?;
        }
        Command::Adapt { train, mode, init } => {
            let kv = train.settings.load(&[])?;
            let utts = utterances(&kv, &train.manifest)?;
            let stage = if mode == "draft" {
                Stage::DraftAdapt
            } else {
                Stage::Saft
            };
            let init =
                load_checkpoint(&init).with_context(|| format!("loading {}", init.display()))?;
            let cfg = stage_config(&kv, &train, stage, &utts)?;
            let out = run_stage(&cfg, Some(&init), &utts)?;
            finish(&train, &out)?;
        }
        Command::Finetune { train, mode, init } => {
            let kv = train.settings.load(&[])?;
            let utts = utterances(&kv, &train.manifest)?;
            let init = match init {
                Some(p) => {
                    Some(load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?)
                }
                None => None,
            };
            let mut cfg = stage_config(&kv, &train, Stage::Finetune, &utts)?;
            cfg.finetune_mode = mode.parse::<FinetuneMode>()?;
            cfg.vocab = Some(
                init.as_ref()
                    .and_then(|c| c.vocab.clone())
                    .map_or_else(|| config::vocab(&kv), Ok)?,
            );
            let out = run_stage(&cfg, init.as_ref(), &utts)?;
            finish(&train, &out)?;
        }
        Command::Evaluate {
            settings,
            ckpt,
            manifest,
            report,
        } => {
            let kv = settings.load(&[])?;
            let ck =
                load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let vocab = match &ck.vocab {
                Some(v) => v.clone(),
                None => config::vocab(&kv)?,
            };
            let utts = utterances(&kv, &manifest)?;
            let r = evaluate(&ck.model, &utts, &vocab)?;
            if let Some(p) = report {
                create_parent(&p)?;
                r.write_json(&p)?;
            }
            println!(
                "TER {:.4} ({} errors / {} reference tokens)",
                r.ter, r.errors, r.reference_tokens
            );
        }
        Command::Gradcheck { seeds, filter } => {
            let results = gradcheck_suite(seeds, filter.as_deref());
            if results.is_empty() {
                bail!("no gradcheck case matches {filter:?}");
            }
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                let detail = r.error.as_deref().unwrap_or("");
                println!(
                    "{status:4} {:24} max rel err {:.2e} (seed {}) {detail}",
                    r.name, r.max_rel_err, r.worst_seed
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                bail!(
                    "{failed} of {} cases exceed {GRADCHECK_TOLERANCE:e}",
                    results.len()
                );
            }
        }
        Command::Sweep {
            settings,
            key,
            values,
            pipeline,
            source,
            target,
            test,
            out,
        } => sweep(
            &settings,
            &key,
            &values,
            &pipeline,
            [&source, &target, &test],
            &out,
        )?,
    }
    Ok(())
}

fn featurize(kv: &KvConfig, manifest: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let fcfg = config::featurizer(kv)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(m.len());
    for row in &m.rows {
        let w = read_waveform(&m.resolve(row))?;
        let f = log_mel(&w, &fcfg)?;
        let rel = PathBuf::from(format!("{}.feat", row.id));
        write_features(&f, &out.join(&rel))?;
        rows.push(speechssl::data::ManifestRow {
            path: rel,
            ..row.clone()
        });
    }
    let name = manifest
        .file_name()
        .context("manifest path has no file name")?;
    let new = Manifest {
        base_dir: out.to_path_buf(),
        rows,
    };
    write_manifest(&new, &out.join(name))?;
    println!("featurized {} utterances into {}", new.len(), out.display());
    Ok(())
}

fn utterances(kv: &KvConfig, manifest: &Path) -> Result<Vec<Utterance>> {
    let m = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let raw = kv.raw("frontend") == Some("learned_conv");
    let fcfg = config::featurizer(kv)?;
    Ok(load_utterances(
        &m,
        config::dtype(kv)?,
        (!raw).then_some(&fcfg),
    )?)
}

fn feature_dim(utts: &[Utterance]) -> usize {
    utts.first().map_or(1, |u| u.input.tensor().shape()[1])
}

fn stage_config(
    kv: &KvConfig,
    train: &TrainArgs,
    stage: Stage,
    utts: &[Utterance],
) -> Result<StageConfig> {
    let model = config::model(kv, feature_dim(utts))?;
    let d = StageConfig::default();
    let steps = match train.steps {
        Some(s) => s,
        None => kv.get_or("steps", 100)?,
    };
    Ok(StageConfig {
        stage,
        corpus: train
            .manifest
            .file_stem()
            .map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        schedule: config::schedule(kv, model.d_model, steps)?,
        model,
        steps,
        batch_size: match train.batch_size {
            Some(b) => b,
            None => kv.get_or("batch_size", 8)?,
        },
        seed: kv.get_or("seed", 0)?,
        d_ada: kv.get_or("d_ada", d.d_ada)?,
        grad_clip: kv.get_or("grad_clip", d.grad_clip)?,
        verification: kv.get_or("verification", false)?,
        spec_augment: config::spec_augment(kv)?,
        codebook_size: kv.get_or("codebook_size", d.codebook_size)?,
        d_code: kv.get_or("d_code", d.d_code)?,
        ..d
    })
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn finish(train: &TrainArgs, out: &StageOutput) -> Result<()> {
    create_parent(&train.out)?;
    save_checkpoint(&out.checkpoint, &train.out)?;
    let metrics = train.metrics.clone().unwrap_or_else(|| {
        let mut p = train.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    create_parent(&metrics)?;
    out.write_metrics(&metrics)?;
    let last = out.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!(
        "{} -> {} (final loss {last:.4}, provenance {})",
        out.checkpoint
            .provenance
            .history
            .last()
            .map_or("stage".into(), |h| h.stage.to_string()),
        train.out.display(),
        out.checkpoint.provenance
    );
    Ok(())
}

fn sweep(
    settings: &Settings,
    key: &str,
    values: &[String],
    pipeline: &str,
    data: [&PathBuf; 3],
    out: &Path,
) -> Result<()> {
    let pipeline: Pipeline = pipeline.parse()?;
    if !config::KNOWN_KEYS.contains(&key) {
        bail!("unknown setting {key:?}");
    }
    fs::create_dir_all(out)?;
    let mut csv = format!("{key},pipeline,ter,errors,reference_tokens\n");
    for value in values {
        let kv = settings.load(&[(key, Some(value.clone()))])?;
        let [src, tgt, test] = data.map(|p| utterances(&kv, p));
        let (src, tgt, test) = (src?, tgt?, test?);
        let recipe = config::recipe(&kv, feature_dim(&src))?;
        info!("sweep {key}={value}");
        let res = run_pipeline(pipeline, &recipe, &src, &tgt, &test, None)?;
        res.report
            .write_json(&out.join(format!("{key}_{value}.json")))?;
        println!("{key}={value}: TER {:.4}", res.report.ter);
        csv.push_str(&format!(
            "{value},{pipeline},{},{},{}\n",
            res.report.ter, res.report.errors, res.report.reference_tokens
        ));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(())
}
