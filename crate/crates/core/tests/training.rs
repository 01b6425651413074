use speechssl::data::{SynthConfig, Synthesizer};
use speechssl::model::Group;
use speechssl::tensor::DType;
use speechssl::train::{load_checkpoint, run_stage, save_checkpoint, Recipe, Stage};

#[test]
fn pretraining_loss_falls_over_five_epochs() {
    for seed in 0..3 {
        let corpus = Synthesizer::new(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
        .splits(DType::F32);
        let recipe = Recipe {
            seed,
            ..Recipe::default()
        };
        let per_epoch = corpus.source.len().div_ceil(recipe.batch_size);
        let cfg = recipe.stage(Stage::Pretrain);
        let cfg = speechssl::train::StageConfig {
            steps: (5 * per_epoch) as u64,
            ..cfg
        };
        let out = run_stage(&cfg, None, &corpus.source).unwrap();
        let means: Vec<f64> = out
            .metrics
            .chunks(per_epoch)
            .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
            .collect();
        assert_eq!(means.len(), 5);
        assert!(means[4] < means[0], "seed {seed}: epoch means {means:?}");
    }
}

#[test]
fn stage_checkpoints_survive_a_file_roundtrip() {
    let corpus = Synthesizer::new(&SynthConfig {
        source_size: 16,
        target_size: 8,
        test_size: 4,
        ..SynthConfig::default()
    })
    .unwrap()
    .splits(DType::F32);
    let recipe = Recipe {
        pretrain_steps: 3,
        adapt_steps: 2,
        d_ada: 8,
        ..Recipe::default()
    };
    let pre = run_stage(&recipe.stage(Stage::Pretrain), None, &corpus.source).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.ckpt");
    save_checkpoint(&pre.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), pre.checkpoint.to_bytes().unwrap());

    let ada = run_stage(
        &recipe.stage(Stage::DraftAdapt),
        Some(&back),
        &corpus.target,
    )
    .unwrap();
    assert_eq!(
        ada.checkpoint.provenance.to_string(),
        "{θ_f¹, θ_ada¹, θ_g¹}"
    );
    let before = pre.checkpoint.checksums();
    let after = ada.checkpoint.checksums();
    assert_eq!(before[&Group::Backbone], after[&Group::Backbone]);
    assert_eq!(before[&Group::Generator], after[&Group::Generator]);
    assert_ne!(before[&Group::Adapter], after[&Group::Adapter]);
}
