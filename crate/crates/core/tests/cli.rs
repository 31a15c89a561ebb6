//! CLI-level integration: verb wiring, exit codes, file outputs, and
//! checkpoint round-trips on a tiny dataset.

use iwivig::cli::run;
use iwivig::config::{ModelConfig, RunConfig, TrainConfig};
use iwivig::data::{generate_planted_dataset, load_dataset, read_manifest};
use iwivig::model::Model;
use iwivig::trainer::{Checkpoint, CheckpointMeta, RngState};
use std::path::Path;
use std::sync::LazyLock;

struct TinyWorld {
    dir: tempfile::TempDir,
}

impl TinyWorld {
    fn manifest(&self) -> String {
        self.dir.path().join("data/manifest.jsonl").display().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

static WORLD: LazyLock<TinyWorld> = LazyLock::new(|| {
    let dir = tempfile::tempdir().unwrap();
    generate_planted_dataset(40, 128, 23, &dir.path().join("data")).unwrap();
    // a short real training run shared by the verb tests
    let code = run(vec![
        "iwivig".into(),
        "train".into(),
        "--data".into(),
        dir.path().join("data/manifest.jsonl").display().to_string(),
        "--out".into(),
        dir.path().join("ckpt").display().to_string(),
        "--seed".into(),
        "9".into(),
        "--epochs".into(),
        "2".into(),
    ]);
    assert_eq!(code, 0, "training verb failed");
    TinyWorld { dir }
});

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(vec!["iwivig".into(), "no-such-verb".into()]), 1);
    assert_eq!(run(vec!["iwivig".into(), "train".into()]), 1); // missing args
    assert_eq!(run(vec!["iwivig".into(), "--help".into()]), 0);
}

#[test]
fn data_errors_exit_two() {
    let w = &*WORLD;
    let code = run(vec![
        "iwivig".into(),
        "evaluate".into(),
        "--checkpoint".into(),
        w.path("ckpt"),
        "--data".into(),
        w.path("missing.jsonl"),
    ]);
    assert_eq!(code, 2);
    let code = run(vec![
        "iwivig".into(),
        "train".into(),
        "--data".into(),
        w.manifest(),
        "--out".into(),
        w.path("x"),
        "--config".into(),
        w.path("nonexistent.json"),
    ]);
    assert_eq!(code, 1, "bad config is a usage error");
}

#[test]
fn generate_data_rejects_tiny_n() {
    let w = &*WORLD;
    let code = run(vec![
        "iwivig".into(),
        "generate-data".into(),
        "--n".into(),
        "5".into(),
        "--out".into(),
        w.path("tiny"),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn evaluate_runs_and_reports_both_ways() {
    let w = &*WORLD;
    let out = w.path("eval.json");
    let code = run(vec![
        "iwivig".into(),
        "evaluate".into(),
        "--checkpoint".into(),
        w.path("ckpt"),
        "--data".into(),
        w.manifest(),
        "--split".into(),
        "val".into(),
        "--out".into(),
        out.clone(),
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["task"], "classification");
    assert!(report["accuracy"].is_number());
    assert!(report["f1"].is_number());
    // idempotent: second run produces identical bytes
    let first = std::fs::read(&out).unwrap();
    assert_eq!(
        run(vec![
            "iwivig".into(),
            "evaluate".into(),
            "--checkpoint".into(),
            w.path("ckpt"),
            "--data".into(),
            w.manifest(),
            "--split".into(),
            "val".into(),
            "--out".into(),
            out.clone(),
        ]),
        0
    );
    assert_eq!(first, std::fs::read(&out).unwrap());
}

#[test]
fn untrained_model_sits_at_chance_level() {
    // an untrained 2-class checkpoint evaluates near accuracy 1/2
    let w = &*WORLD;
    let cfg = RunConfig { model: ModelConfig::desk(), train: TrainConfig::default() };
    let model = Model::init(cfg.model.clone(), 1234).unwrap();
    let ckpt = Checkpoint {
        params: model.params.clone(),
        meta: CheckpointMeta {
            format_version: 1,
            config: cfg,
            epoch: 0,
            validation_metric: 0.0,
            rng: RngState { seed: 1234, epoch: 0 },
        },
    };
    let path = w.dir.path().join("untrained_ckpt");
    ckpt.save(&path).unwrap();

    let manifest = read_manifest(Path::new(&w.manifest())).unwrap();
    let ds = load_dataset(&manifest, 128).unwrap();
    let (loaded_model, _) = Checkpoint::load(&path).unwrap().into_model().unwrap();
    let acc = iwivig::trainer::goodness_of_fit(&loaded_model, &ds.train).unwrap();
    assert!(
        (acc - 0.5).abs() <= 0.3,
        "untrained accuracy {acc} too far from chance on a small split"
    );
}

#[test]
fn explain_writes_expected_edge_count_and_overlay() {
    let w = &*WORLD;
    let image = w.dir.path().join("data/images/train_00000.png");
    let out_json = w.path("expl.json");
    let out_png = w.path("expl.png");
    let code = run(vec![
        "iwivig".into(),
        "explain".into(),
        "--checkpoint".into(),
        w.path("ckpt"),
        "--image".into(),
        image.display().to_string(),
        "--percentile".into(),
        "5".into(),
        "--out-json".into(),
        out_json.clone(),
        "--out-png".into(),
        out_png.clone(),
    ]);
    assert_eq!(code, 0);
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&out_json).unwrap()).unwrap();
    // 16 nodes, k=5: 80 edges; top 5 percentile keeps ceil(4) = 4
    assert_eq!(doc["edges"].as_array().unwrap().len(), 4);
    let img = image::open(&out_png).unwrap();
    assert_eq!((img.width(), img.height()), (128, 128));
}

#[test]
fn checkpoint_round_trip_preserves_predictions_bit_exactly() {
    let w = &*WORLD;
    let manifest = read_manifest(Path::new(&w.manifest())).unwrap();
    let ds = load_dataset(&manifest, 128).unwrap();
    let ckpt = Checkpoint::load(Path::new(&w.path("ckpt"))).unwrap();
    let params_bytes = ckpt.params.to_bytes();
    let (model, _) = ckpt.into_model().unwrap();

    // save -> load -> evaluate equals evaluate before save
    let path2 = w.dir.path().join("ckpt_roundtrip");
    let meta = CheckpointMeta {
        format_version: 1,
        config: RunConfig { model: model.config.clone(), train: TrainConfig::default() },
        epoch: 0,
        validation_metric: 0.0,
        rng: RngState { seed: 0, epoch: 0 },
    };
    Checkpoint { params: model.params.clone(), meta }.save(&path2).unwrap();
    let reloaded = Checkpoint::load(&path2).unwrap();
    assert_eq!(reloaded.params.to_bytes(), params_bytes);
    let (model2, _) = reloaded.into_model().unwrap();
    for s in ds.val.samples.iter().take(4) {
        let a = model.predict(&s.image).unwrap();
        let b = model2.predict(&s.image).unwrap();
        assert_eq!(a, b, "prediction changed across checkpoint round trip");
    }
}
