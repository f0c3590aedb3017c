use std::path::{Path, PathBuf};

use gtp_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use gtp_core::pipeline::{self, AblationTable, RunConfig, TrainSummary};
use gtp_core::{io, model};
use proptest::prelude::*;

fn gtp(args: &[&str]) -> i32 {
    run(std::iter::once("gtp").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn tiny_config(dir: &Path, side: usize, slides: usize) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.synth.slide_height = side;
    cfg.synth.slide_width = side;
    cfg.synth.patch_size = 32;
    cfg.dataset.slides = slides;
    cfg.pretrain.steps = 2;
    cfg.pretrain.batch = 8;
    cfg.pretrain_corpus = 64;
    cfg.model.pooled_nodes = 4;
    cfg.model.hidden_dim = 16;
    cfg.model.steps = 3;
    cfg.model.batch_size = 4;
    cfg.model.milestones = vec![2];
    cfg.folds = 2;
    let path = dir.join("run.json");
    io::write_json(&path, &cfg).unwrap();
    path
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gtp(&[]), EXIT_USAGE);
    assert_eq!(gtp(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(gtp(&["train", "--graphs", "g"]), EXIT_USAGE);
    assert_eq!(gtp(&["synth", "--out", "x", "--slides", "0"]), EXIT_USAGE);
    assert_eq!(gtp(&["synth", "--out", "x", "--slides", "many"]), EXIT_USAGE);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(gtp(&["--help"]), EXIT_OK);
    assert_eq!(gtp(&["train", "--help"]), EXIT_OK);
    assert_eq!(gtp(&["--version"]), EXIT_OK);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = s(&dir.path().join("nowhere"));
    let out = s(&dir.path().join("out"));
    assert_eq!(gtp(&["tile", "--data", &nowhere, "--out", &out]), EXIT_DATA);
    assert_eq!(gtp(&["train", "--graphs", &nowhere, "--out", &out]), EXIT_DATA);
    assert_eq!(gtp(&["embed", "--encoder", &nowhere, "--tiles", &nowhere, "--out", &out]), EXIT_DATA);
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("out"));
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        s(&p)
    };
    let unknown = write("unknown.json", r#"{"model": {"pooled_nodez": 3}}"#);
    let malformed = write("malformed.json", "{ not json");
    let indivisible = write("indivisible.json", r#"{"synth": {"slide_height": 100, "slide_width": 100, "patch_size": 32}}"#);
    let heads = write("heads.json", r#"{"model": {"heads": 5}}"#);
    let missing = s(&dir.path().join("absent.json"));
    for cfg in [&unknown, &malformed, &indivisible, &heads, &missing] {
        assert_eq!(gtp(&["--config", cfg, "synth", "--out", &out]), EXIT_DATA, "{cfg}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn stage_outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let c = s(&tiny_config(root, 128, 6));
    let p = |name: &str| s(&root.join(name));
    assert_eq!(gtp(&["--config", &c, "synth", "--out", &p("data")]), EXIT_OK);
    assert_eq!(gtp(&["--config", &c, "tile", "--data", &p("data"), "--out", &p("tiles")]), EXIT_OK);
    assert_eq!(gtp(&["--config", &c, "pretrain", "--tiles", &p("tiles"), "--out", &p("encoder")]), EXIT_OK);
    assert_eq!(
        gtp(&["--config", &c, "embed", "--encoder", &p("encoder"), "--tiles", &p("tiles"), "--out", &p("emb")]),
        EXIT_OK
    );
    assert_eq!(
        gtp(&["--config", &c, "build-graph", "--tiles", &p("tiles"), "--embeddings", &p("emb"), "--out", &p("graphs")]),
        EXIT_OK
    );
    assert_eq!(gtp(&["--config", &c, "train", "--graphs", &p("graphs"), "--out", &p("runs")]), EXIT_OK);

    let tiles = pipeline::load_tiles(&root.join("tiles")).unwrap();
    let emb = pipeline::load_embeddings(&root.join("emb")).unwrap();
    let (index, graphs) = pipeline::load_graphs(&root.join("graphs")).unwrap();
    assert_eq!(tiles.slides.len(), 6);
    assert_eq!(emb.slides.len(), 6);
    assert_eq!(graphs.len(), 6);
    for ((t, e), g) in tiles.slides.iter().zip(&emb.slides).zip(&graphs) {
        assert_eq!(t.slide_id, g.slide_id);
        assert_eq!(t.coords.len(), e.rows);
        assert_eq!(g.num_nodes(), e.rows);
        assert_eq!(index.find(&g.slide_id).unwrap().label, t.class_label);
    }
    let shift = index.feature_shift.as_ref().unwrap();
    assert_eq!(shift.len(), emb.embed_dim);

    let summary: TrainSummary = io::read_json(&root.join("runs/summary.json")).unwrap();
    assert_eq!(summary.folds, 2);
    let params = model::load_model(&root.join("runs/fold1/model")).unwrap();
    assert_eq!(params.config.pooled_nodes, 4);
    let echoed: RunConfig = io::read_json(&root.join("runs/config.json")).unwrap();
    assert_eq!(echoed.model.hidden_dim, 16);

    assert_eq!(
        gtp(&["--config", &c, "eval", "--model", &p("runs/fold0/model"), "--graphs", &p("graphs"), "--out", &p("eval")]),
        EXIT_OK
    );
    assert!(root.join("eval").read_dir().unwrap().next().is_some());
    assert_eq!(
        gtp(&[
            "--config", &c, "eval", "--model", &p("runs/fold0/model"), "--graphs", &p("graphs"), "--out", &p("eval2"),
            "--slides", "s000,s404",
        ]),
        EXIT_DATA
    );
    assert_eq!(
        gtp(&[
            "--config", &c, "explain", "--model", &p("runs/fold0/model"), "--graphs", &p("graphs"), "--data", &p("data"),
            "--slide", "s002", "--out", &p("cam"),
        ]),
        EXIT_OK
    );
    let pgm = std::fs::read_dir(root.join("cam"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pgm"))
        .unwrap();
    let (h, w, _) = io::read_pgm(&pgm).unwrap();
    assert_eq!((h, w), (128, 128));
    assert_eq!(
        gtp(&["--config", &c, "explain", "--model", &p("runs/fold0/model"), "--graphs", &p("graphs"), "--slide", "s999", "--out", &p("cam")]),
        EXIT_DATA
    );
}

#[test]
fn ablate_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // 512 px slides give 16×16 grids, enough nodes for 120 pooled clusters
    let path = tiny_config(root, 512, 6);
    let mut cfg: RunConfig = io::read_json(&path).unwrap();
    cfg.model.steps = 2;
    cfg.ablation.folds = 2;
    io::write_json(&path, &cfg).unwrap();
    let c = s(&path);
    let p = |name: &str| s(&root.join(name));
    for args in [
        vec!["synth", "--out", &p("data")],
        vec!["tile", "--data", &p("data"), "--out", &p("tiles")],
        vec!["pretrain", "--tiles", &p("tiles"), "--out", &p("encoder")],
        vec!["embed", "--encoder", &p("encoder"), "--tiles", &p("tiles"), "--out", &p("emb")],
        vec!["build-graph", "--tiles", &p("tiles"), "--embeddings", &p("emb"), "--out", &p("graphs")],
        vec!["ablate", "--graphs", &p("graphs"), "--out", &p("ablation")],
    ] {
        let mut full = vec!["--config", c.as_str()];
        full.extend(args.iter().copied());
        assert_eq!(gtp(&full), EXIT_OK, "{args:?}");
    }
    let table: AblationTable = io::read_json(&root.join("ablation/ablation.json")).unwrap();
    assert_eq!(table.rows.len(), 12);
    let mut seen: Vec<(usize, usize, usize)> = table.rows.iter().map(|r| (r.pooled_nodes, r.gc_layers, r.blocks)).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 12);
    assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy.mean)));
    let csv = std::fs::read_to_string(root.join("ablation/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(root.join("ablation/ablation.txt").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_files_round_trip(seed in any::<u64>(), slides in 1usize..500, nt in 1usize..200, steps in 1usize..1000) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.dataset.slides = slides;
        cfg.model.pooled_nodes = nt;
        cfg.model.steps = steps;
        let path = dir.path().join("c.json");
        io::write_json(&path, &cfg).unwrap();
        let back = RunConfig::load(&path).unwrap();
        prop_assert_eq!(back.seed, seed);
        prop_assert_eq!(back.dataset.slides, slides);
        prop_assert_eq!(back.model, cfg.model);
    }

    #[test]
    fn eval_slide_lists_split_on_commas(ids in prop::collection::vec("s[0-9]{3}", 1..6)) {
        use clap::Parser;
        let joined = ids.join(",");
        let cli = gtp_cli::Cli::try_parse_from(["gtp", "eval", "--model", "m", "--graphs", "g", "--out", "o", "--slides", &joined]).unwrap();
        match cli.command {
            gtp_cli::Command::Eval { slides, .. } => prop_assert_eq!(slides, Some(ids)),
            _ => prop_assert!(false),
        }
    }
}
