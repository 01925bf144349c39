use std::path::Path;

use catart::bprmf::{DomainMfModel, EmbeddingTable};
use catart::eval::MetricKind;
use catart::pipeline::{self, Ablation, Layout, PipelineConfig, Stage2Variant};
use catart::{seed, Error};
use statrs::statistics::Statistics;

fn small(out: &Path, seeds: usize, ablation: &str) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    for (k, v) in [
        ("scenario", "correlated-5"),
        ("synth_users", "200"),
        ("synth_items", "80"),
        ("synth_density", "0.06"),
        ("dim", "8"),
        ("stage1_epochs", "3"),
        ("stage2_epochs", "2"),
        ("stage2_batch", "32"),
        ("stage3_epochs", "2"),
        ("master_seed", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c.set("seeds", &seeds.to_string()).unwrap();
    c.set("ablation", ablation).unwrap();
    c.set("out_dir", out.to_str().unwrap()).unwrap();
    c
}

#[test]
fn zero_epoch_stage1_checkpoints_equal_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path(), 1, "smf");
    c.set("stage1_epochs", "0").unwrap();
    pipeline::run_stage1(&c).unwrap();
    let layout = Layout::new(&c.out_dir);
    let store = pipeline::load_store(&layout, 0).unwrap();
    for d in 0..store.n_domains() {
        let mut rng = seed::derived_rng(c.run_seed(0), "stage1", d as u64);
        let init = DomainMfModel::init(&store, d, c.stage1.dim, c.stage1.init_scale, &mut rng);
        assert_eq!(EmbeddingTable::load(&layout.users(0, d)).unwrap(), init.users);
        assert_eq!(EmbeddingTable::load(&layout.items(0, d)).unwrap(), init.items);
    }
}

#[test]
fn smf_run_reports_stage_one_and_builds_nothing_else() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1, "smf");
    let from_stage1 = pipeline::run_stage1(&c).unwrap();
    pipeline::run_all(&c).unwrap();
    let layout = Layout::new(&c.out_dir);
    assert!(!layout.run(0).join("stage2").exists());
    assert!(!layout.run(0).join("stage3").exists());
    let stored = pipeline::load_report(&layout, 0, Ablation::Smf).unwrap();
    assert_eq!(stored, from_stage1[0]);
    assert_eq!(pipeline::evaluate_run(&c, 0, Ablation::Smf).unwrap(), stored);
}

#[test]
fn stages_refuse_to_run_without_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1, "+art");
    assert!(matches!(pipeline::run_stage2(&c, Stage2Variant::Full), Err(Error::Pipeline(_))));
    pipeline::run_stage1(&c).unwrap();
    assert!(matches!(pipeline::run_stage3(&c, Ablation::Art), Err(Error::Pipeline(_))));
    // the autoencoder variant is a separate checkpoint
    pipeline::run_stage2(&c, Stage2Variant::Full).unwrap();
    assert!(matches!(pipeline::run_stage3(&c, Ablation::Autoencoder), Err(Error::Pipeline(_))));
    pipeline::run_stage3(&c, Ablation::Art).unwrap();
}

#[test]
fn tampered_upstream_checkpoint_is_detected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1, "+art");
    pipeline::run_stage1(&c).unwrap();
    let layout = Layout::new(&c.out_dir);
    let path = layout.users(0, 2);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(pipeline::run_stage2(&c, Stage2Variant::Full), Err(Error::Checkpoint { .. })));
}

#[test]
fn single_seed_std_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1, "+contrastive");
    pipeline::run_all(&c).unwrap();
    let (aggs, _) = pipeline::aggregate(&c).unwrap();
    assert_eq!(aggs.len(), 2);
    for agg in aggs {
        assert!(agg.cells.iter().all(|cell| cell.3.iter().all(|a| a.std == 0.0)));
    }
}

#[test]
fn three_seed_aggregate_matches_hand_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 3, "+art");
    let manifest = pipeline::run_all(&c).unwrap();
    assert_eq!(manifest.run_seeds, c.run_seeds());
    let layout = Layout::new(&c.out_dir);
    let (aggs, _) = pipeline::aggregate(&c).unwrap();
    let full = aggs.iter().find(|a| a.model == "+art").unwrap();
    let runs: Vec<_> = (0..3).map(|r| pipeline::load_report(&layout, r, Ablation::Art).unwrap()).collect();
    for (domain, _, k, cells) in &full.cells {
        for (kind, cell) in MetricKind::ALL.iter().zip(cells) {
            let vals: Vec<f64> = runs.iter().map(|r| r.metric(*domain, *k, *kind).unwrap()).collect();
            assert!((cell.mean - vals.iter().mean()).abs() < 1e-12);
            assert!((cell.std - vals.iter().std_dev()).abs() < 1e-12);
        }
    }
    // manifest covers every checkpoint and replays exactly
    assert!(manifest.checkpoints.keys().any(|p| p == "run-2/stage3/art/art-4.bin"));
    let again = tempfile::tempdir().unwrap();
    let mut c2 = c.clone();
    c2.out_dir = again.path().to_owned();
    assert_eq!(pipeline::run_all(&c2).unwrap().checkpoints, manifest.checkpoints);
}

#[test]
fn different_master_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = small(a.path(), 1, "smf");
    let mut cb = small(b.path(), 1, "smf");
    cb.set("master_seed", "6").unwrap();
    let ma = pipeline::run_all(&ca).unwrap();
    let mb = pipeline::run_all(&cb).unwrap();
    assert_ne!(ma.checkpoints["run-0/stage1/users-0.emb"], mb.checkpoints["run-0/stage1/users-0.emb"]);
}

#[test]
fn file_input_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path(), 1, "smf");
    let world = pipeline::generate_world(&c).unwrap();
    let files = world.write(&dir.path().join("world")).unwrap();
    let mut from_files = small(&dir.path().join("out"), 1, "+art");
    let data: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    from_files.set("data", &data.join(",")).unwrap();
    let manifest = pipeline::run_all(&from_files).unwrap();
    assert_eq!(manifest.world_seed, None);
    assert!(dir.path().join("out/data").is_dir());
    let report = pipeline::load_report(&Layout::new(&from_files.out_dir), 0, Ablation::Art).unwrap();
    assert_eq!(report.domains.len(), 5);
}
