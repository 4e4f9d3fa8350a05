use std::path::Path;

use fedts::config::ExperimentConfig;
use fedts::data::Split;
use fedts::experiment;

const EXPERIMENT: &str = r#"
seed = 5
rounds = 4
lr = 1e-3
d_model = 16
heads = 2
patch_len = 8
vocab = 64
prototypes = 16
prompt_len = 4
max_len = 16
depth = 1

[[domains]]
name = "big"
channels = 2
splits = { train = 400, val = 40, test = 40 }
lookback = 24
horizons = [6, 8]
stride = 8
batch_size = 8
synth = { length = 480, shared = [{ period = 24.0 }], specific = [{ period = 7.0, amplitude = 0.5 }], noise_std = 0.1, seed = 1 }

[[domains]]
name = "small"
channels = 1
splits = { train = 70, val = 40, test = 40 }
lookback = 24
horizons = [6, 8]
stride = 8
batch_size = 8
synth = { length = 150, shared = [{ period = 24.0 }], specific = [{ period = 11.0, amplitude = 0.5 }], noise_std = 0.1, seed = 2 }

[[targets]]
name = "fresh"
channels = 1
splits = { train = 70, val = 40, test = 40 }
lookback = 24
horizons = [6, 8]
stride = 8
batch_size = 8
synth = { length = 150, shared = [{ period = 24.0 }], specific = [{ period = 5.0, amplitude = 0.5 }], noise_std = 0.1, seed = 3 }

[[targets]]
name = "pinned"
channels = 1
splits = { train = 70, val = 40, test = 40 }
lookback = 24
horizons = [6, 8]
stride = 8
batch_size = 8
reuse = "small"
synth = { length = 150, shared = [{ period = 24.0 }], specific = [{ period = 9.0, amplitude = 0.5 }], noise_std = 0.1, seed = 4 }
"#;

fn setup(dir: &Path) -> ExperimentConfig {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, EXPERIMENT).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn train_then_eval_reproduces_best_validation_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let outcomes = experiment::train(&cfg, &out).unwrap();
    assert_eq!(outcomes.len(), 2);
    for k in 0..2 {
        let dir = experiment::horizon_dir(&out, k);
        assert!(dir.join("round_log.csv").is_file());
        assert!(dir.join("best.json").is_file());
    }
    let report = experiment::eval(&cfg, &out, Split::Val).unwrap();
    for (k, o) in outcomes.iter().enumerate() {
        let horizon = cfg.domains[0].horizons[k];
        let vals: Vec<f64> = report.entries.iter().filter(|e| e.horizon == horizon).map(|e| e.mse.unwrap()).collect();
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        let best = o.best_avg_val_loss.unwrap();
        assert!((avg - best).abs() <= 1e-12 * best.max(1.0), "{avg} vs {best}");
    }
    assert!(out.join("report.json").is_file());
    assert!(out.join("report.csv").is_file());
}

#[test]
fn fewshot_excludes_domains_without_a_training_window() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let report = experiment::fewshot(&cfg, &out, 0.1).unwrap();
    for e in &report.entries {
        match e.domain.as_str() {
            "small" => assert!(e.mse.is_none() && e.mae.is_none()),
            _ => assert!(e.mse.unwrap().is_finite()),
        }
    }
    let dir = experiment::fewshot_dir(&out, 0.1);
    let rows = read_csv(&dir.join("report.csv"));
    assert!(rows.iter().any(|r| r.contains(&"small".to_string()) && r.contains(&"-".to_string())));
}

#[test]
fn zeroshot_honours_reuse_and_leaves_sources_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    experiment::train(&cfg, &out).unwrap();
    let report = experiment::zeroshot(&cfg, &out).unwrap();
    assert_eq!(report.selections.len(), 4);
    assert_eq!(report.checksums_before, report.checksums_after);
    for s in &report.selections {
        if s.target == "pinned" {
            assert_eq!(s.chosen, "small");
        } else {
            assert_eq!(s.candidates.len(), 2);
        }
    }
    assert!(out.join("zeroshot/report.json").is_file());
}

#[test]
fn inspect_prompts_exports_scores_and_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    experiment::train(&cfg, &out).unwrap();
    let dir = experiment::inspect_prompts(&cfg, &out, 0, 1).unwrap();
    // 24-step lookback, patch 8, stride 8: three patches
    for h in 0..2 {
        let scores = read_csv(&dir.join(format!("big/head{h}_scores.csv")));
        assert_eq!(scores.len(), 1 + 16);
        assert!(scores.iter().all(|r| r.len() == 1 + 3));
        for col in 1..4 {
            let s: f64 = scores[1..].iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(read_csv(&dir.join(format!("big/head{h}_totals.csv"))).len(), 1 + 16);
    }
    let selected = read_csv(&dir.join("small/selected.csv"));
    assert_eq!(selected.len(), 1 + 4);
    let overlap = read_csv(&dir.join("overlap.csv"));
    for (i, row) in overlap[1..].iter().enumerate() {
        assert_eq!(row[1 + i].parse::<f64>().unwrap(), 1.0);
    }
    assert!(experiment::inspect_prompts(&cfg, &out, 0, 10_000).is_err());
}

#[test]
fn synth_gen_round_trips_through_the_csv_loader() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let written = experiment::synth_gen(&cfg, tmp.path()).unwrap();
    assert_eq!(written.len(), 4);
    for (i, d) in cfg.domains.iter().enumerate() {
        let mut from_csv = d.clone();
        from_csv.synth = None;
        from_csv.csv = Some(format!("data/{}.csv", d.name).into());
        let a = d.load(&cfg.base_dir, i, 0).unwrap();
        let b = from_csv.load(&cfg.base_dir, i, 0).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn concurrent_runs_on_one_directory_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let _held = experiment::OutputLock::acquire(&out).unwrap();
    let cfg = setup(tmp.path());
    assert!(experiment::train(&cfg, &out).is_err());
}
