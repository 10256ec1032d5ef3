use std::fs::{self, File};

use dsage_core::dsage::{read_metrics_csv, run, Manifest};
use dsage_core::experiment::{run_experiment, ExperimentConfig, Overrides};
use dsage_core::surrogate::{load_checkpoint, Dataset, Record, TileGrid};
use dsage_core::Archive;

fn tiny(condition: &str, extra: &str) -> String {
    format!(
        r#"
condition = "{condition}"
trials = 2
seed = 5
{extra}
[run]
budget = 70
initial_solutions = 25
exploit_iterations = 4
model = {{ channels = 2, head_hidden = 8 }}
train = {{ epochs = 2, batch_size = 8 }}
agent = {{ episodes = 3 }}
"#
    )
}

fn experiment(text: &str, out: &std::path::Path) -> ExperimentConfig {
    let overrides = Overrides {
        out: Some(out.to_path_buf()),
        ..Overrides::default()
    };
    ExperimentConfig::from_toml(text, &overrides).unwrap()
}

#[test]
fn artifacts_round_trip_to_the_in_memory_run() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&tiny("dsage", "[run.optimizer]\nkind = \"map-elites\"\nbatch_size = 12"), dir.path());
    let outcomes = run_experiment(&exp).unwrap();
    assert!(outcomes.iter().all(|o| o.result.is_ok()));

    let trial = exp.trial_dir(1);
    let memory = run(&exp.trial_config(1)).unwrap();

    let metrics = read_metrics_csv(File::open(trial.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(metrics, memory.metrics);

    let archive = Archive::read_csv(File::open(trial.join("archive.csv")).unwrap(), exp.run.measures.spec()).unwrap();
    assert_eq!(archive.qd_score(), memory.archive.qd_score());
    let cells: Vec<_> = archive.iter().map(|e| (e.cell.clone(), e.solution.clone())).collect();
    let expected: Vec<_> = memory.archive.iter().map(|e| (e.cell.clone(), e.solution.clone())).collect();
    assert_eq!(cells, expected);

    let data = Dataset::read_jsonl(File::open(trial.join("dataset.jsonl")).unwrap()).unwrap();
    assert_eq!(data.records(), memory.dataset.records());

    let model = load_checkpoint(File::open(trial.join("model.json")).unwrap()).unwrap();
    let tiles: Vec<TileGrid> = data.records().iter().map(Record::tile_grid).collect();
    let original = memory.model.as_ref().unwrap();
    assert_eq!(
        model.predict_end_to_end(&tiles).unwrap(),
        original.predict_end_to_end(&tiles).unwrap()
    );

    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(trial.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config, exp.trial_config(1));
    let summary = manifest.summary.unwrap();
    assert_eq!(summary.evaluations, 70);
    assert_eq!(summary.qd_score, memory.archive.qd_score());
}

#[test]
fn a_failing_trial_is_recorded_and_the_rest_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&tiny("baseline-qd", ""), dir.path());
    // A directory where the metrics file should go makes trial 0 fail late.
    fs::create_dir_all(exp.trial_dir(0).join("metrics.csv")).unwrap();
    let outcomes = run_experiment(&exp).unwrap();
    assert!(outcomes[0].result.is_err());
    assert!(outcomes[1].result.is_ok());
    let failed: Manifest =
        serde_json::from_str(&fs::read_to_string(exp.trial_dir(0).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(failed.status, "failed");
    assert!(failed.error.is_some() && failed.summary.is_none());
    assert!(exp.trial_dir(1).join("archive.csv").exists());
    assert!(!exp.trial_dir(1).join("model.json").exists());
}

#[test]
fn parallel_trials_match_sequential_ones() {
    let seq_dir = tempfile::tempdir().unwrap();
    let par_dir = tempfile::tempdir().unwrap();
    let seq = experiment(&tiny("dr", ""), seq_dir.path());
    let par = experiment(&tiny("dr", "jobs = 2"), par_dir.path());
    run_experiment(&seq).unwrap();
    run_experiment(&par).unwrap();
    for t in 0..2 {
        for f in ["metrics.csv", "archive.csv"] {
            assert_eq!(
                fs::read(seq.trial_dir(t).join(f)).unwrap(),
                fs::read(par.trial_dir(t).join(f)).unwrap()
            );
        }
    }
}

#[test]
fn latent_domain_runs_through_the_experiment_layer() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny("dsage", "domain = \"latent-maze\"") + "optimizer = { kind = \"cma-me\", emitters = 2, emitter_batch = 6, sigma0 = 0.2 }\n";
    let exp = experiment(&text, dir.path());
    let outcomes = run_experiment(&exp).unwrap();
    for o in &outcomes {
        let s = o.result.as_ref().unwrap();
        assert_eq!(s.evaluations, 70);
        assert!(s.elites > 0);
    }
}
