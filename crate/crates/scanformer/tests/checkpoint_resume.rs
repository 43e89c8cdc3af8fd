mod common;

use common::tiny_train;
use scanformer::checkpoint::Checkpoint;
use scanformer::training::{run, RunOptions, Trainer};
use scanformer_core::model::ModelConfig;

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.rngt");
    let cfg = tiny_train();

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let all = run(&mut straight, &RunOptions { stop_at: Some(12), ..RunOptions::default() }).unwrap();

    // Stop mid accumulation window so the partial gradient sum must survive.
    for stop in [7u64, 8] {
        let mut first = Trainer::new(cfg.clone()).unwrap();
        run(&mut first, &RunOptions { out: Some(path.clone()), stop_at: Some(stop), ..RunOptions::default() }).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(&path, None).unwrap()).unwrap();
        assert_eq!(resumed.state.step, stop);
        let rest = run(&mut resumed, &RunOptions { stop_at: Some(12), ..RunOptions::default() }).unwrap();
        for (a, b) in rest.iter().zip(&all[stop as usize..]) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}", a.step);
        }
        assert_eq!(resumed.model.params(), straight.model.params());
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.rngt");
    let mut t = Trainer::new(tiny_train()).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    t.checkpoint().save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(t.model.config())).unwrap();
    assert_eq!(back.model.params(), t.model.params());
    assert_eq!(back.optimizer.as_ref().unwrap().m, t.state.m);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(Checkpoint::load(&path, None).unwrap().to_container().unwrap().to_bytes().unwrap(), bytes);

    let other = ModelConfig { dim: 32, ..t.model.config().clone() };
    assert!(Checkpoint::load(&path, Some(&other)).is_err());
}

#[test]
fn training_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let mut t = Trainer::new(tiny_train()).unwrap();
    run(&mut t, &RunOptions { log: Some(log.clone()), stop_at: Some(4), ..RunOptions::default() }).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 3);
    assert!(lines[1]["grad_norm"].is_number() && lines[0]["grad_norm"].is_null());
}
