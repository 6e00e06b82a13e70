mod common;

use std::fs;

use common::*;
use duoscene::checkpoint::load_checkpoint;
use duoscene::experiments::{reference_row, run_ablation_grid, run_iteration_sweep, SweepReport};
use duoscene::metrics::evaluate_ss;
use duoscene::model::{AblationLabel, Branch};
use duoscene::nn::HasParams;
use duoscene::trainer::{checkpoint_path, evaluate_corpus, evaluate_model, TrainConfig, Trainer};

fn quick() -> TrainConfig {
    TrainConfig {
        iterations: 2,
        epochs_per_phase: 1,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn run_logs_bootstrap_and_two_phases_per_slice() {
    let prep = prepared(&small_corpus(3, 1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let mut t = Trainer::new(&prep, &[], 12, cfg.clone(), AblationLabel::E.config(), Some(dir.path())).unwrap();
    t.run().unwrap();

    let tags: Vec<(usize, &str)> = t.log.iter().map(|r| (r.t, r.branch.as_str())).collect();
    assert_eq!(tags, [(0, "bootstrap"), (1, "ssc"), (1, "ss"), (2, "ssc"), (2, "ss")]);
    assert!(t.log[0].ssc_loss.is_some() && t.log[0].ss_loss.is_some());
    assert!(t.log[1].ssc_loss.is_some() && t.log[1].ss_loss.is_none());

    // metrics in the log are those of the cached predictions
    let s = &t.state;
    let cached = evaluate_corpus(&prep, &s.eval_f2d, &s.eval_f3d, 12).unwrap();
    assert_eq!(t.latest().unwrap().metrics, cached);

    // after an SS phase the cached image labels are the refined prediction
    // given the cached voxel labels
    for (i, s) in prep.iter().enumerate() {
        assert_eq!(t.model.predict_2d(s, Some(&t.state.eval_f3d[i]), true).unwrap(), t.state.eval_f2d[i]);
    }
    // fresh inference replays the alternation with the final weights
    let chain = evaluate_model(&t.model, &prep, &t.ablation, cfg.iterations).unwrap();
    assert!(chain.ssc.sc_iou > 0.0);

    // every phase left a checkpoint; the final one reloads to the live model
    for (tag_t, tag) in [(0, "bootstrap"), (1, "ssc"), (1, "ss"), (2, "ssc"), (2, "ss")] {
        assert!(checkpoint_path(dir.path(), tag_t, tag).exists(), "t{tag_t} {tag}");
    }
    let reloaded = load_checkpoint(checkpoint_path(dir.path(), 2, "ss")).unwrap();
    let live: Vec<_> = t.model.params().iter().map(|p| p.value.clone()).collect();
    let back: Vec<_> = reloaded.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(live, back);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let prep = prepared(&small_corpus(2, 2));
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&prep, &[], 12, quick(), AblationLabel::E.config(), Some(dir.path())).unwrap();
        t.run().unwrap();
        let mut files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        (files, t.log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}

#[test]
fn phases_leave_the_other_branch_untouched() {
    let prep = prepared(&small_corpus(2, 3));
    let mut t = Trainer::new(&prep, &[], 12, quick(), AblationLabel::E.config(), None).unwrap();
    t.bootstrap().unwrap();
    t.state.t = 1;
    for (branch, other) in [(Branch::Ssc, Branch::Ss), (Branch::Ss, Branch::Ssc)] {
        let before: Vec<_> = t.model.branch_params(other).iter().map(|p| (p.value.clone(), p.velocity.clone())).collect();
        let active: Vec<_> = t.model.branch_params(branch).iter().map(|p| p.value.clone()).collect();
        t.run_phase(branch).unwrap();
        let after: Vec<_> = t.model.branch_params(other).iter().map(|p| (p.value.clone(), p.velocity.clone())).collect();
        assert_eq!(before, after);
        let moved: Vec<_> = t.model.branch_params(branch).iter().map(|p| p.value.clone()).collect();
        assert_ne!(active, moved);
    }
}

#[test]
fn single_sample_phase_loss_mostly_decreases() {
    let prep = prepared(&small_corpus(1, 4));
    let cfg = TrainConfig {
        epochs_per_phase: 40,
        batch_size: 1,
        ..quick()
    };
    let mut t = Trainer::new(&prep, &[], 12, cfg, AblationLabel::E.config(), None).unwrap();
    t.bootstrap().unwrap();
    t.state.t = 1;
    t.step_losses.clear();
    t.run_phase(Branch::Ss).unwrap();
    let losses: Vec<f64> = t.step_losses.iter().map(|(_, l)| *l).collect();
    assert_eq!(losses.len(), 40);
    let tail = &losses[10..];
    let non_increasing = tail.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(
        non_increasing as f64 >= 0.9 * (tail.len() - 1) as f64,
        "{non_increasing}/{} non-increasing steps: {losses:?}",
        tail.len() - 1
    );
}

#[test]
fn image_branch_overfits_one_sample() {
    let prep = prepared(&small_corpus(1, 5));
    let cfg = TrainConfig {
        epochs_per_phase: 200,
        batch_size: 1,
        ..quick()
    };
    let mut t = Trainer::new(&prep, &[], 12, cfg, AblationLabel::A.config(), None).unwrap();
    t.run().unwrap();
    let s = &prep[0];
    let pred = &t.state.train_f2d[0];
    let valid: Vec<usize> = (0..pred.len()).filter(|&q| s.mask2d[q]).collect();
    let correct = valid.iter().filter(|&&q| pred[q] == s.gt2d[q]).count();
    let acc = correct as f64 / valid.len() as f64;
    assert!(acc > 0.95, "pixel accuracy {acc}");
    assert!(evaluate_ss(pred, &s.gt2d, &s.mask2d, 12).unwrap().ss_miou > 0.5);
}

#[test]
fn ablation_a_is_the_shared_bootstrap() {
    let train = prepared(&small_corpus(2, 6));
    let eval = prepared(&small_corpus(2, 7));
    let cfg = TrainConfig {
        iterations: 1,
        ..quick()
    };
    let report = run_ablation_grid(&train, &eval, 12, &cfg, &[0], None).unwrap();
    let labels: Vec<_> = report.rows.iter().map(|r| r.label).collect();
    assert_eq!(labels, [AblationLabel::A, AblationLabel::B, AblationLabel::C, AblationLabel::D, AblationLabel::E]);

    let mut boot = Trainer::new(&train, &eval, 12, TrainConfig { seed: 0, ..cfg.clone() }, AblationLabel::A.config(), None).unwrap();
    boot.run().unwrap();
    assert_eq!(boot.log.len(), 1);
    assert_eq!(report.row(AblationLabel::A).unwrap().per_seed[0], boot.latest().unwrap().metrics);

    let e = report.row(AblationLabel::E).unwrap();
    assert_eq!((e.reference.ss, e.reference.ssc, e.reference.sc), (65.6, 47.5, 79.1));
    assert_eq!(reference_row(AblationLabel::A).ssc, 40.3);
    let header: Vec<String> = report.to_table().lines().next().unwrap().split_whitespace().map(String::from).collect();
    assert_eq!(header, ["IL", "DCP", "DDA", "SS", "SSC", "SC", "refSS", "refSSC", "refSC"]);
}

#[test]
fn sweep_report_round_trips_through_json() {
    let prep = prepared(&small_corpus(2, 8));
    let report = run_iteration_sweep(&prep, &[], 12, &quick(), AblationLabel::E.config(), 2, None).unwrap();
    assert_eq!(report.points.iter().map(|p| p.t).collect::<Vec<_>>(), [0, 1, 2]);
    let json = serde_json::to_string(&report).unwrap();
    let back: SweepReport = serde_json::from_str(&json).unwrap();
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
    assert!(run_iteration_sweep(&prep, &[], 12, &quick(), AblationLabel::A.config(), 2, None).is_err());
}
