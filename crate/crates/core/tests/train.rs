use vqa_fusion::data::{Dataset, GenConfig, Split};
use vqa_fusion::model::{items_for, EncoderKind, Item, ModelConfig, ReasonModel};
use vqa_fusion::program::{Template, NUM_ANSWERS};
use vqa_fusion::train::*;

fn data(num_images: usize) -> Dataset {
    Dataset::generate(&GenConfig {
        num_images,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn quick(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs,
        ..Default::default()
    }
}

#[test]
fn fifty_items_can_be_memorized() {
    let d = data(20);
    let items: Vec<Item> = items_for(&d, Split::Train)
        .unwrap()
        .into_iter()
        .take(50)
        .collect();
    assert_eq!(items.len(), 50);
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: 200,
        ..Default::default()
    };
    let out = train(&items, &items, &cfg).unwrap();
    assert!(out.best_val_accuracy >= 0.98, "{:?}", out.history.last());
    assert!(accuracy(&out.model, &items).unwrap() >= 0.98);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let d = data(12);
    let (tr, va) = (
        items_for(&d, Split::Train).unwrap(),
        items_for(&d, Split::Val).unwrap(),
    );
    let a = train(&tr, &va, &quick(3)).unwrap();
    let b = train(&tr, &va, &quick(3)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.to_checkpoint_json(), b.model.to_checkpoint_json());
    let c = train(
        &tr,
        &va,
        &TrainConfig {
            seed: 1,
            ..quick(3)
        },
    )
    .unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let d = data(8);
    let (tr, va) = (
        items_for(&d, Split::Train).unwrap(),
        items_for(&d, Split::Val).unwrap(),
    );
    let out = train(
        &tr,
        &va,
        &TrainConfig {
            lr: 0.0,
            ..quick(1)
        },
    )
    .unwrap();
    let fresh = ReasonModel::new(ModelConfig::default()).unwrap();
    assert_eq!(out.model.params.tensors(), fresh.params.tensors());
}

#[test]
fn oracle_and_constant_predictors() {
    let d = data(30);
    let items = items_for(&d, Split::Val).unwrap();
    let gold: Vec<(Template, usize)> = items.iter().map(|i| (i.template, i.answer)).collect();
    let one_hot = |k: usize| {
        let mut v = vec![0.0; NUM_ANSWERS];
        v[k] = 1.0;
        v
    };
    let oracle: Vec<Vec<f64>> = gold.iter().map(|&(_, a)| one_hot(a)).collect();
    assert_eq!(evaluate_scores(&oracle, &gold).unwrap().accuracy, 1.0);

    let labels: Vec<usize> = gold.iter().map(|g| g.1).collect();
    let mut counts = [0usize; NUM_ANSWERS];
    labels.iter().for_each(|&a| counts[a] += 1);
    let top = (0..NUM_ANSWERS)
        .max_by_key(|&k| (counts[k], std::cmp::Reverse(k)))
        .unwrap();
    let constant = vec![one_hot(top); gold.len()];
    let report = evaluate_scores(&constant, &gold).unwrap();
    assert_eq!(report.accuracy, counts[top] as f64 / labels.len() as f64);
    assert_eq!(report.accuracy, majority_share(&labels));
    assert!(majority_share(&labels) <= 1.0);
}

#[test]
fn per_template_counts_add_up() {
    let d = data(30);
    let items = items_for(&d, Split::Val).unwrap();
    let model = ReasonModel::new(ModelConfig {
        seed: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let r = evaluate(&model, &items).unwrap();
    let total: usize = r.per_template.values().map(|s| s.total).sum();
    let correct: usize = r.per_template.values().map(|s| s.correct).sum();
    assert_eq!((total, correct), (r.total, r.correct));
    let weighted: f64 = r
        .per_template
        .values()
        .map(|s| s.accuracy * s.total as f64)
        .sum::<f64>()
        / total as f64;
    assert!((weighted - r.accuracy).abs() < 1e-12);
    let confusion: usize = r.confusion.iter().flatten().sum();
    let diagonal: usize = (0..NUM_ANSWERS).map(|k| r.confusion[k][k]).sum();
    assert_eq!((confusion, diagonal), (r.total, r.correct));
}

#[test]
fn ties_break_to_the_lowest_class() {
    let gold = vec![(Template::T1, 3), (Template::T2, 0)];
    let flat = vec![vec![1.0 / NUM_ANSWERS as f64; NUM_ANSWERS]; 2];
    let r = evaluate_scores(&flat, &gold).unwrap();
    assert_eq!(r.correct, 1);
    assert_eq!(r.confusion[3][0], 1);
}

#[test]
fn score_files_are_normalized_and_reproducible() {
    let d = data(12);
    let items = items_for(&d, Split::Train).unwrap();
    let model = ReasonModel::new(ModelConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    assert_eq!(predict_to_file(&model, &items, &a).unwrap(), items.len());
    predict_to_file(&model, &items, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text == std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), items.len());
    for (line, item) in text.lines().zip(&items) {
        let s: ScoreLine = serde_json::from_str(line).unwrap();
        assert_eq!(s.qid, item.qid);
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let d = data(16);
    let (tr, va) = (
        items_for(&d, Split::Train).unwrap(),
        items_for(&d, Split::Val).unwrap(),
    );
    for patience in [0, 1, 3] {
        let out = train(
            &tr,
            &va,
            &TrainConfig {
                patience,
                ..quick(12)
            },
        )
        .unwrap();
        let best = out
            .history
            .iter()
            .map(|h| h.val_accuracy)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_val_accuracy, best);
        let first = out
            .history
            .iter()
            .position(|h| h.val_accuracy == best)
            .unwrap();
        assert_eq!(out.best_epoch, first);
        assert!(out.history.len() <= (first + patience + 1).min(12));
        assert_eq!(accuracy(&out.model, &va).unwrap(), best);
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let d = data(8);
    let tr = items_for(&d, Split::Train).unwrap();
    let mut poisoned = tr[0].features.clone();
    poisoned.detection.values_mut()[0] = f64::NAN;
    let mut bad: Vec<Item> = tr.clone();
    bad[0] = Item {
        features: &poisoned,
        ..tr[0].clone()
    };
    match train(
        &bad,
        &tr,
        &TrainConfig {
            batch_size: 64,
            ..quick(2)
        },
    ) {
        Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            loss,
            ..
        }) => assert!(loss.is_nan()),
        other => panic!("expected an abort, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let d = data(8);
    let tr = items_for(&d, Split::Train).unwrap();
    assert!(matches!(
        train(&tr, &[], &quick(1)),
        Err(TrainError::Empty(_))
    ));
    assert!(matches!(
        train(&[], &tr, &quick(1)),
        Err(TrainError::Empty(_))
    ));
    assert!(matches!(
        train(
            &tr,
            &tr,
            &TrainConfig {
                batch_size: 0,
                ..quick(1)
            }
        ),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train(
            &tr,
            &tr,
            &TrainConfig {
                beta1: 1.0,
                ..quick(1)
            }
        ),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        evaluate_scores(&[], &[]),
        Err(TrainError::Empty(_))
    ));
}

#[test]
fn rate_zero_bayesian_training_matches_plain_gru_bitwise() {
    let d = data(60);
    let tr = items_for(&d, Split::Train).unwrap();
    let va = items_for(&d, Split::Val).unwrap();
    let run = |encoder| {
        let cfg = TrainConfig {
            max_epochs: 2,
            seed: 9,
            model: ModelConfig {
                encoder,
                dropout: 0.0,
                seed: 9,
                ..Default::default()
            },
            ..Default::default()
        };
        train(&tr, &va, &cfg).unwrap()
    };
    let (a, b) = (run(EncoderKind::Gru), run(EncoderKind::BayesianGru));
    assert_eq!(a.history, b.history);
    for (x, y) in a
        .model
        .params
        .tensors()
        .iter()
        .zip(b.model.params.tensors())
    {
        let bits = |t: &vqa_fusion::autodiff::Tensor| {
            t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(x), bits(y));
    }
}
