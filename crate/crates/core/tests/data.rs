use std::collections::HashMap;

use vqa_fusion::data::*;
use vqa_fusion::program::{execute_program, translate_question};
use vqa_fusion::world::Quality;

fn cfg(seed: u64, num_images: usize) -> GenConfig {
    GenConfig {
        seed,
        num_images,
        ..Default::default()
    }
}

#[test]
fn regeneration_is_identical() {
    let a = Dataset::generate(&cfg(4, 30)).unwrap();
    let b = Dataset::generate(&cfg(4, 30)).unwrap();
    assert_eq!(a.questions, b.questions);
    assert_eq!(a.scenes, b.scenes);
    assert_ne!(
        a.questions,
        Dataset::generate(&cfg(5, 30)).unwrap().questions
    );
}

#[test]
fn question_count_and_qids() {
    let d = Dataset::generate(&GenConfig {
        num_images: 10,
        questions_per_image: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(d.questions.len(), 50);
    for (i, q) in d.questions.iter().enumerate() {
        assert_eq!(q.qid, i as u64);
        assert_eq!(q.image_id as usize, i / 5);
    }
}

#[test]
fn write_read_round_trip() {
    let d = Dataset::generate(&cfg(2, 15)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.config, d.config);
    assert_eq!(back.questions, d.questions);
    assert_eq!(back.scenes, d.scenes);

    let again = tempfile::tempdir().unwrap();
    back.write(again.path()).unwrap();
    for f in [SCENES_FILE, QUESTIONS_FILE, META_FILE] {
        let x = std::fs::read(dir.path().join(f)).unwrap();
        let y = std::fs::read(again.path().join(f)).unwrap();
        assert!(x == y, "{f} changed on rewrite");
    }
}

#[test]
fn on_disk_field_names() {
    let d = Dataset::generate(&cfg(2, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    let scene = std::fs::read_to_string(dir.path().join(SCENES_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(scene.lines().next().unwrap()).unwrap();
    for key in ["image_id", "objects", "detection", "spatial", "bbox"] {
        assert!(v.get(key).is_some(), "scene line lacks {key}");
    }
    let q = std::fs::read_to_string(dir.path().join(QUESTIONS_FILE)).unwrap();
    let v: serde_json::Value = serde_json::from_str(q.lines().next().unwrap()).unwrap();
    for key in ["qid", "question", "program", "answer"] {
        assert!(v.get(key).is_some(), "question line lacks {key}");
    }
    assert!(v["program"].is_string());
}

#[test]
fn read_rejects_broken_files() {
    let d = Dataset::generate(&cfg(2, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.write(dir.path()).unwrap();
    let qpath = dir.path().join(QUESTIONS_FILE);
    let text = std::fs::read_to_string(&qpath).unwrap();
    let first = text.lines().next().unwrap().to_string();
    std::fs::write(&qpath, format!("{text}{first}\n")).unwrap();
    assert!(matches!(
        Dataset::read(dir.path()),
        Err(DataError::Invalid(_))
    ));
    std::fs::write(&qpath, "{not json\n").unwrap();
    assert!(matches!(
        Dataset::read(dir.path()),
        Err(DataError::Json { line: 1, .. })
    ));
    assert!(matches!(
        Dataset::read(&dir.path().join("missing")),
        Err(DataError::Io { .. })
    ));
}

#[test]
fn splits_follow_fractions_without_leakage() {
    let d = Dataset::generate(&cfg(8, 200)).unwrap();
    let mut counts: HashMap<Split, usize> = HashMap::new();
    for s in &d.scenes {
        *counts.entry(s.split).or_default() += 1;
    }
    assert_eq!(counts[&Split::Val], 30);
    assert_eq!(counts[&Split::Test], 30);
    assert_eq!(counts[&Split::Train], 140);
    let mut owner: HashMap<u32, Split> = HashMap::new();
    for q in &d.questions {
        let s = d.split_of(q);
        assert_eq!(*owner.entry(q.image_id).or_insert(s), s);
    }
}

#[test]
fn quality_changes_features_but_not_splits() {
    let make = |quality| {
        Dataset::generate(&GenConfig {
            quality,
            ..cfg(6, 40)
        })
        .unwrap()
    };
    let (lo, hi) = (make(Quality::Low), make(Quality::High));
    assert_eq!(lo.split_hash(), hi.split_hash());
    assert_eq!(lo.questions, hi.questions);
    assert_ne!(lo.scenes[0].features, hi.scenes[0].features);
    assert_ne!(
        make(Quality::High).split_hash(),
        Dataset::generate(&cfg(7, 40)).unwrap().split_hash()
    );
}

#[test]
fn stored_answers_match_the_oracle() {
    let d = Dataset::generate(&cfg(11, 60)).unwrap();
    for q in &d.questions {
        let scene = &d.scene(q.image_id).unwrap().scene;
        let p = translate_question(&q.question).unwrap();
        assert_eq!(p, q.program);
        assert_eq!(execute_program(&p, scene).unwrap(), q.answer);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Dataset::generate(&GenConfig {
        num_images: 0,
        ..Default::default()
    })
    .is_err());
    assert!(Dataset::generate(&GenConfig {
        val_fraction: 0.6,
        test_fraction: 0.5,
        ..Default::default()
    })
    .is_err());
}
