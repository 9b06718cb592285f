//! Checks on the trained fixture shared with the acceptance run.

use std::path::PathBuf;

use steerlab::classifier::validate_classifier;
use steerlab::lab::{Lab, LabConfig};

fn lab() -> Lab {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/lab-cache");
    Lab::build(LabConfig::default(), &root, |m| eprintln!("{m}")).expect("lab fixture builds")
}

#[test]
fn classifiers_separate_concept_from_source_bundle() {
    let lab = lab();
    for task in &lab.tasks {
        let c = &lab.classifiers.by_task[&task.name];
        let (pos, neg) = validate_classifier(c, task, 64, 12345).unwrap();
        println!("{}: positives {pos:.3}, negatives {neg:.3}", task.name);
        assert!(pos >= 0.9 && neg <= 0.1, "{}: {pos:.3} / {neg:.3}", task.name);
    }
}

#[test]
fn every_task_and_mode_has_a_personalized_model() {
    let lab = lab();
    for task in &lab.tasks {
        for mode in &lab.config.modes {
            let p = &lab.personalized[&(task.name.clone(), *mode)];
            assert_ne!(p.content_hash().unwrap(), lab.phi0.content_hash().unwrap());
        }
    }
}
