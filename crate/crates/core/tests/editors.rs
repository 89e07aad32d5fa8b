//! Editing strategies against their definitions as compositions of the
//! primitive operations.

mod common;

use std::sync::OnceLock;

use common::{tiny_lab, tiny_train, TinyLab};
use flearn::arith::{apply_forgetting, extract_delta, ForgettingRate};
use flearn::editors::{run_editor, strategy_knowledge_vector, EditorKind, EditorStrategy};
use flearn::lora::{init_adapters, lora_fine_tune, merge_adapters};
use flearn::model::{names, ParamSet};
use flearn::trainer::{fine_tune, fine_tune_constrained, FtcConfig};
use proptest::prelude::*;

fn lab() -> &'static TinyLab {
    static LAB: OnceLock<TinyLab> = OnceLock::new();
    LAB.get_or_init(tiny_lab)
}

fn strategy(kind: EditorKind) -> EditorStrategy {
    EditorStrategy::new(kind, tiny_train(), 21)
}

fn edit(s: &EditorStrategy) -> ParamSet {
    let lab = lab();
    run_editor(s, &lab.original, &lab.corpus, &lab.vocab).unwrap().params
}

#[test]
fn forget_then_fine_tune_at_rate_zero_is_full_ft() {
    let zero = ForgettingRate::new(0.0).unwrap();
    let plain = edit(&strategy(EditorKind::FullFt));
    let forgetful = edit(&strategy(EditorKind::FFt).with_rate(zero));
    assert!(plain.bit_eq(&forgetful));
    assert!(!plain.bit_eq(&lab().original));
}

#[test]
fn forget_then_lora_at_rate_zero_is_lora() {
    let zero = ForgettingRate::new(0.0).unwrap();
    let plain = edit(&strategy(EditorKind::Lora));
    let forgetful = edit(&strategy(EditorKind::FLora).with_rate(zero));
    assert!(plain.bit_eq(&forgetful));
}

#[test]
fn f_lora_ft_is_its_manual_composition() {
    let lab = lab();
    let s = strategy(EditorKind::FLoraFt).with_rate(ForgettingRate::new(0.4).unwrap());
    let edited = run_editor(&s, &lab.original, &lab.corpus, &lab.vocab).unwrap();

    let lora = s.forget_lora_config().unwrap();
    let adapters = init_adapters(lab.original.config(), &lora).unwrap();
    let trained =
        lora_fine_tune(&lab.original, &adapters, &lab.corpus.old_records(), &lab.vocab, &s.forget_train_config())
            .unwrap();
    let fitted = merge_adapters(&lab.original, &trained).unwrap();
    let delta = extract_delta(&fitted, &lab.original).unwrap();
    let forgotten = apply_forgetting(&lab.original, &delta, s.rate.unwrap()).unwrap();
    let manual = fine_tune(&forgotten, &lab.corpus.new_records(), &lab.vocab, &s.learn_train_config()).unwrap();

    assert!(edited.intermediate.as_ref().unwrap().bit_eq(&forgotten));
    assert!(edited.params.bit_eq(&manual));
}

#[test]
fn f_ft_is_its_manual_composition() {
    let lab = lab();
    let s = strategy(EditorKind::FFt);
    let edited = run_editor(&s, &lab.original, &lab.corpus, &lab.vocab).unwrap();
    let fitted = fine_tune(&lab.original, &lab.corpus.old_records(), &lab.vocab, &s.forget_train_config()).unwrap();
    let delta = extract_delta(&fitted, &lab.original).unwrap();
    assert!(strategy_knowledge_vector(&s, &lab.original, &lab.corpus.old_records(), &lab.vocab)
        .unwrap()
        .tensors()
        .iter()
        .zip(delta.tensors().iter())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
    let forgotten = apply_forgetting(&lab.original, &delta, s.rate.unwrap()).unwrap();
    let manual = fine_tune(&forgotten, &lab.corpus.new_records(), &lab.vocab, &s.learn_train_config()).unwrap();
    assert!(edited.params.bit_eq(&manual));
    assert_eq!(
        edited.timings.iter().map(|t| t.stage.as_str()).collect::<Vec<_>>(),
        ["forget", "learn"]
    );
}

#[test]
fn editors_are_deterministic_and_leave_the_input_alone() {
    let lab = lab();
    let before = lab.original.clone();
    for kind in EditorKind::ALL {
        let s = strategy(kind);
        let a = edit(&s);
        assert!(a.bit_eq(&edit(&s)), "{kind}");
        assert!(a.tensors().is_finite(), "{kind}");
        let edited = run_editor(&s, &lab.original, &lab.corpus, &lab.vocab).unwrap();
        assert_eq!(edited.intermediate.is_some(), kind.forgets(), "{kind}");
    }
    assert!(before.bit_eq(&lab.original));
}

#[test]
fn different_seeds_give_different_edits() {
    let a = edit(&strategy(EditorKind::FullFt));
    let mut s = strategy(EditorKind::FullFt);
    s.seed += 1;
    assert!(!a.bit_eq(&edit(&s)));
}

#[test]
fn divergence_is_reported_with_its_stage() {
    let lab = lab();
    let mut s = strategy(EditorKind::FFt);
    s.train.learning_rate = 1e300;
    let err = run_editor(&s, &lab.original, &lab.corpus, &lab.vocab).unwrap_err();
    assert!(err.to_string().contains("learn"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constrained_tuning_stays_in_its_ball(
        eps in 1e-4f64..0.5,
        lr in 1e-3f64..1.0,
        layer in 0usize..2,
        steps in 1usize..4,
    ) {
        let lab = lab();
        let cfg = FtcConfig {
            target_layer: Some(layer),
            steps,
            batch_size: 4,
            epsilon: eps,
            learning_rate: lr,
        };
        let out = fine_tune_constrained(&lab.original, &lab.corpus.new_records(), &lab.vocab, &cfg).unwrap();
        let trained = names::mlp_tensors(layer);
        for (name, t) in out.tensors().iter() {
            let t0 = lab.original.get(name).unwrap();
            if trained.iter().any(|n| n == name) {
                let worst = t.data().iter().zip(t0.data())
                    .map(|(&w, &w0)| (w as f64 - w0 as f64).abs())
                    .fold(0.0, f64::max);
                prop_assert!(worst <= eps + 1e-7, "{name}: {worst} > {eps}");
            } else {
                prop_assert!(t.data().iter().zip(t0.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name} moved");
            }
        }
    }
}
