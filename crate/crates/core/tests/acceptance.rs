//! End-to-end acceptance run on the desk-scale lab. Prints one PASS/FAIL
//! line per criterion and exits non-zero if any hard criterion fails.

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{finite_difference_errors, grad_batch, grad_config, FD_MAX_REL};
use flearn::arith::{apply_forgetting, extract_delta, layer_distances, scaled_subtract, ForgettingRate, TensorFamily};
use flearn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use flearn::editors::{run_editor, strategy_knowledge_vector, EditorKind, EditorStrategy};
use flearn::eval::{evaluate, DEFAULT_MAX_NEW};
use flearn::experiments::{compare_strategies, lambda_sweep, time_strategies, DeskLab, DeskSetup};
use flearn::lora::{init_adapters, lora_fine_tune, merge_adapters};
use flearn::model::{init_model, names};
use flearn::trainer::{fine_tune, fine_tune_constrained, FtcConfig};

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    hard: bool,
    detail: String,
    seconds: f64,
}

struct Run {
    outcomes: Vec<Outcome>,
}

impl Run {
    fn record(&mut self, id: usize, title: &'static str, hard: bool, start: Instant, result: (bool, String)) {
        let outcome = Outcome {
            id,
            title,
            pass: result.0,
            hard,
            detail: result.1,
            seconds: start.elapsed().as_secs_f64(),
        };
        eprintln!("  criterion {id} done in {:.1} s", outcome.seconds);
        self.outcomes.push(outcome);
    }
}

fn bit_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gradients() -> (bool, String) {
    let mut worst = (String::new(), 0.0f64);
    for seed in [1, 2] {
        let params = init_model(&grad_config(seed)).unwrap();
        for (name, err) in finite_difference_errors(&params, &grad_batch()) {
            if err >= worst.1 {
                worst = (name, err);
            }
        }
    }
    (worst.1 <= FD_MAX_REL, format!("worst relative error {:.2e} on {}", worst.1, worst.0))
}

fn arithmetic(lab: &DeskLab, dir: &Path) -> (bool, String) {
    let delta = extract_delta(&lab.original, &lab.base).unwrap();
    let zero = apply_forgetting(&lab.original, &delta, ForgettingRate::new(0.0).unwrap()).unwrap();
    let identity = zero.bit_eq(&lab.original);

    let back = scaled_subtract(&lab.base, &delta, -1.0).unwrap();
    let mut worst = 0.0f64;
    for (name, t) in back.tensors().iter() {
        let want = lab.original.get(name).unwrap();
        let norm = want.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(t.distance(want) / norm.max(f64::MIN_POSITIVE));
    }

    let path = dir.join("original.flrn");
    save_checkpoint(&Checkpoint::from(lab.original.clone()), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap().into_params().unwrap();
    let round_trip = loaded.bit_eq(&lab.original) && loaded.config() == lab.original.config();

    (
        identity && worst <= 1e-6 && round_trip,
        format!("λ=0 identity {identity}, reconstruction error {worst:.1e}, checkpoint round trip {round_trip}"),
    )
}

fn lora_support(lab: &DeskLab, desk: &DeskSetup) -> (bool, String) {
    let s = desk.strategy(EditorKind::Lora);
    let cfg = s.learn_lora_config().unwrap();
    let fresh = init_adapters(lab.original.config(), &cfg).unwrap();
    let noop = merge_adapters(&lab.original, &fresh).unwrap().bit_eq(&lab.original);

    let mut train = s.learn_train_config();
    train.epochs = 2;
    let trained = lora_fine_tune(&lab.original, &fresh, &lab.corpus.new_records(), &lab.vocab, &train).unwrap();
    let merged = merge_adapters(&lab.original, &trained).unwrap();
    let report = layer_distances(&merged, &lab.original).unwrap();
    let mut stray = Vec::new();
    let mut moved = 0;
    for e in &report.entries {
        let target = matches!(e.family, TensorFamily::Query | TensorFamily::Value);
        if target && e.distance > 0.0 {
            moved += 1;
        } else if target || e.distance != 0.0 {
            stray.push(e.tensor.clone());
        }
    }
    let expected = 2 * lab.original.config().n_layers;
    (
        noop && stray.is_empty() && moved == expected,
        format!("zero-B merge no-op {noop}, {moved}/{expected} query/value tensors moved, other tensors moved: {stray:?}"),
    )
}

fn original_premise(lab: &DeskLab) -> (bool, String) {
    let cfg = lab.original.config();
    let old = lab.corpus.old_eval_records();
    let rep = evaluate(&lab.original, &lab.original, &old, &[], &lab.vocab, DEFAULT_MAX_NEW).unwrap();
    let ok = rep.reliability >= 95.0 && lab.vocab.len() <= 512 && cfg.num_params() <= 1_000_000;
    (
        ok,
        format!(
            "old-fact reliability {:.1}% on {} pairs (base {:.1}% after {} epochs), vocab {}, {} parameters",
            rep.reliability,
            lab.corpus.pairs.len(),
            lab.pretrain_report.old_accuracy,
            lab.pretrain_report.epochs_run,
            lab.vocab.len(),
            cfg.num_params()
        ),
    )
}

fn forgetting_trend(lab: &DeskLab, desk: &DeskSetup) -> (bool, String) {
    let lambdas = [0.1, 0.3, 0.5, 0.7, 0.9];
    let sweep = |kind| {
        lambda_sweep(&lab.original, &lab.corpus, &lab.vocab, &lambdas, &desk.strategy(kind))
            .unwrap()
            .rows
            .iter()
            .map(|r| r.reliability_old)
            .collect::<Vec<_>>()
    };
    let full = sweep(EditorKind::FFt);
    let lora = sweep(EditorKind::FLora);
    let monotone = full.windows(2).all(|w| w[1] <= w[0] + 2.0);
    let lora_weaker = full.iter().zip(&lora).all(|(f, l)| *l >= f - 2.0);
    (
        monotone && lora_weaker,
        format!("old reliability by λ: full_ft {full:?}, lora {lora:?}"),
    )
}

fn ftc_constraint(lab: &DeskLab) -> (bool, String) {
    let configs = [
        FtcConfig::default(),
        FtcConfig {
            target_layer: Some(0),
            epsilon: 1e-3,
            learning_rate: 0.1,
            ..FtcConfig::default()
        },
        FtcConfig {
            epsilon: 0.5,
            steps: 2,
            batch_size: 8,
            ..FtcConfig::default()
        },
    ];
    let n_layers = lab.original.config().n_layers;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut moved = Vec::new();
    for cfg in &configs {
        let out = fine_tune_constrained(&lab.original, &lab.corpus.new_records(), &lab.vocab, cfg).unwrap();
        let trained = names::mlp_tensors(cfg.layer(n_layers).unwrap());
        for (name, t) in out.tensors().iter() {
            let t0 = lab.original.get(name).unwrap();
            if trained.iter().any(|n| n == name) {
                worst_excess = worst_excess.max(t.max_abs_diff(t0) - cfg.epsilon);
            } else if !bit_eq(t.data(), t0.data()) {
                moved.push(name.to_string());
            }
        }
    }
    (
        worst_excess <= 1e-7 && moved.is_empty(),
        format!(
            "{} runs, max deviation minus ε {worst_excess:.2e}, non-target tensors moved: {moved:?}",
            configs.len()
        ),
    )
}

fn collapse(lab: &DeskLab, desk: &DeskSetup) -> (bool, String) {
    let edit = |s: &EditorStrategy| run_editor(s, &lab.original, &lab.corpus, &lab.vocab).unwrap();
    let full = edit(&desk.strategy(EditorKind::FullFt)).params;
    let f_ft = edit(&desk.strategy(EditorKind::FFt).with_rate(ForgettingRate::new(0.0).unwrap())).params;
    let zero_rate = full.bit_eq(&f_ft);

    let s = desk.strategy(EditorKind::FLoraFt);
    let edited = edit(&s).params;
    let old = lab.corpus.old_records();
    let adapters = init_adapters(lab.original.config(), &s.forget_lora_config().unwrap()).unwrap();
    let trained = lora_fine_tune(&lab.original, &adapters, &old, &lab.vocab, &s.forget_train_config()).unwrap();
    let delta = extract_delta(&merge_adapters(&lab.original, &trained).unwrap(), &lab.original).unwrap();
    let forgotten = apply_forgetting(&lab.original, &delta, s.rate.unwrap()).unwrap();
    let manual = fine_tune(&forgotten, &lab.corpus.new_records(), &lab.vocab, &s.learn_train_config()).unwrap();
    let composition = edited.bit_eq(&manual);
    let vector = strategy_knowledge_vector(&s, &lab.original, &old, &lab.vocab).unwrap();
    let same_vector = vector.tensors() == delta.tensors();
    (
        zero_rate && composition && same_vector,
        format!("F_FT(λ=0) = FULL_FT {zero_rate}, F_LORA_FT = composition {composition}"),
    )
}

fn directional(lab: &DeskLab, desk: &DeskSetup, dir: &Path) -> (bool, String) {
    let strategies: Vec<_> = EditorKind::ALL.iter().map(|&k| desk.strategy(k)).collect();
    let table = compare_strategies(&lab.original, &lab.corpus, &lab.vocab, &strategies).unwrap();
    let csv = table.to_csv().unwrap();
    std::fs::write(dir.join("compare.csv"), &csv).unwrap();
    let get = |k: EditorKind| table.row(k.as_str()).unwrap();
    let (full, f_ft) = (get(EditorKind::FullFt), get(EditorKind::FFt));
    let (lora, f_lora) = (get(EditorKind::Lora), get(EditorKind::FLora));
    let mut detail = format!(
        "reliability F_FT {:.1} vs FULL_FT {:.1}; locality F_LORA {:.1} vs LORA {:.1}\n",
        f_ft.reliability, full.reliability, f_lora.locality, lora.locality
    );
    for line in csv.lines() {
        let _ = writeln!(detail, "        {line}");
    }
    (
        f_ft.reliability >= full.reliability - 2.0 && f_lora.locality >= lora.locality - 2.0,
        detail.trim_end().to_string(),
    )
}

fn timing(lab: &DeskLab, desk: &DeskSetup) -> (bool, String) {
    let strategies = [desk.strategy(EditorKind::FullFt), desk.strategy(EditorKind::FFt)];
    let table = time_strategies(&strategies, &lab.original, &lab.corpus, &lab.vocab, &[100]).unwrap();
    let full = table.seconds("full_ft", 100).unwrap();
    let f_ft = table.seconds("f_ft", 100).unwrap();
    let ratio = f_ft / full;
    (
        (1.5..=3.0).contains(&ratio),
        format!("100 edits: FULL_FT {full:.2} s, F_FT {f_ft:.2} s, ratio {ratio:.2}"),
    )
}

fn layer_trend(lab: &DeskLab, desk: &DeskSetup) -> (bool, String) {
    let s = desk.strategy(EditorKind::FFt);
    let delta = strategy_knowledge_vector(&s, &lab.original, &lab.corpus.old_records(), &lab.vocab).unwrap();
    let forgotten = apply_forgetting(&lab.original, &delta, ForgettingRate::new(1.0).unwrap()).unwrap();
    let report = layer_distances(&forgotten, &lab.original).unwrap();
    let (mlp, attn) = (report.mean_mlp_distance(), report.mean_attention_distance());
    (mlp > attn, format!("mean MLP distance {mlp:.4}, mean attention distance {attn:.4}"))
}

fn cli_determinism(dir: &Path) -> (bool, String) {
    let steps: &[&[&str]] = &[
        &["gen-data", "--pairs", "24", "--background", "24", "--control", "8", "--seed", "5", "--out", "corpus"],
        &[
            "pretrain", "--corpus", "corpus", "--out", "base.flrn", "--d-model", "16", "--d-ff", "32", "--heads", "2",
            "--epochs", "6", "--seed", "3",
        ],
        &["train-original", "--corpus", "corpus", "--model", "base.flrn", "--out", "orig.flrn", "--epochs", "2"],
        &["forget", "--corpus", "corpus", "--model", "orig.flrn", "--method", "lora", "--lambda", "0.5", "--delta-out", "delta.flrn", "--out", "forgot.flrn"],
        &["learn", "--corpus", "corpus", "--model", "forgot.flrn", "--method", "ft_c", "--out", "learned.flrn"],
        &["edit", "--corpus", "corpus", "--model", "orig.flrn", "--strategy", "f_lora_ft", "--intermediate-out", "mid.flrn", "--out", "edited.flrn"],
        &["eval", "--corpus", "corpus", "--pre", "orig.flrn", "--post", "edited.flrn", "--out", "eval.csv"],
        &["sweep", "--corpus", "corpus", "--model", "orig.flrn", "--lambda", "0.1,0.5,0.9", "--out", "sweep.csv"],
        &["compare", "--corpus", "corpus", "--model", "orig.flrn", "--out", "compare.csv"],
        &["analyze-params", "--model", "edited.flrn", "--other", "orig.flrn", "--out", "dist.csv"],
        &["analyze-params", "--delta", "delta.flrn", "--out", "delta.csv"],
    ];
    let outputs = [
        "corpus/old.jsonl", "corpus/new.jsonl", "corpus/eval.jsonl", "corpus/background.jsonl", "corpus/control.jsonl",
        "base.flrn", "orig.flrn", "delta.flrn", "forgot.flrn", "learned.flrn", "mid.flrn", "edited.flrn", "eval.csv",
        "sweep.csv", "compare.csv", "dist.csv", "delta.csv",
    ];
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|sub| {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).unwrap();
            for args in steps {
                let out = Command::new(env!("CARGO_BIN_EXE_flearn")).current_dir(&d).args(*args).output().unwrap();
                assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            }
            d
        })
        .collect();
    let differing: Vec<_> = outputs
        .iter()
        .filter(|f| std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).unwrap())
        .collect();
    (
        differing.is_empty(),
        format!("{} commands, {} output files compared, differing: {differing:?}", steps.len(), outputs.len()),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let desk = DeskSetup::default();
    let mut run = Run { outcomes: Vec::new() };

    let t = Instant::now();
    run.record(1, "finite-difference gradients", true, t, gradients());
    let ok = run.outcomes[0].seconds < 30.0;
    run.outcomes[0].pass &= ok;

    eprintln!("building the desk lab");
    let t = Instant::now();
    let lab = desk.build().unwrap();
    run.record(4, "original-model premise", true, t, original_premise(&lab));

    let t = Instant::now();
    run.record(2, "arithmetic identities", true, t, arithmetic(&lab, dir));
    let t = Instant::now();
    run.record(3, "LoRA identities", true, t, lora_support(&lab, &desk));
    let t = Instant::now();
    run.record(5, "forgetting trend", true, t, forgetting_trend(&lab, &desk));
    let t = Instant::now();
    run.record(6, "FT-c constraint", true, t, ftc_constraint(&lab));
    let t = Instant::now();
    run.record(7, "strategy collapse", true, t, collapse(&lab, &desk));
    let t = Instant::now();
    run.record(8, "directional comparison", true, t, directional(&lab, &desk, dir));
    let t = Instant::now();
    run.record(9, "timing ratio", true, t, timing(&lab, &desk));
    let t = Instant::now();
    run.record(10, "layer-distance trend (soft)", false, t, layer_trend(&lab, &desk));
    let t = Instant::now();
    run.record(11, "CLI determinism", true, t, cli_determinism(dir));

    let budgets = [(2, 5.0), (3, 120.0), (4, 600.0), (5, 1800.0), (8, 1800.0)];
    for o in &mut run.outcomes {
        if let Some(&(_, limit)) = budgets.iter().find(|(id, _)| *id == o.id) {
            if o.seconds >= limit {
                o.pass = false;
                o.detail.push_str(&format!(" [over the {limit} s budget]"));
            }
        }
    }

    run.outcomes.sort_by_key(|o| o.id);
    println!();
    for o in &run.outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("{verdict} {:>2} {} ({:.1} s): {}", o.id, o.title, o.seconds, o.detail);
    }
    let hard_failures: Vec<_> = run.outcomes.iter().filter(|o| o.hard && !o.pass).map(|o| o.id).collect();
    if hard_failures.is_empty() {
        println!("\nacceptance: all hard criteria pass");
    } else {
        println!("\nacceptance: hard criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
