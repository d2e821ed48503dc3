//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use germeval_harness::augmentation::{self, ExternalDataset, ExternalEntry, LabelMapping};
use germeval_harness::autodiff::Precision;
use germeval_harness::backbones::tiny_test_spec;
use germeval_harness::corpus::{
    self, load_labeled_corpus, synthetic_marker_corpus, ColumnSchema, Entry, Label, LabelSet, LabeledDataset,
};
use germeval_harness::inference::{self, ModelSet, PredictionSet, SubmissionFormat};
use germeval_harness::metrics::{confusion, f1_from_pr, prf1, ConfusionCounts};
use germeval_harness::tracking::{Metric, RunStore};
use germeval_harness::training::{
    self, detect_overfitting_scores, init_classifier, loss_and_gradients, targets_and_weights, tokenizer_for,
    TrainConfig, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < budget, || format!("took {took:?}, budget {budget:?}"))?;
    Ok(took)
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs,
        batch_size: 16,
        max_len: 64,
        seed: 42,
        mode: TrainMode::PerSubtask(Label::Toxic),
        ..TrainConfig::default()
    }
}

fn reported_scores_consistency() -> Outcome {
    let t = Instant::now();
    // (model, subtask, precision, recall, printed F1)
    let rows = [
        ("gelectra", "toxic", 0.743, 0.675, 0.707),
        ("gelectra", "engaging", 0.694, 0.700, 0.697),
        ("gelectra", "fact_claiming", 0.728, 0.740, 0.734),
        ("gerpt2", "toxic", 0.678, 0.640, 0.658),
        ("gerpt2", "engaging", 0.684, 0.696, 0.690),
        ("gerpt2", "fact_claiming", 0.736, 0.735, 0.736),
    ];
    let mut worst: f64 = 0.0;
    for (model, task, p, r, f) in rows {
        let got = f1_from_pr(p, r);
        worst = worst.max((got - f).abs());
        ensure((got - f).abs() <= 0.002, || format!("{model}/{task}: {got:.4} vs {f}"))?;
    }
    let took = within(t, Duration::from_secs(1))?;
    Ok(format!("6 rows, max |dF1|={worst:.4}, {took:?}"))
}

fn naive_counts(pred: &[u8], gold: &[u8]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        match (pred[i], gold[i]) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    c
}

fn naive_f1(c: &ConfusionCounts) -> f64 {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let n = rng.gen_range(0..=200);
        let density: f64 = rng.gen();
        let pred: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(density))).collect();
        let gold: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let c = confusion(&pred, &gold).map_err(|e| e.to_string())?;
        let naive = naive_counts(&pred, &gold);
        ensure(c == naive, || format!("trial {trial}: {c:?} vs {naive:?}"))?;
        let f = prf1(&c).f1;
        ensure(f == naive_f1(&naive), || format!("trial {trial}: f1 {f} vs {}", naive_f1(&naive)))?;
    }
    let took = within(t, Duration::from_secs(10))?;
    Ok(format!("1000 instances exact, {took:?}"))
}

fn harmonic_and_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..10_000 {
        let c = ConfusionCounts {
            tp: rng.gen_range(0..500),
            fp: rng.gen_range(0..500),
            fn_: rng.gen_range(0..500),
            tn: rng.gen_range(0..500),
        };
        let m = prf1(&c);
        let expected = if m.precision + m.recall == 0.0 {
            0.0
        } else {
            2.0 * m.precision * m.recall / (m.precision + m.recall)
        };
        ensure((m.f1 - expected).abs() <= 1e-12, || format!("#{i} {c:?}: harmonic {} vs {expected}", m.f1))?;
        let swapped = prf1(&ConfusionCounts {
            fp: c.fn_,
            fn_: c.fp,
            ..c
        });
        ensure((swapped.precision - m.recall).abs() <= 1e-12 && (swapped.recall - m.precision).abs() <= 1e-12, || {
            format!("#{i} {c:?}: swap")
        })?;
        ensure((swapped.f1 - m.f1).abs() <= 1e-12, || format!("#{i} {c:?}: swapped f1"))?;
    }
    Ok("10000 confusion counts".into())
}

fn end_to_end_tiny_run() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synthetic_marker_corpus(200, 2021);
    let split = corpus::split(&data, 0.8, 42).map_err(|e| e.to_string())?;
    let spec = tiny_test_spec();
    let cfg = tiny_config(5);
    let mut losses = Vec::new();
    let mut best = 0.0;
    for k in 0..2 {
        let store = RunStore::open(dir.path().join(format!("runs{k}.jsonl"))).map_err(|e| e.to_string())?;
        let (_, rec) = training::fine_tune(&split, &spec, &cfg, &store).map_err(|e| e.to_string())?;
        ensure(rec.epoch_history.len() == 5, || format!("{} epochs recorded", rec.epoch_history.len()))?;
        let (f1, _) = rec.best(Metric::F1(Label::Toxic)).ok_or("no validation F1")?;
        best = f1;
        ensure(f1 >= 0.95, || format!("best validation F1 {f1:.4} < 0.95"))?;
        losses.push(rec.epoch_history.iter().map(|e| e.train_loss).collect::<Vec<_>>());
    }
    ensure(losses[0] == losses[1], || format!("loss sequences differ: {:?} vs {:?}", losses[0], losses[1]))?;
    let took = within(t, Duration::from_secs(120))?;
    Ok(format!("F1={best:.3}, identical losses over 2 runs, {took:?}"))
}

fn gradient_check() -> Outcome {
    let data = synthetic_marker_corpus(24, 9);
    let spec = tiny_test_spec();
    let texts: Vec<&str> = data.entries().iter().map(|e| e.comment.text.as_str()).collect();
    let tok = tokenizer_for(&spec, &texts).map_err(|e| e.to_string())?;
    let mut c = init_classifier(&spec, tok.vocab_size(), 3, 13, &[]).map_err(|e| e.to_string())?;
    let batch = tok.encode_batch(&texts, 64).map_err(|e| e.to_string())?;
    let golds: Vec<&LabelSet> = data.entries().iter().map(|e| &e.labels).collect();
    let (targets, weights) = targets_and_weights(&golds, &Label::ALL);
    let (_, grads) =
        loss_and_gradients(&c, &batch, &targets, &weights, Precision::Fp32, None).map_err(|e| e.to_string())?;
    let head = c.head_parameter_range();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-2f32;
    let mut worst: f64 = 0.0;
    let coords = 24;
    for _ in 0..coords {
        let slot = if rng.gen_bool(0.75) { head.start } else { head.start + 1 };
        let len = c.parameters()[slot].len();
        let i = rng.gen_range(0..len);
        let analytic = grads
            .iter()
            .find(|(s, _)| *s == slot)
            .map_or(0.0, |(_, g)| g.data[i] as f64);
        let orig = c.parameters()[slot].data[i];
        let mut loss_at = |v: f32| {
            c.parameters_mut()[slot].data[i] = v;
            training::batch_loss(&c, &batch, &targets, &weights, Precision::Fp32)
        };
        let plus = loss_at(orig + h).map_err(|e| e.to_string())?;
        let minus = loss_at(orig - h).map_err(|e| e.to_string())?;
        loss_at(orig).map_err(|e| e.to_string())?;
        let numeric = (plus - minus) / (2.0 * h as f64);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        ensure(rel <= 1e-3, || {
            format!("slot {slot}[{i}]: analytic {analytic:.6e} numeric {numeric:.6e} rel {rel:.2e}")
        })?;
    }
    Ok(format!("{coords} head coordinates, max rel err {worst:.2e}"))
}

fn split_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut rejected = 0;
    for trial in 0..500 {
        let n = rng.gen_range(2..=500);
        let ratio = rng.gen_range(0.05..0.95);
        let seed = rng.gen();
        let entries: Vec<Entry> = (0..n)
            .map(|i| Entry::new(format!("c{i}"), format!("text {i}"), LabelSet::from_bits(0, 0, 0)))
            .collect();
        let ds = LabeledDataset::new("trial", entries).map_err(|e| e.to_string())?;
        let expected = (ratio * n as f64 + 1e-9).floor() as usize;
        if expected == 0 || expected == n {
            ensure(corpus::split(&ds, ratio, seed).is_err(), || format!("trial {trial}: empty side accepted"))?;
            rejected += 1;
            continue;
        }
        let s = corpus::split(&ds, ratio, seed).map_err(|e| e.to_string())?;
        let train: BTreeSet<&str> = s.train.ids().collect();
        let val: BTreeSet<&str> = s.validation.ids().collect();
        let all: BTreeSet<&str> = ds.ids().collect();
        ensure(train.is_disjoint(&val), || format!("trial {trial}: overlap"))?;
        ensure(train.union(&val).copied().collect::<BTreeSet<_>>() == all, || format!("trial {trial}: union"))?;
        ensure(s.train.len() == expected, || format!("trial {trial}: n={n} ratio={ratio} train={}", s.train.len()))?;
        let again = corpus::split(&ds, ratio, seed).map_err(|e| e.to_string())?;
        ensure(again.manifest() == s.manifest(), || format!("trial {trial}: not deterministic"))?;
    }
    Ok(format!("500 trials, {rejected} with an empty side rejected"))
}

fn overfitting_detector() -> Outcome {
    // (history, patience, flag, best_epoch)
    let cases: [(&[f64], usize, bool, usize); 8] = [
        (&[0.60, 0.70, 0.68, 0.65], 2, true, 2),
        (&[0.60, 0.70, 0.68, 0.65], 3, false, 2),
        (&[0.60, 0.70, 0.72, 0.74], 2, false, 4),
        (&[0.60, 0.70, 0.70, 0.69], 2, false, 2),
        (&[0.70, 0.65], 1, true, 1),
        (&[0.70], 1, false, 1),
        (&[0.50, 0.80, 0.80, 0.79, 0.78], 2, true, 2),
        (&[0.60, 0.55, 0.70, 0.65, 0.60], 2, true, 3),
    ];
    for (h, p, flag, best) in cases {
        let s = detect_overfitting_scores(h, p).map_err(|e| e.to_string())?;
        ensure(s.overfitting == flag && s.best_epoch == best, || {
            format!("{h:?} p={p}: got ({}, {}), want ({flag}, {best})", s.overfitting, s.best_epoch)
        })?;
    }
    Ok(format!("{} histories", cases.len()))
}

fn augmentation_recipe() -> Outcome {
    let base = synthetic_marker_corpus(120, 3);
    let labels = ["OFFENSE", "OTHER", "PROFANITY", "NOISE"];
    let external = ExternalDataset {
        source_tag: "ext".into(),
        entries: (0..40)
            .map(|i| ExternalEntry {
                id: (i + 1).to_string(),
                text: format!("externer kommentar {i}"),
                source_label: labels[i % labels.len()].into(),
            })
            .collect(),
    };
    let mapping = LabelMapping::parse(
        "OFFENSE\ttoxic_present\nPROFANITY\ttoxic_present\nOTHER\ttoxic_absent\nNOISE\tdrop\n",
        "mapping",
    )
    .map_err(|e| e.to_string())?;
    let paired = augmentation::paired_splits(&base, &external, &mapping, 0.8, 5).map_err(|e| e.to_string())?;
    let leaked: Vec<&str> = paired
        .augmented
        .validation
        .ids()
        .chain(paired.baseline.validation.ids())
        .filter(|id| paired.external_ids.contains(*id) || id.starts_with("ext:"))
        .collect();
    ensure(leaked.is_empty(), || format!("external ids in validation: {leaked:?}"))?;
    ensure(paired.augmented.validation == paired.baseline.validation, || "validation sets differ".into())?;
    let nb = paired.baseline.train.len();
    ensure(paired.augmented.train.entries()[..nb] == *paired.baseline.train.entries(), || {
        "base train entries altered".into()
    })?;
    for e in paired.baseline.train.entries().iter().chain(paired.baseline.validation.entries()) {
        ensure(base.get(e.id()) == Some(e), || format!("base entry {} altered", e.id()))?;
    }
    let r = &paired.report;
    ensure(r.base_count + r.external_count - r.drop_count == r.merged_count && r.reconciles(), || {
        format!("report does not reconcile: {r:?}")
    })?;
    ensure(r.merged_count == paired.augmented.train.len(), || "merged count vs train size".into())?;
    Ok(format!(
        "base={} external={} dropped={} merged={}",
        r.base_count, r.external_count, r.drop_count, r.merged_count
    ))
}

fn submission_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synthetic_marker_corpus(80, 4);
    let store = RunStore::open(dir.path().join("runs.jsonl")).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        mode: TrainMode::JointMultilabel,
        ..tiny_config(2)
    };
    let (model, _) = training::train_on_full_data(&data, &tiny_test_spec(), &cfg, &store).map_err(|e| e.to_string())?;
    let preds = inference::predict(&ModelSet::Joint(model), &data.comments(), 0.5).map_err(|e| e.to_string())?;
    let json = dir.path().join("predictions.json");
    preds.save(&json).map_err(|e| e.to_string())?;
    let preds = PredictionSet::load(&json).map_err(|e| e.to_string())?;
    for format in [SubmissionFormat::Csv, SubmissionFormat::Tsv] {
        let first = dir.path().join("first.txt");
        let second = dir.path().join("second.txt");
        inference::export_submission(&preds, &first, format).map_err(|e| e.to_string())?;
        let back = load_labeled_corpus(&first, &ColumnSchema::submission(format.delimiter())).map_err(|e| e.to_string())?;
        ensure(back.len() == preds.predictions.len(), || "row count".into())?;
        for (e, p) in back.entries().iter().zip(&preds.predictions) {
            ensure(e.id() == p.id && e.labels == p.label_set(), || format!("decisions differ for {}", p.id))?;
        }
        inference::export_submission(&PredictionSet::load(&json).map_err(|e| e.to_string())?, &second, format)
            .map_err(|e| e.to_string())?;
        let (a, b) = (std::fs::read(&first).map_err(|e| e.to_string())?, std::fs::read(&second).map_err(|e| e.to_string())?);
        ensure(a == b, || format!("{format:?} re-export differs"))?;
    }
    Ok(format!("{} rows, csv and tsv", preds.predictions.len()))
}

fn store_crash_safety() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("runs.jsonl");
    let store = RunStore::open(&path).map_err(|e| e.to_string())?;
    let split = corpus::split(&synthetic_marker_corpus(40, 6), 0.75, 1).map_err(|e| e.to_string())?;
    for lr in [3e-3, 1e-3] {
        let cfg = TrainConfig {
            learning_rate: lr,
            ..tiny_config(2)
        };
        training::fine_tune(&split, &tiny_test_spec(), &cfg, &store).map_err(|e| e.to_string())?;
    }
    let full = std::fs::read(&path).map_err(|e| e.to_string())?;
    let events = store.events().map_err(|e| e.to_string())?;
    let line_ends: Vec<usize> = full.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1).collect();
    ensure(line_ends.len() == events.len(), || "one line per event".into())?;
    let mut cuts = 0;
    for cut in 1..full.len() {
        if line_ends.contains(&cut) {
            continue;
        }
        std::fs::write(&path, &full[..cut]).map_err(|e| e.to_string())?;
        let complete = line_ends.iter().filter(|&&e| e <= cut).count();
        let got = store.events().map_err(|e| format!("cut {cut}: {e}"))?;
        ensure(got[..] == events[..complete], || format!("cut {cut}: {} events reloaded, {complete} expected", got.len()))?;
        cuts += 1;
    }
    // Tearing the last line loses only the last event.
    std::fs::write(&path, &full[..full.len() - 2]).map_err(|e| e.to_string())?;
    let got = store.events().map_err(|e| e.to_string())?;
    ensure(got[..] == events[..events.len() - 1], || "more than the final event lost".into())?;
    let records = store.load().map_err(|e| e.to_string())?;
    ensure(records.len() == 2, || format!("{} runs reload", records.len()))?;
    Ok(format!("{} events, {cuts} mid-line cuts", events.len()))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("reported_scores_consistency", reported_scores_consistency),
        ("metrics_oracle_equivalence", oracle_equivalence),
        ("harmonic_mean_and_swap_symmetry", harmonic_and_symmetry),
        ("end_to_end_tiny_run", end_to_end_tiny_run),
        ("head_gradient_check", gradient_check),
        ("split_properties", split_properties),
        ("overfitting_detector", overfitting_detector),
        ("augmentation_paired_recipe", augmentation_recipe),
        ("submission_round_trip", submission_round_trip),
        ("run_store_crash_safety", store_crash_safety),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
