use nhi_core::domain::{ActivityGroup, TaskKind, TaskSpec};
use nhi_core::mil::{self, BagView};
use nhi_core::par::Exec;
use nhi_core::synthetic::{self, SyntheticData, SyntheticSpec};
use nhi_core::training::{self, Split, SplitRatios, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(signal: f64, seed: u64) -> SyntheticData {
    synthetic::generate(&SyntheticSpec {
        cases_per_grade: [12; 5],
        tiles_per_slide: (10, 20),
        dim: 24,
        signal_fraction: [signal; 5],
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

/// Same shape as the end-to-end experiment: 150 cases, d = 64, separation 10.
fn full_cohort() -> SyntheticData {
    synthetic::generate(&SyntheticSpec::default()).unwrap()
}

fn config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs,
        patience: max_epochs.min(20),
        attention_dim: 16,
        ..TrainConfig::default()
    }
}

fn splits(data: &SyntheticData) -> training::SplitAssignment {
    let cases: Vec<&str> = data.store.bags.iter().map(|b| b.case_id.as_str()).collect();
    let ratios = SplitRatios {
        train: 0.8,
        preliminary: 0.0,
        final_test: 0.2,
    };
    training::make_splits(&cases, &ratios, 5, 0).unwrap()
}

fn held_out_accuracy(data: &SyntheticData, model: &mil::MilModel) -> (f64, Vec<f64>) {
    let s = splits(data);
    let (mut hits, mut n, mut p_hi) = (0, 0, Vec::new());
    for bag in &data.store.bags {
        if s.get(&bag.case_id).unwrap().split != Split::Final {
            continue;
        }
        let x = bag.to_f64();
        let trace = mil::predict(model, &BagView::new(&x, bag.dim).unwrap()).unwrap();
        let target = model.task.map_label(bag.label).unwrap();
        hits += usize::from(training::argmax(&trace.probs) == target);
        n += 1;
        if bag.label.group() == ActivityGroup::Hi {
            p_hi.push(trace.probs[1]);
        }
    }
    (hits as f64 / n as f64, p_hi)
}

#[test]
fn planted_signal_is_learned() {
    let data = full_cohort();
    let task = TaskSpec::new(TaskKind::Neutrophil);
    let out = training::train_task(&data.store, &task, &config(100), &splits(&data), Exec::default()).unwrap();
    let best = &out.folds[out.deployed];
    assert!(best.val_accuracy >= 0.95, "validation accuracy {}", best.val_accuracy);
    let (acc, p_hi) = held_out_accuracy(&data, out.deployed_model());
    assert!(acc >= 0.95, "held-out accuracy {acc}");
    assert!(p_hi.iter().all(|&p| p > 0.9), "{p_hi:?}");
    for f in &out.folds {
        assert_eq!(f.history.last().unwrap().best_so_far, f.best_val_loss);
        assert!(f.history.iter().all(|r| r.val_loss >= f.best_val_loss));
    }
}

#[test]
fn without_signal_accuracy_stays_near_chance() {
    let data = cohort(0.0, 2);
    let task = TaskSpec::new(TaskKind::NancyHigh);
    let out = training::train_task(&data.store, &task, &config(15), &splits(&data), Exec::default()).unwrap();
    let (acc, _) = held_out_accuracy(&data, out.deployed_model());
    // four classes, Lo holds 40% of slides
    assert!(acc <= 0.6, "accuracy {acc} without any signal");
}

#[test]
fn patience_zero_runs_one_epoch() {
    let data = cohort(0.2, 3);
    let cfg = TrainConfig {
        patience: 0,
        ..config(5)
    };
    let out = training::train_task(
        &data.store,
        &TaskSpec::new(TaskKind::NancyLow),
        &cfg,
        &splits(&data),
        Exec::default(),
    )
    .unwrap();
    assert!(out.folds.iter().all(|f| f.history.len() == 1 && f.best_epoch == 1));
}

#[test]
fn retraining_is_bit_identical_across_execution_modes() {
    let data = cohort(0.2, 4);
    let task = TaskSpec::new(TaskKind::Neutrophil);
    let run = |exec| {
        training::train_task(&data.store, &task, &config(4), &splits(&data), exec)
            .unwrap()
            .folds
            .iter()
            .map(|f| (f.model.checkpoint_bytes(), training::history_tsv(&f.history)))
            .collect::<Vec<_>>()
    };
    let seq = run(Exec::Sequential);
    assert_eq!(seq, run(Exec::Sequential));
    assert_eq!(seq, run(Exec::Parallel));
}

#[test]
fn missing_class_in_a_fold_is_reported() {
    let mut data = cohort(0.2, 5);
    data.store.bags.retain(|b| b.label.value() <= 1);
    let err = training::train_task(
        &data.store,
        &TaskSpec::new(TaskKind::Neutrophil),
        &config(2),
        &splits(&data),
        Exec::Sequential,
    )
    .unwrap_err();
    assert!(err.to_string().contains("Hi"), "{err}");
}

proptest! {
    #[test]
    fn splits_keep_cases_whole(
        sizes in prop::collection::vec(1usize..5, 10..60),
        seed in any::<u64>(),
    ) {
        let slides: Vec<String> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(format!("case{c}"), k))
            .collect();
        let a = training::make_splits(&slides, &SplitRatios::default(), 5, seed).unwrap();
        prop_assert_eq!(a.cases.len(), sizes.len());
        let n = sizes.len() as f64;
        prop_assert!((a.count(Split::Train) as f64 - 0.7 * n).abs() < 1.0);
        prop_assert!((a.count(Split::Preliminary) as f64 - 0.15 * n).abs() < 1.0);
        prop_assert!((a.count(Split::Final) as f64 - 0.15 * n).abs() < 1.0);
        for s in a.cases.values() {
            prop_assert_eq!(s.fold.is_some(), s.split == Split::Train);
        }
    }

    #[test]
    fn sampler_balances_every_epoch(
        counts in prop::collection::vec(1usize..25, 2..5),
        batch in 1usize..10,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
        let names: Vec<String> = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (mode, target) in [
            (training::Balance::Oversample, *counts.iter().max().unwrap()),
            (training::Balance::Undersample, *counts.iter().min().unwrap()),
        ] {
            let batches = training::balanced_batches(&labels, &names, batch, mode, &mut rng).unwrap();
            prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= batch));
            let flat = batches.concat();
            for c in 0..counts.len() {
                prop_assert_eq!(flat.iter().filter(|&&i| labels[i] == c).count(), target);
            }
        }
    }
}
