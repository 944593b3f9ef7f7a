mod common;

use common::{model_from, oracle_report, seq_set, seq_split, Plain};
use hiconcept_core::conceptnet::ConceptModel;
use hiconcept_core::metrics::evaluate_concepts;
use hiconcept_core::targets::{ActivationSet, LinearHead, OutputKind};
use hiconcept_core::trainer::{filter_concepts, history_csv, init_model, load_checkpoint, save_checkpoint, train_concepts, ConceptConfig, TrainSchedule};
use hiconcept_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Four well separated clusters in 6 dimensions under a 2-class head.
fn separable(m: usize) -> (LinearHead, ActivationSet) {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let centers = [
        [3.0, 0.0, 0.0, 0.5, 0.0, 0.0],
        [0.0, 3.0, 0.0, 0.0, 0.5, 0.0],
        [0.0, 0.0, 3.0, 0.0, 0.0, 0.5],
        [0.5, 0.0, 0.0, 0.0, 3.0, 0.0],
    ];
    let rows = Tensor::from_fn(&[m, 6], |k| centers[(k / 6) % 4][k % 6] + r.random_range(-0.3..0.3));
    let head = LinearHead::new(
        Tensor::new(&[6, 2], vec![1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0]).unwrap(),
        Tensor::zeros(&[2]),
        OutputKind::Softmax,
    );
    (head, seq_set(&rows))
}

fn config(epochs: usize, causal_on: Option<usize>) -> ConceptConfig {
    ConceptConfig {
        n: 5,
        hidden: 16,
        schedule: TrainSchedule {
            epochs,
            causal_on_epoch: causal_on,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn run(cfg: &ConceptConfig) -> (ConceptModel, Vec<f64>) {
    let (head, acts) = separable(400);
    let model = init_model(&head, cfg).unwrap();
    let out = train_concepts(model, &head, &acts, cfg).unwrap();
    let racc = out.history.iter().map(|h| h.racc).collect();
    (out.model, racc)
}

#[test]
fn training_is_deterministic() {
    let cfg = config(4, None);
    let (a, ra) = run(&cfg);
    let (b, rb) = run(&cfg);
    assert_eq!(a.state_hash(), b.state_hash());
    assert_eq!(ra, rb);
    let mut other = cfg.clone();
    other.schedule.seed = 4;
    assert_ne!(run(&other).0.state_hash(), a.state_hash());
}

#[test]
fn decoder_is_frozen_once_the_causal_phase_starts() {
    let (long, _) = run(&config(6, Some(3)));
    let (short, _) = run(&config(3, Some(3)));
    assert_eq!(long.decoder_hash(), short.decoder_hash());
    assert_ne!(long.state_hash(), short.state_hash(), "concepts keep training in phase 2");
}

#[test]
fn surrogate_recovers_a_separable_head() {
    let cfg = config(30, None);
    let (model, racc) = run(&cfg);
    let phase1_end = racc[cfg.schedule.causal_on() - 1];
    assert!(phase1_end >= racc[0], "{racc:?}");
    let (head, acts) = separable(400);
    let rep = evaluate_concepts(&model, &head, &acts, 64).unwrap();
    assert!(rep.racc >= 0.95, "RAcc {}", rep.racc);
}

#[test]
fn history_rows_and_csv() {
    let (head, acts) = separable(200);
    let cfg = config(3, Some(1));
    let out = train_concepts(init_model(&head, &cfg).unwrap(), &head, &acts, &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.history[0].l_cau, 0.0);
    assert!(out.history[1].l_cau < 0.0);
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().next().unwrap(), "epoch,l_rec,l_reg,l_enc,l_cau,racc");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn checkpoint_roundtrip() {
    let (model, _) = run(&config(2, None));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("concepts.bin");
    save_checkpoint(&model, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.state_hash(), model.state_hash());
    assert_eq!(back.active, model.active);
}

#[test]
fn invalid_configs_list_every_problem() {
    let mut cfg = config(0, None);
    cfg.n = 1;
    cfg.beta = Some(1.5);
    let e = cfg.validate().unwrap_err().to_string();
    for needle in ["n must be", "beta", "epochs"] {
        assert!(e.contains(needle), "{e}");
    }
}

/// Ten concepts plus context, where 2, 5 and 7 barely reach the decoder.
fn filter_fixture() -> (ConceptModel, LinearHead, Tensor<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let (n, d, h) = (11, 4, 12);
    let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let vectors = u(&[n, d]);
    let mut w1 = u(&[n, h]);
    for i in [2, 5, 7] {
        w1.row_mut(i).iter_mut().for_each(|v| *v *= 1e-9);
    }
    let model = model_from(vectors, 0.05, w1, u(&[h]), u(&[h, d]), u(&[d]), seq_split());
    let head = LinearHead::new(u(&[d, 3]), u(&[3]), OutputKind::Softmax);
    let acts = u(&[300, d]);
    (model, head, acts)
}

#[test]
fn filtering_switches_off_exactly_the_weak_concepts() {
    let (model, head, acts) = filter_fixture();
    let xs: Vec<Vec<f64>> = acts.data().chunks(4).map(|r| r.to_vec()).collect();
    let oracle = oracle_report(&Plain::from(&model, &head), &xs, 10);
    let eps = 1e-4;
    let weak: Vec<usize> = (0..10).filter(|&i| oracle.impact[i] < eps).collect();
    assert_eq!(weak, vec![2, 5, 7], "{:?}", oracle.impact);
    let out = filter_concepts(&model, &head, &seq_set(&acts), eps, 64).unwrap();
    assert_eq!(out.deactivated, weak);
    assert!(out.restored.is_empty());
    assert!(out.racc_after >= out.racc_before);
    for i in 0..11 {
        assert_eq!(out.model.active[i], !weak.contains(&i));
    }
    // Switched-off concepts are left out of the reported metrics.
    let rep = evaluate_concepts(&out.model, &head, &seq_set(&acts), 64).unwrap();
    assert_eq!(rep.effective_concepts, 7);
}
