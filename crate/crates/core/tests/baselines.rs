use hiconcept_core::baselines::{discover_baseline_concepts, fit_baseline, kmeans, make_ablation_config, pca, BaselineConfig, BaselineMethod, ABLATIONS};
use hiconcept_core::targets::{ActivationBatch, ActivationSet, Granularity, LinearHead, OutputKind, SplitPoint};
use hiconcept_core::trainer::{ConceptConfig, TrainSchedule};
use hiconcept_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn seq_set(rows: Tensor<f64>) -> ActivationSet {
    let split = SplitPoint {
        layer_index: 0,
        granularity: Granularity::SequenceLevel,
    };
    let mut s = ActivationSet::new(split, rows.shape()[1]);
    s.push(&ActivationBatch { values: rows, mask: None });
    s
}

fn two_clusters(m: usize) -> (Tensor<f64>, [Vec<f64>; 2]) {
    let d = 6;
    let noise = normal(&[m, d], 3);
    let mu = [vec![5.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 4.0, 2.0, 0.0]];
    let data = Tensor::from_fn(&[m, d], |k| mu[(k / d) % 2][k % d] + 0.3 * noise.data()[k]);
    (data, mu)
}

#[test]
fn kmeans_finds_two_clusters() {
    let (data, mu) = two_clusters(400);
    let c = kmeans(&data, 2, 0, 100).unwrap();
    for m in &mu {
        let best = (0..2).map(|i| cos(c.row(i), m)).fold(f64::MIN, f64::max);
        assert!(best >= 0.99, "{best}");
    }
    assert_eq!(c, kmeans(&data, 2, 0, 100).unwrap());
}

#[test]
fn pca_on_isotropic_data_has_flat_spectrum() {
    let p = pca(&normal(&[10_000, 20], 5), 20).unwrap();
    let max = p.explained_variance.iter().cloned().fold(f64::MIN, f64::max);
    let min = p.explained_variance.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min < 1.5, "{max} / {min}");
    assert!((p.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn pca_recovers_dominant_axis() {
    let noise = normal(&[2000, 4], 9);
    let data = Tensor::from_fn(&[2000, 4], |k| if k % 4 == 2 { 10.0 * noise.data()[k] } else { noise.data()[k] });
    let p = pca(&data, 1).unwrap();
    assert!(p.components.row(0)[2] > 0.99);
}

#[test]
fn baseline_sets_add_a_context_concept() {
    let (data, _) = two_clusters(200);
    let acts = seq_set(data);
    for method in [BaselineMethod::Kmeans, BaselineMethod::Pca] {
        let cfg = BaselineConfig {
            method,
            n_components: 3,
            beta_override: None,
        };
        let cs = discover_baseline_concepts(method, &acts, &cfg, 0).unwrap();
        assert_eq!(cs.n(), 4);
        assert!((cs.beta - 0.25).abs() < 1e-12);
    }
    let cfg = BaselineConfig {
        n_components: 30,
        ..Default::default()
    };
    let err = discover_baseline_concepts(BaselineMethod::Kmeans, &acts, &cfg, 0).unwrap_err();
    assert!(err.to_string().contains("300"), "{err}");
}

#[test]
fn fitted_baselines_keep_their_directions() {
    let (data, _) = two_clusters(200);
    let acts = seq_set(data);
    let head = LinearHead::new(normal(&[6, 2], 1), Tensor::zeros(&[2]), OutputKind::Softmax);
    let cfg = BaselineConfig {
        n_components: 2,
        ..Default::default()
    };
    let train = ConceptConfig {
        hidden: 8,
        schedule: TrainSchedule {
            epochs: 3,
            batch_size: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let cs = discover_baseline_concepts(cfg.method, &acts, &cfg, 0).unwrap();
    let out = fit_baseline(&head, &acts, &cfg, &train).unwrap();
    assert_eq!(out.model.vectors(), &cs.vectors);
    assert!(out.history.iter().all(|h| h.l_cau == 0.0));
}

#[test]
fn ablation_grid_has_six_distinct_rows() {
    let rows: Vec<_> = ABLATIONS.iter().map(|n| make_ablation_config(n).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            assert_ne!((a.weights, a.use_rec, a.beta), (b.weights, b.use_rec, b.beta), "{} == {}", a.name, b.name);
        }
    }
    let base = ConceptConfig::default();
    let shap = make_ablation_config("conceptshap_mode").unwrap().apply(&base);
    assert_eq!((shap.weights.lambda_e, shap.weights.lambda_c, shap.beta), (0.0, 0.0, Some(0.3)));
    assert!(!make_ablation_config("no_rec").unwrap().apply(&base).use_rec);
}
