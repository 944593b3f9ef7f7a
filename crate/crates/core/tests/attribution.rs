mod common;

use common::{model_from, t};
use hiconcept_core::attribution::{saliency_batch, saliency_scores, LinearTokenEncoder, Method};
use hiconcept_core::conceptnet::ConceptModel;
use hiconcept_core::targets::{Granularity, SplitPoint};
use hiconcept_tensor::Tensor;

fn table() -> Tensor<f64> {
    // Row 0 is padding.
    t(
        &[6, 3],
        &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.6, 0.3, -0.2, -0.4, 0.9, 0.5],
    )
}

fn weight() -> Tensor<f64> {
    t(&[3, 3], &[1.0, 0.2, 0.0, -0.3, 0.8, 0.1, 0.2, 0.1, 1.1])
}

fn model(g: Granularity) -> ConceptModel {
    let split = SplitPoint {
        layer_index: 0,
        granularity: g,
    };
    model_from(
        t(&[3, 3], &[1.0, 0.3, 0.1, 0.0, 1.0, 0.2, 0.2, 0.2, 1.0]),
        0.1,
        Tensor::zeros(&[3, 2]),
        Tensor::zeros(&[2]),
        Tensor::zeros(&[2, 3]),
        Tensor::zeros(&[3]),
        split,
    )
}

fn encoder(g: Granularity) -> LinearTokenEncoder {
    LinearTokenEncoder {
        table: table(),
        weight: weight(),
        granularity: g,
    }
}

fn matvec(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    (0..w.shape()[1]).map(|j| (0..x.len()).map(|i| x[i] * w.data()[i * w.shape()[1] + j]).sum()).collect()
}

/// Closed-form `grad x input` for the sequence-level linear encoder.
fn closed_form(doc: &[u32], concept: &[f64], beta: f64) -> Vec<f64> {
    let tab = table();
    let w = weight();
    let tn = doc.len() as f64;
    let mut a = vec![0.0; 3];
    for &id in doc {
        for (s, v) in a.iter_mut().zip(matvec(tab.row(id as usize), &w)) {
            *s += v / tn;
        }
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = concept.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cosv: f64 = a.iter().zip(concept).map(|(x, y)| x * y).sum::<f64>() / (na * nc);
    assert!(cosv > beta + 1e-3, "fixture must activate the concept");
    // d cos / d a
    let ga: Vec<f64> = (0..3).map(|k| concept[k] / (na * nc) - cosv * a[k] / (na * na)).collect();
    // d a / d e_t = W / T, so d p / d e_t = W ga / T.
    let ge: Vec<f64> = (0..3).map(|i| (0..3).map(|j| w.data()[i * 3 + j] * ga[j]).sum::<f64>() / tn).collect();
    let raw: Vec<f64> = doc
        .iter()
        .map(|&id| tab.row(id as usize).iter().zip(&ge).map(|(e, g)| (e * g).abs()).sum())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn grad_input_matches_closed_form() {
    let m = model(Granularity::SequenceLevel);
    let enc = encoder(Granularity::SequenceLevel);
    let c0 = m.vectors().row(0).to_vec();
    let doc = [1u32, 4, 5, 2];
    let r = saliency_scores(&m, &enc, &doc, 0, Method::GradInput).unwrap();
    let want = closed_form(&doc, &c0, m.beta);
    for (a, b) in r.scores.iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{:?} vs {want:?}", r.scores);
    }
    assert!(!r.uniform_fallback);
}

#[test]
fn token_similarity_on_one_hot_tokens() {
    let m = model(Granularity::TokenLevel);
    // Identity projection: tokens 1, 2, 3 are the unit axes.
    let enc = LinearTokenEncoder {
        table: table(),
        weight: t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        granularity: Granularity::TokenLevel,
    };
    // Cosines with concept 0 are (1, .3, .1) / sqrt(1.1); the last is below beta.
    let r = saliency_scores(&m, &enc, &[1, 2, 3], 0, Method::TokenSimilarity).unwrap();
    let want = [1.0 / 1.3, 0.3 / 1.3, 0.0];
    for (a, b) in r.scores.iter().zip(want) {
        assert!((a - b).abs() < 1e-9, "{:?}", r.scores);
    }
    let doc = [1u32, 3];
    // Sequence-level encoders cannot give per-token probabilities.
    let seq = model(Granularity::SequenceLevel);
    assert!(saliency_scores(&seq, &encoder(Granularity::SequenceLevel), &doc, 0, Method::TokenSimilarity).is_err());
}

#[test]
fn duplicate_tokens_score_equally() {
    for g in [Granularity::SequenceLevel, Granularity::TokenLevel] {
        let m = model(g);
        let enc = encoder(g);
        for method in [Method::GradInput, Method::TokenSimilarity] {
            if method == Method::TokenSimilarity && g == Granularity::SequenceLevel {
                continue;
            }
            let r = saliency_scores(&m, &enc, &[4, 2, 4, 5], 1, method).unwrap();
            assert!((r.scores[0] - r.scores[2]).abs() < 1e-12, "{g:?} {method:?} {:?}", r.scores);
            assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_does_not_change_scores() {
    for g in [Granularity::SequenceLevel, Granularity::TokenLevel] {
        let m = model(g);
        let enc = encoder(g);
        let short: &[u32] = &[4, 1];
        let long: &[u32] = &[5, 2, 3, 4, 1, 1];
        let alone = saliency_scores(&m, &enc, short, 2, Method::GradInput).unwrap();
        let batched = saliency_batch(&m, &enc, &[short, long], &[2, 0], Method::GradInput).unwrap();
        assert_eq!(batched[0].scores.len(), 2);
        for (a, b) in alone.scores.iter().zip(&batched[0].scores) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
    }
}

#[test]
fn inactive_concept_falls_back_to_uniform() {
    let m = model(Granularity::TokenLevel);
    let enc = encoder(Granularity::TokenLevel);
    // The padding row has zero norm, so no concept fires on it.
    let r = saliency_scores(&m, &enc, &[0], 2, Method::TokenSimilarity).unwrap();
    assert!(r.uniform_fallback);
    assert_eq!(r.scores, vec![1.0]);
}
