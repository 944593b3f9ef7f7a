use hiconcept_core::datagen::{sample_toy_latents, ToyConfig};

fn bit(z: u16, s: usize) -> bool {
    z >> s & 1 == 1
}

fn latents(p_cor: f64, n: usize) -> Vec<u16> {
    sample_toy_latents(&ToyConfig {
        num_samples: n,
        p_cor,
        base_seed: 7,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn confounds_agree_with_their_parent_at_p_cor() {
    let z = latents(0.75, 60_000);
    for s in 0..10 {
        let agree = z.iter().filter(|&&v| bit(v, s) == bit(v, s + 5)).count() as f64 / z.len() as f64;
        assert!((agree - 0.75).abs() < 0.01, "z{} vs z{}: {agree}", s + 1, s + 6);
    }
}

#[test]
fn half_correlation_gives_independent_bits() {
    let z = latents(0.5, 60_000);
    let n = z.len() as f64;
    for s in 0..10 {
        let (a, b): (Vec<f64>, Vec<f64>) = z.iter().map(|&v| (bit(v, s) as u8 as f64, bit(v, s + 5) as u8 as f64)).unzip();
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
        let r = cov / (va * vb).sqrt();
        assert!(r.abs() < 0.02, "z{} vs z{}: {r}", s + 1, s + 6);
    }
}

#[test]
fn causal_bits_are_fair_coins() {
    let z = latents(0.9, 20_000);
    for s in 0..5 {
        let p = z.iter().filter(|&&v| bit(v, s)).count() as f64 / z.len() as f64;
        assert!((p - 0.5).abs() < 0.02, "z{}: {p}", s + 1);
    }
}
