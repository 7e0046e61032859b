//! Checks against independent reference computations.

use innerthoughts::analysis::influence_per_layer;
use innerthoughts::analysis::stats::{bootstrap_ci, midranks, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonOptions};
use innerthoughts::baselines::fit_pca;
use innerthoughts::dataset::{generate_synthetic, SyntheticConfig};
use innerthoughts::predictor::{build_graph, build_predictor, PredictorConfig, PredictorParams};
use innerthoughts::tensor::{argmax, Activation, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INFLUENCE_REL_TOL: f64 = 1e-3;
const NORMAL_EXACT_TOL: f64 = 0.02;

/// `ln p_c(x)` evaluated through the forward pass only.
fn log_prob(params: &PredictorParams, x: &Tensor, data: &[f64], class: usize) -> f64 {
    let mut pg = build_graph(params, &[x], false).unwrap();
    pg.graph.set_leaf(pg.input, data).unwrap();
    pg.graph.forward().unwrap();
    pg.graph.value(pg.probs).unwrap()[class].ln()
}

#[test]
fn influence_matches_finite_differences() {
    let (_, records) = generate_synthetic(&SyntheticConfig {
        layers: 4,
        dim: 6,
        classes: 3,
        n: 8,
        signal_layer: 2,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = PredictorConfig {
        n1: 5,
        n2: 3,
        activation: Some(Activation::Swish),
        ..PredictorConfig::innerthoughts(3).with_seed(4)
    };
    let params = build_predictor(&cfg, 4, 6).unwrap();
    let profile = influence_per_layer(&params, &records).unwrap();

    let h = 1e-3;
    let mut oracle = vec![0.0; 4];
    for r in &records {
        let x = params.prepare(r).unwrap();
        let base: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let class = argmax(&params.forward(&x).unwrap().to_f64());
        for (i, layer) in (0..base.len()).map(|i| (i, i / 6)) {
            let diff = |step: f64| {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                (log_prob(&params, &x, &plus, class) - log_prob(&params, &x, &minus, class)) / (2.0 * step)
            };
            let g = (4.0 * diff(h / 2.0) - diff(h)) / 3.0;
            oracle[layer] += g * g;
        }
    }
    for o in &mut oracle {
        *o /= records.len() as f64;
    }
    for (l, (got, want)) in profile.scores.iter().zip(&oracle).enumerate() {
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel < INFLUENCE_REL_TOL, "layer {}: {got} vs {want} (rel {rel:.2e})", l + 1);
    }
}

/// Upper tail by enumerating all sign assignments of the midranks.
fn brute_force_upper_tail(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let ranks = midranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let observed: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = nz.len();
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            w >= observed - 1e-9
        })
        .count();
    hits as f64 / f64::from(1u32 << n)
}

#[test]
fn exact_wilcoxon_matches_enumeration_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = rng.random_range(1..=13);
        let diffs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3i32..=3))).collect();
        if diffs.iter().all(|d| *d == 0.0) {
            continue;
        }
        let got = wilcoxon_signed_rank(&diffs, WilcoxonOptions::default()).unwrap();
        assert_eq!(got.method, WilcoxonMethod::Exact);
        let want = brute_force_upper_tail(&diffs);
        assert!((got.p_value - want).abs() < 1e-12, "{diffs:?}: {} vs {want}", got.p_value);
    }
}

#[test]
fn normal_approximation_tracks_exact_on_binary_data() {
    let normal = WilcoxonOptions {
        exact_max: 0,
        ..WilcoxonOptions::default()
    };
    for n in 10..=20 {
        for wins in 0..=n {
            let diffs: Vec<f64> = (0..n).map(|i| if i < wins { 1.0 } else { -1.0 }).collect();
            let exact = wilcoxon_signed_rank(&diffs, WilcoxonOptions::default()).unwrap();
            let approx = wilcoxon_signed_rank(&diffs, normal).unwrap();
            assert_eq!(approx.method, WilcoxonMethod::Normal);
            assert!(
                (exact.p_value - approx.p_value).abs() < NORMAL_EXACT_TOL,
                "n={n} wins={wins}: exact {} normal {}",
                exact.p_value,
                approx.p_value
            );
        }
    }
}

#[test]
fn normal_approximation_tracks_exact_on_continuous_data() {
    let normal = WilcoxonOptions {
        exact_max: 0,
        ..WilcoxonOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let n = rng.random_range(10..=20);
        let shift = rng.random_range(-0.5..0.5);
        let diffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        let exact = wilcoxon_signed_rank(&diffs, WilcoxonOptions::default()).unwrap();
        let approx = wilcoxon_signed_rank(&diffs, normal).unwrap();
        assert!((exact.p_value - approx.p_value).abs() < NORMAL_EXACT_TOL);
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let scales: Vec<f32> = (0..d).map(|j| 1.0 + j as f32).collect();
    let data = (0..n * d).map(|i| rng.random_range(-1.0f32..1.0) * scales[i % d]).collect();
    Tensor::matrix(n, d, data).unwrap()
}

#[test]
fn pca_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, d) in [(40, 8), (6, 15)] {
        let x = random_matrix(&mut rng, n, d);
        let k = n.min(d) - 1;
        let basis = fit_pca(&x, k).unwrap();
        let mut centered = DMatrix::from_fn(n, d, |r, c| f64::from(x.row(r)[c]));
        for c in 0..d {
            let m = centered.column(c).mean();
            centered.column_mut(c).add_scalar_mut(-m);
        }
        let svd = centered.clone().svd(false, true);
        let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..).collect();
        sv.sort_by(|a, b| b.0.total_cmp(&a.0));
        let vt = svd.v_t.unwrap();
        for (i, &(s, j)) in sv.iter().take(k).enumerate() {
            let want = s * s / (n - 1) as f64;
            let got = f64::from(basis.explained_variance.data()[i]);
            assert!((got - want).abs() <= 1e-4 * want.max(1.0), "variance {i}: {got} vs {want}");
            let dot: f64 = basis.components.row(i).iter().zip(vt.row(j).iter()).map(|(&a, b)| f64::from(a) * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-4, "component {i} alignment {dot}");
        }

        // Eckart-Young: the residual energy equals the discarded spectrum.
        let residual: f64 = (0..n)
            .map(|r| {
                let row: Vec<f32> = x.row(r).to_vec();
                let coords = basis.project(&row).unwrap();
                let back = basis.reconstruct(coords.data()).unwrap();
                row.iter().zip(&back).map(|(&a, b)| (f64::from(a) - b).powi(2)).sum::<f64>()
            })
            .sum();
        let discarded: f64 = sv.iter().skip(k).map(|(s, _)| s * s).sum();
        assert!((residual - discarded).abs() <= 1e-3 * discarded.max(1.0), "{residual} vs {discarded}");
    }
}

#[test]
fn bootstrap_half_width_matches_normal_theory() {
    let n = 400;
    let correct: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let ci = bootstrap_ci(&correct, 4000, 0.95, 5).unwrap();
    let theory = 1.959964 * (0.25f64 / n as f64).sqrt();
    assert!((ci.half_width() - theory).abs() < 0.1 * theory, "{} vs {theory}", ci.half_width());
}
