use ndarray::Array2;
use proptest::prelude::*;

use twinrecon::metrics::{
    add_thermal_noise, correlation_quantifiers, intensity_moments, moments, nonclassicality_depth,
    nonclassicality_identifiers, raw_moments, Distribution, MomentSet, Source,
};
use twinrecon::model::{JointHistogram, JointPhotonDistribution};

fn histogram(cells: &[u64], cols: usize) -> JointHistogram {
    let rows = cells.len() / cols;
    JointHistogram::from_counts(Array2::from_shape_vec((rows, cols), cells[..rows * cols].to_vec()).unwrap()).unwrap()
}

fn falling(x: usize, k: usize) -> f64 {
    (0..k).map(|m| x as f64 - m as f64).product()
}

fn diagonal(weights: &[f64]) -> JointPhotonDistribution {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut p = Array2::zeros((n + 1, n + 1));
    for (k, w) in weights.iter().enumerate() {
        p[[k, k]] = w / total;
    }
    JointPhotonDistribution::new(p, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn stirling_inversion_matches_falling_factorial_moments(
        cells in proptest::collection::vec(0u64..500, 36),
        cols in 2usize..7,
    ) {
        let h = histogram(&cells, cols);
        prop_assume!(h.total_shots() > 0);
        let m = moments(Distribution::Histogram(&h), 4).unwrap();
        let w = m.intensity.as_ref().unwrap();
        let total = h.total_shots() as f64;
        for j in 0..=4 {
            for k in 0..=4 - j {
                let direct: f64 = h
                    .counts()
                    .indexed_iter()
                    .map(|((s, i), &n)| n as f64 * falling(s, j) * falling(i, k))
                    .sum::<f64>()
                    / total;
                let scale = direct.abs().max(m.raw[[j, k]].abs()).max(1e-300);
                prop_assert!((w[[j, k]] - direct).abs() <= 1e-9 * scale, "({j},{k}) {} vs {direct}", w[[j, k]]);
            }
        }
        let raw_only = MomentSet::from_raw(m.raw.clone(), Source::Photocount).unwrap();
        prop_assert!(intensity_moments(raw_only).is_ok());
    }

    #[test]
    fn correlations_do_not_depend_on_labels(cells in proptest::collection::vec(0u64..300, 25)) {
        let h = histogram(&cells, 5);
        let t = JointHistogram::from_counts(h.counts().t().to_owned()).unwrap();
        let a = correlation_quantifiers(&raw_moments(Distribution::Histogram(&h), 2).unwrap());
        let b = correlation_quantifiers(&raw_moments(Distribution::Histogram(&t), 2).unwrap());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.c - b.c).abs() < 1e-12);
                prop_assert!((a.r - b.r).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn depth_from_second_order_has_a_closed_form(weights in proptest::collection::vec(0.01f64..1.0, 2..8)) {
        let d = diagonal(&weights);
        let m = moments(Distribution::PhotonNumber(&d), 4).unwrap();
        let e2 = nonclassicality_identifiers(&m).unwrap().e2;
        prop_assume!(e2 < -1e-6);
        let tau = nonclassicality_depth(&m, 2, 1e-8).unwrap();
        prop_assert!((tau - (-e2 / 2.0).sqrt()).abs() < 1e-4);
    }

    // Thermal noise adds 2T² to E₂, so depths compose in quadrature.
    #[test]
    fn added_noise_reduces_depth_in_quadrature(weights in proptest::collection::vec(0.01f64..1.0, 2..8), frac in 0.05f64..1.5) {
        let d = diagonal(&weights);
        let m = moments(Distribution::PhotonNumber(&d), 4).unwrap();
        let tau = nonclassicality_depth(&m, 2, 1e-9).unwrap();
        prop_assume!(tau > 1e-3);
        let t0 = frac * tau;
        let mut noisy = m.clone();
        noisy.intensity = Some(add_thermal_noise(m.intensity.as_ref().unwrap(), t0, t0));
        let shifted = nonclassicality_depth(&noisy, 2, 1e-9).unwrap();
        let expected = (tau * tau - t0 * t0).max(0.0).sqrt();
        prop_assert!((shifted - expected).abs() < 1e-6, "{shifted} vs {expected}");
    }
}

#[test]
fn independent_poisson_marginals_sit_at_the_shot_noise_level() {
    let (a, b) = (3.0f64, 5.5f64);
    let poisson = |mu: f64, n: usize| (-mu + n as f64 * mu.ln() - (1..=n).map(|k| (k as f64).ln()).sum::<f64>()).exp();
    let nmax = 80;
    let mut p = Array2::from_shape_fn((nmax + 1, nmax + 1), |(s, i)| poisson(a, s) * poisson(b, i));
    let s = p.sum();
    p /= s;
    let d = JointPhotonDistribution::new(p, 0.0).unwrap();
    let c = correlation_quantifiers(&raw_moments(Distribution::PhotonNumber(&d), 2).unwrap()).unwrap();
    assert!((c.r - 1.0).abs() < 1e-9, "R = {}", c.r);
    assert!(c.c.abs() < 1e-9);
}
