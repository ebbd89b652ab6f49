mod common;

use ordss::inference::{slice_se_with, SliceConfig};
use ordss::mif2::MeasurementParameters;
use ordss::{MeasurementModel, ModelLayout, ModelParameters};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

use common::{kalman_loglik, simulate_linear};

struct Testbed {
    layout: ModelLayout,
    y: Vec<Vec<f64>>,
}

impl Testbed {
    fn new(t: usize, seed: u64) -> (Self, Vec<f64>) {
        let layout = ModelLayout::linear(2, vec![0, 0, 0, 1, 1, 1]).unwrap();
        let truth = ModelParameters {
            a: vec![vec![0.6, 0.2], vec![0.0, 0.5]],
            measurement: MeasurementParameters::Linear {
                loadings: vec![1.0, 0.8, 1.2, 0.9, 1.1, 1.0],
                psi: vec![0.8, 1.0, 0.6, 1.2, 0.7, 0.9],
            },
        };
        let bed = Self { layout, y: Vec::new() };
        let (a, sigma, c, psi) = bed.matrices(&bed.layout.to_natural(&truth).unwrap()).unwrap();
        let y = simulate_linear(&a, &sigma, &c, &psi, t, &mut Pcg64Mcg::seed_from_u64(seed));
        let center = bed.layout.to_natural(&truth).unwrap();
        (Self { y, ..bed }, center)
    }

    #[allow(clippy::type_complexity)]
    fn matrices(&self, theta: &[f64]) -> Option<(nalgebra::DMatrix<f64>, Vec<f64>, nalgebra::DMatrix<f64>, Vec<f64>)> {
        let params = self.layout.from_natural(theta).ok()?;
        let (dynamics, meas) = self.layout.build(&params).ok()?;
        let MeasurementModel::LinearGaussian(m) = meas else { unreachable!() };
        Some((
            dynamics.a().clone(),
            dynamics.sigma_diag().iter().copied().collect(),
            m.loadings().clone(),
            m.psi_diag().to_vec(),
        ))
    }

    fn loglik(&self, theta: &[f64]) -> Option<f64> {
        let (a, sigma, c, psi) = self.matrices(theta)?;
        Some(kalman_loglik(&a, &sigma, &c, &psi, &self.y))
    }
}

#[test]
fn slice_se_matches_numeric_hessian_on_exact_likelihood() {
    let (bed, center) = Testbed::new(500, 8);
    let names = bed.layout.natural_names();
    let indices: Vec<usize> = (0..center.len()).collect();
    let config = SliceConfig { replicates: 1, ..SliceConfig::default() };
    let res = slice_se_with(&center, &names, &indices, &config, |theta, _| bed.loglik(theta)).unwrap();

    let f0 = bed.loglik(&center).unwrap();
    let h = 1e-3;
    for (i, slice) in res.parameters.iter().enumerate() {
        let shifted = |d: f64| {
            let mut t = center.clone();
            t[i] += d;
            bed.loglik(&t).unwrap()
        };
        let second = (shifted(h) - 2.0 * f0 + shifted(-h)) / (h * h);
        let hessian_se = 1.0 / (-second).sqrt();
        let se = slice.se.expect("curved slice");
        assert!(
            (se / hessian_se - 1.0).abs() < 0.05,
            "{}: slice {se} vs Hessian {hessian_se}",
            slice.name
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact_on_quadratic_log_likelihoods(
        se in 0.01f64..5.0,
        centre in -3.0f64..3.0,
        shift in -0.5f64..0.5,
        level in -2e3f64..2e3,
        half in 1usize..15,
        ratio in 0.3f64..4.0,
    ) {
        // grids much narrower than one SE only see rounding noise in the level
        let width = ratio * se;
        let n_points = 2 * half + 3;
        let config = SliceConfig { n_points, half_width: width, replicates: 1, refine: false, ..SliceConfig::default() };
        // peak need not sit at the slice centre
        let peak = centre + shift * width;
        let res = slice_se_with(&[centre], &["b".to_string()], &[0], &config, |t, _| {
            Some(level - 0.5 * ((t[0] - peak) / se).powi(2))
        }).unwrap();
        let got = res.parameters[0].se.unwrap();
        prop_assert!((got - se).abs() <= 1e-10 * se.max(1.0), "se {} got {}", se, got);
    }
}
