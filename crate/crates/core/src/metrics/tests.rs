use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::Tensor;
use crate::models::{mvg_analytic_posterior, GaussianPrior, MvgSimulator, MvgVariant, Prior};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(mean: &[f64], cov: &[&[f64]]) -> GaussianSummary {
    let d = mean.len();
    GaussianSummary::new(
        DVector::from_column_slice(mean),
        DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        0,
    )
}

fn draw(g: &GaussianSummary, n: usize, r: &mut dyn RngCore) -> Tensor {
    let d = g.dim();
    let prior = Prior::Gaussian(
        GaussianPrior::new(
            g.mean.iter().copied().collect(),
            (0..d).map(|i| (0..d).map(|j| g.cov[(i, j)]).collect()).collect(),
        )
        .unwrap(),
    );
    prior.sample_n(n, r)
}

fn random_points(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    let data = (0..n * d).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(n, d, data).unwrap()
}

// ---- Gaussian KL ----

#[test]
fn kl_worked_examples() {
    let a = gauss(&[0.0], &[&[1.0]]);
    assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
    let shifted = gauss(&[1.0], &[&[1.0]]);
    assert!((gaussian_kl(&a, &shifted).unwrap() - 0.5).abs() < 1e-12);
    let wide = gauss(&[0.0], &[&[4.0]]);
    assert!((gaussian_kl(&a, &wide).unwrap() - 0.3181).abs() < 1e-4);
    // and the other direction: (log(1/4) + 4 - 1) / 2
    assert!((gaussian_kl(&wide, &a).unwrap() - 0.5 * (0.25f64.ln() + 3.0)).abs() < 1e-12);
}

#[test]
fn kl_matches_monte_carlo() {
    let p = gauss(&[0.3, -1.0], &[&[1.5, 0.4], &[0.4, 0.8]]);
    let q = gauss(&[0.0, 0.0], &[&[2.0, -0.3], &[-0.3, 1.2]]);
    let xs = draw(&p, 1_000_000, &mut rng(0));
    let mc = xs
        .iter_rows()
        .map(|x| p.log_pdf(x).unwrap() - q.log_pdf(x).unwrap())
        .sum::<f64>()
        / xs.rows() as f64;
    let exact = gaussian_kl(&p, &q).unwrap();
    assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
}

#[test]
fn kl_rejects_mismatched_dims() {
    let a = gauss(&[0.0], &[&[1.0]]);
    let b = gauss(&[0.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!(matches!(gaussian_kl(&a, &b), Err(MetricError::SizeMismatch(_))));
}

#[test]
fn sample_moments_match() {
    let g = gauss(&[1.0, -2.0], &[&[2.0, 0.6], &[0.6, 0.5]]);
    let s = g.sample(200_000, &mut rng(21)).unwrap();
    let fit = GaussianSummary::from_samples(&s).unwrap();
    for i in 0..2 {
        assert!((fit.mean[i] - g.mean[i]).abs() < 0.01, "{}", fit.mean);
        for j in 0..2 {
            assert!((fit.cov[(i, j)] - g.cov[(i, j)]).abs() < 0.02, "{}", fit.cov);
        }
    }
}

#[test]
fn kl_to_analytic_noise_floor() {
    let post = mvg_analytic_posterior(&[[0.5, 0.2], [1.0, 1.1]]);
    let mut r = rng(1);
    let mut kls = Vec::new();
    for _ in 0..20 {
        let s = draw(&post, 1000, &mut r);
        kls.push(kl_to_analytic(&s, &post).unwrap());
    }
    let mean = kls.iter().sum::<f64>() / kls.len() as f64;
    // expected finite-sample bias is about d(d+3)/(4n) = 0.0025
    assert!(mean < 0.01, "{kls:?}");
}

#[test]
fn kl_to_analytic_ignores_row_order_and_needs_enough_rows() {
    let post = gauss(&[0.0, 1.0], &[&[1.0, 0.2], &[0.2, 0.5]]);
    let s = draw(&post, 200, &mut rng(2));
    let rev: Vec<usize> = (0..200).rev().collect();
    let a = kl_to_analytic(&s, &post).unwrap();
    let b = kl_to_analytic(&s.select_rows(&rev), &post).unwrap();
    assert!((a - b).abs() < 1e-12);
    let tiny = draw(&post, 3, &mut rng(3));
    assert!(matches!(kl_to_analytic(&tiny, &post), Err(MetricError::TooFewSamples { need: 4, got: 3 })));
}

// ---- negative log-density ----

#[test]
fn neg_log_pdf_by_hand() {
    // mean 0, unbiased covariance diag(2/3, 2/3)
    let s = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
    let v: f64 = 2.0 / 3.0;
    let at_zero = (2.0 * std::f64::consts::PI).ln() + v.ln();
    assert!((neg_log_pdf_at_truth(&s, &[0.0, 0.0]).unwrap() - at_zero).abs() < 1e-12);
    let at_one = at_zero + 0.5 / v;
    assert!((neg_log_pdf_at_truth(&s, &[1.0, 0.0]).unwrap() - at_one).abs() < 1e-12);
    assert!(neg_log_pdf_at_truth(&s, &[1.0]).is_err());
}

// ---- Wasserstein-1 ----

fn brute_force_w1(a: &Tensor, b: &Tensor) -> f64 {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    let n = a.rows();
    let dist = |i: usize, j: usize| -> f64 {
        a.row_slice(i)
            .iter()
            .zip(b.row_slice(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    perms(n)
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| dist(i, j)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

#[test]
fn w1_matches_brute_force() {
    let mut r = rng(4);
    for n in 1..=8 {
        for _ in 0..3 {
            let a = random_points(n, 2, &mut r);
            let b = random_points(n, 2, &mut r);
            let w = wasserstein1(&a, &b).unwrap();
            let bf = brute_force_w1(&a, &b);
            assert!((w - bf).abs() < 1e-12, "n={n}: {w} vs {bf}");
        }
    }
}

#[test]
fn w1_in_one_dimension_is_sorted_difference() {
    let mut r = rng(5);
    let a = random_points(300, 1, &mut r);
    let b = random_points(300, 1, &mut r).map(|v| 2.0 * v + 0.5);
    let mut sa = a.data().to_vec();
    let mut sb = b.data().to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let sorted = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 300.0;
    assert!((wasserstein1(&a, &b).unwrap() - sorted).abs() < 1e-10);
}

#[test]
fn w1_input_checks() {
    let a = Tensor::zeros(3, 2);
    assert!(matches!(wasserstein1(&a, &Tensor::zeros(4, 2)), Err(MetricError::SizeMismatch(_))));
    let big = Tensor::zeros(MAX_W1_SAMPLES + 1, 2);
    assert!(matches!(wasserstein1(&big, &big), Err(MetricError::TooLarge { .. })));
    assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
}

#[test]
fn assignment_returns_a_permutation() {
    let cost = vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let (perm, total) = assignment(&cost, 3);
    assert_eq!(perm, vec![1, 0, 2]);
    assert_eq!(total, 5.0);
}

// ---- mode coverage ----

#[test]
fn mode_coverage_examples() {
    let s = Tensor::from_rows(&[[1.0, 0.5], [0.5, 1.0], [-1.0, -0.2], [0.3, -0.3]]).unwrap();
    assert_eq!(mode_coverage(&s), (0.75, 0.25));
    let all_one_side = Tensor::from_rows(&[[-1.0, -1.0], [-0.1, 0.0]]).unwrap();
    assert_eq!(mode_coverage(&all_one_side), (0.0, 1.0));
}

// ---- SBC ----

fn analytic_runner(x: &[f64], l: usize, r: &mut dyn RngCore, shrink: f64) -> Result<Tensor, String> {
    let obs: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
    let mut post = mvg_analytic_posterior(&obs);
    post.cov *= shrink;
    Ok(draw(&post, l, r))
}

#[test]
fn binomial_band_brackets_the_mean() {
    let (lo, hi) = binomial_band(1000, 0.1, 0.99);
    assert!(lo < 100 && hi > 100);
    assert!((70..=80).contains(&lo) && (120..=130).contains(&hi), "{lo} {hi}");
}

#[test]
fn sbc_accepts_the_exact_posterior() {
    let sim = MvgSimulator::new(MvgVariant::FiveObservations);
    let res = sbc(&sim, |x, l, r| analytic_runner(x, l, r, 1.0), 500, 9, &mut rng(6)).unwrap();
    assert_eq!(res.histograms.len(), 2);
    assert_eq!(res.histograms[0].iter().sum::<u64>(), 500);
    for j in 0..2 {
        assert!(res.p_values[j] > 0.001, "{res:?}");
        assert!(res.bins_in_band(j) >= 9);
    }
}

#[test]
fn sbc_rejects_an_overconfident_posterior() {
    let sim = MvgSimulator::new(MvgVariant::FiveObservations);
    let res = sbc(&sim, |x, l, r| analytic_runner(x, l, r, 0.1), 500, 9, &mut rng(7)).unwrap();
    for j in 0..2 {
        assert!(res.p_values[j] < 1e-6, "{res:?}");
    }
}

#[test]
fn sbc_replicate_limits() {
    let sim = MvgSimulator::new(MvgVariant::FiveObservations);
    assert!(matches!(
        sbc(&sim, |x, l, r| analytic_runner(x, l, r, 1.0), 10, 9, &mut rng(8)),
        Err(MetricError::TooFewReplicates { .. })
    ));
    let flaky = |x: &[f64], l: usize, r: &mut dyn RngCore| {
        if r.next_u32() % 2 == 0 {
            Err("diverged".to_string())
        } else {
            analytic_runner(x, l, r, 1.0)
        }
    };
    assert!(matches!(sbc(&sim, flaky, 100, 9, &mut rng(9)), Err(MetricError::SbcAborted { .. })));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn cloud(n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-5.0f64..5.0, n * 2).prop_map(move |v| Tensor::new(n, 2, v).unwrap())
    }

    proptest! {
        #[test]
        fn w1_is_a_metric((a, b, c) in (1usize..12).prop_flat_map(|n| (cloud(n), cloud(n), cloud(n)))) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= 0.0);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(wasserstein1(&a, &a).unwrap() < 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(m in proptest::collection::vec(-3.0f64..3.0, 4),
                             l in proptest::collection::vec(-1.0f64..1.0, 6)) {
            // covariances from random lower-triangular factors with positive diagonals
            let mk = |a: f64, b: f64, c: f64| {
                let l = DMatrix::from_row_slice(2, 2, &[a.abs() + 0.2, 0.0, b, c.abs() + 0.2]);
                &l * l.transpose()
            };
            let p = GaussianSummary::new(DVector::from_column_slice(&m[..2]), mk(l[0], l[1], l[2]), 0);
            let q = GaussianSummary::new(DVector::from_column_slice(&m[2..]), mk(l[3], l[4], l[5]), 0);
            prop_assert!(gaussian_kl(&p, &q).unwrap() >= 0.0);
            prop_assert!(gaussian_kl(&p, &p).unwrap() < 1e-10);
        }
    }
}
