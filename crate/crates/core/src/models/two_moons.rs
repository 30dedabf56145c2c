//! Two-moons: a crescent-shaped likelihood whose offset map folds the
//! parameter plane onto itself, giving a bimodal posterior.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, SQRT_2};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

use super::{BoxUniformPrior, ModelError, Prior, Simulator};

const RADIUS_MEAN: f64 = 1.0;
const RADIUS_SD: f64 = 0.1;
/// Give up when fewer than this fraction of proposals are accepted.
const MIN_ACCEPTANCE: f64 = 1e-6;
/// Proposals tried before the acceptance rate is checked.
const STALL_CHECK_AFTER: u64 = 50_000_000;

/// Crescent point `p` for angle `a` and radius `r`.
fn crescent(a: f64, r: f64, radial_first: bool) -> [f64; 2] {
    let x0 = if radial_first { r * a.cos() } else { a.cos() };
    [x0 + 1.0, r * a.sin()]
}

fn draw_crescent(rng: &mut dyn RngCore, radial_first: bool) -> [f64; 2] {
    let a = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
    let z: f64 = StandardNormal.sample(rng);
    crescent(a, RADIUS_MEAN + RADIUS_SD * z, radial_first)
}

fn offset(theta: &[f64]) -> [f64; 2] {
    [
        -(theta[0] + theta[1]).abs() * FRAC_1_SQRT_2,
        (theta[1] - theta[0]) * FRAC_1_SQRT_2,
    ]
}

/// `x = p + q(theta)`.
///
/// `radial_first` selects `p = (r cos a + 1, r sin a)`; otherwise the radius
/// scales only the second coordinate, `p = (cos a + 1, r sin a)`.
pub fn two_moons_simulate(theta: &[f64], radial_first: bool, rng: &mut dyn RngCore) -> [f64; 2] {
    let p = draw_crescent(rng, radial_first);
    let q = offset(theta);
    [p[0] + q[0], p[1] + q[1]]
}

/// Reference posterior for `x_obs = [0, 0]` by rejection: prior draws whose
/// simulation lands within `eps` of the origin.
pub fn two_moons_reference_sample(
    n: usize,
    eps: f64,
    radial_first: bool,
    rng: &mut dyn RngCore,
) -> Result<Tensor, ModelError> {
    let mut out = Vec::with_capacity(2 * n);
    let mut tried: u64 = 0;
    let eps2 = eps * eps;
    while out.len() < 2 * n {
        let theta = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let x = two_moons_simulate(&theta, radial_first, rng);
        tried += 1;
        if x[0] * x[0] + x[1] * x[1] < eps2 {
            out.extend(theta);
        }
        if tried % STALL_CHECK_AFTER == 0 && ((out.len() / 2) as f64) < MIN_ACCEPTANCE * tried as f64 {
            return Err(ModelError::ReferenceStall {
                accepted: out.len() / 2,
                tried,
            });
        }
    }
    Ok(Tensor::new(n, 2, out).expect("shape"))
}

/// Exact posterior draws for `x_obs = [0, 0]`.
///
/// On each half-plane `theta_1 + theta_2 > 0` / `< 0` the offset map is an
/// isometry, so the posterior is the crescent law pushed back through the
/// two branches, each picked with probability one half, restricted to the
/// prior box.
pub fn two_moons_exact_posterior(n: usize, radial_first: bool, rng: &mut dyn RngCore) -> Tensor {
    let mut out = Vec::with_capacity(2 * n);
    while out.len() < 2 * n {
        let p = draw_crescent(rng, radial_first);
        if p[0] < 0.0 {
            continue;
        }
        // |t1 + t2| = sqrt2 p0, t2 - t1 = -sqrt2 p1
        let s = if rng.random::<bool>() { SQRT_2 * p[0] } else { -SQRT_2 * p[0] };
        let d = -SQRT_2 * p[1];
        let theta = [(s - d) / 2.0, (s + d) / 2.0];
        if theta.iter().all(|t| (-2.0..=2.0).contains(t)) {
            out.extend(theta);
        }
    }
    Tensor::new(n, 2, out).expect("shape")
}

pub struct TwoMoons {
    radial_first: bool,
    prior: Prior,
}

impl TwoMoons {
    pub fn new(radial_first: bool) -> Self {
        Self {
            radial_first,
            prior: Prior::BoxUniform(BoxUniformPrior::new(vec![-2.0; 2], vec![2.0; 2]).expect("valid")),
        }
    }

    pub fn radial_first(&self) -> bool {
        self.radial_first
    }
}

impl Simulator for TwoMoons {
    fn name(&self) -> &str {
        "two_moons"
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn data_dim(&self) -> usize {
        2
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        two_moons_simulate(theta, self.radial_first, rng).to_vec()
    }
}
