//! Observed data, reference posteriors and per-round metrics for each
//! experiment.

use rand::RngCore;
use snpla_core::autodiff::Tensor;
use snpla_core::metrics::{kl_to_analytic, mode_coverage, neg_log_pdf_at_truth, wasserstein1, GaussianSummary};
use snpla_core::models::{
    mvg_analytic_posterior, mvg_simulate, two_moons_exact_posterior, two_moons_reference_sample, LotkaVolterra,
    MvgSimulator, MvgVariant, PilotStandardizer, Simulator, TwoMoons, LV_THETA_GT,
};
use snpla_core::rng::stream;

use crate::config::{Experiment, ExperimentConfig};
use crate::HarnessError;

/// Stream for the observed data set, keyed by `data_seed`.
pub const STREAM_OBSERVED: &str = "observed-data";
/// Stream for reference posterior draws, keyed by `data_seed`.
pub const STREAM_REFERENCE: &str = "reference";
/// Stream for the LV pilot run, keyed by `data_seed`.
pub const STREAM_PILOT: &str = "pilot";

/// Two-moons rejection tolerance around the origin.
pub const TWO_MOONS_EPS: f64 = 0.01;
/// Size of the two-moons rejection reference.
pub const TWO_MOONS_REFERENCE_SIZE: usize = 1000;
/// Prior-predictive draws used to fit the LV standardizer.
pub const LV_PILOT_SIZE: usize = 1000;

pub enum Reference {
    /// Exact Gaussian posterior.
    Analytic(GaussianSummary),
    /// Rejection-ABC draws at a tight tolerance.
    Samples(Tensor),
    /// The data-generating parameter.
    Truth(Vec<f64>),
}

pub struct Problem {
    pub experiment: Experiment,
    pub simulator: Box<dyn Simulator>,
    pub x_obs: Vec<f64>,
    pub reference: Reference,
    pub radial_first: bool,
    /// Parameter that generated `x_obs`.
    pub theta_true: Vec<f64>,
}

/// Rebuilds raw 2-d observations from the flattened MV-G output.
pub fn mvg_pairs(x: &[f64]) -> Vec<[f64; 2]> {
    x.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Exact posterior for any MV-G output. The summary variant keeps only the
/// sample mean, which is sufficient, so 100 copies of the mean give the
/// same posterior as the raw data.
pub fn mvg_posterior_for(variant: MvgVariant, x: &[f64]) -> GaussianSummary {
    match variant {
        MvgVariant::SummaryStatistics => mvg_analytic_posterior(&vec![[x[0], x[1]]; variant.n_obs()]),
        _ => mvg_analytic_posterior(&mvg_pairs(x)),
    }
}

fn mvg_variant(e: Experiment) -> Option<MvgVariant> {
    match e {
        Experiment::MvgFive => Some(MvgVariant::FiveObservations),
        Experiment::MvgSummary => Some(MvgVariant::SummaryStatistics),
        Experiment::MvgLearned => Some(MvgVariant::LearnedSummaries),
        _ => None,
    }
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let mut data_rng = stream(cfg.data_seed, STREAM_OBSERVED);
        if let Some(variant) = mvg_variant(cfg.experiment) {
            let sim = MvgSimulator::new(variant);
            let mu = sim.prior().sample(&mut data_rng);
            let obs = mvg_simulate(&mu, variant.n_obs(), &mut data_rng);
            let x_obs = sim.encode(&obs);
            return Ok(Self {
                experiment: cfg.experiment,
                reference: Reference::Analytic(mvg_analytic_posterior(&obs)),
                simulator: Box::new(sim),
                x_obs,
                radial_first: cfg.two_moons_radial_first,
                theta_true: mu,
            });
        }
        match cfg.experiment {
            Experiment::TwoMoons => {
                let radial_first = cfg.two_moons_radial_first;
                let mut ref_rng = stream(cfg.data_seed, STREAM_REFERENCE);
                let reference =
                    two_moons_reference_sample(TWO_MOONS_REFERENCE_SIZE, TWO_MOONS_EPS, radial_first, &mut ref_rng)?;
                Ok(Self {
                    experiment: cfg.experiment,
                    simulator: Box::new(TwoMoons::new(radial_first)),
                    x_obs: vec![0.0, 0.0],
                    reference: Reference::Samples(reference),
                    radial_first,
                    theta_true: vec![0.0, 0.0],
                })
            }
            Experiment::LotkaVolterra => {
                let raw = LotkaVolterra::new();
                let mut pilot_rng = stream(cfg.data_seed, STREAM_PILOT);
                let pilot_theta = raw.prior().sample_n(LV_PILOT_SIZE, &mut pilot_rng);
                let rows: Vec<Vec<f64>> =
                    pilot_theta.iter_rows().map(|t| raw.raw_summaries(t, &mut pilot_rng).to_vec()).collect();
                let sim = LotkaVolterra::new().with_standardizer(PilotStandardizer::fitted(&rows)?);
                let x_obs = sim.simulate(&LV_THETA_GT, &mut data_rng);
                Ok(Self {
                    experiment: cfg.experiment,
                    simulator: Box::new(sim),
                    x_obs,
                    reference: Reference::Truth(LV_THETA_GT.to_vec()),
                    radial_first: cfg.two_moons_radial_first,
                    theta_true: LV_THETA_GT.to_vec(),
                })
            }
            _ => unreachable!("MV-G handled above"),
        }
    }

    /// The metric tracked across rounds.
    pub fn primary_metric(&self) -> &'static str {
        match self.reference {
            Reference::Analytic(_) => "kl",
            Reference::Samples(_) => "w1",
            Reference::Truth(_) => "neg_log_pdf",
        }
    }

    /// Metrics of one set of posterior draws, in a fixed order.
    pub fn metrics(&self, samples: &Tensor) -> Result<Vec<(&'static str, f64)>, HarnessError> {
        Ok(match &self.reference {
            Reference::Analytic(post) => vec![("kl", kl_to_analytic(samples, post)?)],
            Reference::Samples(reference) => {
                let n = samples.rows().min(reference.rows());
                let idx: Vec<usize> = (0..n).collect();
                let w1 = wasserstein1(&samples.select_rows(&idx), &reference.select_rows(&idx))?;
                let (pos, neg) = mode_coverage(samples);
                vec![("w1", w1), ("mode_pos", pos), ("mode_neg", neg)]
            }
            Reference::Truth(theta) => vec![("neg_log_pdf", neg_log_pdf_at_truth(samples, theta)?)],
        })
    }

    /// Parameter draws at which to sample the likelihood flow: the exact
    /// posterior where one is known, otherwise `fallback` resampled.
    pub fn likelihood_thetas(&self, n: usize, fallback: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, HarnessError> {
        match (&self.reference, self.experiment) {
            (Reference::Analytic(post), _) => Ok(post.sample(n, rng)?),
            (_, Experiment::TwoMoons) => Ok(two_moons_exact_posterior(n, self.radial_first, rng)),
            _ => {
                let idx: Vec<usize> = (0..n).map(|i| i % fallback.rows().max(1)).collect();
                Ok(fallback.select_rows(&idx))
            }
        }
    }

    pub fn mvg_variant(&self) -> Option<MvgVariant> {
        mvg_variant(self.experiment)
    }
}
