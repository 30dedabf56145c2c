//! Stochastic predator-prey model simulated with Gillespie's algorithm.

use rand::{Rng, RngCore};

use super::{BoxUniformPrior, PilotStandardizer, Prior, Simulator};

/// `[log 0.01, log 0.5, log 1, log 0.01]`.
pub const LV_THETA_GT: [f64; 4] = [-4.605170185988091, -0.6931471805599453, 0.0, -4.605170185988091];
pub const LV_MAX_EVENTS: usize = 10_000;
pub const LV_GRID_POINTS: usize = 151;
const GRID_STEP: f64 = 0.2;
const INIT_PREDATORS: f64 = 50.0;
const INIT_PREY: f64 = 100.0;
/// Variance floor for constant series.
pub const LV_EPS_VAR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct LvPath {
    pub predators: Vec<f64>,
    pub prey: Vec<f64>,
    pub n_events: usize,
    /// The event budget ran out before the horizon.
    pub truncated: bool,
}

/// Simulates on the grid `0, 0.2, .., 30`. Reactions, with `k = exp(theta)`:
/// predator birth `k1 X Y`, predator death `k2 X`, prey birth `k3 Y`,
/// prey death `k4 X Y`.
pub fn lv_gillespie_simulate(theta: &[f64], rng: &mut dyn RngCore) -> LvPath {
    let k: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let (mut x, mut y) = (INIT_PREDATORS, INIT_PREY);
    let mut predators = vec![0.0; LV_GRID_POINTS];
    let mut prey = vec![0.0; LV_GRID_POINTS];
    let mut t = 0.0;
    let mut next = 0;
    let mut n_events = 0;
    let mut truncated = false;
    while next < LV_GRID_POINTS {
        let rates = [k[0] * x * y, k[1] * x, k[2] * y, k[3] * x * y];
        let total: f64 = rates.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            // absorbing state: hold it to the horizon
            while next < LV_GRID_POINTS {
                predators[next] = x;
                prey[next] = y;
                next += 1;
            }
            break;
        }
        if n_events == LV_MAX_EVENTS {
            // budget exhausted: the rest of the grid stays zero
            truncated = true;
            break;
        }
        let u: f64 = rng.random();
        let t_event = t - (1.0 - u).ln() / total;
        while next < LV_GRID_POINTS && (next as f64) * GRID_STEP < t_event {
            predators[next] = x;
            prey[next] = y;
            next += 1;
        }
        if next == LV_GRID_POINTS {
            break;
        }
        let pick = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut which = 3;
        for (i, r) in rates.iter().enumerate() {
            acc += r;
            if pick < acc {
                which = i;
                break;
            }
        }
        match which {
            0 => x += 1.0,
            1 => x -= 1.0,
            2 => y += 1.0,
            _ => y -= 1.0,
        }
        t = t_event;
        n_events += 1;
    }
    LvPath {
        predators,
        prey,
        n_events,
        truncated,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Pearson correlation; zero if either side is constant.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// `[mean_X, mean_Y, logvar_X, logvar_Y, ac1_X, ac2_X, ac1_Y, ac2_Y, cc_XY]`.
pub fn lv_summary_stats(x: &[f64], y: &[f64]) -> [f64; 9] {
    assert!(x.len() >= 3 && x.len() == y.len(), "series of equal length >= 3 required");
    let logvar = |v: &[f64]| {
        let s = variance(v);
        if s > 0.0 {
            s.ln()
        } else {
            LV_EPS_VAR.ln()
        }
    };
    let ac = |v: &[f64], lag: usize| pearson(&v[..v.len() - lag], &v[lag..]);
    [
        mean(x),
        mean(y),
        logvar(x),
        logvar(y),
        ac(x, 1),
        ac(x, 2),
        ac(y, 1),
        ac(y, 2),
        pearson(x, y),
    ]
}

/// The simulator returns standardized summaries of a path.
pub struct LotkaVolterra {
    prior: Prior,
    standardizer: Option<PilotStandardizer>,
}

impl Default for LotkaVolterra {
    fn default() -> Self {
        Self::new()
    }
}

impl LotkaVolterra {
    /// Raw (unstandardized) summaries until a standardizer is attached.
    pub fn new() -> Self {
        Self {
            prior: Prior::BoxUniform(BoxUniformPrior::new(vec![-5.0; 4], vec![2.0; 4]).expect("valid")),
            standardizer: None,
        }
    }

    pub fn with_standardizer(mut self, s: PilotStandardizer) -> Self {
        self.standardizer = Some(s);
        self
    }

    pub fn standardizer(&self) -> Option<&PilotStandardizer> {
        self.standardizer.as_ref()
    }

    pub fn raw_summaries(&self, theta: &[f64], rng: &mut dyn RngCore) -> [f64; 9] {
        let path = lv_gillespie_simulate(theta, rng);
        lv_summary_stats(&path.predators, &path.prey)
    }
}

impl Simulator for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka_volterra"
    }

    fn theta_dim(&self) -> usize {
        4
    }

    fn data_dim(&self) -> usize {
        9
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let s = self.raw_summaries(theta, rng);
        match &self.standardizer {
            Some(st) => st.transform(&s).expect("fitted standardizer of width 9"),
            None => s.to_vec(),
        }
    }
}
