//! One-dimensional analytical sanity layer.
//!
//! For the scalar model `y = θ·x` with a fixed perturbation δ, the three
//! training objectives have closed-form minimizers:
//!
//! - least squares: `θ = Σxy / Σx²`
//! - PGD-AT: `θ = Σ(2xy + yδ) / Σ(x² + (x+δ)²)`
//! - LDS: `θ = Σxy / Σ(x² + δ²)`
//!
//! [`minimize_theta`] cross-checks the formulas with gradient descent run
//! through the autodiff engine, and [`run_experiment`] reproduces the
//! one-neuron comparison: train under least squares, switch to the
//! adversarial objective near the end, and study the distribution of the
//! final θ across repeated noisy datasets.

use alloc::vec;
use alloc::vec::Vec;

use crate::advtrain::{Method, NormKind, PerturbConfig};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor};

/// Sampled (x, y) pairs from `y = θ·x + ε`, `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression1DDataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Regression1DDataset {
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self {
            xs: pairs.iter().map(|p| p.0).collect(),
            ys: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Draws `n` samples with `x ~ Uniform(-1, 1)`.
    pub fn generate(n: usize, theta_true: f64, noise_sigma: f64, rng: &mut DetRng) -> Self {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.uniform(-1.0, 1.0);
            xs.push(x);
            ys.push(theta_true * x + rng.normal(0.0, noise_sigma));
        }
        Self { xs, ys }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// `θ = Σxy / Σx²`.
pub fn closed_form_ols(ds: &Regression1DDataset) -> Result<f64> {
    let num: f64 = ds.xs.iter().zip(&ds.ys).map(|(x, y)| x * y).sum();
    let den: f64 = ds.xs.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return Err(Error::Degenerate {
            what: "least squares (all x are zero)",
        });
    }
    Ok(num / den)
}

/// `θ = Σ(2xy + yδ) / Σ(x² + (x+δ)²)` for a fixed δ.
pub fn closed_form_pgdat(ds: &Regression1DDataset, delta: f64) -> Result<f64> {
    let num: f64 = ds
        .xs
        .iter()
        .zip(&ds.ys)
        .map(|(x, y)| 2.0 * x * y + y * delta)
        .sum();
    let den: f64 = ds
        .xs
        .iter()
        .map(|x| x * x + (x + delta) * (x + delta))
        .sum();
    if den == 0.0 {
        return Err(Error::Degenerate {
            what: "pgd-at closed form",
        });
    }
    Ok(num / den)
}

/// `θ = Σxy / Σ(x² + δ²)` for a fixed δ.
pub fn closed_form_lds(ds: &Regression1DDataset, delta: f64) -> Result<f64> {
    let num: f64 = ds.xs.iter().zip(&ds.ys).map(|(x, y)| x * y).sum();
    let den: f64 = ds.xs.iter().map(|x| x * x + delta * delta).sum();
    if den == 0.0 {
        return Err(Error::Degenerate {
            what: "lds closed form",
        });
    }
    Ok(num / den)
}

/// Which fixed-δ objective to minimize numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedDeltaLoss {
    Ols,
    PgdAt(f64),
    Lds(f64),
}

/// Minimizes the chosen objective over θ by gradient descent on the tape,
/// with a halving step size and a gradient-norm stop. Independent of the
/// closed forms; serves as their oracle.
pub fn minimize_theta(ds: &Regression1DDataset, loss: FixedDeltaLoss) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty {
            what: "regression dataset",
        });
    }
    let xs = Tensor::new(ds.xs.clone(), &[ds.len()])?;
    let ys = Tensor::new(ds.ys.clone(), &[ds.len()])?;
    let theta = Tensor::param(vec![0.0], &[1])?;

    let eval = |theta: &Tensor| -> Result<(f64, f64)> {
        theta.zero_grad();
        let mut tape = Tape::new();
        let pred = tape.mul(&xs, theta)?;
        let objective = match loss {
            FixedDeltaLoss::Ols => tape.mse(&pred, &ys)?,
            FixedDeltaLoss::PgdAt(delta) => {
                let clean = tape.mse(&pred, &ys)?;
                let shifted = tape.add(&xs, &Tensor::scalar(delta))?;
                let pert = tape.mul(&shifted, theta)?;
                let adv = tape.mse(&pert, &ys)?;
                tape.add(&clean, &adv)?
            }
            FixedDeltaLoss::Lds(delta) => {
                let clean = tape.mse(&pred, &ys)?;
                let shifted = tape.add(&xs, &Tensor::scalar(delta))?;
                let pert = tape.mul(&shifted, theta)?;
                let reg = tape.mse(&pert, &pred)?;
                tape.add(&clean, &reg)?
            }
        };
        tape.backward(&objective)?;
        let grad = theta.grad().map(|g| g[0]).unwrap_or(0.0);
        Ok((objective.scalar_value(), grad))
    };

    // Probe the curvature to pick a near-optimal step size; every loss
    // here is quadratic in θ, so lr = 1/L'' converges in a step or two.
    let (_, g0) = eval(&theta)?;
    theta.set_data(vec![1.0])?;
    let (_, g1) = eval(&theta)?;
    theta.set_data(vec![0.0])?;
    let curvature = g1 - g0;
    let mut lr = if curvature > 0.0 { 1.0 / curvature } else { 0.5 };

    let (mut best_loss, mut grad) = eval(&theta)?;
    for _ in 0..10_000 {
        let step = lr * grad;
        if fmath::abs(grad) < 1e-11 || fmath::abs(step) < 1e-14 {
            break;
        }
        let current = theta.scalar_value();
        theta.set_data(vec![current - step])?;
        let (new_loss, new_grad) = eval(&theta)?;
        let tolerance = 1e-12 * fmath::abs(best_loss).max(1e-30);
        if new_loss.is_finite() && new_loss <= best_loss + tolerance {
            best_loss = new_loss;
            grad = new_grad;
        } else {
            // Overshot: back off and retry with a smaller step.
            theta.set_data(vec![current])?;
            lr *= 0.5;
            if lr < 1e-18 {
                break;
            }
        }
    }
    Ok(theta.scalar_value())
}

/// Parameters of the one-neuron distribution experiment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentConfig1D {
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epoch after which the adversarial objectives replace least squares.
    pub switch_epoch: usize,
    pub theta_true: f64,
    pub perturb: PerturbConfig,
}

impl Default for ExperimentConfig1D {
    fn default() -> Self {
        Self {
            samples: 50,
            epochs: 2000,
            learning_rate: 0.005,
            switch_epoch: 1750,
            theta_true: 0.5,
            perturb: PerturbConfig {
                sigma: 1e-3,
                epsilon: 0.05,
                mu: 0.05 / 3.0,
                steps: 3,
                norm: NormKind::L2,
            },
        }
    }
}

/// Final θ values of one method across repeated runs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DistributionSummary {
    pub method: Method,
    pub thetas: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl DistributionSummary {
    fn from_thetas(method: Method, thetas: Vec<f64>) -> Self {
        let n = thetas.len() as f64;
        let mean = thetas.iter().sum::<f64>() / n;
        let std = if thetas.len() > 1 {
            fmath::sqrt(thetas.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0))
        } else {
            0.0
        };
        Self {
            method,
            thetas,
            mean,
            std,
        }
    }
}

/// Trains the scalar neuron sample-at-a-time: least squares throughout
/// for STANDARD, with the adversarial objective substituted after
/// `switch_epoch` for PGD-AT and LDS. δ is recomputed per sample by the
/// inner ascent loop (specialized here to scalars; verified against the
/// generic loop by test).
pub fn train_scalar_neuron(
    ds: &Regression1DDataset,
    method: Method,
    cfg: &ExperimentConfig1D,
    rng: &mut DetRng,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty {
            what: "regression dataset",
        });
    }
    let p = &cfg.perturb;
    let mut theta = 0.0_f64;
    for epoch in 1..=cfg.epochs {
        let adversarial = method != Method::Standard && epoch > cfg.switch_epoch;
        for (&x, &y) in ds.xs.iter().zip(&ds.ys) {
            let grad = if !adversarial {
                2.0 * x * (theta * x - y)
            } else {
                let mut delta = rng.normal(0.0, p.sigma);
                for _ in 0..p.steps {
                    let g = match method {
                        Method::PgdAt => 2.0 * theta * (theta * (x + delta) - y),
                        Method::Lds => 2.0 * theta * theta * delta,
                        Method::Standard => unreachable!(),
                    };
                    // Normalized ascent: for a scalar the unit gradient is
                    // its sign.
                    if g > 0.0 {
                        delta += p.mu;
                    } else if g < 0.0 {
                        delta -= p.mu;
                    }
                    delta = delta.clamp(-p.epsilon, p.epsilon);
                    assert!(
                        fmath::abs(delta) <= p.epsilon * (1.0 + 1e-9),
                        "projection invariant violated"
                    );
                }
                match method {
                    Method::PgdAt => {
                        2.0 * x * (theta * x - y) + 2.0 * (x + delta) * (theta * (x + delta) - y)
                    }
                    Method::Lds => 2.0 * x * (theta * x - y) + 2.0 * theta * delta * delta,
                    Method::Standard => unreachable!(),
                }
            };
            theta -= cfg.learning_rate * grad;
            if !theta.is_finite() || fmath::abs(theta) > 1e6 {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    loss: theta,
                });
            }
        }
    }
    Ok(theta)
}

/// Runs the full distribution experiment: `runs` datasets at the given
/// noise level, each trained under all three methods, sharing the
/// dataset per run. Returns summaries ordered [standard, pgd_at, lds].
pub fn run_experiment(
    noise_sigma: f64,
    runs: usize,
    master_seed: u64,
    cfg: &ExperimentConfig1D,
) -> Result<Vec<DistributionSummary>> {
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    if !(noise_sigma > 0.0) {
        return Err(Error::InvalidConfig("noise_sigma must be positive".into()));
    }
    let methods = [Method::Standard, Method::PgdAt, Method::Lds];
    let mut thetas: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); methods.len()];
    for run in 0..runs {
        let mut data_rng = DetRng::substream(master_seed, (run as u64) * 8);
        let ds =
            Regression1DDataset::generate(cfg.samples, cfg.theta_true, noise_sigma, &mut data_rng);
        for (mi, &method) in methods.iter().enumerate() {
            let mut train_rng = DetRng::substream(master_seed, (run as u64) * 8 + 1 + mi as u64);
            thetas[mi].push(train_scalar_neuron(&ds, method, cfg, &mut train_rng)?);
        }
    }
    Ok(methods
        .iter()
        .zip(thetas)
        .map(|(&m, t)| DistributionSummary::from_thetas(m, t))
        .collect())
}
