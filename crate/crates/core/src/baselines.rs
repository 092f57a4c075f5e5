//! Comparison trainers: steepest-descent backpropagation (EBP) and a
//! real-coded genetic algorithm.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{QgsError, Result};
use crate::fsio::write_atomic;
use crate::residual::Residual;

/// Steepest descent `x <- x - eta * grad f(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EbpConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once `|grad f|_inf` drops below this.
    pub grad_tol: f64,
    /// Halve the learning rate and retry when an epoch increases `f`.
    /// Without it an increase is accepted, and runaway growth is reported as
    /// divergence.
    pub lr_halving: bool,
    /// Smallest learning rate halving may reach before the run is declared
    /// divergent.
    pub min_learning_rate: f64,
    /// Without halving, `f > divergence_factor * (1 + f0)` counts as divergence.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for EbpConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 10_000,
            grad_tol: 1e-8,
            lr_halving: true,
            min_learning_rate: 1e-14,
            divergence_factor: 1e6,
            seed: 0,
        }
    }
}

impl EbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(QgsError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(QgsError::Config("grad_tol must be >= 0".into()));
        }
        if !(self.min_learning_rate > 0.0) {
            return Err(QgsError::Config("min_learning_rate must be > 0".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(QgsError::Config("divergence_factor must be > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EbpStop {
    GradTol,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EbpResult {
    pub x: DVector<f64>,
    /// `f` before the first epoch and after every accepted epoch.
    pub history: Vec<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub stop: EbpStop,
}

pub fn train_ebp<R: Residual + ?Sized>(sys: &R, x0: &DVector<f64>, cfg: &EbpConfig) -> Result<EbpResult> {
    cfg.validate()?;
    if x0.len() != sys.param_dim() {
        return Err(QgsError::Shape(format!(
            "start point has {} entries, system expects {}",
            x0.len(),
            sys.param_dim()
        )));
    }
    let mut x = x0.clone();
    let (mut f, mut g) = sys.value_and_gradient(&x)?;
    if !f.is_finite() {
        return Err(QgsError::Divergence { epoch: 0, value: f });
    }
    let f0 = f;
    let mut eta = cfg.learning_rate;
    let mut history = vec![f];
    let mut epochs = 0;

    while epochs < cfg.max_epochs {
        if g.amax() < cfg.grad_tol {
            return Ok(EbpResult { x, history, epochs, learning_rate: eta, stop: EbpStop::GradTol });
        }
        epochs += 1;
        loop {
            let x_new = &x - &g * eta;
            let (f_new, g_new) = match sys.value_and_gradient(&x_new) {
                Ok(v) => v,
                Err(QgsError::Numeric(_)) => (f64::NAN, g.clone()),
                Err(e) => return Err(e),
            };
            let worse = !f_new.is_finite() || f_new > f;
            if worse && cfg.lr_halving {
                eta *= 0.5;
                if eta < cfg.min_learning_rate {
                    return Err(QgsError::Divergence { epoch: epochs, value: f_new });
                }
                continue;
            }
            if !f_new.is_finite() || f_new > cfg.divergence_factor * (1.0 + f0) {
                return Err(QgsError::Divergence { epoch: epochs, value: f_new });
            }
            x = x_new;
            f = f_new;
            g = g_new;
            break;
        }
        history.push(f);
    }
    let stop = if g.amax() < cfg.grad_tol { EbpStop::GradTol } else { EbpStop::MaxEpochs };
    Ok(EbpResult { x, history, epochs, learning_rate: eta, stop })
}

/// Genetic algorithm over raw parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    /// Probability that a child comes from scattered crossover rather than
    /// cloning its first parent.
    pub crossover_rate: f64,
    /// Initial standard deviation of the Gaussian mutation.
    pub mutation_sigma_init: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Individuals copied unchanged into the next generation.
    pub elitism: usize,
    /// Halve the mutation sigma after this many generations without
    /// improvement of the best `f`.
    pub stall_generations: usize,
    /// Standard deviation of the random initial population.
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 200,
            generations: 300,
            crossover_rate: 0.8,
            mutation_sigma_init: 0.1,
            mutation_rate: 0.1,
            elitism: 2,
            stall_generations: 10,
            init_sigma: 0.5,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(QgsError::Config(format!("population must be >= 2, got {}", self.population)));
        }
        for (name, v) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(QgsError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.elitism > self.population {
            return Err(QgsError::Config(format!(
                "elitism {} exceeds population {}",
                self.elitism, self.population
            )));
        }
        if !(self.mutation_sigma_init >= 0.0) || !(self.init_sigma >= 0.0) {
            return Err(QgsError::Config("sigmas must be >= 0".into()));
        }
        if self.stall_generations == 0 {
            return Err(QgsError::Config("stall_generations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub x_best: DVector<f64>,
    pub f_best: f64,
    /// Best `f` of the initial population and of every generation.
    pub history: Vec<f64>,
    pub final_sigma: f64,
}

/// Runs the GA from a random normal population.
pub fn train_ga<R: Residual + ?Sized>(sys: &R, cfg: &GaConfig) -> Result<GaResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = sys.param_dim();
    let pop = (0..cfg.population)
        .map(|_| DVector::from_fn(p, |_, _| cfg.init_sigma * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    evolve(sys, pop, cfg, &mut rng)
}

/// Runs the GA from a given initial population.
pub fn train_ga_from<R: Residual + ?Sized>(
    sys: &R,
    population: Vec<DVector<f64>>,
    cfg: &GaConfig,
) -> Result<GaResult> {
    let cfg = GaConfig { population: population.len(), ..cfg.clone() };
    cfg.validate()?;
    if let Some(bad) = population.iter().find(|x| x.len() != sys.param_dim()) {
        return Err(QgsError::Shape(format!(
            "individual has {} genes, system expects {}",
            bad.len(),
            sys.param_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    evolve(sys, population, &cfg, &mut rng)
}

fn fitness_of<R: Residual + ?Sized>(sys: &R, x: &DVector<f64>) -> f64 {
    match sys.objective(x) {
        Ok(f) if f.is_finite() => f,
        _ => f64::INFINITY,
    }
}

/// Roulette weights from objective values: the worst finite individual gets
/// a small positive weight, non-finite ones get none.
fn roulette_weights(fs: &[f64]) -> Vec<f64> {
    let finite = fs.iter().copied().filter(|f| f.is_finite());
    let worst = finite.clone().fold(f64::NEG_INFINITY, f64::max);
    let best = finite.fold(f64::INFINITY, f64::min);
    if !worst.is_finite() {
        return vec![1.0; fs.len()];
    }
    let eps = 1e-9 * (worst - best).max(f64::MIN_POSITIVE);
    fs.iter()
        .map(|&f| if f.is_finite() { worst - f + eps } else { 0.0 })
        .collect()
}

fn spin<G: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut G) -> usize {
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn evolve<R: Residual + ?Sized, G: Rng + ?Sized>(
    sys: &R,
    mut pop: Vec<DVector<f64>>,
    cfg: &GaConfig,
    rng: &mut G,
) -> Result<GaResult> {
    let mut fs: Vec<f64> = pop.iter().map(|x| fitness_of(sys, x)).collect();
    let mut sigma = cfg.mutation_sigma_init;
    let mut stall = 0;
    let argmin = |fs: &[f64]| {
        (0..fs.len())
            .min_by(|&a, &b| fs[a].total_cmp(&fs[b]))
            .expect("population is non-empty")
    };
    let mut best = argmin(&fs);
    let mut history = vec![fs[best]];

    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        let weights = roulette_weights(&fs);
        let total: f64 = weights.iter().sum();

        let mut next: Vec<DVector<f64>> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        let mut next_f: Vec<f64> = order[..cfg.elitism].iter().map(|&i| fs[i]).collect();
        while next.len() < cfg.population {
            let a = &pop[spin(&weights, total, rng)];
            let mut child = if rng.random::<f64>() < cfg.crossover_rate {
                let b = &pop[spin(&weights, total, rng)];
                DVector::from_fn(a.len(), |i, _| if rng.random::<bool>() { a[i] } else { b[i] })
            } else {
                a.clone()
            };
            for gene in child.iter_mut() {
                if rng.random::<f64>() < cfg.mutation_rate {
                    *gene += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            next_f.push(fitness_of(sys, &child));
            next.push(child);
        }
        pop = next;
        fs = next_f;

        let gen_best = argmin(&fs);
        if fs[gen_best] < history[history.len() - 1] {
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.stall_generations {
                sigma *= 0.5;
                stall = 0;
            }
        }
        best = gen_best;
        history.push(fs[best]);
    }
    Ok(GaResult {
        x_best: pop[best].clone(),
        f_best: fs[best],
        history,
        final_sigma: sigma,
    })
}

/// Writes a `(label, best_f)` history CSV, e.g. `epoch,best_f`.
pub fn write_history_csv(path: &Path, label: &str, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([label, "best_f"])?;
    for (i, f) in history.iter().enumerate() {
        w.write_record([i.to_string(), format!("{f:e}")])?;
    }
    let bytes = w.into_inner().map_err(|e| QgsError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}
