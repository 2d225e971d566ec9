//! Desk-scale DP-FedAvg with streaming correlated noise.
//!
//! Each round selects a cohort among clients that sat out the previous `b`
//! rounds, runs clipped local SGD on each, adds one row of correlated noise
//! to the summed update, and applies server momentum to the privatized sum.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, PrivacyParams};
use crate::blt::{BltParams, NoiseGenerator, RoundLimit};
use crate::participation::{toeplitz_sensitivity, ParticipationSchema};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Least squares, squared-error loss.
    Linear,
    /// Binary labels, logistic loss.
    Logistic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub clients: usize,
    pub examples_per_client: usize,
    pub dim: usize,
    pub task: Task,
    /// Spread of per-client optima around the shared one.
    pub heterogeneity: f64,
    pub label_noise: f64,
    pub eval_examples: usize,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            clients: 64,
            examples_per_client: 16,
            dim: 8,
            task: Task::Linear,
            heterogeneity: 0.1,
            label_noise: 0.1,
            eval_examples: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    /// Row-major `examples x dim`.
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * labels.len(),
                got: features.len(),
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn example(&self, i: usize) -> (&[f64], f64) {
        (
            &self.features[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Task {
    /// Per-example loss and the scalar `dloss/dprediction`.
    fn loss_and_slope(self, prediction: f64, label: f64) -> (f64, f64) {
        match self {
            Task::Linear => {
                let r = prediction - label;
                (0.5 * r * r, r)
            }
            Task::Logistic => {
                // log(1 + e^z) - y z, computed stably
                let loss =
                    prediction.max(0.0) + (-prediction.abs()).exp().ln_1p() - label * prediction;
                (loss, sigmoid(prediction) - label)
            }
        }
    }

    fn correct(self, prediction: f64, label: f64) -> bool {
        match self {
            Task::Linear => (prediction >= 0.0) == (label >= 0.0),
            Task::Logistic => (prediction >= 0.0) == (label >= 0.5),
        }
    }
}

/// Mean loss and accuracy of `model` on `data`.
pub fn evaluate(task: Task, model: &[f64], data: &Dataset) -> (f64, f64) {
    if data.is_empty() {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (x, y) = data.example(i);
        let p = dot(model, x);
        loss += task.loss_and_slope(p, y).0;
        correct += task.correct(p, y) as usize;
    }
    (loss / data.len() as f64, correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ClientPopulation {
    task: Task,
    clients: Vec<Dataset>,
    eval: Dataset,
    last_round: Vec<Option<usize>>,
}

impl ClientPopulation {
    pub fn new(task: Task, clients: Vec<Dataset>, eval: Dataset) -> Result<Self> {
        if clients.iter().any(|c| c.dim() != eval.dim()) {
            return Err(Error::InvalidParams(
                "client and eval dimensions differ".into(),
            ));
        }
        let n = clients.len();
        Ok(Self {
            task,
            clients,
            eval,
            last_round: vec![None; n],
        })
    }

    /// Synthetic clients whose optima scatter around a shared one; the eval
    /// set uses the shared optimum.
    pub fn synthetic(config: &PopulationConfig) -> Result<Self> {
        if config.clients == 0 || config.dim == 0 {
            return Err(Error::InvalidParams(
                "population needs clients and dimensions".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let normal = |rng: &mut ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };
        let shared: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();

        let make = |optimum: &[f64], count: usize, rng: &mut ChaCha20Rng| -> Result<Dataset> {
            let mut features = Vec::with_capacity(count * dim);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let x: Vec<f64> = (0..dim)
                    .map(|_| normal(rng) / (dim as f64).sqrt())
                    .collect();
                let z = dot(&x, optimum);
                let y = match config.task {
                    Task::Linear => z + config.label_noise * normal(rng),
                    Task::Logistic => (rng.random::<f64>() < sigmoid(z)) as u8 as f64,
                };
                features.extend(x);
                labels.push(y);
            }
            Dataset::new(dim, features, labels)
        };

        let mut clients = Vec::with_capacity(config.clients);
        for _ in 0..config.clients {
            let optimum: Vec<f64> = shared
                .iter()
                .map(|w| w + config.heterogeneity * normal(&mut rng))
                .collect();
            clients.push(make(&optimum, config.examples_per_client, &mut rng)?);
        }
        let eval = make(&shared, config.eval_examples, &mut rng)?;
        Self::new(config.task, clients, eval)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.eval.dim()
    }

    pub fn client(&self, i: usize) -> &Dataset {
        &self.clients[i]
    }

    pub fn eval_set(&self) -> &Dataset {
        &self.eval
    }

    pub fn last_round(&self, i: usize) -> Option<usize> {
        self.last_round[i]
    }

    /// Uniformly samples `m` clients among those idle for at least `b`
    /// rounds and records their participation.
    pub fn select_cohort(
        &mut self,
        round: usize,
        m: usize,
        b: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let eligible: Vec<usize> = (0..self.clients.len())
            .filter(|&i| self.last_round[i].is_none_or(|last| round - last >= b))
            .collect();
        if eligible.len() < m {
            return Err(Error::Starvation {
                round,
                eligible: eligible.len(),
                needed: m,
            });
        }
        let mut cohort: Vec<usize> = eligible.choose_multiple(rng, m).copied().collect();
        cohort.sort_unstable();
        for &i in &cohort {
            self.last_round[i] = Some(round);
        }
        Ok(cohort)
    }
}

/// Local SGD from `model`; returns `model - local`, scaled to norm at most
/// `clip_norm` (pass `f64::INFINITY` to disable clipping).
pub fn client_update(
    task: Task,
    model: &[f64],
    data: &Dataset,
    lr: f64,
    clip_norm: f64,
    local_epochs: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut w = model.to_vec();
    let batch = batch_size.max(1);
    let mut grad = vec![0.0; w.len()];
    for _ in 0..local_epochs {
        for start in (0..data.len()).step_by(batch) {
            let end = (start + batch).min(data.len());
            grad.iter_mut().for_each(|g| *g = 0.0);
            for i in start..end {
                let (x, y) = data.example(i);
                let (_, slope) = task.loss_and_slope(dot(&w, x), y);
                grad.iter_mut().zip(x).for_each(|(g, xi)| *g += slope * xi);
            }
            let scale = lr / (end - start) as f64;
            w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= scale * g);
        }
    }
    let mut delta: Vec<f64> = model.iter().zip(&w).map(|(a, b)| a - b).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("client update".into()));
    }
    let norm = dot(&delta, &delta).sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        delta.iter_mut().for_each(|v| *v *= s);
    }
    Ok(delta)
}

/// Which noise the server adds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismSpec {
    /// No noise at all.
    None,
    /// Independent Gaussian noise each round (`C = I`).
    Independent,
    Blt {
        theta: Vec<f64>,
        omega: Vec<f64>,
    },
}

impl MechanismSpec {
    pub fn blt(params: &BltParams) -> Self {
        Self::Blt {
            theta: params.theta().to_vec(),
            omega: params.omega().to_vec(),
        }
    }

    /// Strategy parameters, `None` when no noise is added.
    pub fn params(&self) -> Result<Option<BltParams>> {
        match self {
            Self::None => Ok(None),
            Self::Independent => Ok(Some(BltParams::identity())),
            Self::Blt { theta, omega } => Ok(Some(BltParams::new(theta.clone(), omega.clone())?)),
        }
    }
}

/// Unit-clip sensitivity of the mechanism's strategy under `schema`.
pub fn mechanism_sensitivity(params: &BltParams, schema: &ParticipationSchema) -> Result<f64> {
    toeplitz_sensitivity(&params.coefs(schema.rounds())?, schema)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub min_sep: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub mechanism: MechanismSpec,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            clients_per_round: 8,
            min_sep: 1,
            client_lr: 0.1,
            server_lr: 1.0,
            momentum: 0.9,
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            mechanism: MechanismSpec::None,
            local_epochs: 1,
            batch_size: 4,
            delta: accountant::DEFAULT_DELTA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.clients_per_round == 0 || self.min_sep == 0 {
            return Err(Error::InvalidParams(
                "rounds, clients per round and min-separation must be positive".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParams("clip norm must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::InvalidParams(
                "noise multiplier must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// The schema the noise is calibrated for: worst-case `k` at the
    /// configured separation.
    pub fn configured_schema(&self) -> Result<ParticipationSchema> {
        ParticipationSchema::worst_case(self.rounds, self.min_sep)
    }
}

/// A summed update with noise added. The server only accepts this type, and
/// the raw sum is consumed when it is built.
#[derive(Debug, Clone)]
pub struct PrivatizedDelta(Vec<f64>);

impl PrivatizedDelta {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Adds one row of streaming noise per round.
#[derive(Debug, Clone)]
pub struct Privatizer {
    generator: Option<NoiseGenerator>,
}

impl Privatizer {
    pub fn new(
        params: Option<&BltParams>,
        dim: usize,
        noise_std: f64,
        seed: u64,
        rounds: usize,
    ) -> Result<Self> {
        let generator = params
            .map(|p| NoiseGenerator::new(p, dim, noise_std, seed, RoundLimit::Bounded(rounds)))
            .transpose()?;
        Ok(Self { generator })
    }

    pub fn noise_std(&self) -> f64 {
        self.generator.as_ref().map_or(0.0, |g| g.noise_std())
    }

    pub fn privatize(&mut self, mut sum: Vec<f64>) -> Result<PrivatizedDelta> {
        if let Some(g) = self.generator.as_mut() {
            let noise = g.next_row()?;
            if g.noise_std() > 0.0 {
                sum.iter_mut().zip(&noise).for_each(|(s, z)| *s += z);
            }
        }
        Ok(PrivatizedDelta(sum))
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: Vec<f64>,
    pub momentum_buf: Vec<f64>,
    pub round: usize,
}

impl ServerState {
    pub fn new(dim: usize) -> Self {
        Self {
            model: vec![0.0; dim],
            momentum_buf: vec![0.0; dim],
            round: 0,
        }
    }

    /// `P <- beta P + delta / m`, `y <- y - lr P`.
    pub fn apply(&mut self, delta: &PrivatizedDelta, cohort: usize, lr: f64, momentum: f64) {
        let inv = 1.0 / cohort as f64;
        for ((p, y), d) in self
            .momentum_buf
            .iter_mut()
            .zip(self.model.iter_mut())
            .zip(delta.as_slice())
        {
            *p = momentum * *p + d * inv;
            *y -= lr * *p;
        }
        self.round += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub rho_so_far: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingLog {
    pub metrics: Vec<RoundMetrics>,
    /// `(round, client)` pairs in order.
    pub participation: Vec<(usize, usize)>,
    pub final_model: Vec<f64>,
    pub noise_std: f64,
    pub configured_sens: f64,
    pub configured_privacy: Option<PrivacyParams>,
    /// Smallest gap between two participations of one client, if any client
    /// participated twice.
    pub realized_min_sep: Option<usize>,
    pub realized_max_part: usize,
    pub realized_privacy: Option<PrivacyParams>,
}

impl TrainingLog {
    pub fn final_eval_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.eval_loss)
    }

    /// Every client's consecutive participations are at least `b` apart and
    /// no client exceeds `ceil(n / b)` participations.
    pub fn audit_min_sep(&self, b: usize, rounds: usize) -> bool {
        let mut last: std::collections::HashMap<usize, (usize, usize)> = Default::default();
        for &(round, client) in &self.participation {
            match last.get_mut(&client) {
                Some((prev, count)) => {
                    if round < *prev + b {
                        return false;
                    }
                    *prev = round;
                    *count += 1;
                }
                None => {
                    last.insert(client, (round, 1));
                }
            }
        }
        last.values().all(|&(_, count)| count <= rounds.div_ceil(b))
    }
}

fn realized_schema(participation: &[(usize, usize)]) -> (Option<usize>, usize) {
    let mut last: std::collections::HashMap<usize, (usize, usize)> = Default::default();
    let mut min_gap: Option<usize> = None;
    for &(round, client) in participation {
        let entry = last.entry(client).or_insert((round, 0));
        if entry.1 > 0 {
            let gap = round - entry.0;
            min_gap = Some(min_gap.map_or(gap, |g| g.min(gap)));
        }
        *entry = (round, entry.1 + 1);
    }
    let max_part = last.values().map(|v| v.1).max().unwrap_or(0);
    (min_gap, max_part)
}

/// Runs the full training loop.
pub fn run_training(
    config: &TrainConfig,
    population: &mut ClientPopulation,
) -> Result<TrainingLog> {
    config.validate()?;
    let n = config.rounds;
    let dim = population.dim();
    let task = population.task();
    let params = config.mechanism.params()?;
    let schema = config.configured_schema()?;
    let sens = match &params {
        Some(p) => mechanism_sensitivity(p, &schema)?,
        None => 0.0,
    };
    let noise_std = config.noise_multiplier * sens * config.clip_norm;
    let mut privatizer = Privatizer::new(
        params.as_ref(),
        dim,
        noise_std,
        config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        n,
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut server = ServerState::new(dim);
    let mut metrics = Vec::with_capacity(n);
    let mut participation = Vec::with_capacity(n * config.clients_per_round);
    let sigma = noise_std / config.clip_norm;

    for t in 0..n {
        let cohort =
            population.select_cohort(t, config.clients_per_round, config.min_sep, &mut rng)?;
        participation.extend(cohort.iter().map(|&c| (t, c)));
        let model = server.model.clone();
        let updates: Vec<Vec<f64>> = cohort
            .par_iter()
            .map(|&c| {
                client_update(
                    task,
                    &model,
                    population.client(c),
                    config.client_lr,
                    config.clip_norm,
                    config.local_epochs,
                    config.batch_size,
                )
            })
            .collect::<Result<_>>()?;
        let mut sum = vec![0.0; dim];
        for u in &updates {
            sum.iter_mut().zip(u).for_each(|(s, v)| *s += v);
        }
        let delta = privatizer.privatize(sum)?;
        server.apply(&delta, cohort.len(), config.server_lr, config.momentum);

        let (eval_loss, eval_acc) = evaluate(task, &server.model, population.eval_set());
        let rho_so_far = match &params {
            Some(p) => {
                let prefix = ParticipationSchema::worst_case(t + 1, config.min_sep)?;
                accountant::zcdp_of(mechanism_sensitivity(p, &prefix)?, sigma)
            }
            None => f64::INFINITY,
        };
        metrics.push(RoundMetrics {
            round: t,
            eval_loss,
            eval_acc,
            rho_so_far,
        });
    }

    let (realized_min_sep, realized_max_part) = realized_schema(&participation);
    let configured_privacy = params
        .as_ref()
        .map(|_| PrivacyParams::from_noise(sens, config.clip_norm, noise_std, config.delta))
        .transpose()?;
    let realized_privacy = match (&params, realized_max_part) {
        (Some(p), k) if k > 0 => {
            let b = realized_min_sep.unwrap_or(n);
            let realized = ParticipationSchema::new(n, b, k)?;
            let s = mechanism_sensitivity(p, &realized)?;
            Some(PrivacyParams::from_noise(
                s,
                config.clip_norm,
                noise_std,
                config.delta,
            )?)
        }
        _ => None,
    };

    Ok(TrainingLog {
        metrics,
        participation,
        final_model: server.model,
        noise_std,
        configured_sens: sens,
        configured_privacy,
        realized_min_sep,
        realized_max_part,
        realized_privacy,
    })
}
