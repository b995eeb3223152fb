//! The federated refinement loop: server factor bookkeeping, the per-client
//! free-energy objective, and the sequential driver.
//!
//! The server posterior over shared weights θ is a product of one Gaussian
//! message per client, initialized so the product equals the prior. One
//! *refinement* of client `i`:
//!
//! 1. form the cavity — prior times every message except client `i`'s;
//! 2. jointly optimize a fresh server posterior `q_new(θ)` (warm-started at
//!    the current posterior) and the client's private posterior `c_i(φ_i)`
//!    against the free energy
//!    `KL(q_new ‖ cavity) + KL(c_i ‖ p(φ_i)) − E[log p(data | θ, φ_i)]`,
//!    where the expectation is a reparameterized Monte Carlo average and
//!    minibatch log-likelihoods are rescaled to full-dataset size;
//! 3. recover the client's new message by dividing `q_new` by the other
//!    clients' product and publish it (optionally damped).
//!
//! Only Gaussian messages ever reach the server; client data and private
//! parameters stay client-side.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, BatchLikelihood, Dropout, ModelError};
use crate::optim::Adam;
use crate::tensor::{NodeId, Tape, TensorError};
use crate::variational::{
    kl_node, params_leaves, sample_node, standard_normal, DiagGaussian, NaturalFactor,
    VariationalError, VariationalParams,
};

#[derive(Debug, Error)]
pub enum RefinementError {
    #[error("client index {index} out of range for {clients} clients")]
    BadClientIndex { index: usize, clients: usize },
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error("cannot evaluate the objective on an empty batch")]
    EmptyBatch,
    #[error("loss became non-finite ({value}) at optimizer step {step}")]
    DivergentLoss { step: usize, value: f64 },
    #[error("client count {clients} does not match {what} count {got}")]
    ClientCountMismatch {
        what: &'static str,
        clients: usize,
        got: usize,
    },
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for RefinementError {
    fn from(e: TensorError) -> Self {
        RefinementError::Model(ModelError::Tensor(e))
    }
}

/// Hyperparameters of one refinement. Fields omitted from a config file
/// take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Monte Carlo samples per objective evaluation.
    #[serde(default = "defaults::mc_samples")]
    pub mc_samples: usize,
    /// Full passes over the client's training data per refinement.
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    /// Precision floor used whenever a message must become a distribution.
    #[serde(default = "defaults::min_precision")]
    pub min_precision: f64,
    /// Factor update damping in (0, 1]; 1 replaces the factor outright.
    #[serde(default = "defaults::damping")]
    pub damping: f64,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
}

mod defaults {
    pub fn mc_samples() -> usize {
        20
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn min_precision() -> f64 {
        1e-8
    }
    pub fn damping() -> f64 {
        1.0
    }
    pub fn dropout() -> f64 {
        0.3
    }
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            mc_samples: defaults::mc_samples(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            min_precision: defaults::min_precision(),
            damping: defaults::damping(),
            dropout: defaults::dropout(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefinementError> {
        let fail = |msg: String| Err(RefinementError::InvalidConfig(msg));
        if self.mc_samples == 0 {
            return fail("need at least one Monte Carlo sample".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            ));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.min_precision > 0.0 && self.min_precision.is_finite()) {
            return fail(format!(
                "precision floor must be positive and finite, got {}",
                self.min_precision
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return fail(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Shared-weight state held by the server: the prior over θ and one natural
/// Gaussian message per client. The posterior is always the projected
/// product of the messages — never stored separately, so it cannot drift.
///
/// By design this type holds no client data, private parameters, or client
/// state of any kind; its serialized form is exactly `{prior, factors, step}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerState {
    prior: DiagGaussian,
    factors: Vec<NaturalFactor>,
    step: usize,
}

impl ServerState {
    /// Splits the prior evenly across `k` messages (each gets natural
    /// parameters divided by `k`), so the initial product equals the prior.
    pub fn init(prior: DiagGaussian, k: usize) -> Self {
        assert!(k >= 1, "need at least one client, got {k}");
        let share = prior.to_natural().scale(1.0 / k as f64);
        ServerState {
            prior,
            factors: vec![share; k],
            step: 0,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.factors.len()
    }

    pub fn prior(&self) -> &DiagGaussian {
        &self.prior
    }

    pub fn factors(&self) -> &[NaturalFactor] {
        &self.factors
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Unprojected product of all client messages.
    pub fn raw_posterior(&self) -> NaturalFactor {
        let mut acc = NaturalFactor::unit(self.prior.dim());
        for f in &self.factors {
            acc = acc.product(f).expect("factors share the prior dimension");
        }
        acc
    }

    /// The current posterior over θ.
    pub fn posterior(&self, min_precision: f64) -> DiagGaussian {
        self.raw_posterior().project_proper(min_precision)
    }

    /// Prior times every message except client `i`'s. May be improper; the
    /// caller projects where a distribution is required.
    pub fn cavity(&self, i: usize) -> Result<NaturalFactor, RefinementError> {
        if i >= self.factors.len() {
            return Err(RefinementError::BadClientIndex {
                index: i,
                clients: self.factors.len(),
            });
        }
        let mut acc = self.prior.to_natural();
        for (j, f) in self.factors.iter().enumerate() {
            if j != i {
                acc = acc.product(f)?;
            }
        }
        if acc.precision().iter().any(|l| *l <= 0.0) {
            log::debug!(
                "cavity for client {i} improper at step {}; projection will clamp",
                self.step
            );
        }
        Ok(acc)
    }

    fn with_factor(&self, i: usize, factor: NaturalFactor) -> ServerState {
        let mut factors = self.factors.clone();
        factors[i] = factor;
        ServerState {
            prior: self.prior.clone(),
            factors,
            step: self.step + 1,
        }
    }
}

/// Per-client private state: the trainable posterior over φ_i and the fixed
/// prior it stays anchored to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientState {
    pub posterior: VariationalParams,
    pub prior: DiagGaussian,
}

impl ClientState {
    pub fn new(posterior: VariationalParams, prior: DiagGaussian) -> Result<Self, RefinementError> {
        if posterior.dim() != prior.dim() {
            return Err(VariationalError::DimensionMismatch {
                op: "ClientState::new",
                left: posterior.dim(),
                right: prior.dim(),
            }
            .into());
        }
        Ok(ClientState { posterior, prior })
    }

    /// Posterior started at the prior itself.
    pub fn from_prior(prior: DiagGaussian) -> Self {
        ClientState {
            posterior: VariationalParams::from_gaussian(&prior),
            prior,
        }
    }
}

struct FreeEnergyGraph {
    loss: NodeId,
    theta_mean: NodeId,
    theta_rho: NodeId,
    phi_mean: NodeId,
    phi_rho: NodeId,
}

/// Builds the refinement objective on a tape:
/// `KL(q_new ‖ target) + KL(c_i ‖ prior_phi) − scale · mean_s log p(batch | θ_s, φ_s)`.
#[allow(clippy::too_many_arguments)]
fn free_energy_graph<M: BatchLikelihood>(
    tape: &mut Tape,
    theta: &VariationalParams,
    phi: &VariationalParams,
    target: &DiagGaussian,
    phi_prior: &DiagGaussian,
    model: &M,
    batch: &Batch,
    scale: f64,
    cfg: &RefinementConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FreeEnergyGraph, RefinementError> {
    if batch.is_empty() {
        return Err(RefinementError::EmptyBatch);
    }
    let (theta_mean, theta_rho) = params_leaves(tape, theta);
    let (phi_mean, phi_rho) = params_leaves(tape, phi);
    let features = tape.constant(batch.features.clone());

    let kl_theta = kl_node(tape, theta_mean, theta_rho, target)?;
    let kl_phi = kl_node(tape, phi_mean, phi_rho, phi_prior)?;
    let kl = tape.add(kl_theta, kl_phi)?;

    let mut ll_sum = None;
    for _ in 0..cfg.mc_samples.max(1) {
        let eps_theta = standard_normal(rng, theta.dim());
        let theta_s = sample_node(tape, theta_mean, theta_rho, &eps_theta)?;
        let eps_phi = standard_normal(rng, phi.dim());
        let phi_s = sample_node(tape, phi_mean, phi_rho, &eps_phi)?;
        let mut dropout = if cfg.dropout > 0.0 {
            Dropout::Train {
                rate: cfg.dropout,
                rng: &mut *rng,
            }
        } else {
            Dropout::Off
        };
        let ll = model.log_likelihood_node(
            tape,
            theta_s,
            phi_s,
            features,
            &batch.targets,
            &mut dropout,
        )?;
        ll_sum = Some(match ll_sum {
            None => ll,
            Some(acc) => tape.add(acc, ll)?,
        });
    }
    let ll_sum = ll_sum.expect("at least one Monte Carlo sample");
    let ll_term = tape.scale(ll_sum, scale / cfg.mc_samples.max(1) as f64);
    let loss = tape.sub(kl, ll_term)?;
    Ok(FreeEnergyGraph {
        loss,
        theta_mean,
        theta_rho,
        phi_mean,
        phi_rho,
    })
}

/// One Monte Carlo evaluation of the refinement objective for a batch.
/// `dataset_size` is the client's full training-set size; the batch
/// log-likelihood is rescaled by `dataset_size / batch len`.
#[allow(clippy::too_many_arguments)]
pub fn free_energy<M: BatchLikelihood>(
    new_posterior: &VariationalParams,
    cavity_target: &DiagGaussian,
    client: &ClientState,
    batch: &Batch,
    dataset_size: usize,
    model: &M,
    cfg: &RefinementConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, RefinementError> {
    let mut tape = Tape::new();
    let scale = dataset_size as f64 / batch.len().max(1) as f64;
    let graph = free_energy_graph(
        &mut tape,
        new_posterior,
        &client.posterior,
        cavity_target,
        &client.prior,
        model,
        batch,
        scale,
        cfg,
        rng,
    )?;
    Ok(tape.value(graph.loss).item())
}

/// Objective value plus gradients with respect to every variational
/// parameter, for diagnostics and gradient verification. Draws noise from
/// `rng` exactly like [`free_energy`], so re-seeding the RNG identically
/// makes both functions evaluate the same Monte Carlo objective.
#[derive(Debug, Clone)]
pub struct FreeEnergyGradients {
    pub value: f64,
    pub theta_mean: Vec<f64>,
    pub theta_rho: Vec<f64>,
    pub phi_mean: Vec<f64>,
    pub phi_rho: Vec<f64>,
}

/// Evaluates the refinement objective once and backpropagates it.
#[allow(clippy::too_many_arguments)]
pub fn free_energy_with_gradients<M: BatchLikelihood>(
    new_posterior: &VariationalParams,
    cavity_target: &DiagGaussian,
    client: &ClientState,
    batch: &Batch,
    dataset_size: usize,
    model: &M,
    cfg: &RefinementConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FreeEnergyGradients, RefinementError> {
    let mut tape = Tape::new();
    let scale = dataset_size as f64 / batch.len().max(1) as f64;
    let graph = free_energy_graph(
        &mut tape,
        new_posterior,
        &client.posterior,
        cavity_target,
        &client.prior,
        model,
        batch,
        scale,
        cfg,
        rng,
    )?;
    let grads = tape
        .backward(graph.loss)
        .map_err(|e| RefinementError::Model(ModelError::from(e)))?;
    Ok(FreeEnergyGradients {
        value: tape.value(graph.loss).item(),
        theta_mean: grads.get(graph.theta_mean).to_vec(),
        theta_rho: grads.get(graph.theta_rho).to_vec(),
        phi_mean: grads.get(graph.phi_mean).to_vec(),
        phi_rho: grads.get(graph.phi_rho).to_vec(),
    })
}

/// One refinement of client `i`: optimize (q_new, c_i) for `cfg.epochs`
/// passes over `train`, then publish the client's updated message. Returns
/// the new server and client states; the inputs stay untouched.
pub fn refine_client<M: BatchLikelihood>(
    server: &ServerState,
    client: &ClientState,
    i: usize,
    train: &Batch,
    model: &M,
    cfg: &RefinementConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ServerState, ClientState), RefinementError> {
    let cavity = server.cavity(i)?;
    let target = cavity.project_proper(cfg.min_precision);
    let mut theta = VariationalParams::from_gaussian(&server.posterior(cfg.min_precision));
    let mut phi = client.posterior.clone();

    if cfg.epochs > 0 {
        if train.is_empty() {
            return Err(RefinementError::EmptyBatch);
        }
        let n = train.len();
        let mut opt_tm = Adam::with_betas(theta.dim(), cfg.learning_rate, cfg.beta1, cfg.beta2);
        let mut opt_tr = opt_tm.clone();
        let mut opt_pm = Adam::with_betas(phi.dim(), cfg.learning_rate, cfg.beta1, cfg.beta2);
        let mut opt_pr = opt_pm.clone();
        let mut step = 0usize;
        let mut idx: Vec<usize> = (0..n).collect();
        for _epoch in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.batch_size.max(1)) {
                let batch = train.select(chunk);
                let scale = n as f64 / chunk.len() as f64;
                let mut tape = Tape::new();
                let graph = free_energy_graph(
                    &mut tape,
                    &theta,
                    &phi,
                    &target,
                    &client.prior,
                    model,
                    &batch,
                    scale,
                    cfg,
                    rng,
                )?;
                let value = tape.value(graph.loss).item();
                if !value.is_finite() {
                    return Err(RefinementError::DivergentLoss { step, value });
                }
                let grads = tape.backward(graph.loss)?;
                opt_tm.step(&mut theta.mean, grads.get(graph.theta_mean));
                opt_tr.step(&mut theta.rho, grads.get(graph.theta_rho));
                opt_pm.step(&mut phi.mean, grads.get(graph.phi_mean));
                opt_pr.step(&mut phi.rho, grads.get(graph.phi_rho));
                step += 1;
            }
        }
    }

    // New message: q_new divided by the other clients' product (the cavity
    // without its prior share), then damped against the previous message.
    let q_new = theta.to_gaussian().to_natural();
    let others = server.raw_posterior().quotient(&server.factors[i])?;
    let fresh = q_new.quotient(&others)?;
    let damped = server.factors[i].damped(&fresh, cfg.damping)?;

    let new_server = server.with_factor(i, damped);
    let new_client = ClientState {
        posterior: phi,
        prior: client.prior.clone(),
    };
    Ok((new_server, new_client))
}

/// The fixed cyclic schedule: every client once per pass, `passes` times.
pub fn visitation_order(k: usize, passes: usize) -> Vec<usize> {
    (0..passes).flat_map(|_| 0..k).collect()
}

/// Final states of a full training run.
pub struct VirtualOutcome {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

/// Runs `passes` full cycles of sequential refinements over all clients in
/// fixed order 0..K−1. `after_pass` observes the states after each full
/// cycle (for evaluation); errors abort the run.
#[allow(clippy::too_many_arguments)]
pub fn run_virtual<M: BatchLikelihood>(
    model: &M,
    server: ServerState,
    clients: Vec<ClientState>,
    train_sets: &[Batch],
    passes: usize,
    cfg: &RefinementConfig,
    rng: &mut ChaCha8Rng,
    mut after_pass: impl FnMut(&ServerState, &[ClientState], usize),
) -> Result<VirtualOutcome, RefinementError> {
    let k = server.num_clients();
    for (what, got) in [("client state", clients.len()), ("training set", train_sets.len())] {
        if got != k {
            return Err(RefinementError::ClientCountMismatch {
                what,
                clients: k,
                got,
            });
        }
    }
    let mut server = server;
    let mut clients = clients;
    for pass in 0..passes {
        for i in 0..k {
            let (s, c) = refine_client(&server, &clients[i], i, &train_sets[i], model, cfg, rng)?;
            server = s;
            clients[i] = c;
        }
        after_pass(&server, &clients, pass);
    }
    Ok(VirtualOutcome { server, clients })
}
