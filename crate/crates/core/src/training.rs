//! Partial-sharing online federated LMS.
//!
//! Per round `n` the server schedules `|S_n|` clients. A scheduled client `k`
//!
//! 1. mixes the global model into its local model on the coordinates of the
//!    mask it used last time, `m = S_{k,n-1} w_{n-1} + (I - S_{k,n-1}) w_{k,n-1}`,
//! 2. takes one LMS step `w_{k,n} = m + μ x ε` with `ε = y - mᵀx`,
//! 3. draws a fresh mask `S_{k,n}` and uplinks the `M` masked coordinates
//!    (plus a masked perturbation if it is Byzantine and the attack fires).
//!
//! The server then sets every coordinate of `w_n` to the average over
//! participants of the uplinked value, or `w_{n-1}` where a participant did
//! not share that coordinate.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Sample, SampleSource};
use crate::error::{check_dim, Error, Result};
use crate::vector::ModelVector;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub dim: usize,
    /// M, coordinates exchanged per client per round.
    pub shared: usize,
    pub step_size: f64,
    pub n_iterations: usize,
    pub participants_per_round: usize,
    pub n_clients: usize,
    /// Abort once the MSE exceeds this multiple of the initial MSE.
    pub divergence_factor: f64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if self.shared == 0 || self.shared > self.dim {
            return Err(Error::invalid(
                "shared",
                format!("need 1 <= M <= D, got M = {} with D = {}", self.shared, self.dim),
            ));
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.n_clients {
            return Err(Error::invalid(
                "participants_per_round",
                format!(
                    "need 1 <= |S_n| <= K, got {} with K = {}",
                    self.participants_per_round, self.n_clients
                ),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size", "must be positive"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::invalid("divergence_factor", "must exceed 1"));
        }
        Ok(())
    }

    /// Rounds `ratio · D` to the nearest integer, clamped to `[1, D]`.
    pub fn shared_for_ratio(dim: usize, ratio: f64) -> usize {
        ((ratio * dim as f64).round() as usize).clamp(1, dim)
    }
}

/// The diagonal of a selection matrix: `M` distinct sorted coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    dim: usize,
    indices: Vec<usize>,
}

impl SelectionMask {
    pub fn new(dim: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::invalid("mask", "must select at least one coordinate"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::invalid("mask", format!("index {bad} out of range for D = {dim}")));
        }
        Ok(Self { dim, indices })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            indices: (0..dim).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `S v` as a dense vector (zeros off the mask).
    pub fn apply(&self, v: &[f64]) -> ModelVector {
        let mut out = ModelVector::zeros(v.len());
        for &i in &self.indices {
            out[i] = v[i];
        }
        out
    }

    /// `(I - S) v` as a dense vector.
    pub fn complement(&self, v: &[f64]) -> ModelVector {
        let mut out = ModelVector::from(v.to_vec());
        for &i in &self.indices {
            out[i] = 0.0;
        }
        out
    }
}

/// Uniform random `M`-subset of `[0, D)`.
pub fn sample_mask<R: Rng + ?Sized>(dim: usize, shared: usize, rng: &mut R) -> Result<SelectionMask> {
    if shared == 0 || shared > dim {
        return Err(Error::invalid(
            "shared",
            format!("need 1 <= M <= D, got M = {shared} with D = {dim}"),
        ));
    }
    if shared == dim {
        return Ok(SelectionMask::full(dim));
    }
    let mut indices = index::sample(rng, dim, shared).into_vec();
    indices.sort_unstable();
    Ok(SelectionMask { dim, indices })
}

/// Uniform `count`-subset of the `n_clients` clients, returned sorted.
pub fn schedule_participants<R: Rng + ?Sized>(
    n_clients: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if count > n_clients {
        return Err(Error::invalid(
            "participants_per_round",
            format!("cannot schedule {count} of {n_clients} clients"),
        ));
    }
    if count == n_clients {
        return Ok((0..n_clients).collect());
    }
    let mut ids = index::sample(rng, n_clients, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub local_model: ModelVector,
    /// The mask used on this client's last uplink; it selects the coordinates
    /// refreshed from the global model on the next downlink.
    pub last_mask: SelectionMask,
    pub is_byzantine: bool,
}

impl ClientState {
    pub fn new(dim: usize, last_mask: SelectionMask, is_byzantine: bool) -> Self {
        Self {
            local_model: ModelVector::zeros(dim),
            last_mask,
            is_byzantine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub model: ModelVector,
    pub iteration: usize,
}

impl GlobalState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            model: ModelVector::zeros(dim),
            iteration: 0,
        }
    }
}

/// Downlink-mix then one LMS step. Updates the client's local model in place
/// and returns the a-priori error `ε = y - mᵀx`.
pub fn local_step(
    client: &mut ClientState,
    global: &GlobalState,
    sample: &Sample,
    step_size: f64,
) -> Result<f64> {
    let dim = client.local_model.dim();
    check_dim(dim, global.model.dim())?;
    check_dim(dim, sample.features.dim())?;
    check_dim(dim, client.last_mask.dim())?;
    for &i in client.last_mask.indices() {
        client.local_model[i] = global.model[i];
    }
    let err = sample.target - client.local_model.dot(&sample.features);
    let gain = step_size * err;
    for (w, x) in client.local_model.iter_mut().zip(sample.features.iter()) {
        *w += gain * *x;
    }
    Ok(err)
}

/// Masked uplink payload as `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpdate {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl MaskedUpdate {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Source of uplink perturbations for Byzantine clients.
pub trait UplinkAttack {
    /// A full-dimension perturbation `δ`, or `None` when the attack does not
    /// fire this round.
    fn perturbation<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Option<ModelVector>;
}

/// Benign network: never perturbs.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAttack;

impl UplinkAttack for NoAttack {
    fn perturbation<R: Rng + ?Sized>(&self, _dim: usize, _rng: &mut R) -> Option<ModelVector> {
        None
    }
}

/// Transmits `S w_k + β τ S δ`. Returns the payload and, when a perturbation
/// was injected, its masked energy `‖S δ‖²`.
pub fn uplink<A: UplinkAttack, R: Rng + ?Sized>(
    client: &ClientState,
    mask: &SelectionMask,
    attack: &A,
    rng: &mut R,
) -> (MaskedUpdate, Option<f64>) {
    let mut values: Vec<f64> = mask.indices().iter().map(|&i| client.local_model[i]).collect();
    let mut injected = None;
    if client.is_byzantine {
        if let Some(delta) = attack.perturbation(client.local_model.dim(), rng) {
            let mut energy = 0.0;
            for (v, &i) in values.iter_mut().zip(mask.indices()) {
                *v += delta[i];
                energy += delta[i] * delta[i];
            }
            injected = Some(energy);
        }
    }
    (
        MaskedUpdate {
            indices: mask.indices().to_vec(),
            values,
        },
        injected,
    )
}

/// `w_n = (1/|S_n|) Σ_k [S_k w_k + (I - S_k) w_{n-1}]`.
pub fn aggregate(global: &GlobalState, uplinks: &[MaskedUpdate]) -> Result<GlobalState> {
    if uplinks.is_empty() {
        return Err(Error::Empty("aggregation needs at least one participant"));
    }
    let dim = global.model.dim();
    let count = uplinks.len() as f64;
    // Per-coordinate sum of (shared value − previous value); coordinates
    // nobody shared keep w_{n-1} exactly.
    let mut shift = vec![0.0; dim];
    for up in uplinks {
        if let Some(&bad) = up.indices.iter().find(|&&i| i >= dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad + 1,
            });
        }
        for (&i, &v) in up.indices.iter().zip(&up.values) {
            shift[i] += v - global.model[i];
        }
    }
    let model = global
        .model
        .iter()
        .zip(&shift)
        .map(|(&w, &s)| w + s / count)
        .collect::<Vec<_>>()
        .into();
    Ok(GlobalState {
        model,
        iteration: global.iteration + 1,
    })
}

/// Scalars exchanged over a run. Index integers are tracked separately from
/// model values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink_scalars: u64,
    pub uplink_indices: u64,
    pub downlink_scalars: u64,
    pub rounds: u64,
    pub client_rounds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTelemetry {
    /// Byzantine uplinks (attack opportunities).
    pub opportunities: u64,
    /// Uplinks where the perturbation fired.
    pub events: u64,
    /// Σ ‖S δ‖² over fired events.
    pub injected_energy: f64,
}

impl AttackTelemetry {
    pub fn mean_energy_per_event(&self) -> f64 {
        if self.events == 0 {
            return f64::NAN;
        }
        self.injected_energy / self.events as f64
    }

    pub fn mean_energy_per_opportunity(&self) -> f64 {
        if self.opportunities == 0 {
            return f64::NAN;
        }
        self.injected_energy / self.opportunities as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub global: GlobalState,
    /// ‖w_n − w*‖² after each round.
    pub mse: Vec<f64>,
    pub comm: CommLedger,
    pub attack: AttackTelemetry,
}

impl TrainingOutcome {
    pub fn mse_db(&self) -> Vec<f64> {
        self.mse.iter().map(|&m| to_db(m)).collect()
    }

    pub fn final_mse(&self) -> f64 {
        self.mse.last().copied().unwrap_or(f64::NAN)
    }
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Fresh client states with zero models and an initial mask each.
pub fn init_clients<R: Rng + ?Sized>(
    config: &TrainingConfig,
    byzantine: &[bool],
    rng: &mut R,
) -> Result<Vec<ClientState>> {
    check_dim(config.n_clients, byzantine.len())?;
    byzantine
        .iter()
        .map(|&b| Ok(ClientState::new(config.dim, sample_mask(config.dim, config.shared, rng)?, b)))
        .collect()
}

/// Runs `n_iterations` rounds of schedule → downlink/local step → uplink →
/// aggregate. `w_star` is only used to record the MSE trajectory.
pub fn run_training<S, A, R>(
    config: &TrainingConfig,
    clients: &mut [ClientState],
    data: &mut S,
    attack: &A,
    w_star: &[f64],
    rng: &mut R,
) -> Result<TrainingOutcome>
where
    S: SampleSource + ?Sized,
    A: UplinkAttack,
    R: Rng + ?Sized,
{
    config.validate()?;
    check_dim(config.n_clients, clients.len())?;
    check_dim(config.dim, data.dim())?;
    check_dim(config.dim, w_star.len())?;

    let mut global = GlobalState::zeros(config.dim);
    let initial = global.model.distance_sq(w_star);
    let limit = config.divergence_factor * initial.max(f64::MIN_POSITIVE);
    let mut mse = Vec::with_capacity(config.n_iterations);
    let mut comm = CommLedger::default();
    let mut telemetry = AttackTelemetry::default();
    let mut uplinks = Vec::with_capacity(config.participants_per_round);

    for n in 0..config.n_iterations {
        let participants =
            schedule_participants(config.n_clients, config.participants_per_round, rng)?;
        uplinks.clear();
        for &k in &participants {
            let client = &mut clients[k];
            let sample = data.next_sample(k);
            comm.downlink_scalars += client.last_mask.len() as u64;
            local_step(client, &global, &sample, config.step_size)?;
            let mask = sample_mask(config.dim, config.shared, rng)?;
            let (update, injected) = uplink(client, &mask, attack, rng);
            if client.is_byzantine {
                telemetry.opportunities += 1;
                if let Some(e) = injected {
                    telemetry.events += 1;
                    telemetry.injected_energy += e;
                }
            }
            comm.uplink_scalars += update.len() as u64;
            comm.uplink_indices += update.len() as u64;
            client.last_mask = mask;
            uplinks.push(update);
        }
        comm.rounds += 1;
        comm.client_rounds += participants.len() as u64;
        global = aggregate(&global, &uplinks)?;
        let err = global.model.distance_sq(w_star);
        if !(err <= limit) {
            return Err(Error::Diverged {
                iteration: n,
                mse: err,
                limit,
            });
        }
        mse.push(err);
    }
    Ok(TrainingOutcome {
        global,
        mse,
        comm,
        attack: telemetry,
    })
}
