//! One federated round end to end.
//!
//! Every round: sample participants, let each train from its personalized
//! start model and threshold its Fisher scores, negotiate zones at the
//! aggregation server, protect and upload, sum at the aggregation server,
//! decrypt and step the global model at the key server, and finally let each
//! participant merge the new global model with its personalized zone.
//!
//! When the message log is enabled each round appends, little-endian:
//! `u32 round`, `u32 uploads`, then per upload `u32 client`, the wire forms
//! of its encrypted and plaintext index sets, `u32 length` plus the
//! ciphertext bytes (length 0 when absent), and the plaintext values as
//! `f64`s.

mod client;
mod server;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use client::{client_merge, client_update, protect, Client, ClientUpdate, ClientUpload, ProtectParams};
pub use server::{AggServer, Finalized, KeyServer, RoundAggregate};

use crate::data::{poisson_select, LabeledDataset};
use crate::dp::{DpParams, PrivacyLedger, PrivacyReport};
use crate::error::{Error, Result};
use crate::he::{self, FixedPointCodec};
use crate::mask::SensitivityMask;
use crate::model::{LayeredParameters, Mlp, ModelSpec, TrainConfig};
use crate::negotiation::{ZonePartition, ZoneRatios};
use crate::rng::{derive, Stream};
use crate::sensitivity::FisherMode;

/// Server learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServerLr {
    /// Equal to the number of participants in the round; with a mean
    /// divisor this makes the server step a plain sum, as in FedAvg over
    /// summed updates. Written `fedavg_equiv`.
    Participants,
    Fixed(f64),
}

impl ServerLr {
    pub fn value(self, participants: usize) -> f64 {
        match self {
            ServerLr::Participants => participants as f64,
            ServerLr::Fixed(v) => v,
        }
    }
}

impl Default for ServerLr {
    fn default() -> Self {
        ServerLr::Fixed(1.0)
    }
}

impl fmt::Display for ServerLr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerLr::Participants => f.write_str("fedavg_equiv"),
            ServerLr::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for ServerLr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "fedavg_equiv" || s == "participants" {
            return Ok(ServerLr::Participants);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(ServerLr::Fixed(v)),
            _ => Err(format!("expected `fedavg_equiv` or a positive number, got `{s}`")),
        }
    }
}

/// What the summed update is divided by before the server step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationDivisor {
    /// The number of participants, for every coordinate.
    #[default]
    Participants,
    /// For plaintext coordinates, the number of uploads that carried them.
    Contributors,
}

impl AggregationDivisor {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationDivisor::Participants => "participants",
            AggregationDivisor::Contributors => "contributors",
        }
    }
}

impl FromStr for AggregationDivisor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "participants" => Ok(AggregationDivisor::Participants),
            "contributors" => Ok(AggregationDivisor::Contributors),
            other => Err(format!("expected participants or contributors, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub train: TrainConfig,
    /// Per-round participation probability.
    pub participation: f64,
    pub tau: f64,
    pub rho: f64,
    pub dp: DpParams,
    pub delta: f64,
    pub server_lr: ServerLr,
    pub divisor: AggregationDivisor,
    pub fisher_mode: FisherMode,
    /// 0 scores every local sample.
    pub fisher_max_samples: usize,
    pub codec: FixedPointCodec,
    pub key_bits: u32,
    pub message_log: bool,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            train: TrainConfig::default(),
            participation: 1.0,
            tau: 0.05,
            rho: 0.5,
            dp: DpParams::default(),
            delta: 1e-5,
            server_lr: ServerLr::default(),
            divisor: AggregationDivisor::default(),
            fisher_mode: FisherMode::default(),
            fisher_max_samples: 0,
            codec: FixedPointCodec::default(),
            key_bits: 2048,
            message_log: false,
        }
    }
}

/// Everything needed to start a simulation.
#[derive(Debug, Clone)]
pub struct SimulationSetup {
    pub seed: u64,
    pub spec: ModelSpec,
    pub clients: Vec<LabeledDataset>,
    pub test: Option<LabeledDataset>,
    pub params: ProtocolParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub train_s: f64,
    pub encrypt_s: f64,
    pub aggregate_s: f64,
    pub decrypt_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based round number.
    pub round: usize,
    pub participants: Vec<usize>,
    /// Per-participant zone ratios, aligned with `participants`.
    pub zone_ratios: Vec<ZoneRatios>,
    /// Global-model accuracy on the held-out set; NaN without one.
    pub accuracy: f64,
    pub privacy: PrivacyReport,
    pub timings: StageTimings,
}

impl RoundReport {
    /// Zone ratios averaged over participants.
    pub fn mean_ratios(&self) -> ZoneRatios {
        let n = self.zone_ratios.len().max(1) as f64;
        let mut m = ZoneRatios::default();
        for r in &self.zone_ratios {
            m.enc += r.enc / n;
            m.pers += r.pers / n;
            m.noise += r.noise / n;
        }
        m
    }
}

/// A round's report plus the material an observer may inspect.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    /// Global model broadcast at the start of the round.
    pub start_global: LayeredParameters,
    pub zones: Vec<ZonePartition>,
    pub local_masks: Vec<SensitivityMask>,
    /// Exactly what the aggregation server received, in client-id order.
    pub uploads: Vec<ClientUpload>,
    /// Unprotected local updates, kept for verification only.
    pub deltas: Vec<LayeredParameters>,
    pub aggregate: RoundAggregate,
    pub finalized: Finalized,
}

pub struct Simulation {
    seed: u64,
    model: Mlp,
    params: ProtocolParams,
    key: KeyServer,
    agg: AggServer,
    clients: Vec<Client>,
    test: Option<LabeledDataset>,
    ledger: PrivacyLedger,
    rounds_done: usize,
    message_log: Vec<u8>,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("seed", &self.seed)
            .field("clients", &self.clients.len())
            .field("rounds_done", &self.rounds_done)
            .finish_non_exhaustive()
    }
}

fn validate(setup: &SimulationSetup) -> Result<()> {
    let p = &setup.params;
    if setup.clients.is_empty() {
        return Err(Error::config("n_clients", "at least one client is required"));
    }
    if let Some(i) = setup.clients.iter().position(|c| c.is_empty()) {
        return Err(Error::config("n_clients", format!("client {i} has no data")));
    }
    for c in setup.clients.iter().chain(setup.test.iter()) {
        if c.dim() != setup.spec.input_dim || c.num_classes() > setup.spec.num_classes {
            return Err(Error::config("data", "dataset shape does not match the model"));
        }
    }
    if !(p.participation > 0.0 && p.participation <= 1.0) {
        return Err(Error::config("q", "must be in (0, 1]"));
    }
    if !(p.rho > 0.0 && p.rho <= 1.0) {
        return Err(Error::config("rho", "must be in (0, 1]"));
    }
    if p.tau.is_nan() {
        return Err(Error::config("tau", "must be a number"));
    }
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(Error::config("delta", "must be in (0, 1)"));
    }
    if p.train.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(p.train.lr >= 0.0 && p.train.lr.is_finite()) {
        return Err(Error::config("lr", "must be a non-negative number"));
    }
    if setup.clients.len() as u64 > p.codec.capacity() {
        return Err(Error::config(
            "guard_bits",
            format!("{} clients exceed the {}-summand capacity", setup.clients.len(), p.codec.capacity()),
        ));
    }
    p.dp.validate().map_err(|e| Error::config("clip_norm/sigma/alpha_grid", e.to_string()))?;
    Ok(())
}

impl Simulation {
    /// Generates keys, initializes the global model, and seats the clients.
    pub fn new(setup: SimulationSetup) -> Result<Self> {
        validate(&setup)?;
        let SimulationSetup {
            seed,
            spec,
            clients,
            test,
            params,
        } = setup;
        let model = Mlp::new(spec);
        let global = model.init(&mut derive(seed, Stream::ModelInit, 0, 0));
        let (pk, sk) = he::keygen(params.key_bits, &mut derive(seed, Stream::Keygen, 0, 0))
            .map_err(|e| Error::config("key_bits", e.to_string()))?;
        he::slots_per_chunk::<he::Paillier>(&pk, params.codec)
            .map_err(|e| Error::config("frac_bits/int_bits/guard_bits", e.to_string()))?;
        let agg = AggServer::new(pk, params.rho);
        let key = KeyServer::new(sk, global, params.server_lr, params.divisor);
        let clients = clients
            .into_iter()
            .enumerate()
            .map(|(id, data)| Client::new(id, data, params.tau))
            .collect();
        let ledger = PrivacyLedger::new(&params.dp.alpha_grid)?;
        Ok(Simulation {
            seed,
            model,
            params,
            key,
            agg,
            clients,
            test,
            ledger,
            rounds_done: 0,
            message_log: Vec::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn global_model(&self) -> &LayeredParameters {
        self.key.global_model()
    }

    pub fn key_server(&self) -> &KeyServer {
        &self.key
    }

    pub fn agg_server(&self) -> &AggServer {
        &self.agg
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client_mut(&mut self, id: usize) -> Option<&mut Client> {
        self.clients.get_mut(id)
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn rounds_completed(&self) -> usize {
        self.rounds_done
    }

    pub fn take_message_log(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.message_log)
    }

    /// Number of SGD steps client `id` takes per round.
    pub fn local_steps(&self, id: usize) -> usize {
        Mlp::steps_per_round(self.clients[id].data.len(), &self.params.train)
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.rounds_done + 1;
        let seed = self.seed;
        let participants = poisson_select(
            self.clients.len(),
            self.params.participation,
            &mut derive(seed, Stream::Selection, round as u64, 0),
        )?;
        let k = participants.len();
        let start_global = self.key.global_model().clone();
        let mut timings = StageTimings::default();

        let mut updates = Vec::with_capacity(k);
        for &id in &participants {
            let client = &self.clients[id];
            let start = client.start_model(&start_global)?;
            let update = client_update(
                &self.model,
                client,
                &start,
                &self.params.train,
                self.params.fisher_mode,
                self.params.fisher_max_samples,
                &mut derive(seed, Stream::Train, id as u64, round as u64),
            )?;
            timings.train_s += update.train_seconds;
            updates.push(update);
        }

        let t0 = Instant::now();
        let local_masks: Vec<SensitivityMask> = updates.iter().map(|u| u.mask.clone()).collect();
        let zones = self.agg.negotiate(&local_masks)?;
        timings.aggregate_s += t0.elapsed().as_secs_f64();

        let protect_params = ProtectParams {
            pk: self.agg.public_key(),
            codec: self.params.codec,
            dp: &self.params.dp,
            participants: k,
        };
        let mut uploads = Vec::with_capacity(k);
        for ((&id, update), zone) in participants.iter().zip(&updates).zip(&zones) {
            let (upload, enc_s) = protect(
                id,
                &update.delta,
                zone,
                &protect_params,
                &mut derive(seed, Stream::Encrypt, id as u64, round as u64),
                &mut derive(seed, Stream::Noise, id as u64, round as u64),
            )?;
            timings.encrypt_s += enc_s;
            uploads.push(upload);
        }
        if self.params.message_log {
            self.log_round(round, &uploads);
        }

        let t0 = Instant::now();
        let aggregate = self.agg.combine(&uploads)?;
        timings.aggregate_s += t0.elapsed().as_secs_f64();

        let finalized = self.key.finalize(&aggregate)?;
        timings.decrypt_s = finalized.decrypt_seconds;

        let new_global = self.key.global_model().clone();
        for ((&id, update), zone) in participants.iter().zip(&updates).zip(&zones) {
            let merged = client_merge(&zone.pers, &update.trained, &new_global)?;
            self.clients[id].remember(merged, zone.pers.clone());
        }

        self.ledger.compose_gaussian(self.params.dp.effective_sigma(k))?;
        let privacy = self.ledger.best_eps(self.params.delta)?;
        let accuracy = match &self.test {
            Some(test) if !test.is_empty() => self.model.evaluate(&new_global, test.as_batch())?,
            _ => f64::NAN,
        };
        self.rounds_done = round;

        let report = RoundReport {
            round,
            participants: participants.clone(),
            zone_ratios: zones.iter().map(ZonePartition::ratios).collect(),
            accuracy,
            privacy,
            timings,
        };
        Ok(RoundOutcome {
            report,
            start_global,
            zones,
            local_masks,
            uploads,
            deltas: updates.into_iter().map(|u| u.delta).collect(),
            aggregate,
            finalized,
        })
    }

    /// Runs `rounds` rounds, handing each outcome to `observe` as it completes.
    pub fn run(
        &mut self,
        rounds: usize,
        mut observe: impl FnMut(&Simulation, &RoundOutcome) -> Result<()>,
    ) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let outcome = self.run_round()?;
            observe(self, &outcome)?;
            reports.push(outcome.report);
        }
        Ok(reports)
    }

    fn log_round(&mut self, round: usize, uploads: &[ClientUpload]) {
        let log = &mut self.message_log;
        log.extend_from_slice(&(round as u32).to_le_bytes());
        log.extend_from_slice(&(uploads.len() as u32).to_le_bytes());
        for u in uploads {
            log.extend_from_slice(&(u.client_id as u32).to_le_bytes());
            log.extend_from_slice(&u.enc.to_wire());
            log.extend_from_slice(&u.noise_indices.to_wire());
            let ct = u.ciphertext.as_ref().map(|c| c.to_bytes()).unwrap_or_default();
            log.extend_from_slice(&(ct.len() as u32).to_le_bytes());
            log.extend_from_slice(&ct);
            for v in &u.noise_values {
                log.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn server_lr_parsing() {
        assert_eq!("fedavg_equiv".parse::<ServerLr>().unwrap(), ServerLr::Participants);
        assert_eq!("participants".parse::<ServerLr>().unwrap(), ServerLr::Participants);
        assert_eq!(ServerLr::Participants.to_string(), "fedavg_equiv");
        assert_eq!("0.5".parse::<ServerLr>().unwrap(), ServerLr::Fixed(0.5));
        assert!("0".parse::<ServerLr>().is_err());
        assert!("fast".parse::<ServerLr>().is_err());
        assert_eq!(ServerLr::Participants.value(7), 7.0);
        assert_eq!(ServerLr::Fixed(0.5).to_string(), "0.5");
    }

    #[test]
    fn divisor_parsing() {
        assert_eq!("contributors".parse::<AggregationDivisor>().unwrap(), AggregationDivisor::Contributors);
        assert!("all".parse::<AggregationDivisor>().is_err());
    }
}
