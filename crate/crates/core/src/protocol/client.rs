//! Client-side steps: local training and scoring, protection of the update,
//! and the personalized merge.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::data::LabeledDataset;
use crate::dp::{self, DpParams};
use crate::error::{Error, Result};
use crate::he::{self, FixedPointCodec, PackedCiphertext, PublicKey};
use crate::mask::SensitivityMask;
use crate::model::{LayeredParameters, Mlp, TrainConfig};
use crate::negotiation::ZonePartition;
use crate::sensitivity::{compute_fisher, FisherMode, FisherScores};

#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: LabeledDataset,
    pub tau: f64,
    /// Model and personalized mask from this client's last round.
    personal: Option<(LayeredParameters, SensitivityMask)>,
}

impl Client {
    pub fn new(id: usize, data: LabeledDataset, tau: f64) -> Self {
        Client {
            id,
            data,
            tau,
            personal: None,
        }
    }

    /// Personalized mask from the client's last participation, if any.
    pub fn personalized_mask(&self) -> Option<&SensitivityMask> {
        self.personal.as_ref().map(|(_, m)| m)
    }

    pub fn local_model(&self) -> Option<&LayeredParameters> {
        self.personal.as_ref().map(|(p, _)| p)
    }

    /// Model the client trains from: its own values on its last personalized
    /// zone, the current global model everywhere else.
    pub fn start_model(&self, global: &LayeredParameters) -> Result<LayeredParameters> {
        match &self.personal {
            Some((local, pers)) => client_merge(pers, local, global),
            None => Ok(global.clone()),
        }
    }

    pub(crate) fn remember(&mut self, model: LayeredParameters, pers: SensitivityMask) {
        self.personal = Some((model, pers));
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub trained: LayeredParameters,
    pub delta: LayeredParameters,
    pub scores: FisherScores,
    pub mask: SensitivityMask,
    pub train_seconds: f64,
}

/// Trains from `start`, then scores the trained model on the client's data
/// and thresholds the scores at the client's `tau`.
pub fn client_update<R: Rng + ?Sized>(
    model: &Mlp,
    client: &Client,
    start: &LayeredParameters,
    train: &TrainConfig,
    fisher_mode: FisherMode,
    fisher_max_samples: usize,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let t0 = Instant::now();
    let (trained, delta) = model.local_train(start, client.data.as_batch(), train, rng)?;
    let raw = compute_fisher(model, &trained, client.data.as_batch(), fisher_mode, fisher_max_samples)?;
    let scores = FisherScores::from_raw(raw, model.layout().clone())?;
    let mask = scores.mask(client.tau);
    Ok(ClientUpdate {
        trained,
        delta,
        scores,
        mask,
        train_seconds: t0.elapsed().as_secs_f64(),
    })
}

/// What a client sends to the aggregation server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    /// Indices covered by the ciphertext, in slot order.
    pub enc: SensitivityMask,
    pub ciphertext: Option<PackedCiphertext>,
    pub noise_indices: SensitivityMask,
    /// Clipped and noised update values aligned with `noise_indices`.
    pub noise_values: Vec<f64>,
}

impl ClientUpload {
    /// Plaintext part as `(index, value)` pairs.
    pub fn plaintext(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.noise_indices.indices().iter().copied().zip(self.noise_values.iter().copied())
    }
}

pub struct ProtectParams<'a> {
    pub pk: &'a Arc<PublicKey>,
    pub codec: FixedPointCodec,
    pub dp: &'a DpParams,
    pub participants: usize,
}

/// Encrypts the consensus zone, clips and noises the noise zone, and drops
/// the personalized zone. Returns the upload and the encryption time.
pub fn protect<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    client_id: usize,
    delta: &LayeredParameters,
    zones: &ZonePartition,
    params: &ProtectParams<'_>,
    encrypt_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<(ClientUpload, f64)> {
    if zones.universe() != delta.len() {
        return Err(Error::Shape(format!(
            "zones over {} parameters for an update of {}",
            zones.universe(),
            delta.len()
        )));
    }
    let t0 = Instant::now();
    let ciphertext = if zones.enc.is_empty() {
        None
    } else {
        let slice = zones.enc.gather(delta.values())?;
        Some(he::encrypt(params.pk, &slice, params.codec, encrypt_rng)?)
    };
    let encrypt_seconds = t0.elapsed().as_secs_f64();

    let mut noise_values = zones.noise.gather(delta.values())?;
    dp::clip_l2(&mut noise_values, params.dp.clip_norm);
    dp::gaussian_noise(&mut noise_values, params.dp, params.participants, noise_rng);
    Ok((
        ClientUpload {
            client_id,
            enc: zones.enc.clone(),
            ciphertext,
            noise_indices: zones.noise.clone(),
            noise_values,
        },
        encrypt_seconds,
    ))
}

/// `pers ⊙ local + (1 - pers) ⊙ global`.
pub fn client_merge(
    pers: &SensitivityMask,
    local: &LayeredParameters,
    global: &LayeredParameters,
) -> Result<LayeredParameters> {
    local
        .check_same_shape(global)
        .map_err(|e| Error::Protocol(format!("cannot merge: {e}")))?;
    if pers.universe() != global.len() {
        return Err(Error::Protocol(format!(
            "personalized mask over {} parameters for a model of {}",
            pers.universe(),
            global.len()
        )));
    }
    let mut merged = global.clone();
    let values = merged.values_mut();
    for &j in pers.indices() {
        values[j] = local.values()[j];
    }
    Ok(merged)
}
