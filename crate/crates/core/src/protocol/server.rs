//! The two servers. The aggregation server is built from a public key only;
//! the key server is the sole owner of the secret key.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::he::{self, PackedCiphertext, PublicKey, SecretKey};
use crate::mask::SensitivityMask;
use crate::model::LayeredParameters;
use crate::negotiation::{negotiate, ZonePartition};

use super::{AggregationDivisor, ClientUpload, ServerLr};

/// What the aggregation server forwards to the key server after a round.
#[derive(Debug, Clone)]
pub struct RoundAggregate {
    pub participants: Vec<usize>,
    pub enc: SensitivityMask,
    /// Homomorphic sum of the encrypted slices; `None` when the zone is empty.
    pub ct_sum: Option<PackedCiphertext>,
    /// Per-index sum of noisy plaintext values over all uploads.
    pub noise_sum: Vec<f64>,
    /// Per-index number of uploads that carried a plaintext value.
    pub noise_count: Vec<u32>,
}

/// Aggregation server. Holds the public key and the round's public material.
#[derive(Debug)]
pub struct AggServer {
    pk: Arc<PublicKey>,
    rho: f64,
}

impl AggServer {
    pub fn new(pk: Arc<PublicKey>, rho: f64) -> Self {
        AggServer { pk, rho }
    }

    pub fn public_key(&self) -> &Arc<PublicKey> {
        &self.pk
    }

    /// Collects the participants' local masks and returns their zones, in
    /// the same order.
    pub fn negotiate(&self, local_masks: &[SensitivityMask]) -> Result<Vec<ZonePartition>> {
        negotiate(local_masks, self.rho)
    }

    /// Sums ciphertexts homomorphically and noisy plaintexts per index.
    /// Uploads are reduced in ascending client-id order.
    pub fn combine(&self, uploads: &[ClientUpload]) -> Result<RoundAggregate> {
        let mut ordered: Vec<&ClientUpload> = uploads.iter().collect();
        ordered.sort_by_key(|u| u.client_id);
        let first = *ordered
            .first()
            .ok_or_else(|| Error::Protocol("aggregation needs at least one upload".into()))?;
        if ordered.windows(2).any(|w| w[0].client_id == w[1].client_id) {
            return Err(Error::Protocol("duplicate upload from one client".into()));
        }
        let universe = first.enc.universe();
        let enc = first.enc.clone();

        let mut ct_sum: Option<PackedCiphertext> = None;
        let mut noise_sum = vec![0.0; universe];
        let mut noise_count = vec![0u32; universe];
        for u in &ordered {
            if u.enc != enc {
                return Err(Error::Protocol(format!(
                    "client {} encrypted a different zone than client {}",
                    u.client_id, first.client_id
                )));
            }
            if u.noise_indices.universe() != universe || u.noise_values.len() != u.noise_indices.len() {
                return Err(Error::Protocol(format!("client {} sent a malformed plaintext part", u.client_id)));
            }
            match (&u.ciphertext, enc.is_empty()) {
                (Some(ct), false) => {
                    if ct.public_key() != &self.pk || ct.slot_count() != enc.len() {
                        return Err(Error::Protocol(format!(
                            "client {} sent a ciphertext that does not match the zone",
                            u.client_id
                        )));
                    }
                    ct_sum = Some(match ct_sum {
                        None => ct.clone(),
                        Some(acc) => he::ct_add(&acc, ct)?,
                    });
                }
                (None, true) => {}
                _ => {
                    return Err(Error::Protocol(format!(
                        "client {} ciphertext presence does not match the zone",
                        u.client_id
                    )))
                }
            }
            for (&j, &v) in u.noise_indices.indices().iter().zip(&u.noise_values) {
                noise_sum[j] += v;
                noise_count[j] += 1;
            }
        }
        Ok(RoundAggregate {
            participants: ordered.iter().map(|u| u.client_id).collect(),
            enc,
            ct_sum,
            noise_sum,
            noise_count,
        })
    }
}

/// Result of the key server's step.
#[derive(Debug, Clone)]
pub struct Finalized {
    /// Full-length summed update before division and the server step.
    pub delta_sum: Vec<f64>,
    /// Decrypted sums over the encrypted zone, in ascending index order.
    pub enc_sum: Vec<f64>,
    pub decrypt_seconds: f64,
}

/// Key server: keeps the secret key and the global model.
#[derive(Debug)]
pub struct KeyServer {
    sk: SecretKey,
    pk: Arc<PublicKey>,
    global: LayeredParameters,
    server_lr: ServerLr,
    divisor: AggregationDivisor,
}

impl KeyServer {
    pub fn new(sk: SecretKey, global: LayeredParameters, server_lr: ServerLr, divisor: AggregationDivisor) -> Self {
        KeyServer {
            pk: sk.public_key().clone(),
            sk,
            global,
            server_lr,
            divisor,
        }
    }

    pub fn public_key(&self) -> &Arc<PublicKey> {
        &self.pk
    }

    pub fn global_model(&self) -> &LayeredParameters {
        &self.global
    }

    /// Decrypts a ciphertext sum. Exposed for audits and tests; the protocol
    /// itself only decrypts inside [`KeyServer::finalize`].
    pub fn decrypt_sum(&self, ct: &PackedCiphertext) -> Result<Vec<f64>> {
        he::decrypt(&self.sk, ct, ct.summands())
    }

    /// Decrypts the encrypted sums, merges them with the plaintext sums, and
    /// steps the global model by `server_lr * delta_sum / divisor`.
    pub fn finalize(&mut self, agg: &RoundAggregate) -> Result<Finalized> {
        let k = agg.participants.len();
        if k == 0 {
            return Err(Error::Protocol("no participants to finalize".into()));
        }
        let universe = self.global.len();
        if agg.enc.universe() != universe || agg.noise_sum.len() != universe || agg.noise_count.len() != universe {
            return Err(Error::Shape("aggregate does not match the global model".into()));
        }

        let start = Instant::now();
        let enc_sum = match &agg.ct_sum {
            Some(ct) => {
                if ct.summands() != k as u64 {
                    return Err(Error::Protocol(format!(
                        "ciphertext sums {} uploads but {k} clients participated",
                        ct.summands()
                    )));
                }
                he::decrypt(&self.sk, ct, k as u64)?
            }
            None if agg.enc.is_empty() => Vec::new(),
            None => return Err(Error::Protocol("encrypted zone without a ciphertext".into())),
        };
        let decrypt_seconds = start.elapsed().as_secs_f64();
        if enc_sum.len() != agg.enc.len() {
            return Err(Error::Protocol("decrypted slice does not match the encrypted zone".into()));
        }

        let mut delta_sum = agg.noise_sum.clone();
        for (&j, &v) in agg.enc.indices().iter().zip(&enc_sum) {
            delta_sum[j] = v;
        }
        let step = self.server_lr.value(k);
        let is_enc = agg.enc.indicator();
        for (j, w) in self.global.values_mut().iter_mut().enumerate() {
            let denom = match self.divisor {
                AggregationDivisor::Participants => k as f64,
                AggregationDivisor::Contributors if is_enc[j] => k as f64,
                AggregationDivisor::Contributors => agg.noise_count[j] as f64,
            };
            if denom > 0.0 {
                *w += step * delta_sum[j] / denom;
            }
        }
        if self.global.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global model after the server step".into()));
        }
        Ok(Finalized {
            delta_sum,
            enc_sum,
            decrypt_seconds,
        })
    }
}
