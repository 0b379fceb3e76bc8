//! Consensus, personalized and noise zones from the clients' local masks.

use crate::error::{Error, Result};
use crate::mask::SensitivityMask;

/// One client's view of the round's three zones.
#[derive(Debug, Clone, PartialEq)]
pub struct ZonePartition {
    pub enc: SensitivityMask,
    pub pers: SensitivityMask,
    pub noise: SensitivityMask,
}

impl ZonePartition {
    pub fn universe(&self) -> usize {
        self.enc.universe()
    }

    pub fn ratios(&self) -> ZoneRatios {
        ZoneRatios {
            enc: self.enc.ratio(),
            pers: self.pers.ratio(),
            noise: self.noise.ratio(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ZoneRatios {
    pub enc: f64,
    pub pers: f64,
    pub noise: f64,
}

/// Smallest vote count `v` with `v / k >= rho`. Products within 1e-9 of an
/// integer are treated as that integer so that e.g. `rho = 0.3, k = 10`
/// needs exactly 3 votes.
pub fn votes_needed(rho: f64, k: usize) -> usize {
    let target = rho * k as f64;
    let nearest = target.round();
    let need = if (target - nearest).abs() <= 1e-9 { nearest } else { target.ceil() };
    (need as usize).max(1)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter(format!("consensus fraction {rho} not in (0, 1]")));
    }
    Ok(())
}

/// Indices flagged by at least a `rho` fraction of the local masks.
pub fn consensus_mask(local_masks: &[SensitivityMask], rho: f64) -> Result<SensitivityMask> {
    check_rho(rho)?;
    let first = local_masks
        .first()
        .ok_or_else(|| Error::Protocol("consensus over an empty set of masks".into()))?;
    let universe = first.universe();
    let mut votes = vec![0usize; universe];
    for m in local_masks {
        if m.universe() != universe {
            return Err(Error::Protocol(format!(
                "masks over different universes ({} vs {universe})",
                m.universe()
            )));
        }
        for &j in m.indices() {
            votes[j] += 1;
        }
    }
    let need = votes_needed(rho, local_masks.len());
    Ok(SensitivityMask::from_predicate(universe, |j| votes[j] >= need))
}

pub fn personalized_mask(local: &SensitivityMask, enc: &SensitivityMask) -> Result<SensitivityMask> {
    local.difference(enc)
}

pub fn noise_mask(enc: &SensitivityMask, pers: &SensitivityMask) -> Result<SensitivityMask> {
    Ok(enc.union(pers)?.complement())
}

/// Zone partitions in the order of `local_masks`.
pub fn negotiate(local_masks: &[SensitivityMask], rho: f64) -> Result<Vec<ZonePartition>> {
    let enc = consensus_mask(local_masks, rho)?;
    local_masks
        .iter()
        .map(|local| {
            let pers = personalized_mask(local, &enc)?;
            let noise = noise_mask(&enc, &pers)?;
            Ok(ZonePartition {
                enc: enc.clone(),
                pers,
                noise,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(ix: &[usize], u: usize) -> SensitivityMask {
        SensitivityMask::from_indices(ix.iter().copied(), u).unwrap()
    }

    #[test]
    fn half_consensus_of_three() {
        let masks = [m(&[1, 2], 5), m(&[2, 3], 5), m(&[2], 5)];
        assert_eq!(consensus_mask(&masks, 0.5).unwrap(), m(&[2], 5));
        let zones = negotiate(&masks, 0.5).unwrap();
        assert_eq!(zones[0].enc, m(&[2], 5));
        assert_eq!(zones[0].pers, m(&[1], 5));
        assert_eq!(zones[0].noise, m(&[0, 3, 4], 5));
    }

    #[test]
    fn extreme_fractions() {
        let masks = [m(&[0, 1, 4], 6), m(&[1, 4, 5], 6), m(&[1, 2, 4], 6)];
        assert_eq!(consensus_mask(&masks, 1.0).unwrap(), m(&[1, 4], 6));
        assert_eq!(consensus_mask(&masks, 1.0 / 3.0).unwrap(), m(&[0, 1, 2, 4, 5], 6));
    }

    #[test]
    fn vote_threshold_is_exact_at_integers() {
        assert_eq!(votes_needed(0.3, 10), 3);
        assert_eq!(votes_needed(0.7, 10), 7);
        assert_eq!(votes_needed(0.5, 3), 2);
        assert_eq!(votes_needed(1.0 / 7.0, 7), 1);
        assert_eq!(votes_needed(0.01, 5), 1);
    }

    #[test]
    fn invalid_inputs() {
        let masks = [m(&[0], 2)];
        assert!(matches!(consensus_mask(&masks, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(consensus_mask(&masks, 1.5), Err(Error::Parameter(_))));
        assert!(matches!(consensus_mask(&[], 0.5), Err(Error::Protocol(_))));
        assert!(matches!(consensus_mask(&[m(&[0], 2), m(&[0], 3)], 0.5), Err(Error::Protocol(_))));
    }

    #[test]
    fn personalized_and_noise_edge_cases() {
        assert_eq!(personalized_mask(&m(&[1, 2], 4), &m(&[2], 4)).unwrap(), m(&[1], 4));
        assert!(personalized_mask(&m(&[2], 4), &m(&[1, 2], 4)).unwrap().is_empty());
        assert_eq!(personalized_mask(&m(&[1, 2], 4), &m(&[], 4)).unwrap(), m(&[1, 2], 4));
        assert_eq!(noise_mask(&m(&[0], 4), &m(&[1], 4)).unwrap(), m(&[2, 3], 4));
        assert_eq!(noise_mask(&m(&[], 4), &m(&[], 4)).unwrap(), SensitivityMask::full(4));
        assert!(noise_mask(&m(&[0, 1], 4), &m(&[2, 3], 4)).unwrap().is_empty());
    }

    #[test]
    fn single_client_full_agreement() {
        let zones = negotiate(&[m(&[0, 3], 5)], 1.0).unwrap();
        assert_eq!(zones[0].enc, m(&[0, 3], 5));
        assert!(zones[0].pers.is_empty());
        let r = zones[0].ratios();
        assert!((r.enc + r.pers + r.noise - 1.0).abs() < 1e-12);
    }
}
