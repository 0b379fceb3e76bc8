//! Index sets over the flat parameter vector.

use crate::error::{Error, Result};

/// A set of parameter indices below `universe`, kept sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SensitivityMask {
    indices: Vec<usize>,
    universe: usize,
}

impl SensitivityMask {
    pub fn empty(universe: usize) -> Self {
        SensitivityMask {
            indices: Vec::new(),
            universe,
        }
    }

    pub fn full(universe: usize) -> Self {
        SensitivityMask {
            indices: (0..universe).collect(),
            universe,
        }
    }

    /// Builds a mask from arbitrary indices; duplicates collapse.
    pub fn from_indices(indices: impl IntoIterator<Item = usize>, universe: usize) -> Result<Self> {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= universe {
                return Err(Error::Shape(format!("index {last} outside universe of {universe}")));
            }
        }
        Ok(SensitivityMask { indices, universe })
    }

    pub fn from_predicate(universe: usize, mut keep: impl FnMut(usize) -> bool) -> Self {
        SensitivityMask {
            indices: (0..universe).filter(|&j| keep(j)).collect(),
            universe,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// `|mask| / universe`, or 0 for an empty universe.
    pub fn ratio(&self) -> f64 {
        if self.universe == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.universe as f64
        }
    }

    /// 0/1 vector of length `universe`.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.universe];
        for &j in &self.indices {
            out[j] = true;
        }
        out
    }

    fn check_universe(&self, other: &SensitivityMask) -> Result<()> {
        if self.universe != other.universe {
            return Err(Error::Protocol(format!(
                "masks over different universes ({} vs {})",
                self.universe, other.universe
            )));
        }
        Ok(())
    }

    fn merge(&self, other: &SensitivityMask, keep_left: bool, keep_both: bool, keep_right: bool) -> Result<Self> {
        self.check_universe(other)?;
        let (a, b) = (&self.indices, &other.indices);
        let mut out = Vec::with_capacity(a.len().max(b.len()));
        let (mut i, mut k) = (0, 0);
        while i < a.len() || k < b.len() {
            match (a.get(i), b.get(k)) {
                (Some(&x), Some(&y)) if x == y => {
                    if keep_both {
                        out.push(x);
                    }
                    i += 1;
                    k += 1;
                }
                (Some(&x), Some(&y)) if x < y => {
                    if keep_left {
                        out.push(x);
                    }
                    i += 1;
                }
                (Some(_), Some(&y)) => {
                    if keep_right {
                        out.push(y);
                    }
                    k += 1;
                }
                (Some(&x), None) => {
                    if keep_left {
                        out.push(x);
                    }
                    i += 1;
                }
                (None, Some(&y)) => {
                    if keep_right {
                        out.push(y);
                    }
                    k += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        Ok(SensitivityMask {
            indices: out,
            universe: self.universe,
        })
    }

    pub fn union(&self, other: &SensitivityMask) -> Result<Self> {
        self.merge(other, true, true, true)
    }

    pub fn intersection(&self, other: &SensitivityMask) -> Result<Self> {
        self.merge(other, false, true, false)
    }

    pub fn difference(&self, other: &SensitivityMask) -> Result<Self> {
        self.merge(other, true, false, false)
    }

    pub fn complement(&self) -> Self {
        let member = self.indicator();
        SensitivityMask::from_predicate(self.universe, |j| !member[j])
    }

    pub fn is_subset(&self, other: &SensitivityMask) -> bool {
        self.universe == other.universe && self.indices.iter().all(|&j| other.contains(j))
    }

    pub fn is_disjoint(&self, other: &SensitivityMask) -> bool {
        self.indices.iter().all(|&j| !other.contains(j))
    }

    /// Gathers `values[j]` for every member, in ascending index order.
    pub fn gather(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.universe {
            return Err(Error::Shape(format!(
                "vector of length {} does not match universe {}",
                values.len(),
                self.universe
            )));
        }
        Ok(self.indices.iter().map(|&j| values[j]).collect())
    }

    /// Wire form: `u32` count, then the sorted indices as `u32`, all
    /// little-endian.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.indices.len() + 1));
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for &j in &self.indices {
            out.extend_from_slice(&(j as u32).to_le_bytes());
        }
        out
    }

    pub fn from_wire(bytes: &[u8], universe: usize) -> Result<Self> {
        let word = |k: usize| -> Result<usize> {
            bytes
                .get(4 * k..4 * k + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")) as usize)
                .ok_or_else(|| Error::Wire("truncated mask".into()))
        };
        let count = word(0)?;
        if bytes.len() != 4 * (count + 1) {
            return Err(Error::Wire(format!(
                "mask declares {count} indices but carries {} bytes",
                bytes.len()
            )));
        }
        let mut indices = Vec::with_capacity(count);
        for k in 0..count {
            let j = word(k + 1)?;
            if j >= universe {
                return Err(Error::Wire(format!("index {j} outside universe of {universe}")));
            }
            if indices.last().is_some_and(|&prev| prev >= j) {
                return Err(Error::Wire("mask indices must be strictly increasing".into()));
            }
            indices.push(j);
        }
        Ok(SensitivityMask { indices, universe })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(ix: &[usize], u: usize) -> SensitivityMask {
        SensitivityMask::from_indices(ix.iter().copied(), u).unwrap()
    }

    #[test]
    fn set_operations() {
        let a = m(&[1, 2, 5], 8);
        let b = m(&[2, 3, 5, 7], 8);
        assert_eq!(a.union(&b).unwrap(), m(&[1, 2, 3, 5, 7], 8));
        assert_eq!(a.intersection(&b).unwrap(), m(&[2, 5], 8));
        assert_eq!(a.difference(&b).unwrap(), m(&[1], 8));
        assert_eq!(a.complement(), m(&[0, 3, 4, 6, 7], 8));
        assert!(m(&[2, 5], 8).is_subset(&a));
        assert!(!a.is_subset(&b));
        assert!(a.difference(&b).unwrap().is_disjoint(&b));
    }

    #[test]
    fn universe_mismatch_is_a_protocol_error() {
        assert!(matches!(m(&[1], 4).union(&m(&[1], 5)), Err(Error::Protocol(_))));
    }

    #[test]
    fn duplicates_collapse_and_range_is_checked() {
        assert_eq!(m(&[3, 1, 3], 4).indices(), &[1, 3]);
        assert!(SensitivityMask::from_indices([4], 4).is_err());
    }

    #[test]
    fn wire_round_trip() {
        let a = m(&[0, 9, 70_000], 100_000);
        let bytes = a.to_wire();
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(SensitivityMask::from_wire(&bytes, 100_000).unwrap(), a);
        assert_eq!(SensitivityMask::from_wire(&SensitivityMask::empty(3).to_wire(), 3).unwrap(), SensitivityMask::empty(3));
    }

    #[test]
    fn malformed_wire_is_rejected() {
        let a = m(&[1, 2], 4).to_wire();
        assert!(SensitivityMask::from_wire(&a[..6], 4).is_err());
        assert!(SensitivityMask::from_wire(&a, 2).is_err());
        let mut unsorted = 2u32.to_le_bytes().to_vec();
        unsorted.extend_from_slice(&2u32.to_le_bytes());
        unsorted.extend_from_slice(&1u32.to_le_bytes());
        assert!(SensitivityMask::from_wire(&unsorted, 4).is_err());
    }

    #[test]
    fn gather_and_ratio() {
        let a = m(&[0, 2], 4);
        assert_eq!(a.gather(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 3.0]);
        assert!(a.gather(&[1.0]).is_err());
        assert_eq!(a.ratio(), 0.5);
        assert_eq!(SensitivityMask::empty(0).ratio(), 0.0);
    }
}
