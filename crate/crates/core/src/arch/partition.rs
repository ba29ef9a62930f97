use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K contiguous, non-empty unit ranges covering `0..units` exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    units: usize,
    ranges: Vec<Range<usize>>,
}

/// Groups `units` units into `k` blocks of near-equal size. The first
/// `units % k` blocks take one extra unit.
pub fn partition(units: usize, k: usize) -> Result<BlockPartition> {
    if k < 1 || k > units {
        return Err(Error::Partition(format!(
            "K must be in 1..={units}, got {k}"
        )));
    }
    let (base, extra) = (units / k, units % k);
    let mut ranges = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        ranges.push(start..start + len);
        start += len;
    }
    Ok(BlockPartition { units, ranges })
}

impl BlockPartition {
    pub fn k(&self) -> usize {
        self.ranges.len()
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Unit index after which each block ends (exclusive upper bounds).
    pub fn boundaries(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.end).collect()
    }

    pub fn block_of(&self, unit: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&unit))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let mut next = 0;
        for r in &self.ranges {
            if r.start != next || r.is_empty() {
                return Err(Error::Partition(format!("non-contiguous range {r:?}")));
            }
            next = r.end;
        }
        if next != self.units || self.ranges.is_empty() {
            return Err(Error::Partition(format!(
                "ranges cover 0..{next}, expected 0..{}",
                self.units
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(partition(16, 4).unwrap().sizes(), vec![4, 4, 4, 4]);
        assert_eq!(partition(18, 4).unwrap().sizes(), vec![5, 5, 4, 4]);
        assert!(partition(3, 4).is_err());
        assert!(partition(3, 0).is_err());
        assert_eq!(partition(16, 4).unwrap().boundaries(), vec![4, 8, 12, 16]);
        assert_eq!(partition(8, 8).unwrap().sizes(), vec![1; 8]);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let p = partition(10, 3).unwrap();
        assert_eq!(BlockPartition::from_toml(&p.to_toml().unwrap()).unwrap(), p);
        let bad = "units = 4\n[[ranges]]\nstart = 0\nend = 1\n[[ranges]]\nstart = 2\nend = 4\n";
        assert!(BlockPartition::from_toml(bad).is_err());
    }

    proptest! {
        #[test]
        fn balanced_contiguous_cover(units in 1usize..200, k_seed in 0usize..1000) {
            let k = 1 + k_seed % units;
            let p = partition(units, k).unwrap();
            let sizes = p.sizes();
            prop_assert_eq!(sizes.len(), k);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let flat: Vec<usize> = p.ranges().iter().flat_map(|r| r.clone()).collect();
            prop_assert_eq!(flat, (0..units).collect::<Vec<_>>());
        }
    }
}
