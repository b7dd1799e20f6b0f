//! Leakage-safe block-stratified splitting.
//!
//! Blocks are atomic: a block id never appears in two partitions, so
//! temporally adjacent trials cannot leak between train, calibration,
//! and test.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};

use super::{SplitAssignment, TrialSet};

/// Per class: a seeded shuffle of that class's blocks, then the first
/// `train_blocks_per_class` go to train, the next `cal_blocks_per_class`
/// to calibration, and the remainder (at least one block) to test.
pub fn block_stratified_split(
    ts: &TrialSet,
    train_blocks_per_class: usize,
    cal_blocks_per_class: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let needed = train_blocks_per_class + cal_blocks_per_class;
    let mut rng = rng_from(derive(seed, "split-assign", 0));
    let mut out = SplitAssignment {
        train_blocks: Default::default(),
        cal_blocks: Default::default(),
        test_blocks: Default::default(),
    };
    for (class, blocks) in ts.blocks_by_class().iter().enumerate() {
        if blocks.len() < needed + 1 {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} blocks; need at least {} \
                 (train {train_blocks_per_class} + cal {cal_blocks_per_class} + 1 test)",
                blocks.len(),
                needed + 1
            )));
        }
        let mut shuffled = blocks.clone();
        shuffled.shuffle(&mut rng);
        out.train_blocks.extend(&shuffled[..train_blocks_per_class]);
        out.cal_blocks.extend(&shuffled[train_blocks_per_class..needed]);
        out.test_blocks.extend(&shuffled[needed..]);
    }
    debug_assert!(out.is_disjoint());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Partition, SynthConfig};

    fn desk(seed: u64) -> TrialSet {
        generate_synthetic(&SynthConfig { seed: Some(seed), ..SynthConfig::desk_scale() })
            .unwrap()
    }

    #[test]
    fn paper_geometry_counts() {
        let ts = desk(11);
        let split = block_stratified_split(&ts, 20, 2, 99).unwrap();
        assert_eq!(split.trials(&ts, Partition::Train).len(), 1040);
        assert_eq!(split.trials(&ts, Partition::Cal).len(), 104);
        assert_eq!(split.trials(&ts, Partition::Test).len(), 156);
        assert!(split.is_disjoint());
    }

    #[test]
    fn empty_test_partition_is_rejected() {
        let ts = desk(11);
        // 25 blocks per class; train 23 + cal 2 leaves nothing for test.
        let r = block_stratified_split(&ts, 23, 2, 0);
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        let ts = desk(2);
        let a = block_stratified_split(&ts, 20, 2, 5).unwrap();
        let b = block_stratified_split(&ts, 20, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = block_stratified_split(&ts, 20, 2, 6).unwrap();
        assert_ne!(a, c);
        // Different permutation, same per-class counts.
        for (class, blocks) in ts.blocks_by_class().iter().enumerate() {
            let train_a = blocks.iter().filter(|b| a.train_blocks.contains(b)).count();
            let train_c = blocks.iter().filter(|b| c.train_blocks.contains(b)).count();
            assert_eq!(train_a, 20, "class {class}");
            assert_eq!(train_c, 20, "class {class}");
        }
    }

    #[test]
    fn block_atomicity() {
        let ts = desk(3);
        let split = block_stratified_split(&ts, 18, 3, 1).unwrap();
        for i in 0..ts.num_trials() {
            let b = ts.block_id(i);
            let memberships = [
                split.train_blocks.contains(&b),
                split.cal_blocks.contains(&b),
                split.test_blocks.contains(&b),
            ];
            assert_eq!(memberships.iter().filter(|&&m| m).count(), 1);
        }
    }
}
