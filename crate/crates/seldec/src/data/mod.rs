//! Trial dataset model: the in-memory trial tensor, block-stratified
//! split assignments, per-channel normalization statistics, the synthetic
//! generator, and the on-disk format.

mod io;
mod split;
mod synth;
mod zscore;

pub use io::{read_trialset, write_trialset};
pub use split::block_stratified_split;
pub use synth::{generate_synthetic, SynthConfig};
pub use zscore::{apply_zscore, fit_channel_stats, ChannelStats};

use std::collections::BTreeSet;

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of fixed-length multi-channel trials with labels and block ids.
///
/// Shape is `[trials][channels][samples]` (float32). Trials belonging to
/// one block are atomic: they share a label and always land in the same
/// split partition. The set is immutable after construction and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct TrialSet {
    data: Array3<f32>,
    labels: Vec<usize>,
    block_ids: Vec<usize>,
    class_names: Vec<String>,
    sample_rate_hz: f64,
    block_size: usize,
}

impl TrialSet {
    /// Validates the block invariants: every block holds exactly
    /// `block_size` trials and all trials in a block share one label.
    pub fn new(
        data: Array3<f32>,
        labels: Vec<usize>,
        block_ids: Vec<usize>,
        class_names: Vec<String>,
        sample_rate_hz: f64,
        block_size: usize,
    ) -> Result<Self> {
        let n = data.len_of(Axis(0));
        if labels.len() != n || block_ids.len() != n {
            return Err(Error::InvalidShape(format!(
                "{n} trials but {} labels and {} block ids",
                labels.len(),
                block_ids.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::InvalidShape("no class names".into()));
        }
        if block_size == 0 {
            return Err(Error::InvalidShape("block_size must be >= 1".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidShape(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidShape(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut per_block: std::collections::BTreeMap<usize, (usize, usize)> =
            std::collections::BTreeMap::new();
        for (i, (&b, &l)) in block_ids.iter().zip(&labels).enumerate() {
            let entry = per_block.entry(b).or_insert((l, 0));
            if entry.0 != l {
                return Err(Error::InvalidShape(format!(
                    "block {b} mixes labels {} and {l} (trial {i})",
                    entry.0
                )));
            }
            entry.1 += 1;
        }
        if let Some((&b, &(_, count))) = per_block.iter().find(|(_, &(_, c))| c != block_size) {
            return Err(Error::InvalidShape(format!(
                "block {b} has {count} trials, expected {block_size}"
            )));
        }
        Ok(TrialSet { data, labels, block_ids, class_names, sample_rate_hz, block_size })
    }

    pub fn num_trials(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn samples(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn block_ids(&self) -> &[usize] {
        &self.block_ids
    }

    pub fn label(&self, trial: usize) -> usize {
        self.labels[trial]
    }

    pub fn block_id(&self, trial: usize) -> usize {
        self.block_ids[trial]
    }

    /// `[channels][samples]` view of one trial.
    pub fn trial(&self, trial: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), trial)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Sorted block ids owned by each class.
    pub fn blocks_by_class(&self) -> Vec<Vec<usize>> {
        let mut per_class: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.num_classes()];
        for (&b, &l) in self.block_ids.iter().zip(&self.labels) {
            per_class[l].insert(b);
        }
        per_class.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Trial indices whose block is in `blocks`, in ascending order.
    pub fn trials_in_blocks(&self, blocks: &BTreeSet<usize>) -> Vec<usize> {
        self.block_ids
            .iter()
            .enumerate()
            .filter(|(_, b)| blocks.contains(b))
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces the trial tensor, keeping labels and block structure.
    pub(crate) fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        TrialSet::new(
            data,
            self.labels.clone(),
            self.block_ids.clone(),
            self.class_names.clone(),
            self.sample_rate_hz,
            self.block_size,
        )
    }
}

/// Which partition a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Cal,
    Test,
}

/// Disjoint block-id sets for train, calibration, and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_blocks: BTreeSet<usize>,
    pub cal_blocks: BTreeSet<usize>,
    pub test_blocks: BTreeSet<usize>,
}

impl SplitAssignment {
    pub fn blocks(&self, which: Partition) -> &BTreeSet<usize> {
        match which {
            Partition::Train => &self.train_blocks,
            Partition::Cal => &self.cal_blocks,
            Partition::Test => &self.test_blocks,
        }
    }

    /// Ascending trial indices of one partition.
    pub fn trials(&self, ts: &TrialSet, which: Partition) -> Vec<usize> {
        ts.trials_in_blocks(self.blocks(which))
    }

    pub fn is_disjoint(&self) -> bool {
        self.train_blocks.is_disjoint(&self.cal_blocks)
            && self.train_blocks.is_disjoint(&self.test_blocks)
            && self.cal_blocks.is_disjoint(&self.test_blocks)
    }
}
