//! Binned instance sampling.
//!
//! Target samples are grouped by pseudo-label and sorted by confidence. For a
//! drawn class the sorted list is cut into `n_bins` slices and each slice
//! contributes its quota of randomly chosen samples, so high-confidence
//! samples are preferred while the whole target set stays in play. Every
//! target class block is mirrored by a block of source samples of the same
//! true class.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfalError};
use crate::pseudo_store::PseudoLabelStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub id: usize,
    pub domain: Domain,
    /// True label for source slots, pseudo-label for target slots.
    pub class: usize,
}

/// One half of a batch: `S` (source) or `T` (target) as a sequence of
/// contiguous class blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampledHalf {
    pub entries: Vec<Slot>,
}

impl SampledHalf {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Classes in block order, one entry per contiguous block.
    pub fn class_sequence(&self) -> Vec<usize> {
        let mut seq: Vec<usize> = Vec::new();
        for slot in &self.entries {
            if seq.last() != Some(&slot.class) {
                seq.push(slot.class);
            }
        }
        seq
    }
}

/// Bin quotas, largest (most confident) bin first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BinSpec {
    quotas: Vec<usize>,
}

impl BinSpec {
    pub fn new(quotas: Vec<usize>) -> Result<Self> {
        if quotas.is_empty() || quotas.iter().sum::<usize>() == 0 {
            return Err(UfalError::InvalidArgument("bin quotas must sum to at least 1".into()));
        }
        if quotas.windows(2).any(|w| w[1] > w[0]) {
            return Err(UfalError::InvalidArgument(format!(
                "bin quotas {quotas:?} are not non-increasing"
            )));
        }
        Ok(Self { quotas })
    }

    pub fn n_bins(&self) -> usize {
        self.quotas.len()
    }

    pub fn quotas(&self) -> &[usize] {
        &self.quotas
    }

    /// Instances per class block.
    pub fn block_size(&self) -> usize {
        self.quotas.iter().sum()
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            quotas: vec![4, 2, 1, 1],
        }
    }
}

impl TryFrom<Vec<usize>> for BinSpec {
    type Error = UfalError;

    fn try_from(quotas: Vec<usize>) -> Result<Self> {
        Self::new(quotas)
    }
}

impl From<BinSpec> for Vec<usize> {
    fn from(spec: BinSpec) -> Self {
        spec.quotas
    }
}

/// Target ids grouped by pseudo-label, each group sorted by descending
/// confidence `p[p_hat]` with ties broken by ascending id.
pub fn group_and_sort(store: &PseudoLabelStore, n_classes: usize) -> Vec<Vec<usize>> {
    let mut kappa = vec![Vec::new(); n_classes];
    for (id, record) in store.records.iter().enumerate() {
        kappa[record.p_hat].push(id);
    }
    for group in &mut kappa {
        group.sort_by(|&a, &b| {
            store.records[b]
                .confidence()
                .total_cmp(&store.records[a].confidence())
                .then(a.cmp(&b))
        });
    }
    kappa
}

/// Draws one class block from a confidence-sorted class list.
pub fn sample_class(kappa_c: &[usize], spec: &BinSpec, rng: &mut impl Rng) -> Result<Vec<usize>> {
    sample_class_excluding(kappa_c, spec, &HashSet::new(), rng)
}

/// As [`sample_class`], skipping ids already placed in the current batch.
/// A slice that cannot fill its quota contributes every available element
/// and tops up with draws with replacement from the slice.
fn sample_class_excluding(
    kappa_c: &[usize],
    spec: &BinSpec,
    exclude: &HashSet<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if kappa_c.is_empty() {
        return Err(UfalError::EmptyClass);
    }
    let n_bins = spec.n_bins();
    let width = kappa_c.len() / n_bins;
    let mut positions = Vec::with_capacity(spec.block_size());
    for (bin, &quota) in spec.quotas().iter().enumerate() {
        if quota == 0 {
            continue;
        }
        let start = bin * width;
        let end = if bin + 1 == n_bins { kappa_c.len() } else { start + width };
        // fewer samples than bins: empty slices fall back to the whole list
        let slice = if start < end { start..end } else { 0..kappa_c.len() };
        let free: Vec<usize> = slice.clone().filter(|&p| !exclude.contains(&kappa_c[p])).collect();
        if free.len() >= quota {
            positions.extend(index::sample(rng, free.len(), quota).into_iter().map(|i| free[i]));
        } else {
            positions.extend(&free);
            for _ in free.len()..quota {
                positions.push(rng.random_range(slice.clone()));
            }
        }
    }
    positions.sort_unstable();
    Ok(positions.into_iter().map(|p| kappa_c[p]).collect())
}

/// Builds the target half `T` and the source half `S` of a batch.
///
/// `kappa` is the output of [`group_and_sort`]; `source_by_class` lists the
/// source ids of every true class. Classes are drawn uniformly among those
/// with samples in both domains, without repetition until all have been used.
pub fn assemble_halves(
    kappa: &[Vec<usize>],
    source_by_class: &[Vec<usize>],
    spec: &BinSpec,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(SampledHalf, SampledHalf)> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(UfalError::InvalidArgument(format!(
            "batch size {batch_size} must be positive and even"
        )));
    }
    let eligible: Vec<usize> = (0..kappa.len())
        .filter(|&c| !kappa[c].is_empty() && source_by_class.get(c).is_some_and(|s| !s.is_empty()))
        .collect();
    if eligible.is_empty() {
        return Err(UfalError::NoClasses);
    }
    let half = batch_size / 2;
    let mut used = vec![false; kappa.len()];
    let mut taken: HashSet<usize> = HashSet::new();
    let mut blocks: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut filled = 0;
    while filled < half {
        let mut candidates: Vec<usize> = eligible.iter().copied().filter(|&c| !used[c]).collect();
        if candidates.is_empty() {
            used.iter_mut().for_each(|u| *u = false);
            candidates = eligible.clone();
        }
        let class = candidates[rng.random_range(0..candidates.len())];
        used[class] = true;
        let mut ids = sample_class_excluding(&kappa[class], spec, &taken, rng)?;
        // ids are in confidence order, so truncation keeps the most confident
        ids.truncate(half - filled);
        filled += ids.len();
        taken.extend(&ids);
        blocks.push((class, ids));
    }

    let mut target = SampledHalf::default();
    let mut source = SampledHalf::default();
    for (class, ids) in blocks {
        let pool = &source_by_class[class];
        let picks: Vec<usize> = if ids.len() <= pool.len() {
            index::sample(rng, pool.len(), ids.len()).into_iter().map(|i| pool[i]).collect()
        } else {
            (0..ids.len()).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        source.entries.extend(picks.into_iter().map(|id| Slot {
            id,
            domain: Domain::Source,
            class,
        }));
        target.entries.extend(ids.into_iter().map(|id| Slot {
            id,
            domain: Domain::Target,
            class,
        }));
    }
    Ok((source, target))
}
