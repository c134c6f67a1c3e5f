//! Batch layouts: how the sampled source and target halves are placed onto
//! logical replicas before the ghost batch-norm forward pass.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bis::{Domain, SampledHalf, Slot};
use crate::error::{Result, UfalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    /// Class-paired source/target halves on every replica.
    Sbl,
    SourceFirst,
    TargetFirst,
    Random,
    /// Every replica half source, half target, without class pairing.
    SblRandomOrder,
}

impl LayoutMode {
    pub const ALL: [LayoutMode; 5] = [
        LayoutMode::Sbl,
        LayoutMode::SourceFirst,
        LayoutMode::TargetFirst,
        LayoutMode::Random,
        LayoutMode::SblRandomOrder,
    ];
}

/// Ordered batch slots; replica `r` owns `slots[r * replica_size..(r + 1) * replica_size]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub slots: Vec<Slot>,
    pub n_replicas: usize,
    pub replica_size: usize,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn replica(&self, r: usize) -> &[Slot] {
        &self.slots[r * self.replica_size..(r + 1) * self.replica_size]
    }

    pub fn replicas(&self) -> impl Iterator<Item = &[Slot]> {
        self.slots.chunks(self.replica_size)
    }

    /// One line per replica; `s3` is a source slot of class 3, `t3` a target slot.
    pub fn render_grid(&self) -> String {
        let mut out = String::new();
        for (r, replica) in self.replicas().enumerate() {
            let _ = write!(out, "R{r} |");
            for slot in replica {
                let tag = match slot.domain {
                    Domain::Source => 's',
                    Domain::Target => 't',
                };
                let _ = write!(out, " {tag}{}", slot.class);
            }
            out.push('\n');
        }
        out
    }
}

fn check(source: &SampledHalf, target: &SampledHalf, n_replicas: usize) -> Result<usize> {
    let total = source.len() + target.len();
    if source.len() != target.len() || source.is_empty() || n_replicas == 0 || total % (2 * n_replicas) != 0 {
        return Err(UfalError::InvalidArgument(format!(
            "cannot lay out |S| = {}, |T| = {} on {n_replicas} replicas",
            source.len(),
            target.len()
        )));
    }
    Ok(total / (2 * n_replicas))
}

/// Interleaves equal-length source and target lists: each replica gets the
/// next `half` source slots followed by the next `half` target slots.
fn interleave(source: &[Slot], target: &[Slot], n_replicas: usize, half: usize) -> BatchPlan {
    let mut slots = Vec::with_capacity(source.len() * 2);
    for (s, t) in source.chunks(half).zip(target.chunks(half)) {
        slots.extend_from_slice(s);
        slots.extend_from_slice(t);
    }
    BatchPlan {
        slots,
        n_replicas,
        replica_size: 2 * half,
    }
}

/// Smart batch layout: source and target blocks of the same class are
/// consumed together, so every replica holds `|B| / (2 N_R)` slots of each
/// domain and class blocks that do not fit spill into the next replica.
pub fn plan_sbl(source: &SampledHalf, target: &SampledHalf, n_replicas: usize) -> Result<BatchPlan> {
    let half = check(source, target, n_replicas)?;
    // line the source slots up with the target's class sequence
    let mut queues: BTreeMap<usize, VecDeque<Slot>> = BTreeMap::new();
    for slot in &source.entries {
        queues.entry(slot.class).or_default().push_back(*slot);
    }
    let mut ordered: Vec<Slot> = target
        .entries
        .iter()
        .filter_map(|t| queues.get_mut(&t.class).and_then(VecDeque::pop_front))
        .collect();
    ordered.extend(queues.into_values().flatten());
    Ok(interleave(&ordered, &target.entries, n_replicas, half))
}

pub fn plan_baseline(
    source: &SampledHalf,
    target: &SampledHalf,
    n_replicas: usize,
    mode: LayoutMode,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    let half = check(source, target, n_replicas)?;
    let replica_size = 2 * half;
    let concat = |first: &SampledHalf, second: &SampledHalf| {
        let mut slots = first.entries.clone();
        slots.extend_from_slice(&second.entries);
        slots
    };
    let plan = match mode {
        LayoutMode::Sbl => return plan_sbl(source, target, n_replicas),
        LayoutMode::SourceFirst => BatchPlan {
            slots: concat(source, target),
            n_replicas,
            replica_size,
        },
        LayoutMode::TargetFirst => BatchPlan {
            slots: concat(target, source),
            n_replicas,
            replica_size,
        },
        LayoutMode::Random => {
            let mut slots = concat(source, target);
            slots.shuffle(rng);
            BatchPlan {
                slots,
                n_replicas,
                replica_size,
            }
        }
        LayoutMode::SblRandomOrder => {
            let mut s = source.entries.clone();
            let mut t = target.entries.clone();
            s.shuffle(rng);
            t.shuffle(rng);
            interleave(&s, &t, n_replicas, half)
        }
    };
    Ok(plan)
}

/// Dispatches on the layout mode.
pub fn plan_layout(
    source: &SampledHalf,
    target: &SampledHalf,
    n_replicas: usize,
    mode: LayoutMode,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    match mode {
        LayoutMode::Sbl => plan_sbl(source, target, n_replicas),
        other => plan_baseline(source, target, n_replicas, other, rng),
    }
}
