//! Capacity-bounded replay buffer that keeps at least one sample of every
//! seen class.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scenario::{ClassId, SampleId, SegSample, StepDataset};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    /// Sample with its original, unfiltered mask.
    pub sample: SegSample,
    pub step_acquired: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    entries: Vec<MemoryEntry>,
    capacity: usize,
    rng_seed: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, rng_seed: u64) -> Self {
        MemoryBuffer {
            entries: Vec::new(),
            capacity,
            rng_seed,
        }
    }

    /// Entries ordered by sample id.
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn covers(&self, class: ClassId) -> bool {
        self.entries.iter().any(|e| e.sample.contains(class))
    }

    /// `rng_seed` and `capacity` lines followed by one `sample_id step_acquired`
    /// line per entry.
    pub fn manifest_text(&self) -> String {
        let mut out = format!("rng_seed {}\ncapacity {}\n", self.rng_seed, self.capacity);
        for e in &self.entries {
            out.push_str(&format!("{} {}\n", e.sample.sample_id, e.step_acquired));
        }
        out
    }

    /// Rebuilds a buffer from its manifest, looking samples up in `pool`.
    pub fn from_manifest(text: &str, pool: &[SegSample]) -> Result<Self> {
        let manifest = parse_manifest(text)?;
        let by_id: BTreeMap<SampleId, &SegSample> = pool.iter().map(|s| (s.sample_id, s)).collect();
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for (id, step) in manifest.entries {
            let sample = by_id
                .get(&id)
                .ok_or_else(|| Error::format("memory manifest", format!("sample {id} not in dataset")))?;
            entries.push(MemoryEntry {
                sample: (*sample).clone(),
                step_acquired: step,
            });
        }
        if entries.len() > manifest.capacity {
            return Err(Error::format("memory manifest", "more entries than capacity"));
        }
        entries.sort_by_key(|e| e.sample.sample_id);
        Ok(MemoryBuffer {
            entries,
            capacity: manifest.capacity,
            rng_seed: manifest.rng_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rng_seed: u64,
    pub capacity: usize,
    pub entries: Vec<(SampleId, usize)>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let bad = |line: &str| Error::format("memory manifest", format!("bad line {line:?}"));
    let mut rng_seed = None;
    let mut capacity = None;
    let mut entries = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut parts = line.split_whitespace();
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(bad(line)),
        };
        match a {
            "rng_seed" => rng_seed = Some(b.parse().map_err(|_| bad(line))?),
            "capacity" => capacity = Some(b.parse().map_err(|_| bad(line))?),
            _ => entries.push((
                SampleId(a.parse().map_err(|_| bad(line))?),
                b.parse().map_err(|_| bad(line))?,
            )),
        }
    }
    match (rng_seed, capacity) {
        (Some(rng_seed), Some(capacity)) => Ok(Manifest {
            rng_seed,
            capacity,
            entries,
        }),
        _ => Err(Error::format("memory manifest", "missing rng_seed or capacity")),
    }
}

/// Refills the buffer from its old entries plus `candidates` (acquired at
/// `step`). One covering sample is reserved for each seen class, then the
/// remaining capacity is filled uniformly without replacement.
///
/// The random stream depends only on the buffer seed and `step`.
pub fn update_memory(
    buffer: &MemoryBuffer,
    candidates: &[SegSample],
    seen: &BTreeSet<ClassId>,
    capacity: usize,
    step: usize,
) -> Result<MemoryBuffer> {
    if capacity < seen.len() {
        return Err(Error::MemoryCapacity {
            capacity,
            seen: seen.len(),
        });
    }
    let mut pool: BTreeMap<SampleId, MemoryEntry> = buffer
        .entries
        .iter()
        .map(|e| (e.sample.sample_id, e.clone()))
        .collect();
    for s in candidates {
        pool.entry(s.sample_id).or_insert_with(|| MemoryEntry {
            sample: s.clone(),
            step_acquired: step,
        });
    }
    let pool: Vec<MemoryEntry> = pool.into_values().collect();
    for &c in seen {
        if !pool.iter().any(|e| e.sample.contains(c)) {
            return Err(Error::MemoryUncoverable(c.0));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(buffer.rng_seed);
    rng.set_stream(step as u64);
    let mut chosen = vec![false; pool.len()];
    let mut taken = 0;
    for &c in seen {
        let covered = (0..pool.len()).any(|i| chosen[i] && pool[i].sample.contains(c));
        if covered {
            continue;
        }
        let holders: Vec<usize> = (0..pool.len())
            .filter(|&i| !chosen[i] && pool[i].sample.contains(c))
            .collect();
        let pick = holders[rng.gen_range(0..holders.len())];
        chosen[pick] = true;
        taken += 1;
    }
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| !chosen[i]).collect();
    let fill = (capacity - taken).min(rest.len());
    for i in index::sample(&mut rng, rest.len(), fill) {
        chosen[rest[i]] = true;
    }
    let entries = pool
        .into_iter()
        .zip(chosen)
        .filter_map(|(e, keep)| keep.then_some(e))
        .collect();
    Ok(MemoryBuffer {
        entries,
        capacity,
        rng_seed: buffer.rng_seed,
    })
}

/// Adds the buffer to a step-`t` dataset. Buffer masks keep the classes of
/// `C_{1:t-1}`; a sample present in both keeps the labels of `C_{1:t}`.
/// Replayed sample ids are recorded so remodeling can accept every seen
/// label on them.
pub fn merge_for_training(step_data: &StepDataset, buffer: &MemoryBuffer, t: usize) -> Result<StepDataset> {
    if t < 2 {
        return Err(Error::Config(format!("memory replay starts at step 2, got step {t}")));
    }
    let historical: BTreeSet<ClassId> = step_data
        .seen_classes
        .difference(&step_data.current_classes)
        .copied()
        .collect();
    let mut by_id: BTreeMap<SampleId, &MemoryEntry> =
        buffer.entries.iter().map(|e| (e.sample.sample_id, e)).collect();
    let mut samples = Vec::with_capacity(step_data.len() + by_id.len());
    let mut replayed = step_data.replayed.clone();
    for s in &step_data.samples {
        match by_id.remove(&s.sample_id) {
            Some(e) => {
                samples.push(e.sample.relabeled(&step_data.seen_classes));
                replayed.insert(s.sample_id);
            }
            None => samples.push(s.clone()),
        }
    }
    for (id, e) in by_id {
        samples.push(e.sample.relabeled(&historical));
        replayed.insert(id);
    }
    Ok(StepDataset {
        samples,
        current_classes: step_data.current_classes.clone(),
        seen_classes: step_data.seen_classes.clone(),
        replayed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn sample(id: u32, classes: &[u8]) -> SegSample {
        let mut mask = Array2::zeros((2, 4));
        for (i, &c) in classes.iter().enumerate() {
            mask[[i / 4, i % 4]] = c;
        }
        SegSample {
            image: Array3::zeros((3, 2, 4)),
            mask,
            sample_id: SampleId(id),
        }
    }

    fn set(c: &[u8]) -> BTreeSet<ClassId> {
        c.iter().map(|&v| ClassId(v)).collect()
    }

    fn step_data(samples: Vec<SegSample>, current: &[u8], seen: &[u8]) -> StepDataset {
        StepDataset {
            samples,
            current_classes: set(current),
            seen_classes: set(seen),
            replayed: BTreeSet::new(),
        }
    }

    #[test]
    fn covers_every_seen_class() {
        let cands: Vec<_> = (0..12).map(|i| sample(i, &[(i % 3 + 1) as u8])).collect();
        let b = update_memory(&MemoryBuffer::new(4, 9), &cands, &set(&[1, 2, 3]), 4, 1).unwrap();
        assert!(b.len() <= 4);
        for c in 1..=3 {
            assert!(b.covers(ClassId(c)));
        }
    }

    #[test]
    fn large_capacity_keeps_everything() {
        let cands: Vec<_> = (0..5).map(|i| sample(i, &[1])).collect();
        let b = update_memory(&MemoryBuffer::new(10, 0), &cands, &set(&[1]), 10, 1).unwrap();
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn errors() {
        let cands = vec![sample(0, &[1])];
        assert!(matches!(
            update_memory(&MemoryBuffer::new(1, 0), &cands, &set(&[1, 2]), 1, 1),
            Err(Error::MemoryCapacity { capacity: 1, seen: 2 })
        ));
        assert!(matches!(
            update_memory(&MemoryBuffer::new(3, 0), &cands, &set(&[1, 2]), 3, 1),
            Err(Error::MemoryUncoverable(2))
        ));
    }

    #[test]
    fn old_entries_compete_with_new_candidates() {
        let old: Vec<_> = (0..4).map(|i| sample(i, &[1])).collect();
        let b = update_memory(&MemoryBuffer::new(4, 3), &old, &set(&[1]), 4, 1).unwrap();
        let new: Vec<_> = (10..14).map(|i| sample(i, &[2])).collect();
        let b2 = update_memory(&b, &new, &set(&[1, 2]), 4, 2).unwrap();
        assert_eq!(b2.len(), 4);
        assert!(b2.covers(ClassId(1)) && b2.covers(ClassId(2)));
        assert!(b2.entries().iter().all(|e| e.step_acquired == if e.sample.sample_id.0 < 10 { 1 } else { 2 }));
    }

    #[test]
    fn merge_examples() {
        let data = step_data(vec![sample(0, &[5]), sample(1, &[5])], &[5], &[1, 2, 5]);
        assert_eq!(merge_for_training(&data, &MemoryBuffer::new(3, 0), 2).unwrap(), data);

        let cands = vec![sample(10, &[1]), sample(11, &[2, 7]), sample(12, &[1, 5])];
        let b = update_memory(&MemoryBuffer::new(3, 0), &cands, &set(&[1, 2]), 3, 1).unwrap();
        let merged = merge_for_training(&data, &b, 2).unwrap();
        assert_eq!(merged.len(), 5);
        assert_eq!(merged.replayed, [SampleId(10), SampleId(11), SampleId(12)].into_iter().collect());
        let s11 = merged.samples.iter().find(|s| s.sample_id == SampleId(11)).unwrap();
        assert!(s11.contains(ClassId(2)) && !s11.contains(ClassId(7)));
        // current-step class on a replayed sample is not an annotation it carried
        let s12 = merged.samples.iter().find(|s| s.sample_id == SampleId(12)).unwrap();
        assert!(s12.contains(ClassId(1)) && !s12.contains(ClassId(5)));
        assert!(merge_for_training(&data, &b, 1).is_err());
    }

    #[test]
    fn merge_deduplicates_by_id() {
        let data = step_data(vec![sample(0, &[5, 1])], &[5], &[1, 5]);
        let b = update_memory(&MemoryBuffer::new(2, 0), &[sample(0, &[5, 1])], &set(&[1]), 2, 1).unwrap();
        let merged = merge_for_training(&data, &b, 2).unwrap();
        assert_eq!(merged.len(), 1);
        assert!(merged.samples[0].contains(ClassId(1)) && merged.samples[0].contains(ClassId(5)));
    }

    #[test]
    fn manifest_round_trip() {
        let cands: Vec<_> = (0..6).map(|i| sample(i, &[(i % 2 + 1) as u8])).collect();
        let b = update_memory(&MemoryBuffer::new(3, 77), &cands, &set(&[1, 2]), 3, 1).unwrap();
        let text = b.manifest_text();
        assert!(text.starts_with("rng_seed 77\ncapacity 3\n"));
        assert_eq!(MemoryBuffer::from_manifest(&text, &cands).unwrap(), b);
        assert!(parse_manifest("capacity 3\n").is_err());
        assert!(parse_manifest("rng_seed 1\ncapacity 3\nx y\n").is_err());
    }

    proptest! {
        #[test]
        fn coverage_capacity_determinism(
            masks in proptest::collection::vec(proptest::collection::btree_set(1u8..6, 0..3), 1..25),
            extra in 0usize..6,
            seed in any::<u64>(),
        ) {
            let cands: Vec<_> = masks
                .iter()
                .enumerate()
                .map(|(i, cs)| sample(i as u32, &cs.iter().copied().collect::<Vec<_>>()))
                .collect();
            let seen: BTreeSet<ClassId> = masks.iter().flatten().map(|&c| ClassId(c)).collect();
            let capacity = seen.len() + extra;
            let a = update_memory(&MemoryBuffer::new(capacity, seed), &cands, &seen, capacity, 1).unwrap();
            let b = update_memory(&MemoryBuffer::new(capacity, seed), &cands, &seen, capacity, 1).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= capacity);
            let ids: BTreeSet<_> = a.entries().iter().map(|e| e.sample.sample_id).collect();
            prop_assert_eq!(ids.len(), a.len());
            for &c in &seen {
                prop_assert!(a.covers(c));
            }
        }
    }
}
