use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SegmentId, SpeechSegment, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub map: BTreeMap<SegmentId, Split>,
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Segments dropped for overlapping another split, or for lacking an
    /// anchor word while drawn into the test split.
    pub excluded: Vec<SegmentId>,
}

impl SplitAssignment {
    pub fn get(&self, id: SegmentId) -> Option<Split> {
        self.map.get(&id).copied()
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = SegmentId> + '_ {
        self.map.iter().filter(move |(_, &s)| s == split).map(|(&id, _)| id)
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }
}

/// Draws a seeded 70/20/10-style split over unique segment ids, then drops
/// cross-split overlaps. Train segments always survive; a valid segment is
/// dropped if it overlaps a train segment; a test segment is dropped if it
/// overlaps any retained train or valid segment.
pub fn build_splits(segments: &[SpeechSegment], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if segments.is_empty() {
        return Err(Error::invalid("segments", "cannot split an empty segment list"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::invalid("ratios", format!("{ratios:?} must be non-negative and sum to 1")));
    }
    // repeated presentations collapse onto one id
    let mut unique: BTreeMap<SegmentId, &SpeechSegment> = BTreeMap::new();
    for s in segments {
        unique.entry(s.id).or_insert(s);
    }
    let mut ids: Vec<SegmentId> = unique.keys().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = ids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let drawn = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        }
    };

    let mut map = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    let mut kept: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for split in Split::ALL {
        let mut accepted = Vec::new();
        let index = IntervalIndex::new(&kept);
        for (i, id) in ids.iter().enumerate() {
            if drawn(i) != split {
                continue;
            }
            let seg = unique[id];
            if index.overlaps(&seg.source, seg.source_start_s, seg.end_s())
                || (split == Split::Test && seg.anchor_word().is_none())
            {
                excluded.insert(*id);
                continue;
            }
            accepted.push(*id);
        }
        for id in accepted {
            let seg = unique[&id];
            kept.entry(seg.source.as_str()).or_default().push((seg.source_start_s, seg.end_s()));
            map.insert(id, split);
        }
    }
    Ok(SplitAssignment {
        map,
        ratios,
        seed,
        excluded: excluded.into_iter().collect(),
    })
}

/// Per-source intervals sorted by start with a running maximum of ends, so
/// an overlap query is one binary search.
struct IntervalIndex<'a> {
    by_source: BTreeMap<&'a str, (Vec<f64>, Vec<f64>)>,
}

impl<'a> IntervalIndex<'a> {
    fn new(kept: &BTreeMap<&'a str, Vec<(f64, f64)>>) -> Self {
        let by_source = kept
            .iter()
            .map(|(&src, iv)| {
                let mut iv = iv.clone();
                iv.sort_by(|a, b| a.0.total_cmp(&b.0));
                let starts = iv.iter().map(|x| x.0).collect();
                let mut run = f64::NEG_INFINITY;
                let max_end = iv
                    .iter()
                    .map(|x| {
                        run = run.max(x.1);
                        run
                    })
                    .collect();
                (src, (starts, max_end))
            })
            .collect();
        IntervalIndex { by_source }
    }

    fn overlaps(&self, source: &str, start: f64, end: f64) -> bool {
        let Some((starts, max_end)) = self.by_source.get(source) else {
            return false;
        };
        let j = starts.partition_point(|&s| s < end);
        j > 0 && max_end[j - 1] > start
    }
}
