//! Clip-level affinity accumulation and per-frame association costs.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ingest::DetectionSet;
use crate::model::{iou, Detection};
use crate::par;

/// Sparse symmetric similarity accumulator over the detections of a clip.
///
/// Each stored pair keeps the sum and number of window contributions; the
/// reported similarity is their mean. Pairs never scored together read as 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    entries: HashMap<(usize, usize), (f64, u32)>,
}

fn key(i: usize, j: usize) -> (usize, usize) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

impl AffinityMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: HashMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored pairs.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let e = self.entries.entry(key(i, j)).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    /// Averaged similarity, 0 for absent pairs.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .get(&key(i, j))
            .map_or(0.0, |&(s, c)| s / c as f64)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.entries.contains_key(&key(i, j))
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.entries.get(&key(i, j)).map_or(0, |e| e.1)
    }

    pub fn sum(&self, i: usize, j: usize) -> f64 {
        self.entries.get(&key(i, j)).map_or(0.0, |e| e.0)
    }

    /// Adds the contributions of `other` into `self`.
    pub fn merge(&mut self, other: &AffinityMatrix) {
        self.n = self.n.max(other.n);
        for (&k, &(s, c)) in &other.entries {
            let e = self.entries.entry(k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += c;
        }
    }

    /// Stored pairs `(i, j, similarity)` with `i < j`, sorted.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&(i, j), &(s, c))| (i, j, s / c as f64))
            .collect();
        out.sort_by_key(|e| (e.0, e.1));
        out
    }
}

/// Sliding-window layout over a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: u32,
    pub step: u32,
    pub clip_len: u32,
}

impl Default for WindowPlan {
    fn default() -> Self {
        Self {
            window: 32,
            step: 16,
            clip_len: 512,
        }
    }
}

impl WindowPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.step && self.step <= self.window && self.window <= self.clip_len) {
            return Err(Error::Validation(format!(
                "window plan needs 0 < step ({}) <= window ({}) <= clip_len ({})",
                self.step, self.window, self.clip_len
            )));
        }
        Ok(())
    }

    /// Window start frames covering `0..n_frames`; stops once a window
    /// reaches the end of the clip.
    pub fn starts(&self, n_frames: u32) -> Vec<u32> {
        let mut starts = vec![0];
        let mut s = 0u32;
        while s + self.window < n_frames {
            s += self.step;
            starts.push(s);
        }
        starts
    }
}

/// Dense symmetric similarity block over the detections of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityBlock {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }
}

/// Pairwise similarity model applied to the detections of one window.
///
/// Only cross-frame pairs are read back; values must lie in `[0, 1]`.
pub trait AffinityScorer: Sync {
    fn score(&self, dets: &[&Detection]) -> Result<SimilarityBlock>;
}

/// `(1 + cos(f_i, f_j)) / 2` on embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct CosineScorer;

impl AffinityScorer for CosineScorer {
    fn score(&self, dets: &[&Detection]) -> Result<SimilarityBlock> {
        let norms: Vec<f64> = dets
            .iter()
            .map(|d| d.embedding.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if let Some(k) = norms.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::Validation(format!(
                "zero-norm embedding at frame {}",
                dets[k].frame
            )));
        }
        let mut block = SimilarityBlock::zeros(dets.len());
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                if dets[i].frame == dets[j].frame {
                    continue;
                }
                let dot: f64 = dets[i]
                    .embedding
                    .iter()
                    .zip(&dets[j].embedding)
                    .map(|(a, b)| a * b)
                    .sum();
                let cos = dot / (norms[i] * norms[j]);
                block.set(i, j, ((1.0 + cos) * 0.5).clamp(0.0, 1.0));
            }
        }
        Ok(block)
    }
}

/// 1 for equal ground-truth ids, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl AffinityScorer for OracleScorer {
    fn score(&self, dets: &[&Detection]) -> Result<SimilarityBlock> {
        let ids: Vec<u32> = dets
            .iter()
            .map(|d| d.gt_id.ok_or(Error::MissingGroundTruth))
            .collect::<Result<_>>()?;
        let mut block = SimilarityBlock::zeros(dets.len());
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                if ids[i] == ids[j] {
                    block.set(i, j, 1.0);
                }
            }
        }
        Ok(block)
    }
}

// Windows processed per parallel batch; bounds peak memory on long clips.
const WINDOW_BATCH: usize = 8;

/// Scores every window of `plan` over `dets` and averages overlapping
/// contributions into one clip-level matrix.
pub fn accumulate_affinity(
    dets: &DetectionSet,
    plan: &WindowPlan,
    scorer: &dyn AffinityScorer,
) -> Result<AffinityMatrix> {
    plan.validate()?;
    let mut m = AffinityMatrix::new(dets.len());
    if dets.is_empty() {
        return Ok(m);
    }
    if dets.n_frames() > plan.clip_len {
        return Err(Error::Validation(format!(
            "detections span {} frames, clip length is {}",
            dets.n_frames(),
            plan.clip_len
        )));
    }
    let starts = plan.starts(dets.n_frames());
    for batch in starts.chunks(WINDOW_BATCH) {
        let blocks = par::try_map(batch, |&s| score_window(dets, s, plan.window, scorer))?;
        for contributions in blocks {
            for (i, j, v) in contributions {
                m.add(i, j, v);
            }
        }
    }
    Ok(m)
}

fn score_window(
    dets: &DetectionSet,
    start: u32,
    window: u32,
    scorer: &dyn AffinityScorer,
) -> Result<Vec<(usize, usize, f64)>> {
    let lo = dets.frame_range(start).start;
    let hi = dets.frame_range(start.saturating_add(window)).start;
    let members: Vec<&Detection> = dets.detections()[lo..hi].iter().collect();
    let block = scorer.score(&members)?;
    if block.n() != members.len() {
        return Err(Error::Dimension(format!(
            "scorer returned a {}x{} block for {} detections",
            block.n(),
            block.n(),
            members.len()
        )));
    }
    let mut out = Vec::new();
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            if members[a].frame == members[b].frame {
                continue;
            }
            let v = block.get(a, b);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "similarity {v} outside [0, 1] in window starting at frame {start}"
                )));
            }
            out.push((lo + a, lo + b, v));
        }
    }
    Ok(out)
}

/// Per-frame association matrices; all are row-major, tracks by detections.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCost {
    pub rows: usize,
    pub cols: usize,
    /// Accumulated similarity of each track to each detection, in `[0, 1]`.
    pub similarity: Vec<f64>,
    /// IoU between each track's last box and each detection.
    pub iou: Vec<f64>,
    /// `-max(similarity, iou)`.
    pub cost: Vec<f64>,
}

impl StepCost {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.cost[r * self.cols + c]
    }
}

/// Association cost between `tracks` (member indices in frame order) and
/// the detections `frame_dets` of frame `t`.
///
/// Similarities are averaged over the track members inside the lookback
/// window `[t - min(t, lookback), t)`.
pub fn step_cost_matrix(
    tracks: &[&[usize]],
    frame_dets: Range<usize>,
    dets: &DetectionSet,
    m: &AffinityMatrix,
    t: u32,
    lookback: u32,
) -> StepCost {
    let rows = tracks.len();
    let cols = frame_dets.len();
    let from = t - t.min(lookback);
    let mut similarity = vec![0.0; rows * cols];
    let mut ious = vec![0.0; rows * cols];
    for (r, members) in tracks.iter().enumerate() {
        let in_window: Vec<usize> = members
            .iter()
            .rev()
            .take_while(|&&i| dets.get(i).frame >= from)
            .copied()
            .filter(|&i| dets.get(i).frame < t)
            .collect();
        let last = members.last().map(|&i| &dets.get(i).bbox);
        for (c, j) in frame_dets.clone().enumerate() {
            if !in_window.is_empty() {
                let total: f64 = in_window.iter().map(|&i| m.get(i, j)).sum();
                similarity[r * cols + c] = (total / in_window.len() as f64).clamp(0.0, 1.0);
            }
            if let Some(b) = last {
                ious[r * cols + c] = iou(b, &dets.get(j).bbox);
            }
        }
    }
    let cost = similarity
        .iter()
        .zip(&ious)
        .map(|(s, i)| -s.max(*i))
        .collect();
    StepCost {
        rows,
        cols,
        similarity,
        iou: ious,
        cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synthesize, ScenarioSpec};
    use crate::model::BoundingBox;
    use proptest::prelude::*;

    fn det(frame: u32, x: f64, emb: Vec<f64>, gt: u32) -> Detection {
        Detection {
            frame,
            bbox: BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap(),
            confidence: 1.0,
            embedding: emb,
            gt_id: Some(gt),
        }
    }

    /// Returns a fixed value per window index, keyed by the first frame seen.
    struct WindowValues(Vec<(u32, f64)>);

    impl AffinityScorer for WindowValues {
        fn score(&self, dets: &[&Detection]) -> Result<SimilarityBlock> {
            let first = dets.iter().map(|d| d.frame).min().unwrap_or(0);
            let v = self.0.iter().find(|(s, _)| *s == first).map_or(0.0, |p| p.1);
            let mut b = SimilarityBlock::zeros(dets.len());
            for i in 0..dets.len() {
                for j in i + 1..dets.len() {
                    b.set(i, j, v);
                }
            }
            Ok(b)
        }
    }

    #[test]
    fn window_starts() {
        let plan = WindowPlan {
            window: 32,
            step: 16,
            clip_len: 512,
        };
        assert_eq!(plan.starts(64), vec![0, 16, 32]);
        assert_eq!(plan.starts(20), vec![0]);
        assert_eq!(plan.starts(32), vec![0]);
        assert_eq!(plan.starts(33), vec![0, 16]);
        assert!(WindowPlan {
            window: 8,
            step: 9,
            clip_len: 16
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_window_is_verbatim() {
        let spec = ScenarioSpec {
            n_objects: 3,
            n_frames: 5,
            embedding_noise_sigma: 0.2,
            ..Default::default()
        };
        let set = synthesize(&spec).unwrap();
        let plan = WindowPlan {
            window: 8,
            step: 4,
            clip_len: 64,
        };
        let m = accumulate_affinity(&set, &plan, &CosineScorer).unwrap();
        let all: Vec<&Detection> = set.detections().iter().collect();
        let block = CosineScorer.score(&all).unwrap();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                if set.get(i).frame != set.get(j).frame {
                    assert_eq!(m.get(i, j), block.get(i, j));
                    assert_eq!(m.count(i, j), 1);
                } else {
                    assert!(!m.contains(i, j));
                }
            }
        }
    }

    #[test]
    fn overlap_is_averaged() {
        let plan = WindowPlan {
            window: 8,
            step: 4,
            clip_len: 12,
        };
        assert_eq!(plan.starts(12), vec![0, 4]);
        let dets = vec![
            det(1, 0.0, vec![1.0], 1),
            det(6, 0.0, vec![1.0], 1),
            det(4, 0.0, vec![1.0], 1),
        ];
        let set = DetectionSet::new(dets, 12, 1).unwrap();
        let m = accumulate_affinity(&set, &plan, &WindowValues(vec![(1, 0.6), (4, 0.4)])).unwrap();
        // Frames 4 and 6 are scored 0.6 by window 0 and 0.4 by window 4.
        assert_eq!(m.count(1, 2), 2);
        assert!((m.get(1, 2) - 0.5).abs() < 1e-15);
        assert_eq!(m.count(0, 1), 1);
        assert!((m.get(0, 1) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_set_gives_empty_matrix() {
        let m = accumulate_affinity(&DetectionSet::empty(4), &WindowPlan::default(), &CosineScorer)
            .unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn clip_longer_than_plan_is_rejected() {
        let set = synthesize(&ScenarioSpec {
            n_objects: 1,
            n_frames: 40,
            ..Default::default()
        })
        .unwrap();
        let plan = WindowPlan {
            window: 8,
            step: 4,
            clip_len: 32,
        };
        assert!(accumulate_affinity(&set, &plan, &CosineScorer).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = det(0, 0.0, vec![1.0, 0.0], 1);
        let same = det(1, 0.0, vec![2.0, 0.0], 1);
        let orth = det(1, 0.0, vec![0.0, 1.0], 1);
        let opp = det(1, 0.0, vec![-1.0, 0.0], 1);
        let b = CosineScorer.score(&[&a, &same, &orth, &opp]).unwrap();
        assert!((b.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((b.get(0, 2) - 0.5).abs() < 1e-15);
        assert!(b.get(0, 3).abs() < 1e-15);
        let zero = det(1, 0.0, vec![0.0, 0.0], 1);
        assert!(CosineScorer.score(&[&a, &zero]).is_err());
    }

    #[test]
    fn oracle_examples() {
        let a = det(0, 0.0, vec![1.0], 1);
        let b = det(1, 0.0, vec![1.0], 1);
        let c = det(1, 5.0, vec![1.0], 2);
        let block = OracleScorer.score(&[&a, &b, &c]).unwrap();
        assert_eq!(block.get(0, 1), 1.0);
        assert_eq!(block.get(0, 2), 0.0);
        assert_eq!(block.get(1, 2), 0.0);
        let mut anon = a.clone();
        anon.gt_id = None;
        assert!(matches!(
            OracleScorer.score(&[&anon, &b]),
            Err(Error::MissingGroundTruth)
        ));
    }

    #[test]
    fn step_cost_examples() {
        // Track of two members with similarities 0.6 and 1.0 to detection j,
        // last box IoU 0.7 against j.
        let w = 10.0;
        // IoU of shifted boxes: overlap (w - dx) * w / ((w + dx) * w).
        let dx = w * (1.0 - 0.7) / 1.7;
        let dets = vec![
            det(0, 0.0, vec![1.0], 1),
            det(1, 0.0, vec![1.0], 1),
            det(2, dx, vec![1.0], 1),
        ];
        let set = DetectionSet::new(dets, 3, 1).unwrap();
        let mut m = AffinityMatrix::new(3);
        m.add(0, 2, 0.6);
        m.add(1, 2, 1.0);
        let members = [0usize, 1];
        let sc = step_cost_matrix(&[&members], set.frame_range(2), &set, &m, 2, 32);
        assert!((sc.similarity[0] - 0.8).abs() < 1e-12);
        assert!((sc.iou[0] - 0.7).abs() < 1e-12);
        assert!((sc.at(0, 0) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn step_cost_takes_max_of_components() {
        let dets = vec![det(0, 0.0, vec![1.0], 1), det(1, 0.0, vec![1.0], 1)];
        let set = DetectionSet::new(dets, 2, 1).unwrap();
        let m = accumulate_affinity(&set, &WindowPlan::default(), &OracleScorer).unwrap();
        let sc = step_cost_matrix(&[&[0]], set.frame_range(1), &set, &m, 1, 32);
        assert_eq!(sc.at(0, 0), -1.0);
    }

    #[test]
    fn lookback_excludes_old_members() {
        let dets = vec![
            det(0, 0.0, vec![1.0], 1),
            det(5, 100.0, vec![1.0], 1),
            det(6, 300.0, vec![1.0], 1),
        ];
        let set = DetectionSet::new(dets, 7, 1).unwrap();
        let mut m = AffinityMatrix::new(3);
        m.add(0, 2, 1.0);
        m.add(1, 2, 0.2);
        let sc = step_cost_matrix(&[&[0, 1]], set.frame_range(6), &set, &m, 6, 3);
        assert!((sc.similarity[0] - 0.2).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn averaging_contract_and_oracle_pattern(seed in 0u64..500, frames in 2u32..70) {
            let spec = ScenarioSpec { n_objects: 3, n_frames: frames, embedding_noise_sigma: 0.3, miss_rate: 0.2, seed, ..Default::default() };
            let set = synthesize(&spec).unwrap();
            let plan = WindowPlan { window: 8, step: 3, clip_len: 128 };
            let m = accumulate_affinity(&set, &plan, &CosineScorer).unwrap();
            // Recompute every window contribution independently.
            let mut sums: HashMap<(usize, usize), (f64, u32)> = HashMap::new();
            for s in plan.starts(set.n_frames()) {
                let idx: Vec<usize> = (0..set.len()).filter(|&i| { let f = set.get(i).frame; f >= s && f < s + plan.window }).collect();
                let members: Vec<&Detection> = idx.iter().map(|&i| set.get(i)).collect();
                let b = CosineScorer.score(&members).unwrap();
                for a in 0..idx.len() {
                    for c in a + 1..idx.len() {
                        if members[a].frame != members[c].frame {
                            let e = sums.entry((idx[a], idx[c])).or_insert((0.0, 0));
                            e.0 += b.get(a, c);
                            e.1 += 1;
                        }
                    }
                }
            }
            prop_assert_eq!(sums.len(), m.len());
            for (&(i, j), &(s, c)) in &sums {
                prop_assert_eq!(m.count(i, j), c);
                prop_assert!((m.get(i, j) * c as f64 - s).abs() < 1e-9);
            }
            let o = accumulate_affinity(&set, &plan, &OracleScorer).unwrap();
            for (i, j, v) in o.pairs() {
                prop_assert_eq!(v == 1.0, set.get(i).gt_id == set.get(j).gt_id);
            }
        }

        #[test]
        fn step_costs_in_range(seed in 0u64..500) {
            let spec = ScenarioSpec { n_objects: 4, n_frames: 12, embedding_noise_sigma: 0.5, seed, ..Default::default() };
            let set = synthesize(&spec).unwrap();
            let m = accumulate_affinity(&set, &WindowPlan::default(), &CosineScorer).unwrap();
            let tracks: Vec<Vec<usize>> = set.frame_range(0).map(|i| vec![i]).collect();
            let refs: Vec<&[usize]> = tracks.iter().map(|t| t.as_slice()).collect();
            let sc = step_cost_matrix(&refs, set.frame_range(1), &set, &m, 1, 32);
            prop_assert!(sc.cost.iter().all(|c| (-1.0..=0.0).contains(c)));
        }
    }
}
