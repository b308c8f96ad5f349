//! Overlapping clips, track stitching and gap interpolation.

use crate::error::{Error, Result};
use crate::hungarian;
use crate::ingest::DetectionSet;
use crate::model::{mean_of, Detection, Tracklet};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipPlan {
    pub clip_len: u32,
    pub overlap: u32,
}

impl Default for ClipPlan {
    fn default() -> Self {
        Self {
            clip_len: 512,
            overlap: 256,
        }
    }
}

impl ClipPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0 && self.overlap < self.clip_len) {
            return Err(Error::Validation(format!(
                "clip overlap must lie in (0, clip_len): overlap {} clip_len {}",
                self.overlap, self.clip_len
            )));
        }
        Ok(())
    }

    /// Clip start frames: `0, stride, 2 stride, ...` until a clip reaches
    /// the last frame.
    pub fn starts(&self, n_frames: u32) -> Vec<u32> {
        let stride = self.clip_len - self.overlap;
        let mut out = vec![0];
        while out[out.len() - 1] + self.clip_len < n_frames {
            let next = out[out.len() - 1] + stride;
            out.push(next);
        }
        out
    }
}

/// Tracks as lists of detection indices (frame order).
pub type Tracks = Vec<Vec<usize>>;

/// Groups detection indices by id, ordered by each group's first member.
pub fn tracks_from_ids(ids: &[usize]) -> Tracks {
    let mut slot = std::collections::HashMap::new();
    let mut tracks: Tracks = Vec::new();
    for (d, &id) in ids.iter().enumerate() {
        let k = *slot.entry(id).or_insert_with(|| {
            tracks.push(Vec::new());
            tracks.len() - 1
        });
        tracks[k].push(d);
    }
    tracks
}

/// Stitching cost `1 - IoU` between two tracks' detections inside the
/// overlap window; `None` when they share no detection.
pub fn track_cost(a: &[usize], b: &[usize]) -> Option<f64> {
    let shared = a.iter().filter(|i| b.contains(i)).count();
    if shared == 0 {
        return None;
    }
    let union = a.len() + b.len() - shared;
    Some(1.0 - shared as f64 / union as f64)
}

/// Merges the tracks of a later clip into those of an earlier one. The
/// overlap covers frames `overlap.0..overlap.1`; the later clip owns every
/// detection from `overlap.0` on.
pub fn stitch(left: &Tracks, right: &Tracks, overlap: (u32, u32), dets: &DetectionSet) -> Tracks {
    let (lo, hi) = overlap;
    let inside = |t: &[usize]| -> Vec<usize> {
        t.iter()
            .copied()
            .filter(|&i| (lo..hi).contains(&dets.get(i).frame))
            .collect()
    };
    let lw: Vec<Vec<usize>> = left.iter().map(|t| inside(t)).collect();
    let rw: Vec<Vec<usize>> = right.iter().map(|t| inside(t)).collect();
    let mut cost = vec![f64::INFINITY; left.len() * right.len()];
    for (a, la) in lw.iter().enumerate() {
        for (b, rb) in rw.iter().enumerate() {
            if let Some(c) = track_cost(la, rb) {
                cost[a * right.len() + b] = c;
            }
        }
    }
    let assignment = hungarian::assign(&cost, left.len(), right.len());
    let mut matched_right = vec![None; right.len()];
    for (a, b) in assignment.iter().enumerate() {
        if let Some(b) = *b {
            matched_right[b] = Some(a);
        }
    }
    let before = |t: &[usize]| -> Vec<usize> {
        t.iter().copied().filter(|&i| dets.get(i).frame < lo).collect()
    };
    let mut out: Tracks = Vec::new();
    for (a, t) in left.iter().enumerate() {
        let head = before(t);
        match assignment[a] {
            Some(b) => out.push(head.into_iter().chain(right[b].iter().copied()).collect()),
            None if !head.is_empty() => out.push(head),
            None => {}
        }
    }
    for (b, t) in right.iter().enumerate() {
        if matched_right[b].is_none() {
            out.push(t.clone());
        }
    }
    out.sort_by_key(|t| t[0]);
    out
}

/// Fills missing frames between consecutive members by linear
/// interpolation of the box; confidence is the smaller endpoint value and
/// the embedding the endpoint mean.
pub fn interpolate_gaps(track: &Tracklet) -> Result<Tracklet> {
    let src = track.detections();
    let mut out: Vec<Detection> = Vec::with_capacity(src.len());
    for (k, d) in src.iter().enumerate() {
        if k > 0 {
            let p = &src[k - 1];
            let gap = d.frame - p.frame;
            if gap > 1 {
                let emb = mean_of([p.embedding.as_slice(), d.embedding.as_slice()].into_iter(), d.embedding.len());
                for step in 1..gap {
                    let t = step as f64 / gap as f64;
                    out.push(Detection {
                        frame: p.frame + step,
                        bbox: p.bbox.lerp(&d.bbox, t),
                        confidence: p.confidence.min(d.confidence),
                        embedding: emb.clone(),
                        gt_id: None,
                    });
                }
            }
        }
        out.push(d.clone());
    }
    Tracklet::new(track.id(), out)
}

/// Final output of a clipped run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedRun {
    /// Detection partition before interpolation, ordered by first member.
    pub tracks: Tracks,
    /// Interpolated tracklets, ids `1..` in track order.
    pub tracklets: Vec<Tracklet>,
}

/// Tracks every clip with `track_clip` (which returns an id per detection
/// of the clip), stitches clips left to right and interpolates gaps.
pub fn run_clipped<F>(dets: &DetectionSet, plan: &ClipPlan, track_clip: F) -> Result<ClippedRun>
where
    F: Fn(&DetectionSet) -> Result<Vec<usize>> + Sync + Send,
{
    plan.validate()?;
    let starts = plan.starts(dets.n_frames());
    let clips = par::try_map(&starts, |&s| -> Result<(u32, Tracks)> {
        let (sub, global) = dets.subset(s..s.saturating_add(plan.clip_len));
        let ids = track_clip(&sub)?;
        if ids.len() != sub.len() {
            return Err(Error::Length {
                expected: sub.len(),
                got: ids.len(),
            });
        }
        let tracks = tracks_from_ids(&ids)
            .into_iter()
            .map(|t| t.into_iter().map(|i| global[i]).collect())
            .collect();
        Ok((s, tracks))
    })?;
    let mut iter = clips.into_iter();
    let (mut end, mut acc) = match iter.next() {
        Some((s, t)) => (s.saturating_add(plan.clip_len), t),
        None => (0, Vec::new()),
    };
    for (s, tracks) in iter {
        acc = stitch(&acc, &tracks, (s, end.min(dets.n_frames())), dets);
        end = s.saturating_add(plan.clip_len);
    }
    acc.sort_by_key(|t| t[0]);
    let tracklets = acc
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let tr = Tracklet::new(k as u64 + 1, t.iter().map(|&i| dets.get(i).clone()).collect())?;
            interpolate_gaps(&tr)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClippedRun {
        tracks: acc,
        tracklets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundingBox;

    fn det(frame: u32, x: f64, y: f64) -> Detection {
        Detection {
            frame,
            bbox: BoundingBox::new(x, y, 10.0, 10.0).unwrap(),
            confidence: 0.5 + frame as f64 * 0.01,
            embedding: vec![frame as f64, 1.0],
            gt_id: Some(1),
        }
    }

    #[test]
    fn clip_starts() {
        let p = ClipPlan::default();
        assert_eq!(p.starts(300), vec![0]);
        assert_eq!(p.starts(512), vec![0]);
        assert_eq!(p.starts(700), vec![0, 256]);
        assert_eq!(p.starts(800), vec![0, 256, 512]);
        assert!(ClipPlan { clip_len: 10, overlap: 10 }.validate().is_err());
    }

    #[test]
    fn midpoint_interpolation() {
        let t = Tracklet::new(1, vec![det(1, 0.0, 0.0), det(3, 2.0, 4.0)]).unwrap();
        let f = interpolate_gaps(&t).unwrap();
        assert_eq!(f.len(), 3);
        let mid = &f.detections()[1];
        assert_eq!(mid.frame, 2);
        assert_eq!(mid.bbox, BoundingBox::new(1.0, 2.0, 10.0, 10.0).unwrap());
        assert_eq!(mid.confidence, 0.51);
        assert_eq!(mid.embedding, vec![2.0, 1.0]);
    }

    #[test]
    fn gapless_track_unchanged() {
        let t = Tracklet::new(1, vec![det(1, 0.0, 0.0), det(2, 2.0, 4.0)]).unwrap();
        assert_eq!(interpolate_gaps(&t).unwrap(), t);
    }

    #[test]
    fn three_frame_gap_quarters() {
        let t = Tracklet::new(1, vec![det(0, 0.0, 0.0), det(4, 8.0, 4.0)]).unwrap();
        let f = interpolate_gaps(&t).unwrap();
        let xs: Vec<f64> = f.detections().iter().map(|d| d.bbox.x).collect();
        assert_eq!(xs, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(f.detections()[0], t.detections()[0]);
        assert_eq!(f.detections()[4], t.detections()[1]);
    }

    fn line(frames: std::ops::Range<u32>) -> DetectionSet {
        let v = frames.flat_map(|t| [det(t, 0.0, 0.0), det(t, 100.0, 0.0)]).collect();
        DetectionSet::new(v, 0, 2).unwrap()
    }

    #[test]
    fn identical_tracks_merge() {
        let dets = line(0..6);
        // Detections 2t (left object) and 2t+1 (right object).
        let left = vec![vec![0, 2, 4, 6], vec![1, 3, 5, 7]];
        let right = vec![vec![5, 7, 9, 11], vec![4, 6, 8, 10]];
        let merged = stitch(&left, &right, (2, 4), &dets);
        assert_eq!(merged, vec![vec![0, 2, 4, 6, 8, 10], vec![1, 3, 5, 7, 9, 11]]);
    }

    #[test]
    fn disjoint_tracks_never_merge() {
        let dets = line(0..6);
        let left = vec![vec![0, 2]];
        let right = vec![vec![9, 11]];
        let merged = stitch(&left, &right, (2, 4), &dets);
        assert_eq!(merged, vec![vec![0, 2], vec![9, 11]]);
    }

    #[test]
    fn half_shared_track_cost() {
        assert_eq!(track_cost(&[1, 2], &[2, 3]), Some(1.0 - 1.0 / 3.0));
        assert_eq!(track_cost(&[1, 2, 3, 4], &[3, 4]), Some(0.5));
        assert_eq!(track_cost(&[1], &[2]), None);
        assert_eq!(track_cost(&[7], &[7]), Some(0.0));
    }

    #[test]
    fn later_clip_owns_overlap() {
        let dets = line(0..6);
        // Left had object 1 in frames 0..4; right splits it differently.
        let left = vec![vec![0, 2, 4, 6, 8]];
        let right = vec![vec![4, 8, 10], vec![6]];
        let merged = stitch(&left, &right, (2, 5), &dets);
        assert_eq!(merged, vec![vec![0, 2, 4, 8, 10], vec![6]]);
        let all: Vec<usize> = {
            let mut v: Vec<usize> = merged.concat();
            v.sort();
            v
        };
        assert_eq!(all, vec![0, 2, 4, 6, 8, 10]);
    }

    #[test]
    fn short_video_is_single_clip() {
        let dets = line(0..6);
        let run = run_clipped(&dets, &ClipPlan { clip_len: 10, overlap: 5 }, |sub| {
            Ok((0..sub.len()).map(|i| i % 2).collect())
        })
        .unwrap();
        assert_eq!(run.tracks, vec![vec![0, 2, 4, 6, 8, 10], vec![1, 3, 5, 7, 9, 11]]);
        assert_eq!(run.tracklets[1].id(), 2);
    }

    #[test]
    fn chained_clips_reproduce_partition() {
        let dets = line(0..20);
        let plan = ClipPlan { clip_len: 6, overlap: 3 };
        let run = run_clipped(&dets, &plan, |sub| {
            Ok(sub.detections().iter().map(|d| (d.bbox.x > 50.0) as usize).collect())
        })
        .unwrap();
        let want: Tracks = vec![
            (0..20).map(|t| 2 * t).collect(),
            (0..20).map(|t| 2 * t + 1).collect(),
        ];
        assert_eq!(run.tracks, want);
    }
}
