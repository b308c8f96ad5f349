//! CLEAR MOT and identity metrics, plus graph size statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::hungarian;
use crate::ingest::{DetectionSet, MotRow};
use crate::model::{iou, BoundingBox, EdgeKind, NodeKind, TrackGraph, Tracklet};

/// One labeled box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackBox {
    pub frame: u32,
    pub id: u64,
    pub bbox: BoundingBox,
}

pub fn boxes_from_tracklets(tracks: &[Tracklet]) -> Vec<TrackBox> {
    tracks
        .iter()
        .flat_map(|t| {
            t.detections().iter().map(move |d| TrackBox {
                frame: d.frame,
                id: t.id(),
                bbox: d.bbox,
            })
        })
        .collect()
}

/// Rows without an identity are rejected.
pub fn boxes_from_rows(rows: &[MotRow]) -> Result<Vec<TrackBox>> {
    rows.iter()
        .map(|r| {
            let id = r.id.ok_or_else(|| {
                Error::Validation(format!("row at frame {} has no identity", r.frame + 1))
            })?;
            Ok(TrackBox {
                frame: r.frame,
                id: id as u64,
                bbox: r.bbox,
            })
        })
        .collect()
}

/// Ground-truth boxes of a labeled detection set.
pub fn boxes_from_truth(set: &DetectionSet) -> Result<Vec<TrackBox>> {
    set.detections()
        .iter()
        .map(|d| {
            Ok(TrackBox {
                frame: d.frame,
                id: d.gt_id.ok_or(Error::MissingGroundTruth)? as u64,
                bbox: d.bbox,
            })
        })
        .collect()
}

pub const DEFAULT_IOU_GATE: f64 = 0.5;

/// Per-frame CLEAR matching result.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondence {
    /// Matched `(gt index, pred index)` pairs per frame, by frame.
    pub matches: BTreeMap<u32, Vec<(usize, usize)>>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub ids: usize,
    pub gt_count: usize,
    pub pred_count: usize,
}

fn by_frame(boxes: &[TrackBox]) -> BTreeMap<u32, Vec<usize>> {
    let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, b) in boxes.iter().enumerate() {
        m.entry(b.frame).or_default().push(i);
    }
    m
}

/// Frame-by-frame matching at IoU `gate`. Pairs matched in an earlier frame
/// are kept while they still pass the gate; the rest are assigned by
/// Hungarian on `1 - IoU`. An identity switch is a matched ground-truth
/// track whose predicted id differs from its previous match.
pub fn match_frames(pred: &[TrackBox], gt: &[TrackBox], gate: f64) -> Correspondence {
    let pf = by_frame(pred);
    let gf = by_frame(gt);
    let mut frames: Vec<u32> = pf.keys().chain(gf.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();
    let empty = Vec::new();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut c = Correspondence {
        gt_count: gt.len(),
        pred_count: pred.len(),
        ..Default::default()
    };
    for t in frames {
        let gs = gf.get(&t).unwrap_or(&empty);
        let ps = pf.get(&t).unwrap_or(&empty);
        let mut g_used = vec![false; gs.len()];
        let mut p_used = vec![false; ps.len()];
        let mut pairs = Vec::new();
        for (a, &gi) in gs.iter().enumerate() {
            let Some(&prev) = last.get(&gt[gi].id) else {
                continue;
            };
            let keep = ps.iter().enumerate().find(|&(b, &pi)| {
                !p_used[b] && pred[pi].id == prev && iou(&gt[gi].bbox, &pred[pi].bbox) >= gate
            });
            if let Some((b, _)) = keep {
                g_used[a] = true;
                p_used[b] = true;
                pairs.push((a, b));
            }
        }
        let rest_g: Vec<usize> = (0..gs.len()).filter(|&a| !g_used[a]).collect();
        let rest_p: Vec<usize> = (0..ps.len()).filter(|&b| !p_used[b]).collect();
        let mut cost = vec![f64::INFINITY; rest_g.len() * rest_p.len()];
        for (r, &a) in rest_g.iter().enumerate() {
            for (k, &b) in rest_p.iter().enumerate() {
                let o = iou(&gt[gs[a]].bbox, &pred[ps[b]].bbox);
                if o >= gate {
                    cost[r * rest_p.len() + k] = 1.0 - o;
                }
            }
        }
        for (r, k) in hungarian::assign(&cost, rest_g.len(), rest_p.len())
            .into_iter()
            .enumerate()
        {
            if let Some(k) = k {
                pairs.push((rest_g[r], rest_p[k]));
            }
        }
        for &(a, b) in &pairs {
            let gid = gt[gs[a]].id;
            let pid = pred[ps[b]].id;
            if last.insert(gid, pid).is_some_and(|p| p != pid) {
                c.ids += 1;
            }
        }
        c.tp += pairs.len();
        c.fp += ps.len() - pairs.len();
        c.fn_ += gs.len() - pairs.len();
        let mut global: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (gs[a], ps[b])).collect();
        global.sort_unstable();
        c.matches.insert(t, global);
    }
    c
}

/// `1 - (FN + FP + IDS) / GT`; `None` without ground truth.
pub fn mota(c: &Correspondence) -> Option<f64> {
    (c.gt_count > 0).then(|| 1.0 - (c.fn_ + c.fp + c.ids) as f64 / c.gt_count as f64)
}

/// Identity-level counts behind IDF1.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl IdCounts {
    /// `2 IDTP / (2 IDTP + IDFP + IDFN)`; 1.0 when both sides are empty.
    pub fn idf1(&self) -> f64 {
        let den = 2 * self.idtp + self.idfp + self.idfn;
        if den == 0 {
            1.0
        } else {
            2.0 * self.idtp as f64 / den as f64
        }
    }
}

/// Global one-to-one matching of identities maximizing the number of
/// frames where the matched pair overlaps at IoU `gate` or more.
pub fn id_counts(pred: &[TrackBox], gt: &[TrackBox], gate: f64) -> IdCounts {
    let index = |boxes: &[TrackBox]| {
        let mut ids: Vec<u64> = boxes.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let gids = index(gt);
    let pids = index(pred);
    let gpos: HashMap<u64, usize> = gids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let ppos: HashMap<u64, usize> = pids.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let mut overlap = vec![0usize; gids.len() * pids.len()];
    let pf = by_frame(pred);
    for (t, gs) in by_frame(gt) {
        let Some(ps) = pf.get(&t) else { continue };
        for &gi in &gs {
            for &pi in ps {
                if iou(&gt[gi].bbox, &pred[pi].bbox) >= gate {
                    overlap[gpos[&gt[gi].id] * pids.len() + ppos[&pred[pi].id]] += 1;
                }
            }
        }
    }
    let cost: Vec<f64> = overlap.iter().map(|&o| -(o as f64)).collect();
    let idtp: usize = hungarian::assign(&cost, gids.len(), pids.len())
        .into_iter()
        .enumerate()
        .filter_map(|(g, p)| p.map(|p| overlap[g * pids.len() + p]))
        .sum();
    IdCounts {
        idtp,
        idfp: pred.len() - idtp,
        idfn: gt.len() - idtp,
    }
}

pub fn idf1(pred: &[TrackBox], gt: &[TrackBox]) -> f64 {
    id_counts(pred, gt, DEFAULT_IOU_GATE).idf1()
}

/// Node and edge counts by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    pub det_nodes: usize,
    pub traj_nodes: usize,
    pub det_det: usize,
    pub det_traj: usize,
    pub traj_traj: usize,
}

impl GraphStats {
    pub fn node_count(&self) -> usize {
        self.det_nodes + self.traj_nodes
    }

    pub fn edge_count(&self) -> usize {
        self.det_det + self.det_traj + self.traj_traj
    }

    /// Adds another graph's counts.
    pub fn absorb(&mut self, o: &GraphStats) {
        self.det_nodes += o.det_nodes;
        self.traj_nodes += o.traj_nodes;
        self.det_det += o.det_det;
        self.det_traj += o.det_traj;
        self.traj_traj += o.traj_traj;
    }
}

pub fn graph_stats(g: &TrackGraph) -> GraphStats {
    GraphStats {
        det_nodes: g.count_nodes(NodeKind::Det),
        traj_nodes: g.count_nodes(NodeKind::Traj),
        det_det: g.count_edges(EdgeKind::DetDet),
        det_traj: g.count_edges(EdgeKind::DetTraj),
        traj_traj: g.count_edges(EdgeKind::TrajTraj),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mota: Option<f64>,
    pub idf1: f64,
    pub ids: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub graph: Option<GraphStats>,
    pub coverage: Option<f64>,
}

pub fn evaluate(pred: &[TrackBox], gt: &[TrackBox]) -> EvalReport {
    let c = match_frames(pred, gt, DEFAULT_IOU_GATE);
    EvalReport {
        mota: mota(&c),
        idf1: idf1(pred, gt),
        ids: c.ids,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        gt_count: c.gt_count,
        pred_count: c.pred_count,
        graph: None,
        coverage: None,
    }
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        match self.mota {
            Some(m) => writeln!(s, "mota={m:.6}"),
            None => writeln!(s, "mota=undefined"),
        }
        .ok();
        let _ = writeln!(s, "idf1={:.6}", self.idf1);
        let _ = writeln!(s, "ids={}", self.ids);
        let _ = writeln!(s, "tp={}", self.tp);
        let _ = writeln!(s, "fp={}", self.fp);
        let _ = writeln!(s, "fn={}", self.fn_);
        let _ = writeln!(s, "gt_count={}", self.gt_count);
        let _ = writeln!(s, "pred_count={}", self.pred_count);
        if let Some(g) = &self.graph {
            let _ = writeln!(s, "node_count={}", g.node_count());
            let _ = writeln!(s, "edge_count={}", g.edge_count());
        }
        if let Some(c) = self.coverage {
            let _ = writeln!(s, "coverage={c:.6}");
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mota = self
            .mota
            .map_or_else(|| "undefined".to_string(), |m| format!("{:.2}", 100.0 * m));
        writeln!(f, "{:>8} {:>8} {:>6} {:>8} {:>8} {:>8}", "MOTA", "IDF1", "IDS", "FP", "FN", "GT")?;
        writeln!(
            f,
            "{:>8} {:>8.2} {:>6} {:>8} {:>8} {:>8}",
            mota,
            100.0 * self.idf1,
            self.ids,
            self.fp,
            self.fn_,
            self.gt_count
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tb(frame: u32, id: u64, x: f64) -> TrackBox {
        TrackBox {
            frame,
            id,
            bbox: BoundingBox::new(x, 0.0, 10.0, 10.0).unwrap(),
        }
    }

    fn two_tracks() -> Vec<TrackBox> {
        (0..5).flat_map(|t| [tb(t, 1, 0.0), tb(t, 2, 100.0)]).collect()
    }

    #[test]
    fn perfect_prediction() {
        let gt = two_tracks();
        let r = evaluate(&gt, &gt);
        assert_eq!((r.mota, r.idf1, r.ids, r.fp, r.fn_), (Some(1.0), 1.0, 0, 0, 0));
    }

    #[test]
    fn empty_prediction() {
        let gt = two_tracks();
        let r = evaluate(&[], &gt);
        assert_eq!(r.fn_, 10);
        assert_eq!(r.mota, Some(0.0));
        assert_eq!(r.idf1, 0.0);
        assert_eq!(evaluate(&[], &[]).idf1, 1.0);
        assert_eq!(evaluate(&[], &[]).mota, None);
    }

    #[test]
    fn gate_decides_true_positives() {
        let gt = vec![tb(0, 1, 0.0)];
        // IoU 0.6 needs an overlap of 7.5 px: x = 2.5. IoU 0.4: x = 10/2.333...
        let x06 = 10.0 - 2.0 * 0.6 * 10.0 / 1.6;
        let x04 = 10.0 - 2.0 * 0.4 * 10.0 / 1.4;
        let pred = vec![tb(0, 7, x06), tb(0, 8, x04)];
        assert!((iou(&gt[0].bbox, &pred[0].bbox) - 0.6).abs() < 1e-12);
        assert!((iou(&gt[0].bbox, &pred[1].bbox) - 0.4).abs() < 1e-12);
        let c = match_frames(&pred, &gt, 0.5);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
        assert_eq!(c.matches[&0], vec![(0, 0)]);
    }

    #[test]
    fn mota_formula() {
        let c = Correspondence {
            fn_: 1,
            fp: 1,
            ids: 0,
            gt_count: 10,
            ..Default::default()
        };
        assert!((mota(&c).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_induced_switch() {
        let gt = two_tracks();
        let mut pred = gt.clone();
        // From frame 3 on, predicted id of track 1 changes.
        for b in pred.iter_mut().filter(|b| b.id == 1 && b.frame >= 3) {
            b.id = 9;
        }
        assert_eq!(evaluate(&pred, &gt).ids, 1);
    }

    #[test]
    fn disappearing_track_is_not_a_switch() {
        let gt = two_tracks();
        let pred: Vec<TrackBox> = gt.iter().copied().filter(|b| b.id == 2 || b.frame < 2).collect();
        let r = evaluate(&pred, &gt);
        assert_eq!(r.ids, 0);
        assert_eq!(r.fn_, 3);
    }

    #[test]
    fn one_pred_covering_two_gt_ids() {
        let l = 6u32;
        let gt: Vec<TrackBox> = (0..2 * l).map(|t| tb(t, if t < l { 1 } else { 2 }, 0.0)).collect();
        let pred: Vec<TrackBox> = (0..2 * l).map(|t| tb(t, 5, 0.0)).collect();
        let c = id_counts(&pred, &gt, 0.5);
        assert_eq!(c.idtp, l as usize);
        assert_eq!(c.idf1(), 0.5);
    }

    #[test]
    fn relabeling_is_invisible() {
        let gt = two_tracks();
        let mut pred = gt.clone();
        pred.iter_mut().for_each(|b| b.id = 100 - b.id);
        pred.pop();
        let a = evaluate(&pred, &gt);
        let mut same = gt.clone();
        same.pop();
        assert_eq!(a, evaluate(&same, &gt));
    }

    #[test]
    fn report_formats() {
        let gt = two_tracks();
        let r = evaluate(&gt, &gt);
        let kv = r.to_key_values();
        assert!(kv.starts_with("mota=1.000000\nidf1=1.000000\nids=0\n"));
        assert!(r.to_string().contains("100.00"));
    }
}
