//! Partially connected composite-node graph construction.
//!
//! A frame-by-frame Hungarian tracker over the clip affinity matrix yields
//! coarse tracklets and candidate detection links. The graph then holds every
//! detection as a node, every tracklet of length two or more as an extra
//! trajectory node, and three kinds of links between them.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::affinity::{step_cost_matrix, AffinityMatrix};
use crate::error::{Error, Result};
use crate::hungarian;
use crate::ingest::DetectionSet;
use crate::model::{EdgeKind, NodeKind, NodePayload, TrackGraph, Tracklet};
use crate::mpn::init_edge_features;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuilderConfig {
    /// Candidate links per track and frame, besides the assigned one.
    pub top_k: usize,
    /// Minimum association score to extend a track.
    pub new_track_threshold: f64,
    /// Frames a track stays active after its last detection.
    pub lookback: u32,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            new_track_threshold: 0.3,
            lookback: 32,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Validation("top_k must be at least 1".into()));
        }
        if !(self.new_track_threshold > 0.0 && self.new_track_threshold < 1.0) {
            return Err(Error::Validation(format!(
                "new-track threshold must lie in (0, 1), got {}",
                self.new_track_threshold
            )));
        }
        if self.lookback == 0 {
            return Err(Error::Validation("lookback must be at least 1 frame".into()));
        }
        Ok(())
    }
}

/// Output of the frame-by-frame tracker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// Member detection indices of each track, in frame order.
    pub tracks: Vec<Vec<usize>>,
    /// Candidate detection links `(earlier, later)`, deduplicated, in
    /// emission order.
    pub links: Vec<(usize, usize)>,
}

impl Association {
    /// Tracks as tracklets, ids equal to track positions.
    pub fn tracklets(&self, dets: &DetectionSet) -> Result<Vec<Tracklet>> {
        self.tracks
            .iter()
            .enumerate()
            .map(|(id, m)| Tracklet::new(id as u64, m.iter().map(|&i| dets.get(i).clone()).collect()))
            .collect()
    }
}

/// Frame-by-frame Hungarian association with top-k candidate links.
pub fn associate_frames(
    dets: &DetectionSet,
    m: &AffinityMatrix,
    cfg: &BuilderConfig,
) -> Result<Association> {
    cfg.validate()?;
    if m.n() != dets.len() {
        return Err(Error::Length {
            expected: dets.len(),
            got: m.n(),
        });
    }
    let mut tracks: Vec<Vec<usize>> = Vec::new();
    let mut links = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in 0..dets.n_frames() {
        let range = dets.frame_range(t);
        if range.is_empty() {
            continue;
        }
        let active: Vec<usize> = (0..tracks.len())
            .filter(|&r| {
                let last = dets.get(*tracks[r].last().expect("nonempty")).frame;
                last + cfg.lookback >= t
            })
            .collect();
        let mut taken = vec![false; range.len()];
        if !active.is_empty() {
            let members: Vec<&[usize]> = active.iter().map(|&r| tracks[r].as_slice()).collect();
            let sc = step_cost_matrix(&members, range.clone(), dets, m, t, cfg.lookback);
            let assignment = hungarian::assign(&sc.cost, sc.rows, sc.cols);
            let mut extend = Vec::new();
            for (r, &tr) in active.iter().enumerate() {
                let last = *tracks[tr].last().expect("nonempty");
                let mut emit = |j: usize| {
                    if seen.insert((last, j)) {
                        links.push((last, j));
                    }
                };
                if let Some(c) = assignment[r] {
                    if -sc.at(r, c) >= cfg.new_track_threshold {
                        taken[c] = true;
                        extend.push((tr, range.start + c));
                        emit(range.start + c);
                    }
                }
                let mut order: Vec<usize> = (0..sc.cols)
                    .filter(|&c| sc.similarity[r * sc.cols + c] > 0.0)
                    .collect();
                order.sort_by(|&a, &b| {
                    sc.similarity[r * sc.cols + b]
                        .total_cmp(&sc.similarity[r * sc.cols + a])
                        .then(a.cmp(&b))
                });
                for &c in order.iter().take(cfg.top_k) {
                    emit(range.start + c);
                }
            }
            for (tr, j) in extend {
                tracks[tr].push(j);
            }
        }
        for (c, j) in range.enumerate() {
            if !taken[c] {
                tracks.push(vec![j]);
            }
        }
    }
    Ok(Association { tracks, links })
}

/// Builds the partially connected graph. Node `i < dets.len()` is detection
/// `i`; trajectory nodes follow in track order.
pub fn build_part_graph(
    assoc: &Association,
    dets: &DetectionSet,
    cfg: &BuilderConfig,
) -> Result<TrackGraph> {
    let mut g = TrackGraph::new();
    for (index, det) in dets.detections().iter().enumerate() {
        g.add_node(NodePayload::Det {
            det: det.clone(),
            index,
        });
    }
    // Trajectory node of each track, if any.
    let mut traj_of_track = vec![None; assoc.tracks.len()];
    for (id, members) in assoc.tracks.iter().enumerate() {
        if members.len() >= 2 {
            let tracklet =
                Tracklet::new(id as u64, members.iter().map(|&i| dets.get(i).clone()).collect())?;
            traj_of_track[id] = Some(g.add_node(NodePayload::Traj {
                tracklet,
                members: members.clone(),
            }));
        }
    }

    for &(a, b) in &assoc.links {
        let f = init_edge_features(g.node(a), g.node(b));
        g.add_edge(a, b, EdgeKind::DetDet, f)?;
    }

    let trajs: Vec<usize> = traj_of_track.iter().flatten().copied().collect();
    // Det-Traj: singletons link both ways, tracklet boundaries link outward.
    let det_traj: Vec<Vec<(usize, usize)>> = par::map_range(assoc.tracks.len(), |id| {
        let members = &assoc.tracks[id];
        let own = traj_of_track[id];
        let mut out = Vec::new();
        let first = members[0];
        let last = *members.last().expect("nonempty");
        let (f0, f1) = (dets.get(first).frame, dets.get(last).frame);
        for &x in &trajs {
            if Some(x) == own {
                continue;
            }
            let (s, e) = g.node(x).span();
            if e < f0 && f0 - e <= cfg.lookback {
                out.push((x, first));
            }
            if s > f1 && s - f1 <= cfg.lookback {
                out.push((last, x));
            }
        }
        out
    });
    for (u, v) in det_traj.into_iter().flatten() {
        let f = init_edge_features(g.node(u), g.node(v));
        g.add_edge(u, v, EdgeKind::DetTraj, f)?;
    }

    // Traj-Traj: every temporally disjoint pair, earlier node first.
    let traj_traj: Vec<Vec<(usize, usize)>> = par::map_range(trajs.len(), |a| {
        let x = trajs[a];
        trajs[a + 1..]
            .iter()
            .filter_map(|&y| {
                let (sx, ex) = g.node(x).span();
                let (sy, ey) = g.node(y).span();
                if ex < sy {
                    Some((x, y))
                } else if ey < sx {
                    Some((y, x))
                } else {
                    None
                }
            })
            .collect()
    });
    for (u, v) in traj_traj.into_iter().flatten() {
        let f = init_edge_features(g.node(u), g.node(v));
        g.add_edge(u, v, EdgeKind::TrajTraj, f)?;
    }
    Ok(g)
}

/// Consecutive same-identity detection pairs `(earlier, later)`.
pub fn gt_pairs(dets: &DetectionSet) -> Result<Vec<(usize, usize)>> {
    Ok(dets
        .gt_tracks()?
        .into_iter()
        .flat_map(|(_, m)| m.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>())
        .collect())
}

/// Edge labels: an edge is a true link when the last detection of `u` and
/// the first detection of `v` are consecutive detections of one identity.
pub fn edge_labels(g: &TrackGraph, dets: &DetectionSet) -> Result<Vec<bool>> {
    let next: HashMap<usize, usize> = gt_pairs(dets)?.into_iter().collect();
    Ok(g.edges()
        .iter()
        .map(|e| next.get(&g.node(e.u).last_member()) == Some(&g.node(e.v).first_member()))
        .collect())
}

/// Fraction of consecutive ground-truth pairs the graph can represent,
/// either inside one trajectory node or along one edge. 1.0 when there are
/// no such pairs.
pub fn edge_coverage(g: &TrackGraph, dets: &DetectionSet) -> Result<f64> {
    let pairs = gt_pairs(dets)?;
    if pairs.is_empty() {
        return Ok(1.0);
    }
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); dets.len()];
    for node in g.nodes() {
        for &i in node.members() {
            if i >= dets.len() {
                return Err(Error::Validation(format!(
                    "node {} references detection {i} outside the set",
                    node.node_index
                )));
            }
            holders[i].push(node.node_index);
        }
    }
    let edges: std::collections::HashSet<(usize, usize)> =
        g.edges().iter().map(|e| (e.u, e.v)).collect();
    let covered = pairs
        .iter()
        .filter(|&&(a, b)| {
            holders[a].iter().any(|&x| {
                holders[b]
                    .iter()
                    .any(|&y| (x == y && g.node(x).kind() == NodeKind::Traj) || edges.contains(&(x, y)))
            })
        })
        .count();
    Ok(covered as f64 / pairs.len() as f64)
}

/// Edge count of the fully connected graph over `dets`: every pair in
/// different frames, optionally only pairs at most `within` frames apart.
pub fn fully_connected_edge_count(dets: &DetectionSet, within: Option<u32>) -> u64 {
    let n_frames = dets.n_frames();
    let counts: Vec<u64> = (0..n_frames).map(|t| dets.frame_range(t).len() as u64).collect();
    let mut prefix = vec![0u64; counts.len() + 1];
    for (t, c) in counts.iter().enumerate() {
        prefix[t + 1] = prefix[t] + c;
    }
    let mut total = 0;
    for (t, &c) in counts.iter().enumerate() {
        let hi = match within {
            Some(w) => (t + 1 + w as usize).min(counts.len()),
            None => counts.len(),
        };
        total += c * (prefix[hi] - prefix[t + 1]);
    }
    total
}

/// Line-oriented dump: a node section, then an edge section.
pub fn format_graph(g: &TrackGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "nodes {}", g.nodes().len());
    for n in g.nodes() {
        let kind = match n.kind() {
            NodeKind::Det => "Det",
            NodeKind::Traj => "Traj",
        };
        let _ = writeln!(
            out,
            "node {} {} {} {} {}",
            n.node_index,
            kind,
            n.start_frame(),
            n.end_frame(),
            n.members().len()
        );
    }
    let _ = writeln!(out, "edges {}", g.edges().len());
    for e in g.edges() {
        let _ = write!(out, "edge {} {} {}", e.u, e.v, e.kind);
        for f in e.init_features {
            let _ = write!(out, " {f:.6}");
        }
        match e.score {
            Some(s) => {
                let _ = writeln!(out, " {s:.6}");
            }
            None => {
                let _ = writeln!(out, " -");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{accumulate_affinity, OracleScorer, WindowPlan};
    use crate::ingest::{synthesize, ScenarioSpec};
    use crate::model::{BoundingBox, Detection};

    fn det(frame: u32, x: f64, gt: u32) -> Detection {
        let mut emb = vec![0.0; 4];
        emb[gt as usize % 4] = 1.0;
        Detection {
            frame,
            bbox: BoundingBox::new(x, 0.0, 10.0, 20.0).unwrap(),
            confidence: 1.0,
            embedding: emb,
            gt_id: Some(gt),
        }
    }

    fn oracle(dets: &DetectionSet) -> AffinityMatrix {
        accumulate_affinity(dets, &WindowPlan::default(), &OracleScorer).unwrap()
    }

    #[test]
    fn single_object_two_frames() {
        let dets = DetectionSet::new(vec![det(0, 0.0, 1), det(1, 2.0, 1)], 2, 4).unwrap();
        let cfg = BuilderConfig {
            top_k: 1,
            ..Default::default()
        };
        let a = associate_frames(&dets, &oracle(&dets), &cfg).unwrap();
        assert_eq!(a.tracks, vec![vec![0, 1]]);
        assert_eq!(a.links, vec![(0, 1)]);
    }

    #[test]
    fn crossing_objects_keep_identities() {
        // Two objects swap sides; boxes overlap around the crossing.
        let mut v = Vec::new();
        for t in 0..10u32 {
            v.push(det(t, 10.0 * t as f64, 1));
            let mut other = det(t, 90.0 - 10.0 * t as f64, 2);
            other.bbox.y = 5.0;
            v.push(other);
        }
        let dets = DetectionSet::new(v, 10, 4).unwrap();
        let a = associate_frames(&dets, &oracle(&dets), &BuilderConfig::default()).unwrap();
        assert_eq!(a.tracks.len(), 2);
        for tr in &a.tracks {
            let id = dets.get(tr[0]).gt_id;
            assert!(tr.iter().all(|&i| dets.get(i).gt_id == id));
            assert_eq!(tr.len(), 10);
        }
    }

    #[test]
    fn unrelated_detection_starts_new_track() {
        let dets = DetectionSet::new(vec![det(0, 0.0, 1), det(1, 500.0, 2)], 2, 4).unwrap();
        let a = associate_frames(&dets, &oracle(&dets), &BuilderConfig::default()).unwrap();
        assert_eq!(a.tracks, vec![vec![0], vec![1]]);
        assert!(a.links.is_empty());
    }

    fn assoc(tracks: Vec<Vec<usize>>) -> Association {
        Association {
            tracks,
            links: Vec::new(),
        }
    }

    #[test]
    fn traj_traj_gating() {
        let v = vec![det(0, 0.0, 1), det(1, 0.0, 1), det(5, 0.0, 1), det(6, 0.0, 1)];
        let dets = DetectionSet::new(v, 7, 4).unwrap();
        let g = build_part_graph(&assoc(vec![vec![0, 1], vec![2, 3]]), &dets, &Default::default())
            .unwrap();
        assert_eq!(g.count_edges(EdgeKind::TrajTraj), 1);
        assert_eq!(g.count_nodes(NodeKind::Traj), 2);

        let v = vec![det(0, 0.0, 1), det(0, 50.0, 2), det(1, 0.0, 1), det(1, 50.0, 2)];
        let dets = DetectionSet::new(v, 2, 4).unwrap();
        let g = build_part_graph(&assoc(vec![vec![0, 2], vec![1, 3]]), &dets, &Default::default())
            .unwrap();
        assert_eq!(g.count_edges(EdgeKind::TrajTraj), 0);
    }

    #[test]
    fn three_disjoint_tracklets_form_complete_dag() {
        let v: Vec<Detection> = (0..6).map(|t| det(t * 2, 0.0, 1)).collect();
        let dets = DetectionSet::new(v, 12, 4).unwrap();
        let g = build_part_graph(
            &assoc(vec![vec![0, 1], vec![2, 3], vec![4, 5]]),
            &dets,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(g.count_edges(EdgeKind::TrajTraj), 3);
        for e in g.edges() {
            assert!(g.node(e.u).end_frame() < g.node(e.v).start_frame());
        }
    }

    #[test]
    fn singletons_reach_neighbouring_tracklets() {
        let v = vec![det(0, 0.0, 1), det(1, 0.0, 1), det(3, 0.0, 1), det(5, 0.0, 1), det(6, 0.0, 1)];
        let dets = DetectionSet::new(v, 7, 4).unwrap();
        let g = build_part_graph(
            &assoc(vec![vec![0, 1], vec![2], vec![3, 4]]),
            &dets,
            &Default::default(),
        )
        .unwrap();
        // Nodes 5 and 6 are the two trajectories.
        assert!(g.has_edge(5, 2, EdgeKind::DetTraj));
        assert!(g.has_edge(2, 6, EdgeKind::DetTraj));
        assert!(g.has_edge(1, 6, EdgeKind::DetTraj));
        assert!(g.has_edge(5, 3, EdgeKind::DetTraj));
        assert_eq!(edge_coverage(&g, &dets).unwrap(), 1.0);
    }

    #[test]
    fn coverage_extremes() {
        let v: Vec<Detection> = (0..4).map(|t| det(t, 0.0, 1)).collect();
        let dets = DetectionSet::new(v, 4, 4).unwrap();
        let empty = build_part_graph(&assoc(vec![vec![0], vec![1], vec![2], vec![3]]), &dets, &Default::default())
            .unwrap();
        assert_eq!(edge_coverage(&empty, &dets).unwrap(), 0.0);
        let a = associate_frames(&dets, &oracle(&dets), &Default::default()).unwrap();
        let g = build_part_graph(&a, &dets, &Default::default()).unwrap();
        assert_eq!(edge_coverage(&g, &dets).unwrap(), 1.0);
    }

    #[test]
    fn oracle_clean_scenario_is_exact() {
        let spec = ScenarioSpec {
            n_objects: 6,
            n_frames: 80,
            seed: 3,
            ..Default::default()
        };
        let dets = synthesize(&spec).unwrap();
        let cfg = BuilderConfig::default();
        let a = associate_frames(&dets, &oracle(&dets), &cfg).unwrap();
        let gt = dets.gt_tracks().unwrap();
        let mut got = a.tracks.clone();
        got.sort();
        let mut want: Vec<Vec<usize>> = gt.into_iter().map(|t| t.1).collect();
        want.sort();
        assert_eq!(got, want);
        let g = build_part_graph(&a, &dets, &cfg).unwrap();
        assert_eq!(edge_coverage(&g, &dets).unwrap(), 1.0);
        assert!(g.count_edges(EdgeKind::DetDet) <= dets.len() * (cfg.top_k + 1));
        let labels = edge_labels(&g, &dets).unwrap();
        assert_eq!(labels.len(), g.edges().len());
        // Every consecutive pair appears as a positive Det-Det edge.
        let positives = g
            .edges()
            .iter()
            .zip(&labels)
            .filter(|(e, &y)| y && e.kind == EdgeKind::DetDet)
            .count();
        assert_eq!(positives, dets.len() - spec.n_objects);
    }

    #[test]
    fn fully_connected_counts() {
        let v = vec![det(0, 0.0, 1), det(0, 50.0, 2), det(1, 0.0, 1), det(3, 0.0, 1)];
        let dets = DetectionSet::new(v, 4, 4).unwrap();
        // Frame sizes 2, 1, 0, 1: 2*1 + 2*1 + 1*1.
        assert_eq!(fully_connected_edge_count(&dets, None), 5);
        assert_eq!(fully_connected_edge_count(&dets, Some(1)), 2);
    }

    #[test]
    fn dump_lists_nodes_then_edges() {
        let dets = DetectionSet::new(vec![det(0, 0.0, 1), det(1, 2.0, 1)], 2, 4).unwrap();
        let a = associate_frames(&dets, &oracle(&dets), &Default::default()).unwrap();
        let g = build_part_graph(&a, &dets, &Default::default()).unwrap();
        let text = format_graph(&g);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "nodes 3");
        assert!(lines[3].starts_with("node 2 Traj 0 1 2"));
        assert_eq!(lines[4], "edges 1");
        assert!(lines[5].starts_with("edge 0 1 det-det 0.100000 0.000000"));
        assert!(lines[5].ends_with(" -"));
    }
}
