//! Domain types shared by the whole pipeline: boxes, detections, tracklets
//! and the composite-node tracking graph.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};

/// Default embedding dimension for synthetic data.
pub const DEFAULT_EMBED_DIM: usize = 16;

/// Axis-aligned box in pixel coordinates, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Validation(format!(
                "box ({x}, {y}, {w}, {h}) has non-finite coordinates"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Validation(format!(
                "box ({x}, {y}, {w}, {h}) must have positive width and height"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Linear blend `self * (1 - t) + other * t` of all four coordinates.
    pub fn lerp(&self, other: &BoundingBox, t: f64) -> BoundingBox {
        BoundingBox {
            x: self.x + (other.x - self.x) * t,
            y: self.y + (other.y - self.y) * t,
            w: self.w + (other.w - self.w) * t,
            h: self.h + (other.h - self.h) * t,
        }
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub gt_id: Option<u32>,
}

impl Detection {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Validation(format!(
                "confidence {} outside [0, 1] at frame {}",
                self.confidence, self.frame
            )));
        }
        if self.embedding.len() != dim {
            return Err(Error::Length {
                expected: dim,
                got: self.embedding.len(),
            });
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding entry at frame {}",
                self.frame
            )));
        }
        BoundingBox::new(self.bbox.x, self.bbox.y, self.bbox.w, self.bbox.h)?;
        Ok(())
    }
}

/// Ordered single-identity run of detections.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    id: u64,
    detections: Vec<Detection>,
    mean_embedding: Vec<f64>,
}

impl Tracklet {
    /// Builds a tracklet; `detections` must be nonempty with strictly
    /// increasing frames and equal embedding lengths.
    pub fn new(id: u64, detections: Vec<Detection>) -> Result<Self> {
        let first = detections
            .first()
            .ok_or_else(|| Error::Validation("tracklet must contain a detection".into()))?;
        let dim = first.embedding.len();
        for pair in detections.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(Error::Validation(format!(
                    "tracklet {id}: frames not strictly increasing ({} then {})",
                    pair[0].frame, pair[1].frame
                )));
            }
        }
        if let Some(d) = detections.iter().find(|d| d.embedding.len() != dim) {
            return Err(Error::Length {
                expected: dim,
                got: d.embedding.len(),
            });
        }
        let mean_embedding = mean_of(detections.iter().map(|d| d.embedding.as_slice()), dim);
        Ok(Self {
            id,
            detections,
            mean_embedding,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.detections
    }

    pub fn mean_embedding(&self) -> &[f64] {
        &self.mean_embedding
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn start_frame(&self) -> u32 {
        self.detections[0].frame
    }

    pub fn end_frame(&self) -> u32 {
        self.detections[self.detections.len() - 1].frame
    }

    pub fn first_box(&self) -> &BoundingBox {
        &self.detections[0].bbox
    }

    pub fn last_box(&self) -> &BoundingBox {
        &self.detections[self.detections.len() - 1].bbox
    }
}

/// Arithmetic mean of equal-length vectors; zero vector when empty.
pub(crate) fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    acc
}

/// IoU of two inclusive integer frame spans.
pub fn span_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return 0.0;
    }
    let inter = (hi - lo + 1) as f64;
    let union = ((a.1 - a.0 + 1) + (b.1 - b.0 + 1)) as f64 - inter;
    inter / union
}

/// Frame-span IoU of two tracklets over inclusive spans.
pub fn temporal_iou(a: &Tracklet, b: &Tracklet) -> f64 {
    span_iou(
        (a.start_frame(), a.end_frame()),
        (b.start_frame(), b.end_frame()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Det,
    Traj,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodePayload {
    /// A single detection and its index in the source detection set.
    Det { det: Detection, index: usize },
    /// An aggregated tracklet and the source indices of its members.
    Traj { tracklet: Tracklet, members: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeNode {
    pub node_index: usize,
    pub payload: NodePayload,
}

impl CompositeNode {
    pub fn kind(&self) -> NodeKind {
        match self.payload {
            NodePayload::Det { .. } => NodeKind::Det,
            NodePayload::Traj { .. } => NodeKind::Traj,
        }
    }

    pub fn start_frame(&self) -> u32 {
        match &self.payload {
            NodePayload::Det { det, .. } => det.frame,
            NodePayload::Traj { tracklet, .. } => tracklet.start_frame(),
        }
    }

    pub fn end_frame(&self) -> u32 {
        match &self.payload {
            NodePayload::Det { det, .. } => det.frame,
            NodePayload::Traj { tracklet, .. } => tracklet.end_frame(),
        }
    }

    pub fn span(&self) -> (u32, u32) {
        (self.start_frame(), self.end_frame())
    }

    pub fn first_box(&self) -> &BoundingBox {
        match &self.payload {
            NodePayload::Det { det, .. } => &det.bbox,
            NodePayload::Traj { tracklet, .. } => tracklet.first_box(),
        }
    }

    pub fn last_box(&self) -> &BoundingBox {
        match &self.payload {
            NodePayload::Det { det, .. } => &det.bbox,
            NodePayload::Traj { tracklet, .. } => tracklet.last_box(),
        }
    }

    /// Detection embedding, or the tracklet's mean embedding.
    pub fn embedding(&self) -> &[f64] {
        match &self.payload {
            NodePayload::Det { det, .. } => &det.embedding,
            NodePayload::Traj { tracklet, .. } => tracklet.mean_embedding(),
        }
    }

    /// Source detection indices covered by this node, in frame order.
    pub fn members(&self) -> &[usize] {
        match &self.payload {
            NodePayload::Det { index, .. } => std::slice::from_ref(index),
            NodePayload::Traj { members, .. } => members,
        }
    }

    pub fn first_member(&self) -> usize {
        self.members()[0]
    }

    pub fn last_member(&self) -> usize {
        let m = self.members();
        m[m.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    DetDet,
    DetTraj,
    TrajTraj,
}

impl EdgeKind {
    pub fn between(a: NodeKind, b: NodeKind) -> EdgeKind {
        match (a, b) {
            (NodeKind::Det, NodeKind::Det) => EdgeKind::DetDet,
            (NodeKind::Traj, NodeKind::Traj) => EdgeKind::TrajTraj,
            _ => EdgeKind::DetTraj,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::DetDet => "det-det",
            EdgeKind::DetTraj => "det-traj",
            EdgeKind::TrajTraj => "traj-traj",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of initial edge features.
pub const EDGE_FEATURES: usize = 6;

/// Directed candidate link; `u` ends strictly before `v` starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub kind: EdgeKind,
    pub init_features: [f64; EDGE_FEATURES],
    pub score: Option<f64>,
    pub label: Option<bool>,
}

/// Composite-node graph; a DAG under temporal ordering.
#[derive(Debug, Clone, Default)]
pub struct TrackGraph {
    nodes: Vec<CompositeNode>,
    edges: Vec<Edge>,
    frame_index: BTreeMap<u32, Vec<usize>>,
    keys: HashSet<(usize, usize, EdgeKind)>,
}

impl TrackGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[CompositeNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &CompositeNode {
        &self.nodes[i]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_mut(&mut self) -> &mut [Edge] {
        &mut self.edges
    }

    /// Node indices keyed by their start frame.
    pub fn frame_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.frame_index
    }

    pub fn add_node(&mut self, payload: NodePayload) -> usize {
        let node_index = self.nodes.len();
        let node = CompositeNode {
            node_index,
            payload,
        };
        self.frame_index
            .entry(node.start_frame())
            .or_default()
            .push(node_index);
        self.nodes.push(node);
        node_index
    }

    pub fn has_edge(&self, u: usize, v: usize, kind: EdgeKind) -> bool {
        self.keys.contains(&(u, v, kind))
    }

    /// Adds an edge; returns `Ok(false)` for a duplicate `(u, v, kind)`.
    pub fn add_edge(
        &mut self,
        u: usize,
        v: usize,
        kind: EdgeKind,
        init_features: [f64; EDGE_FEATURES],
    ) -> Result<bool> {
        if u >= self.nodes.len() || v >= self.nodes.len() {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) references a missing node"
            )));
        }
        if u == v {
            return Err(Error::Validation(format!("self-loop on node {u}")));
        }
        if self.nodes[u].end_frame() >= self.nodes[v].start_frame() {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) violates temporal order: {} >= {}",
                self.nodes[u].end_frame(),
                self.nodes[v].start_frame()
            )));
        }
        if !self.keys.insert((u, v, kind)) {
            return Ok(false);
        }
        self.edges.push(Edge {
            u,
            v,
            kind,
            init_features,
            score: None,
            label: None,
        });
        Ok(true)
    }

    pub fn count_nodes(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(frame: u32, emb: Vec<f64>) -> Detection {
        Detection {
            frame,
            bbox: bx(0.0, 0.0, 1.0, 1.0),
            confidence: 1.0,
            embedding: emb,
            gt_id: None,
        }
    }

    fn span_tracklet(start: u32, end: u32) -> Tracklet {
        Tracklet::new(0, (start..=end).map(|f| det(f, vec![1.0])).collect()).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(3.0, 4.0, 5.0, 6.0), &bx(3.0, 4.0, 5.0, 6.0)), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 0.0, 2.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn temporal_iou_examples() {
        assert_eq!(temporal_iou(&span_tracklet(1, 5), &span_tracklet(6, 9)), 0.0);
        assert_eq!(temporal_iou(&span_tracklet(2, 7), &span_tracklet(2, 7)), 1.0);
        assert_eq!(temporal_iou(&span_tracklet(1, 5), &span_tracklet(4, 8)), 0.25);
    }

    #[test]
    fn tracklet_rejects_unordered_frames() {
        assert!(Tracklet::new(1, vec![det(3, vec![0.0]), det(3, vec![0.0])]).is_err());
        assert!(Tracklet::new(1, vec![det(4, vec![0.0]), det(3, vec![0.0])]).is_err());
        assert!(Tracklet::new(1, vec![]).is_err());
    }

    #[test]
    fn tracklet_mean_embedding() {
        let t = Tracklet::new(
            7,
            vec![det(0, vec![1.0, 0.0]), det(2, vec![0.0, 1.0]), det(3, vec![2.0, 2.0])],
        )
        .unwrap();
        assert_eq!(t.mean_embedding(), &[1.0, 1.0]);
        assert_eq!((t.start_frame(), t.end_frame()), (0, 3));
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let mut g = TrackGraph::new();
        let a = g.add_node(NodePayload::Det {
            det: det(0, vec![1.0]),
            index: 0,
        });
        let b = g.add_node(NodePayload::Det {
            det: det(0, vec![1.0]),
            index: 1,
        });
        let c = g.add_node(NodePayload::Det {
            det: det(1, vec![1.0]),
            index: 2,
        });
        assert!(g.add_edge(a, b, EdgeKind::DetDet, [0.0; 6]).is_err());
        assert!(g.add_edge(c, a, EdgeKind::DetDet, [0.0; 6]).is_err());
        assert!(g.add_edge(a, a, EdgeKind::DetDet, [0.0; 6]).is_err());
        assert!(g.add_edge(a, c, EdgeKind::DetDet, [0.0; 6]).unwrap());
        assert!(!g.add_edge(a, c, EdgeKind::DetDet, [0.0; 6]).unwrap());
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.frame_index()[&0], vec![0, 1]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn temporal_iou_zero_iff_disjoint(s1 in 0u32..50, l1 in 0u32..20, s2 in 0u32..50, l2 in 0u32..20) {
            let a = (s1, s1 + l1);
            let b = (s2, s2 + l2);
            let disjoint = a.1 < b.0 || b.1 < a.0;
            prop_assert_eq!(span_iou(a, b) == 0.0, disjoint);
        }

        #[test]
        fn mean_embedding_recomputable(rows in proptest::collection::vec(proptest::collection::vec(-10.0..10.0f64, 4), 1..30)) {
            let dets: Vec<Detection> = rows.iter().enumerate().map(|(i, r)| det(i as u32, r.clone())).collect();
            let t = Tracklet::new(0, dets).unwrap();
            for k in 0..4 {
                let direct: f64 = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
                let got = t.mean_embedding()[k];
                prop_assert!((direct - got).abs() <= 1e-9 * direct.abs().max(1.0));
            }
        }
    }
}
