//! Initial node and edge features.

use crate::model::{CompositeNode, EDGE_FEATURES};

/// Geometry, time gap and appearance distance between `u` (earlier) and `v`.
///
/// Components: `2dx / (h_u + h_v)`, `2dy / (h_u + h_v)`, `ln(w_v / w_u)`,
/// `ln(h_v / h_u)`, `t_v_start - t_u_end` and `|f_u - f_v|_2`, comparing u's
/// last box with v's first box and the nodes' (mean) embeddings.
pub fn init_edge_features(u: &CompositeNode, v: &CompositeNode) -> [f64; EDGE_FEATURES] {
    let a = u.last_box();
    let b = v.first_box();
    let hs = a.h + b.h;
    let dist = u
        .embedding()
        .iter()
        .zip(v.embedding())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    [
        2.0 * (b.x - a.x) / hs,
        2.0 * (b.y - a.y) / hs,
        (b.w / a.w).ln(),
        (b.h / a.h).ln(),
        v.start_frame() as f64 - u.end_frame() as f64,
        dist,
    ]
}
