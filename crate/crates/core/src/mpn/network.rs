//! Forward and reverse passes of the message-passing network.
//!
//! Per step `s`, with `[.]` denoting concatenation and `E0` the encoded
//! initial edge features:
//!
//! ```text
//! E_s[e]  = edge_mlp  ([V[u], E_{s-1}[e], E0[e], V[v]])
//! P[v]   += past_mlp  ([V[u], E_s[e],     E0[e], V[v]])   for e = (u, v)
//! F[u]   += future_mlp([V[v], E_s[e],     E0[e], V[u]])
//! V_s     = node_mlp  ([P, F])
//! ```
//!
//! and finally `score = logistic(classifier([E_S, E0]))`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::loss::{focal_loss, focal_loss_grad};
use super::mlp::MlpTrace;
use super::MpnParams;
use crate::error::{Error, Result};
use crate::model::{TrackGraph, EDGE_FEATURES};

/// Dense view of a graph for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    /// One (mean) embedding per node.
    pub node_features: Array2<f64>,
    /// Raw initial edge features, one row per edge.
    pub edge_features: Array2<f64>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl GraphInput {
    pub fn from_graph(graph: &TrackGraph) -> Result<Self> {
        let n = graph.nodes().len();
        let dim = graph.nodes().first().map_or(0, |n| n.embedding().len());
        let mut node_features = Array2::zeros((n, dim));
        for (i, node) in graph.nodes().iter().enumerate() {
            let emb = node.embedding();
            if emb.len() != dim {
                return Err(Error::Dimension(format!(
                    "node {i} embedding has {} entries, expected {dim}",
                    emb.len()
                )));
            }
            node_features.row_mut(i).assign(&ndarray::aview1(emb));
        }
        let m = graph.edges().len();
        let mut edge_features = Array2::zeros((m, EDGE_FEATURES));
        let mut src = Vec::with_capacity(m);
        let mut dst = Vec::with_capacity(m);
        for (k, e) in graph.edges().iter().enumerate() {
            edge_features
                .row_mut(k)
                .assign(&ndarray::aview1(&e.init_features));
            src.push(e.u);
            dst.push(e.v);
        }
        Ok(Self {
            node_features,
            edge_features,
            src,
            dst,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    fn check(&self, params: &MpnParams) -> Result<()> {
        let c = &params.config;
        if self.n_nodes() > 0 && self.node_features.ncols() != c.embed_dim {
            return Err(Error::Dimension(format!(
                "node features have {} columns, network expects {}",
                self.node_features.ncols(),
                c.embed_dim
            )));
        }
        if self.edge_features.ncols() != EDGE_FEATURES
            || self.edge_features.nrows() != self.n_edges()
            || self.dst.len() != self.n_edges()
        {
            return Err(Error::Dimension("edge arrays disagree in length".into()));
        }
        let n = self.n_nodes();
        if let Some(k) = (0..self.n_edges()).find(|&k| self.src[k] >= n || self.dst[k] >= n) {
            return Err(Error::Validation(format!("edge {k} references a missing node")));
        }
        if let Some((i, _)) = self
            .node_features
            .iter()
            .chain(self.edge_features.iter())
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite {
                stage: "network input",
                index: i,
                msg: "input feature is not finite".into(),
            });
        }
        Ok(())
    }
}

/// Node and edge embeddings after some step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState {
    pub step: usize,
    pub nodes: Array2<f64>,
    pub edges: Array2<f64>,
    /// Encoded initial edge features, kept alongside every step.
    pub initial_edges: Array2<f64>,
}

impl EmbeddingState {
    /// `[h_e^(s), h_e^(0)]` per edge, the classifier input.
    pub fn edge_concat(&self) -> Array2<f64> {
        concatenate(Axis(1), &[self.edges.view(), self.initial_edges.view()])
            .expect("matching row counts")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub state: EmbeddingState,
    pub scores: Vec<f64>,
}

struct StepTrace {
    edge: MlpTrace,
    past: MlpTrace,
    future: MlpTrace,
    node: MlpTrace,
}

struct Tape {
    edge_encoder: MlpTrace,
    steps: Vec<StepTrace>,
    classifier: MlpTrace,
}

fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn scatter_add(rows: &Array2<f64>, idx: &[usize], n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, rows.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        let mut r = out.row_mut(i);
        r += &rows.row(k);
    }
    out
}

fn cat(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    concatenate(Axis(1), parts).expect("matching row counts")
}

fn ensure_finite(step: usize, what: &str, x: &Array2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: "message-passing step",
            index: step,
            msg: format!("{what} diverged"),
        })
    }
}

fn run(
    params: &MpnParams,
    input: &GraphInput,
    mut observe: Option<&mut dyn FnMut(&EmbeddingState)>,
    keep_tape: bool,
) -> Result<(ForwardOutput, Option<Tape>)> {
    params.validate()?;
    input.check(params)?;
    let c = params.config;
    let n = input.n_nodes();
    let (src, dst) = (&input.src, &input.dst);

    let mut nodes = if n == 0 {
        Array2::zeros((0, c.node_dim))
    } else {
        params.node_encoder.forward(&input.node_features)
    };
    let mut scaled = input.edge_features.clone();
    for mut row in scaled.rows_mut() {
        for (v, s) in row.iter_mut().zip(params.feature_scale) {
            *v *= s;
        }
    }
    let enc = params.edge_encoder.forward_traced(scaled);
    let e0 = enc.output.clone();
    ensure_finite(0, "edge embedding", &e0)?;
    ensure_finite(0, "node embedding", &nodes)?;
    let mut edges = e0.clone();
    let mut steps = Vec::new();
    if let Some(f) = observe.as_deref_mut() {
        f(&EmbeddingState {
            step: 0,
            nodes: nodes.clone(),
            edges: edges.clone(),
            initial_edges: e0.clone(),
        });
    }

    for step in 1..=c.steps {
        let vu = gather(&nodes, src);
        let vv = gather(&nodes, dst);
        let edge_tr = params
            .edge_mlp
            .forward_traced(cat(&[vu.view(), edges.view(), e0.view(), vv.view()]));
        let new_edges = edge_tr.output.clone();
        let past_tr = params
            .past_mlp
            .forward_traced(cat(&[vu.view(), new_edges.view(), e0.view(), vv.view()]));
        let fut_tr = params
            .future_mlp
            .forward_traced(cat(&[vv.view(), new_edges.view(), e0.view(), vu.view()]));
        let past = scatter_add(&past_tr.output, dst, n);
        let future = scatter_add(&fut_tr.output, src, n);
        ensure_finite(step, "past message sum", &past)?;
        ensure_finite(step, "future message sum", &future)?;
        let node_tr = params.node_mlp.forward_traced(cat(&[past.view(), future.view()]));
        nodes = node_tr.output.clone();
        edges = new_edges;
        ensure_finite(step, "edge embedding", &edges)?;
        ensure_finite(step, "node embedding", &nodes)?;
        if let Some(f) = observe.as_deref_mut() {
            f(&EmbeddingState {
                step,
                nodes: nodes.clone(),
                edges: edges.clone(),
                initial_edges: e0.clone(),
            });
        }
        if keep_tape {
            steps.push(StepTrace {
                edge: edge_tr,
                past: past_tr,
                future: fut_tr,
                node: node_tr,
            });
        }
    }

    let state = EmbeddingState {
        step: c.steps,
        nodes,
        edges,
        initial_edges: e0,
    };
    let cls = params.classifier.forward_traced(state.edge_concat());
    let scores: Vec<f64> = cls.output.column(0).to_vec();
    if let Some(k) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "edge classifier",
            index: k,
            msg: "score is not finite".into(),
        });
    }
    let tape = keep_tape.then_some(Tape {
        edge_encoder: enc,
        steps,
        classifier: cls,
    });
    Ok((ForwardOutput { state, scores }, tape))
}

/// Scores every edge of `input`.
pub fn forward(params: &MpnParams, input: &GraphInput) -> Result<ForwardOutput> {
    Ok(run(params, input, None, false)?.0)
}

/// Like [`forward`], calling `observe` with the state after every step
/// (step 0 is the encoded input).
pub fn forward_observed(
    params: &MpnParams,
    input: &GraphInput,
    observe: &mut dyn FnMut(&EmbeddingState),
) -> Result<ForwardOutput> {
    Ok(run(params, input, Some(observe), false)?.0)
}

/// Every hidden rectifier's on/off state in one forward pass. Within a
/// region of constant pattern the network is smooth in its parameters.
pub fn activation_pattern(params: &MpnParams, input: &GraphInput) -> Result<Vec<bool>> {
    let tape = run(params, input, None, true)?.1.expect("tape kept");
    let mut out: Vec<bool> = tape.edge_encoder.active_units().collect();
    for s in &tape.steps {
        for tr in [&s.edge, &s.past, &s.future, &s.node] {
            out.extend(tr.active_units());
        }
    }
    out.extend(tape.classifier.active_units());
    Ok(out)
}

/// Gradient of `sum_e d_scores[e] * score[e]` with respect to all parameters.
pub fn backward(params: &MpnParams, input: &GraphInput, d_scores: &[f64]) -> Result<MpnParams> {
    if d_scores.len() != input.n_edges() {
        return Err(Error::Length {
            expected: input.n_edges(),
            got: d_scores.len(),
        });
    }
    let (_, tape) = run(params, input, None, true)?;
    Ok(reverse(
        params,
        input,
        &tape.expect("tape requested"),
        d_scores,
    ))
}

fn reverse(params: &MpnParams, input: &GraphInput, tape: &Tape, d_scores: &[f64]) -> MpnParams {
    let c = params.config;
    let (dv, de) = (c.node_dim, c.edge_dim);
    let n = input.n_nodes();
    let m = input.n_edges();
    let (src, dst) = (&input.src, &input.dst);
    let mut grad = params.zeros_like();

    let d_out = Array2::from_shape_vec((m, 1), d_scores.to_vec()).expect("column shape");
    let d_cls = params
        .classifier
        .backward(&tape.classifier, &d_out, &mut grad.classifier);
    let mut d_edges = d_cls.slice(s![.., ..de]).to_owned();
    let mut d_e0 = d_cls.slice(s![.., de..]).to_owned();
    let mut d_nodes: Array2<f64> = Array2::zeros((n, dv));

    // Column blocks of a message input [a, e, e0, b].
    let blocks = |x: &Array2<f64>| {
        (
            x.slice(s![.., ..dv]).to_owned(),
            x.slice(s![.., dv..dv + de]).to_owned(),
            x.slice(s![.., dv + de..dv + 2 * de]).to_owned(),
            x.slice(s![.., dv + 2 * de..]).to_owned(),
        )
    };
    let add_rows = |acc: &mut Array2<f64>, rows: &Array2<f64>, idx: &[usize]| {
        for (k, &i) in idx.iter().enumerate() {
            let mut r = acc.row_mut(i);
            r += &rows.row(k);
        }
    };

    for st in tape.steps.iter().rev() {
        let d_in = params.node_mlp.backward(&st.node, &d_nodes, &mut grad.node_mlp);
        let d_past = gather(&d_in.slice(s![.., ..dv]).to_owned(), dst);
        let d_fut = gather(&d_in.slice(s![.., dv..]).to_owned(), src);
        let mut d_prev_nodes: Array2<f64> = Array2::zeros((n, dv));

        let (a, e, e0, b) = blocks(&params.past_mlp.backward(&st.past, &d_past, &mut grad.past_mlp));
        add_rows(&mut d_prev_nodes, &a, src);
        add_rows(&mut d_prev_nodes, &b, dst);
        d_edges += &e;
        d_e0 += &e0;

        let (a, e, e0, b) = blocks(
            &params
                .future_mlp
                .backward(&st.future, &d_fut, &mut grad.future_mlp),
        );
        add_rows(&mut d_prev_nodes, &a, dst);
        add_rows(&mut d_prev_nodes, &b, src);
        d_edges += &e;
        d_e0 += &e0;

        let (a, e, e0, b) = blocks(&params.edge_mlp.backward(&st.edge, &d_edges, &mut grad.edge_mlp));
        add_rows(&mut d_prev_nodes, &a, src);
        add_rows(&mut d_prev_nodes, &b, dst);
        d_e0 += &e0;
        d_edges = e;
        d_nodes = d_prev_nodes;
    }
    // Step 1 consumed E0 as its previous edge state.
    d_e0 += &d_edges;
    params
        .edge_encoder
        .backward(&tape.edge_encoder, &d_e0, &mut grad.edge_encoder);
    if n > 0 {
        params
            .node_encoder
            .backward(&input.node_features, &d_nodes, &mut grad.node_encoder);
    }
    grad
}

/// Mean focal loss over the edges of one graph, its gradient and the scores.
pub fn loss_and_gradient(
    params: &MpnParams,
    input: &GraphInput,
    labels: &[bool],
    gamma: f64,
) -> Result<(f64, MpnParams, Vec<f64>)> {
    if labels.len() != input.n_edges() {
        return Err(Error::Length {
            expected: input.n_edges(),
            got: labels.len(),
        });
    }
    let (out, tape) = run(params, input, None, true)?;
    let loss = focal_loss(&out.scores, labels, gamma)?;
    let d = focal_loss_grad(&out.scores, labels, gamma)?;
    let grad = reverse(params, input, &tape.expect("tape requested"), &d);
    Ok((loss, grad, out.scores))
}
