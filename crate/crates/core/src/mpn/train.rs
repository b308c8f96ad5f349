//! Gradient-based training with focal loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{loss_and_gradient, GraphInput};
use super::MpnParams;
use crate::error::{Error, Result};
use crate::par;

/// A graph with one binary label per edge.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub input: GraphInput,
    pub labels: Vec<bool>,
}

/// A first-pass graph and, optionally, the trajectory-level graph of the
/// second aggregation pass. Both are scored by the same parameters.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub first: LabeledGraph,
    pub second: Option<LabeledGraph>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub learning_rate: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    /// Iteration from which second-pass graphs contribute to the loss.
    pub second_pass_after: usize,
    pub gamma: f64,
    /// Samples per iteration; 0 means all of them.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            optimizer: Optimizer::adam(),
            second_pass_after: 500,
            gamma: super::DEFAULT_GAMMA,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("focal gamma must be >= 0, got {}", self.gamma));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad(format!("invalid Adam settings {:?}", self.optimizer));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn sample_loss(
    params: &MpnParams,
    sample: &TrainingSample,
    use_second: bool,
    gamma: f64,
) -> Result<(f64, MpnParams)> {
    let g = &sample.first;
    let (mut loss, mut grad, _) = loss_and_gradient(params, &g.input, &g.labels, gamma)?;
    if let (true, Some(g2)) = (use_second, &sample.second) {
        let (l2, grad2, _) = loss_and_gradient(params, &g2.input, &g2.labels, gamma)?;
        loss += l2;
        grad.add_scaled(&grad2, 1.0);
    }
    Ok((loss, grad))
}

/// Trains `params` on `samples`; deterministic for a fixed schedule.
pub fn train(
    samples: &[TrainingSample],
    mut params: MpnParams,
    schedule: &Schedule,
) -> Result<(MpnParams, TrainReport)> {
    schedule.validate()?;
    params.validate()?;
    let mut report = TrainReport::default();
    if samples.is_empty() || schedule.iterations == 0 {
        return Ok((params, report));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let batch = if schedule.batch_size == 0 {
        samples.len()
    } else {
        schedule.batch_size.min(samples.len())
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = samples.len();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();

    for it in 0..schedule.iterations {
        let picked: Vec<usize> = if batch == samples.len() {
            order.clone()
        } else {
            (0..batch)
                .map(|_| {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    order[cursor - 1]
                })
                .collect()
        };
        let use_second = it >= schedule.second_pass_after;
        let diverged = |e: Error| match e {
            Error::NonFinite { msg, stage, index } => Error::NonFinite {
                stage: "training iteration",
                index: it,
                msg: format!("{msg} ({stage} {index})"),
            },
            other => other,
        };
        let results = par::try_map(&picked, |&i| {
            sample_loss(&params, &samples[i], use_second, schedule.gamma)
        })
        .map_err(diverged)?;
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.add_scaled(g, 1.0);
        }
        let inv = 1.0 / picked.len() as f64;
        loss *= inv;
        grad.scale(inv);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                stage: "training iteration",
                index: it,
                msg: format!("loss is {loss}"),
            });
        }
        report.losses.push(loss);
        grad.add_scaled(&params, schedule.weight_decay);
        step(&mut params, &grad, &mut m, &mut v, schedule, it + 1);
        if params.tensors().iter().any(|t| t.2.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                stage: "training iteration",
                index: it,
                msg: "parameters diverged".into(),
            });
        }
    }
    Ok((params, report))
}

fn step(
    params: &mut MpnParams,
    grad: &MpnParams,
    m: &mut MpnParams,
    v: &mut MpnParams,
    schedule: &Schedule,
    t: usize,
) {
    let lr = schedule.learning_rate;
    match schedule.optimizer {
        Optimizer::Sgd => params.add_scaled(grad, -lr),
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            let g: Vec<&[f64]> = grad.tensors().into_iter().map(|t| t.2).collect();
            let ms = m.tensors_mut();
            let vs = v.tensors_mut();
            for (((p, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs) {
                for k in 0..p.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    p[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}
