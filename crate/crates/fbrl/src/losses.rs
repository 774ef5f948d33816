//! The FB temporal-difference loss, Q synthesis, task-vector inference, the
//! policy-extraction objective, and the task-sampling distribution.
//!
//! The TD loss follows the measure Bellman residual: the expectation over
//! independent future states is estimated with the batch's next states as
//! candidates, the squared term over all off-diagonal pairings and the -2
//! term on the diagonal. With double forward heads, the TD target picks, per
//! row, the head whose implied Q is smaller; both heads regress and target
//! outputs carry no gradient.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::nets::{ActorVars, BackwardNet, FbModel, ForwardVars, MlpVars, NetError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("discount must lie in (0, 1), got {0}")]
    BadGamma(f64),
    #[error("latent dimension must be positive")]
    BadLatentDim,
    #[error("mix ratio must lie in [0, 1], got {0}")]
    BadMixRatio(f64),
    #[error("invalid penalty config: {0}")]
    BadPenaltyConfig(String),
    #[error("z inference needs at least one labelled pair")]
    EmptyLabelled,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type LossResult<T> = Result<T, LossError>;

/// One training mini-batch. `s_plus` holds independent future states,
/// realized as a permutation of the batch's next states.
#[derive(Debug, Clone)]
pub struct FbBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub next_states: Tensor,
    pub s_plus: Tensor,
    pub z: Tensor,
}

impl FbBatch {
    pub fn len(&self) -> usize {
        self.states.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draw `count` task vectors: ⌈mix·count⌉ uniform on the sphere of radius
/// √d, the rest backward embeddings of states sampled from the batch.
pub fn sample_z<R: Rng>(
    count: usize,
    d: usize,
    batch_states: &Tensor,
    backward: &BackwardNet,
    mix_ratio: f64,
    rng: &mut R,
) -> LossResult<Tensor> {
    if d == 0 {
        return Err(LossError::BadLatentDim);
    }
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(LossError::BadMixRatio(mix_ratio));
    }
    let n_uniform = ((mix_ratio * count as f64).ceil() as usize).min(count);
    let radius = (d as f64).sqrt();
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..n_uniform {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                out.extend(v.iter().map(|x| radius * x / norm));
                break;
            }
        }
    }
    let n_backward = count - n_uniform;
    if n_backward > 0 {
        let (rows, s_dim) = batch_states.dims2();
        let mut picked = Vec::with_capacity(n_backward * s_dim);
        for _ in 0..n_backward {
            let i = rng.random_range(0..rows);
            picked.extend_from_slice(batch_states.row(i));
        }
        let embedded = backward.embed(&Tensor::new(picked, vec![n_backward, s_dim]))?;
        out.extend_from_slice(embedded.data());
    }
    Ok(Tensor::new(out, vec![count, d]))
}

/// On-tape outputs of the FB loss that the conservative penalties reuse.
pub struct FbLossOut {
    /// Scalar loss (both heads' residuals summed).
    pub loss: Var,
    /// Dataset-action forward embeddings, on-graph.
    pub f1: Var,
    pub f2: Var,
    /// B(s_{t+1}), on-graph.
    pub b_next: Var,
    /// Per-row implied Q at dataset actions, on-graph.
    pub q1_data: Var,
    pub q2_data: Var,
    /// Diagnostics (plain values).
    pub loss_value: f64,
    pub q_data_mean: f64,
}

/// TD loss for the measure factorization, Algorithm-1 style: the next-state
/// actions are sampled from the current policy (with smoothing noise) by the
/// caller and enter as data.
pub fn fb_loss(
    tape: &mut Tape,
    model: &FbModel,
    fwd_vars: &ForwardVars,
    bwd_vars: &MlpVars,
    batch: &FbBatch,
    next_actions: &Tensor,
    gamma: f64,
) -> LossResult<FbLossOut> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(LossError::BadGamma(gamma));
    }
    let b = batch.len();

    // TD target on a scratch tape: no gradients flow to the lagging nets.
    let target_m = {
        let mut t = Tape::new();
        let tf_vars = model.target_forward.bind(&mut t);
        let tb_vars = model.target_backward.bind(&mut t);
        let ns = t.leaf(batch.next_states.clone());
        let na = t.leaf(next_actions.clone());
        let zv = t.leaf(batch.z.clone());
        let (tf1, tf2) = model.target_forward.forward(&mut t, &tf_vars, ns, na, zv)?;
        let tb = model.target_backward.forward(&mut t, &tb_vars, ns)?;
        let q1 = t.row_dot(tf1, zv)?;
        let q2 = t.row_dot(tf2, zv)?;
        // pick, per row, the head with the smaller implied Q
        let d = model.d();
        let mut sel = Vec::with_capacity(b * d);
        for i in 0..b {
            let src = if t.data(q1)[i] <= t.data(q2)[i] {
                t.value(tf1).row(i)
            } else {
                t.value(tf2).row(i)
            };
            sel.extend_from_slice(src);
        }
        let sel = t.leaf(Tensor::new(sel, vec![b, d]));
        let m = t.cross_dot(sel, tb)?;
        t.value(m).clone()
    };

    let s = tape.leaf(batch.states.clone());
    let a = tape.leaf(batch.actions.clone());
    let ns = tape.leaf(batch.next_states.clone());
    let z = tape.leaf(batch.z.clone());
    let (f1, f2) = model.forward.forward(tape, fwd_vars, s, a, z)?;
    let b_next = model.backward.forward(tape, bwd_vars, ns)?;

    let target = tape.leaf(target_m);
    let mut off_diag_mask = vec![1.0; b * b];
    for i in 0..b {
        off_diag_mask[i * b + i] = 0.0;
    }
    let mask = tape.leaf(Tensor::new(off_diag_mask, vec![b, b]));
    let denom = (b * (b.max(2) - 1)) as f64;

    let mut head_losses = Vec::with_capacity(2);
    for f in [f1, f2] {
        let m = tape.cross_dot(f, b_next)?;
        let resid = tape.add_scaled(m, target, -gamma)?;
        let sq = tape.square(resid);
        let masked = tape.mul(sq, mask)?;
        let sum = tape.reduce_sum(masked);
        let off = tape.scale(sum, 1.0 / denom);
        let diag = tape.row_dot(f, b_next)?;
        let diag_mean = tape.reduce_mean(diag);
        head_losses.push(tape.add_scaled(off, diag_mean, -2.0)?);
    }
    let loss = tape.add(head_losses[0], head_losses[1])?;

    let q1_data = tape.row_dot(f1, z)?;
    let q2_data = tape.row_dot(f2, z)?;
    let q_data_mean = tape
        .data(q1_data)
        .iter()
        .zip(tape.data(q2_data))
        .map(|(x, y)| x.min(*y))
        .sum::<f64>()
        / b as f64;

    Ok(FbLossOut {
        loss_value: tape.value(loss).item(),
        loss,
        f1,
        f2,
        b_next,
        q1_data,
        q2_data,
        q_data_mean,
    })
}

/// Policy-extraction objective: -E[min-head F(s, π_z(s), z)ᵀ z], with actions
/// re-sampled from the current actor under smoothing noise. Gradients reach
/// the actor through the action input; the F parameters stay frozen because
/// only the actor's Adam consumes this tape's gradients.
pub fn actor_loss(
    tape: &mut Tape,
    model: &FbModel,
    fwd_vars: &ForwardVars,
    actor_vars: &ActorVars,
    batch: &FbBatch,
    noise: &Tensor,
) -> LossResult<Var> {
    let s = tape.leaf(batch.states.clone());
    let z = tape.leaf(batch.z.clone());
    let actions = model
        .actor
        .forward_sampled(tape, actor_vars, s, z, noise)?;
    let (f1, f2) = model.forward.forward(tape, fwd_vars, s, actions, z)?;
    let q1 = tape.row_dot(f1, z)?;
    let q2 = tape.row_dot(f2, z)?;
    let qmin = tape.min(q1, q2)?;
    let mean = tape.reduce_mean(qmin);
    Ok(tape.scale(mean, -1.0))
}

/// Q proxy from explicit embeddings: min over heads of F_hᵀz.
pub fn q_from_embeddings(f1: &[f64], f2: &[f64], z: &[f64]) -> f64 {
    let dot = |f: &[f64]| f.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    dot(f1).min(dot(f2))
}

/// Q proxy for one (s, a, z) triple, no gradients.
pub fn q_value(model: &FbModel, s: &[f64], a: &[f64], z: &[f64]) -> LossResult<f64> {
    let st = Tensor::new(s.to_vec(), vec![1, s.len()]);
    let at = Tensor::new(a.to_vec(), vec![1, a.len()]);
    let zt = Tensor::new(z.to_vec(), vec![1, z.len()]);
    let (f1, f2) = model.forward_embed(&st, &at, &zt)?;
    Ok(q_from_embeddings(f1.data(), f2.data(), z))
}

/// z = mean of r·B(s) over labelled pairs; plain averaging, not re-normalized
/// unless `project` asks for re-projection onto the √d sphere.
pub fn infer_z(
    backward: &BackwardNet,
    states: &Tensor,
    rewards: &[f64],
    project: bool,
) -> LossResult<Tensor> {
    let (n, _) = states.dims2();
    if n == 0 || rewards.len() != n {
        return Err(LossError::EmptyLabelled);
    }
    let emb = backward.embed(states)?;
    let d = emb.dims2().1;
    let mut z = vec![0.0; d];
    for i in 0..n {
        let row = emb.row(i);
        for j in 0..d {
            z[j] += rewards[i] * row[j];
        }
    }
    for v in z.iter_mut() {
        *v /= n as f64;
    }
    if project {
        let norm: f64 = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let radius = (d as f64).sqrt();
            for v in z.iter_mut() {
                *v *= radius / norm;
            }
        }
    }
    Ok(Tensor::new(z, vec![d]))
}

/// Task vector for a goal-reaching task: z = B(s_g), norm √d by construction.
pub fn goal_z(backward: &BackwardNet, goal_state: &[f64]) -> LossResult<Tensor> {
    let s = Tensor::new(goal_state.to_vec(), vec![1, goal_state.len()]);
    let emb = backward.embed(&s)?;
    let d = emb.dims2().1;
    Ok(Tensor::new(emb.data().to_vec(), vec![d]))
}
