//! The FB networks: shared-preprocessor double forward heads, the
//! sphere-projected backward net, the task-conditioned actor, and their
//! lagging target copies.
//!
//! Every MLP uses layer normalisation and a Tanh activation in its first
//! layer and ReLU in the remaining hidden layers. Preprocessors embed
//! (state, action) and (state, task) pairs into a shared embedding space;
//! the two forward heads map the concatenated embeddings to the latent
//! dimension `d`. The backward net projects onto the sphere of radius √d so
//! goal embeddings and sampled task vectors live on the same sphere.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type NetResult<T> = Result<T, NetError>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Network sizes. Defaults are desk-scale; the full-scale values from the
/// reference setup (1024 hidden, 512 preprocessor embedding, d = 50/100)
/// remain reachable through configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Latent dimension d.
    pub d: usize,
    /// Hidden width used by every MLP.
    pub hidden_dim: usize,
    /// Output width of each preprocessor.
    pub preproc_dim: usize,
    /// Std. deviation for policy smoothing.
    pub sigma: f64,
    /// Truncation level for policy smoothing.
    pub trunc: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            hidden_dim: 256,
            preproc_dim: 128,
            sigma: 0.2,
            trunc: 0.3,
        }
    }
}

/// Shape of one feedforward MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Layer-norm + Tanh on the first layer (ReLU otherwise).
    pub norm_first: bool,
}

impl MlpSpec {
    pub fn validate(&self) -> NetResult<()> {
        if self.hidden.is_empty() {
            return Err(NetError::BadSpec("hidden dims must be non-empty".into()));
        }
        if self.input == 0
            || self.output == 0
            || self.hidden.iter().any(|&h| h == 0)
        {
            return Err(NetError::BadSpec(format!(
                "all dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            w: Tensor::new(w, vec![fan_in, fan_out]),
            b: Tensor::new(b, vec![fan_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Tape handles for one bound MLP, in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn new<R: Rng>(spec: MlpSpec, rng: &mut R) -> NetResult<Self> {
        spec.validate()?;
        let mut dims = vec![spec.input];
        dims.extend_from_slice(&spec.hidden);
        dims.push(spec.output);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Mlp { spec, layers })
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        MlpVars { layers }
    }

    /// Forward pass; the final layer is linear with no activation.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> NetResult<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let lin = tape.matmul(h, *w)?;
            h = tape.add_bias(lin, *b)?;
            if i == 0 && self.spec.norm_first {
                let ln = tape.layer_norm(h, LAYER_NORM_EPS);
                h = tape.tanh(ln);
            } else if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &l.w));
            out.push((format!("{prefix}.{i}.b"), &l.b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &mut l.w));
            out.push((format!("{prefix}.{i}.b"), &mut l.b));
        }
    }
}

fn polyak_mlp(target: &mut Mlp, online: &Mlp, nu: f64) {
    // Delta form keeps θ⁻ = θ an exact fixed point.
    let blend = |td: &mut f64, od: &f64| {
        if nu == 1.0 {
            *td = *od;
        } else {
            *td += nu * (*od - *td);
        }
    };
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (td, od) in t.w.data_mut().iter_mut().zip(o.w.data()) {
            blend(td, od);
        }
        for (td, od) in t.b.data_mut().iter_mut().zip(o.b.data()) {
            blend(td, od);
        }
    }
}

// ── forward model ───────────────────────────────────────────────────────

/// F(s, a, z): preprocessors for (s, a) and (s, z) feeding two output heads
/// that share the preprocessors but have independent head parameters.
#[derive(Debug, Clone)]
pub struct ForwardNet {
    pub pre_sa: Mlp,
    pub pre_sz: Mlp,
    pub head1: Mlp,
    pub head2: Mlp,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub pre_sa: MlpVars,
    pub pre_sz: MlpVars,
    pub head1: MlpVars,
    pub head2: MlpVars,
}

impl ForwardNet {
    fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> NetResult<Self> {
        let pre = |input: usize, rng: &mut R| {
            Mlp::new(
                MlpSpec {
                    input,
                    hidden: vec![cfg.hidden_dim, cfg.hidden_dim],
                    output: cfg.preproc_dim,
                    norm_first: true,
                },
                rng,
            )
        };
        let head = |rng: &mut R| {
            Mlp::new(
                MlpSpec {
                    input: 2 * cfg.preproc_dim,
                    hidden: vec![cfg.hidden_dim, cfg.hidden_dim],
                    output: cfg.d,
                    norm_first: true,
                },
                rng,
            )
        };
        Ok(ForwardNet {
            pre_sa: pre(state_dim + action_dim, rng)?,
            pre_sz: pre(state_dim + cfg.d, rng)?,
            head1: head(rng)?,
            head2: head(rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ForwardVars {
        ForwardVars {
            pre_sa: self.pre_sa.bind(tape),
            pre_sz: self.pre_sz.bind(tape),
            head1: self.head1.bind(tape),
            head2: self.head2.bind(tape),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ForwardVars,
        s: Var,
        a: Var,
        z: Var,
    ) -> NetResult<(Var, Var)> {
        let sa = tape.concat_cols(s, a)?;
        let sz = tape.concat_cols(s, z)?;
        let e1 = self.pre_sa.forward(tape, &vars.pre_sa, sa)?;
        let e2 = self.pre_sz.forward(tape, &vars.pre_sz, sz)?;
        let e = tape.concat_cols(e1, e2)?;
        let f1 = self.head1.forward(tape, &vars.head1, e)?;
        let f2 = self.head2.forward(tape, &vars.head2, e)?;
        Ok((f1, f2))
    }
}

// ── backward model ──────────────────────────────────────────────────────

/// B(s): maps a state to the sphere of radius √d.
#[derive(Debug, Clone)]
pub struct BackwardNet {
    pub mlp: Mlp,
    pub radius: f64,
}

impl BackwardNet {
    fn new<R: Rng>(state_dim: usize, cfg: &ModelConfig, rng: &mut R) -> NetResult<Self> {
        Ok(BackwardNet {
            mlp: Mlp::new(
                MlpSpec {
                    input: state_dim,
                    hidden: vec![cfg.hidden_dim; 3],
                    output: cfg.d,
                    norm_first: true,
                },
                rng,
            )?,
            radius: (cfg.d as f64).sqrt(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        self.mlp.bind(tape)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, s: Var) -> NetResult<Var> {
        let raw = self.mlp.forward(tape, vars, s)?;
        Ok(tape.normalize_radius(raw, self.radius)?)
    }

    /// Batch embedding without gradients.
    pub fn embed(&self, s: &Tensor) -> NetResult<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let sv = tape.leaf(s.clone());
        let b = self.forward(&mut tape, &vars, sv)?;
        Ok(tape.value(b).clone())
    }
}

// ── actor ───────────────────────────────────────────────────────────────

/// π(s, z): preprocessors over (s) and (s, z), Tanh-squashed head, with
/// truncated additive Gaussian smoothing applied in action space.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub pre_s: Mlp,
    pub pre_sz: Mlp,
    pub head: Mlp,
    pub sigma: f64,
    pub trunc: f64,
}

#[derive(Debug, Clone)]
pub struct ActorVars {
    pub pre_s: MlpVars,
    pub pre_sz: MlpVars,
    pub head: MlpVars,
}

impl ActorNet {
    fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> NetResult<Self> {
        let pre = |input: usize, rng: &mut R| {
            Mlp::new(
                MlpSpec {
                    input,
                    hidden: vec![cfg.hidden_dim, cfg.hidden_dim],
                    output: cfg.preproc_dim,
                    norm_first: true,
                },
                rng,
            )
        };
        Ok(ActorNet {
            pre_s: pre(state_dim, rng)?,
            pre_sz: pre(state_dim + cfg.d, rng)?,
            head: Mlp::new(
                MlpSpec {
                    input: 2 * cfg.preproc_dim,
                    hidden: vec![cfg.hidden_dim, cfg.hidden_dim],
                    output: action_dim,
                    norm_first: true,
                },
                rng,
            )?,
            sigma: cfg.sigma,
            trunc: cfg.trunc,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ActorVars {
        ActorVars {
            pre_s: self.pre_s.bind(tape),
            pre_sz: self.pre_sz.bind(tape),
            head: self.head.bind(tape),
        }
    }

    /// Deterministic Tanh-squashed action.
    pub fn forward_mean(
        &self,
        tape: &mut Tape,
        vars: &ActorVars,
        s: Var,
        z: Var,
    ) -> NetResult<Var> {
        let sz = tape.concat_cols(s, z)?;
        let e1 = self.pre_s.forward(tape, &vars.pre_s, s)?;
        let e2 = self.pre_sz.forward(tape, &vars.pre_sz, sz)?;
        let e = tape.concat_cols(e1, e2)?;
        let h = self.head.forward(tape, &vars.head, e)?;
        Ok(tape.tanh(h))
    }

    /// Smoothed action: mean + clip(σ·n, ±trunc), re-clamped to [-1, 1].
    /// The standard-normal noise is supplied by the caller.
    pub fn forward_sampled(
        &self,
        tape: &mut Tape,
        vars: &ActorVars,
        s: Var,
        z: Var,
        noise: &Tensor,
    ) -> NetResult<Var> {
        let mean = self.forward_mean(tape, vars, s, z)?;
        let clipped: Vec<f64> = noise
            .data()
            .iter()
            .map(|n| (self.sigma * n).clamp(-self.trunc, self.trunc))
            .collect();
        let c = tape.leaf(Tensor::new(clipped, noise.shape().to_vec()));
        let a = tape.add(mean, c)?;
        Ok(tape.clamp(a, -1.0, 1.0))
    }
}

// ── the assembled model ─────────────────────────────────────────────────

/// Online FB networks plus their lagging targets.
#[derive(Debug, Clone)]
pub struct FbModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub cfg: ModelConfig,
    pub forward: ForwardNet,
    pub backward: BackwardNet,
    pub actor: ActorNet,
    pub target_forward: ForwardNet,
    pub target_backward: BackwardNet,
}

impl FbModel {
    pub fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        cfg: ModelConfig,
        rng: &mut R,
    ) -> NetResult<Self> {
        let forward = ForwardNet::new(state_dim, action_dim, &cfg, rng)?;
        let backward = BackwardNet::new(state_dim, &cfg, rng)?;
        let actor = ActorNet::new(state_dim, action_dim, &cfg, rng)?;
        let target_forward = forward.clone();
        let target_backward = backward.clone();
        Ok(FbModel {
            state_dim,
            action_dim,
            cfg,
            forward,
            backward,
            actor,
            target_forward,
            target_backward,
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    /// θ⁻ ← (1−ν)·θ⁻ + ν·θ for the forward and backward targets.
    pub fn polyak_update(&mut self, nu: f64) {
        polyak_mlp(&mut self.target_forward.pre_sa, &self.forward.pre_sa, nu);
        polyak_mlp(&mut self.target_forward.pre_sz, &self.forward.pre_sz, nu);
        polyak_mlp(&mut self.target_forward.head1, &self.forward.head1, nu);
        polyak_mlp(&mut self.target_forward.head2, &self.forward.head2, nu);
        polyak_mlp(&mut self.target_backward.mlp, &self.backward.mlp, nu);
    }

    /// Both forward heads, no gradients.
    pub fn forward_embed(&self, s: &Tensor, a: &Tensor, z: &Tensor) -> NetResult<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.forward.bind(&mut tape);
        let (sv, av, zv) = (tape.leaf(s.clone()), tape.leaf(a.clone()), tape.leaf(z.clone()));
        let (f1, f2) = self.forward.forward(&mut tape, &vars, sv, av, zv)?;
        Ok((tape.value(f1).clone(), tape.value(f2).clone()))
    }

    /// Backward embedding of norm √d, no gradients.
    pub fn backward_embed(&self, s: &Tensor) -> NetResult<Tensor> {
        self.backward.embed(s)
    }

    /// Batch of actions, no gradients. `noise` must be supplied iff sampling.
    pub fn act(&self, s: &Tensor, z: &Tensor, noise: Option<&Tensor>) -> NetResult<Tensor> {
        let mut tape = Tape::new();
        let vars = self.actor.bind(&mut tape);
        let (sv, zv) = (tape.leaf(s.clone()), tape.leaf(z.clone()));
        let a = match noise {
            Some(n) => self.actor.forward_sampled(&mut tape, &vars, sv, zv, n)?,
            None => self.actor.forward_mean(&mut tape, &vars, sv, zv)?,
        };
        Ok(tape.value(a).clone())
    }

    /// Named parameters of the F and B nets, in the order used by the joint
    /// FB optimizer and the checkpoint format.
    pub fn fb_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.forward.pre_sa.visit("fwd.pre_sa", &mut out);
        self.forward.pre_sz.visit("fwd.pre_sz", &mut out);
        self.forward.head1.visit("fwd.head1", &mut out);
        self.forward.head2.visit("fwd.head2", &mut out);
        self.backward.mlp.visit("bwd", &mut out);
        out
    }

    pub fn fb_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.forward.pre_sa.visit_mut("fwd.pre_sa", &mut out);
        self.forward.pre_sz.visit_mut("fwd.pre_sz", &mut out);
        self.forward.head1.visit_mut("fwd.head1", &mut out);
        self.forward.head2.visit_mut("fwd.head2", &mut out);
        self.backward.mlp.visit_mut("bwd", &mut out);
        out
    }

    pub fn actor_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.actor.pre_s.visit("actor.pre_s", &mut out);
        self.actor.pre_sz.visit("actor.pre_sz", &mut out);
        self.actor.head.visit("actor.head", &mut out);
        out
    }

    pub fn actor_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.actor.pre_s.visit_mut("actor.pre_s", &mut out);
        self.actor.pre_sz.visit_mut("actor.pre_sz", &mut out);
        self.actor.head.visit_mut("actor.head", &mut out);
        out
    }

    pub fn target_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.target_forward.pre_sa.visit("tgt.fwd.pre_sa", &mut out);
        self.target_forward.pre_sz.visit("tgt.fwd.pre_sz", &mut out);
        self.target_forward.head1.visit("tgt.fwd.head1", &mut out);
        self.target_forward.head2.visit("tgt.fwd.head2", &mut out);
        self.target_backward.mlp.visit("tgt.bwd", &mut out);
        out
    }

    pub fn target_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.target_forward
            .pre_sa
            .visit_mut("tgt.fwd.pre_sa", &mut out);
        self.target_forward
            .pre_sz
            .visit_mut("tgt.fwd.pre_sz", &mut out);
        self.target_forward
            .head1
            .visit_mut("tgt.fwd.head1", &mut out);
        self.target_forward
            .head2
            .visit_mut("tgt.fwd.head2", &mut out);
        self.target_backward.mlp.visit_mut("tgt.bwd", &mut out);
        out
    }

    /// Every parameter tensor (online, actor, targets) by name.
    pub fn all_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.fb_params();
        out.extend(self.actor_params());
        out.extend(self.target_params());
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        // Split borrows field by field; names must match all_params().
        let mut out = Vec::new();
        self.forward.pre_sa.visit_mut("fwd.pre_sa", &mut out);
        self.forward.pre_sz.visit_mut("fwd.pre_sz", &mut out);
        self.forward.head1.visit_mut("fwd.head1", &mut out);
        self.forward.head2.visit_mut("fwd.head2", &mut out);
        self.backward.mlp.visit_mut("bwd", &mut out);
        self.actor.pre_s.visit_mut("actor.pre_s", &mut out);
        self.actor.pre_sz.visit_mut("actor.pre_sz", &mut out);
        self.actor.head.visit_mut("actor.head", &mut out);
        self.target_forward
            .pre_sa
            .visit_mut("tgt.fwd.pre_sa", &mut out);
        self.target_forward
            .pre_sz
            .visit_mut("tgt.fwd.pre_sz", &mut out);
        self.target_forward
            .head1
            .visit_mut("tgt.fwd.head1", &mut out);
        self.target_forward
            .head2
            .visit_mut("tgt.fwd.head2", &mut out);
        self.target_backward.mlp.visit_mut("tgt.bwd", &mut out);
        out
    }
}

/// Flatten bound FB vars in the same order as [`FbModel::fb_params`].
pub fn flatten_fb_vars(fwd: &ForwardVars, bwd: &MlpVars) -> Vec<Var> {
    let mut out = Vec::new();
    for mv in [&fwd.pre_sa, &fwd.pre_sz, &fwd.head1, &fwd.head2, bwd] {
        for (w, b) in &mv.layers {
            out.push(*w);
            out.push(*b);
        }
    }
    out
}

/// Flatten bound actor vars in the same order as [`FbModel::actor_params`].
pub fn flatten_actor_vars(vars: &ActorVars) -> Vec<Var> {
    let mut out = Vec::new();
    for mv in [&vars.pre_s, &vars.pre_sz, &vars.head] {
        for (w, b) in &mv.layers {
            out.push(*w);
            out.push(*b);
        }
    }
    out
}
