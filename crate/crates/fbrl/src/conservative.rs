//! Conservative penalties for FB representations and the CQL baseline.
//!
//! The intractable max over a continuous action space is estimated with a
//! log-sum-exp over a finite action sample set: actions drawn uniformly at
//! random, from the current policy at the current and following timestep,
//! plus the dataset action replicated to weight the current timestep twice.
//! VC penalises implied values F(s,a,z)ᵀz; MC penalises implied measures
//! F(s,a,z)ᵀB(s₊) toward the batch's independent future states. The penalty
//! weight α follows Lagrangian dual gradient-descent against a budget τ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdResult, Tape, Tensor, Var};
use crate::losses::{FbBatch, LossError, LossResult};
use crate::nets::{FbModel, ForwardVars, MlpVars};

pub const ALPHA_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    None,
    Vc,
    Mc,
}

/// Conservative-variant selection and sampling budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PenaltyConfig {
    pub variant: Variant,
    /// Conservative budget τ.
    pub tau: f64,
    /// Uniform OOD action samples per batch row.
    pub n_uniform: usize,
    /// Policy samples per batch row, at s_t and again at s_{t+1}.
    pub n_policy: usize,
    /// Replicate the dataset action n_policy times in the sample set.
    pub include_dataset_action: bool,
    /// Learning rate of α's own Adam optimizer.
    pub alpha_lr: f64,
    /// Pin α instead of tuning it (used by the CQL baseline and reductions).
    pub fixed_alpha: Option<f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            variant: Variant::None,
            tau: 50.0,
            n_uniform: 3,
            n_policy: 3,
            include_dataset_action: true,
            alpha_lr: 1e-4,
            fixed_alpha: None,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> LossResult<()> {
        if self.tau < 0.0 {
            return Err(LossError::BadPenaltyConfig(format!(
                "tau must be nonnegative, got {}",
                self.tau
            )));
        }
        if self.variant != Variant::None && (self.n_uniform == 0 || self.n_policy == 0) {
            return Err(LossError::BadPenaltyConfig(
                "sample counts must be at least 1 when a conservative variant is active".into(),
            ));
        }
        Ok(())
    }

    /// Total action samples per batch row.
    pub fn total_samples(&self) -> usize {
        self.n_uniform
            + 2 * self.n_policy
            + if self.include_dataset_action {
                self.n_policy
            } else {
                0
            }
    }
}

/// Actions sampled per batch row, grouped by source. Blocks are
/// sample-major: block j covers rows j·b .. (j+1)·b.
#[derive(Debug, Clone)]
pub struct ActionSampleSet {
    pub uniform: Tensor,
    pub policy_cur: Tensor,
    pub policy_next: Tensor,
}

fn repeat_rows(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = t.dims2();
    let mut data = Vec::with_capacity(times * r * c);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::new(data, vec![times * r, c])
}

/// Sample the OOD action set: uniform actions on [-1,1]^m plus policy
/// actions at the current and next states. Policy samples are drawn without
/// gradients.
pub fn build_action_sample_set<R: Rng>(
    model: &FbModel,
    batch: &FbBatch,
    cfg: &PenaltyConfig,
    rng: &mut R,
) -> LossResult<ActionSampleSet> {
    let b = batch.len();
    let m = model.action_dim;
    let uniform = Tensor::new(
        (0..cfg.n_uniform * b * m)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect(),
        vec![cfg.n_uniform * b, m],
    );

    let draw_policy = |states: &Tensor, rng: &mut R| -> LossResult<Tensor> {
        let rep_s = repeat_rows(states, cfg.n_policy);
        let rep_z = repeat_rows(&batch.z, cfg.n_policy);
        let noise = Tensor::new(
            (0..cfg.n_policy * b * m)
                .map(|_| rng.sample(rand_distr::StandardNormal))
                .collect(),
            vec![cfg.n_policy * b, m],
        );
        Ok(model.act(&rep_s, &rep_z, Some(&noise))?)
    };
    let policy_cur = draw_policy(&batch.states, rng)?;
    let policy_next = draw_policy(&batch.next_states, rng)?;
    Ok(ActionSampleSet {
        uniform,
        policy_cur,
        policy_next,
    })
}

/// Concatenated (state, action) rows for the sample set, sample-major. The
/// next-timestep policy actions are evaluated at the current states.
fn concat_sample_inputs(
    states: &Tensor,
    dataset_actions: &Tensor,
    samples: &ActionSampleSet,
    cfg: &PenaltyConfig,
) -> (Tensor, Tensor, usize) {
    let k = cfg.total_samples();
    let s_cat = repeat_rows(states, k);
    let (r, m) = dataset_actions.dims2();
    let mut a_data =
        Vec::with_capacity(samples.uniform.numel() + 2 * samples.policy_cur.numel() + r * m);
    a_data.extend_from_slice(samples.uniform.data());
    a_data.extend_from_slice(samples.policy_cur.data());
    a_data.extend_from_slice(samples.policy_next.data());
    if cfg.include_dataset_action {
        for _ in 0..cfg.n_policy {
            a_data.extend_from_slice(dataset_actions.data());
        }
    }
    let a_cat = Tensor::new(a_data, vec![k * r, m]);
    (s_cat, a_cat, k)
}

/// On-tape penalty plus diagnostics.
pub struct PenaltyOut {
    pub penalty: Var,
    pub value: f64,
    /// Mean min-head Q over the uniformly sampled actions.
    pub q_ood_mean: f64,
}

/// Value-conservative penalty:
/// Σ_h mean_i lse_k F_h(s_i, a_k, z_i)ᵀz_i − mean_i (Q1+Q2)(s_i, a_i, z_i).
///
/// `q1_data`/`q2_data` are the dataset-action Q values from the FB loss pass
/// so the dataset term shares those gradients.
pub fn vc_penalty(
    tape: &mut Tape,
    model: &FbModel,
    fwd_vars: &ForwardVars,
    batch: &FbBatch,
    cfg: &PenaltyConfig,
    samples: &ActionSampleSet,
    q1_data: Var,
    q2_data: Var,
) -> LossResult<PenaltyOut> {
    let b = batch.len();
    let (s_cat, a_cat, k) = concat_sample_inputs(&batch.states, &batch.actions, samples, cfg);
    let z_cat = repeat_rows(&batch.z, k);

    let sv = tape.leaf(s_cat);
    let av = tape.leaf(a_cat);
    let zv = tape.leaf(z_cat);
    let (f1c, f2c) = model.forward.forward(tape, fwd_vars, sv, av, zv)?;

    let mut lse_means = Vec::with_capacity(2);
    let mut q_flat = Vec::with_capacity(2);
    for f in [f1c, f2c] {
        let q = tape.row_dot(f, zv)?;
        q_flat.push(q);
        let grid = tape.reshape(q, vec![k, b])?;
        let lse = tape.log_sum_exp(grid, 0)?;
        lse_means.push(tape.reduce_mean(lse));
    }
    let lse_sum = tape.add(lse_means[0], lse_means[1])?;
    let q1m = tape.reduce_mean(q1_data);
    let q2m = tape.reduce_mean(q2_data);
    let qsum = tape.add(q1m, q2m)?;
    let penalty = tape.add_scaled(lse_sum, qsum, -1.0)?;

    let n_ood = cfg.n_uniform * b;
    let q_ood_mean = if n_ood > 0 {
        let (qa, qb) = (tape.data(q_flat[0]), tape.data(q_flat[1]));
        (0..n_ood).map(|i| qa[i].min(qb[i])).sum::<f64>() / n_ood as f64
    } else {
        0.0
    };

    Ok(PenaltyOut {
        value: tape.value(penalty).item(),
        penalty,
        q_ood_mean,
    })
}

/// Measure-conservative penalty: the VC structure with values replaced by
/// measures toward the batch's independent future states,
/// Σ_h mean_{i,j} lse_k F_h(s_i, a_k, z_i)ᵀB(s₊_j) − mean_{i,j} M_h(s_i, a_i, z_i, s₊_j).
pub fn mc_penalty(
    tape: &mut Tape,
    model: &FbModel,
    fwd_vars: &ForwardVars,
    bwd_vars: &MlpVars,
    batch: &FbBatch,
    cfg: &PenaltyConfig,
    samples: &ActionSampleSet,
    f1_data: Var,
    f2_data: Var,
) -> LossResult<PenaltyOut> {
    let b = batch.len();
    let (s_cat, a_cat, k) = concat_sample_inputs(&batch.states, &batch.actions, samples, cfg);
    let z_cat = repeat_rows(&batch.z, k);

    let sv = tape.leaf(s_cat);
    let av = tape.leaf(a_cat);
    let zv = tape.leaf(z_cat);
    let (f1c, f2c) = model.forward.forward(tape, fwd_vars, sv, av, zv)?;
    let spv = tape.leaf(batch.s_plus.clone());
    let b_plus = model.backward.forward(tape, bwd_vars, spv)?;

    let mut lse_means = Vec::with_capacity(2);
    let mut m_cats = Vec::with_capacity(2);
    for f in [f1c, f2c] {
        let m = tape.cross_dot(f, b_plus)?;
        m_cats.push(m);
        let grid = tape.reshape(m, vec![k, b * b])?;
        let lse = tape.log_sum_exp(grid, 0)?;
        lse_means.push(tape.reduce_mean(lse));
    }
    let lse_sum = tape.add(lse_means[0], lse_means[1])?;
    let m1 = tape.cross_dot(f1_data, b_plus)?;
    let m2 = tape.cross_dot(f2_data, b_plus)?;
    let m1m = tape.reduce_mean(m1);
    let m2m = tape.reduce_mean(m2);
    let msum = tape.add(m1m, m2m)?;
    let penalty = tape.add_scaled(lse_sum, msum, -1.0)?;

    // diagnostic: mean min-head measure over the uniform block
    let n_ood = cfg.n_uniform * b;
    let q_ood_mean = if n_ood > 0 {
        let (ma, mb) = (tape.data(m_cats[0]), tape.data(m_cats[1]));
        let cols = b;
        (0..n_ood * cols)
            .map(|i| ma[i].min(mb[i]))
            .sum::<f64>()
            / (n_ood * cols) as f64
    } else {
        0.0
    };

    Ok(PenaltyOut {
        value: tape.value(penalty).item(),
        penalty,
        q_ood_mean,
    })
}

/// CQL penalty for one critic head: lse-over-samples of Q(s, a_k) minus the
/// mean dataset-action Q. The critic is supplied as an on-tape evaluator
/// returning per-row Q values.
pub fn cql_penalty<Q>(
    tape: &mut Tape,
    mut q_head: Q,
    states: &Tensor,
    dataset_actions: &Tensor,
    cfg: &PenaltyConfig,
    samples: &ActionSampleSet,
) -> LossResult<Var>
where
    Q: FnMut(&mut Tape, Var, Var) -> LossResult<Var>,
{
    let b = states.dims2().0;
    let (s_cat, a_cat, k) = concat_sample_inputs(states, dataset_actions, samples, cfg);
    let sv = tape.leaf(s_cat);
    let av = tape.leaf(a_cat);
    let q_cat = q_head(tape, sv, av)?;
    let grid = tape.reshape(q_cat, vec![k, b])?;
    let lse = tape.log_sum_exp(grid, 0)?;
    let lse_mean = tape.reduce_mean(lse);

    let sd = tape.leaf(states.clone());
    let ad = tape.leaf(dataset_actions.clone());
    let q_data = q_head(tape, sd, ad)?;
    let q_mean = tape.reduce_mean(q_data);
    Ok(tape.add_scaled(lse_mean, q_mean, -1.0)?)
}

/// Dual variable α with its own Adam optimizer; α = clamp(exp(log α), 0, 1e6).
#[derive(Debug, Clone)]
pub struct AlphaState {
    pub log_alpha: Tensor,
    pub adam: Adam,
}

impl AlphaState {
    pub fn new(alpha_lr: f64) -> Self {
        AlphaState {
            log_alpha: Tensor::scalar(0.0),
            adam: Adam::new(alpha_lr),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.data()[0].exp().clamp(0.0, ALPHA_MAX)
    }
}

/// One dual step on log α against the loss -0.5·α·(penalty − τ); returns the
/// updated α, detached, for use as this step's penalty weight.
pub fn tune_alpha(state: &mut AlphaState, penalty_value: f64, tau: f64) -> AdResult<f64> {
    let mut tape = Tape::new();
    let la = tape.leaf(state.log_alpha.clone());
    let e = tape.exp(la);
    let alpha = tape.clamp(e, 0.0, ALPHA_MAX);
    let loss = tape.scale(alpha, -0.5 * (penalty_value - tau));
    tape.backward(loss)?;
    let grad = tape.grad(la);
    state
        .adam
        .step(&mut [("log_alpha", &mut state.log_alpha)], &[grad])?;
    Ok(state.alpha())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{fb_loss, sample_z};
    use crate::nets::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(d: usize, seed: u64) -> FbModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FbModel::new(
            3,
            2,
            ModelConfig {
                d,
                hidden_dim: 8,
                preproc_dim: 6,
                sigma: 0.2,
                trunc: 0.3,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn random_batch(model: &FbModel, b: usize, seed: u64) -> FbBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s_dim, a_dim, d) = (model.state_dim, model.action_dim, model.d());
        let mk = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::new(
                (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
                vec![rows, cols],
            )
        };
        let states = mk(b, s_dim, &mut rng);
        let actions = mk(b, a_dim, &mut rng);
        let next_states = mk(b, s_dim, &mut rng);
        let mut sp = Vec::new();
        for i in 0..b {
            sp.extend_from_slice(next_states.row((i + 1) % b));
        }
        let s_plus = Tensor::new(sp, vec![b, s_dim]);
        let z = sample_z(b, d, &states, &model.backward, 0.5, &mut rng).unwrap();
        FbBatch {
            states,
            actions,
            next_states,
            s_plus,
            z,
        }
    }

    fn cfg_n(n: usize) -> PenaltyConfig {
        PenaltyConfig {
            variant: Variant::Vc,
            n_uniform: n,
            n_policy: n,
            ..PenaltyConfig::default()
        }
    }

    #[test]
    fn sample_set_counts_match_the_reference_composition() {
        let model = tiny_model(4, 1);
        let batch = random_batch(&model, 5, 2);
        let cfg = cfg_n(3);
        assert_eq!(cfg.total_samples(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = build_action_sample_set(&model, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(samples.uniform.shape(), &[15, 2]);
        assert_eq!(samples.policy_cur.shape(), &[15, 2]);
        assert_eq!(samples.policy_next.shape(), &[15, 2]);
        let (s_cat, a_cat, k) =
            concat_sample_inputs(&batch.states, &batch.actions, &samples, &cfg);
        assert_eq!(k, 12);
        assert_eq!(s_cat.shape(), &[60, 3]);
        assert_eq!(a_cat.shape(), &[60, 2]);
    }

    #[test]
    fn sampled_actions_stay_in_the_unit_box() {
        let model = tiny_model(4, 4);
        let batch = random_batch(&model, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples =
            build_action_sample_set(&model, &batch, &cfg_n(3), &mut rng).unwrap();
        for t in [&samples.uniform, &samples.policy_cur, &samples.policy_next] {
            assert!(t.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn sample_set_is_deterministic_given_the_seed() {
        let model = tiny_model(4, 7);
        let batch = random_batch(&model, 4, 8);
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            build_action_sample_set(&model, &batch, &cfg_n(3), &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a.uniform.data(), b.uniform.data());
        assert_eq!(a.policy_cur.data(), b.policy_cur.data());
        assert_eq!(a.policy_next.data(), b.policy_next.data());
    }

    /// With F constant in the action, every sampled Q equals the dataset Q,
    /// so the penalty collapses to ln(K) per head.
    #[test]
    fn constant_q_penalty_is_log_k_per_head() {
        let mut model = tiny_model(4, 10);
        // zero the (s,a) preprocessor so F ignores both s and a; heads then
        // depend only on the (s,z) embedding, which is fixed per row
        for l in model.forward.pre_sa.layers.iter_mut() {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        let batch = random_batch(&model, 6, 11);
        let cfg = cfg_n(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let samples = build_action_sample_set(&model, &batch, &cfg, &mut rng).unwrap();

        let mut tape = Tape::new();
        let fv = model.forward.bind(&mut tape);
        let bv = model.backward.bind(&mut tape);
        let next_actions = Tensor::zeros(vec![6, 2]);
        let out = fb_loss(
            &mut tape,
            &model,
            &fv,
            &bv,
            &batch,
            &next_actions,
            0.98,
        )
        .unwrap();
        let pen = vc_penalty(
            &mut tape,
            &model,
            &fv,
            &batch,
            &cfg,
            &samples,
            out.q1_data,
            out.q2_data,
        )
        .unwrap();
        let expected = 2.0 * (cfg.total_samples() as f64).ln();
        assert!(
            (pen.value - expected).abs() < 1e-9,
            "penalty {} vs {expected}",
            pen.value
        );
    }

    #[test]
    fn penalties_are_nonnegative_with_dataset_action_included() {
        for seed in 0..50 {
            let model = tiny_model(4, 100 + seed);
            let batch = random_batch(&model, 4, 200 + seed);
            let cfg = PenaltyConfig {
                variant: Variant::Vc,
                n_uniform: 2,
                n_policy: 2,
                ..PenaltyConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let samples = build_action_sample_set(&model, &batch, &cfg, &mut rng).unwrap();

            let mut tape = Tape::new();
            let fv = model.forward.bind(&mut tape);
            let bv = model.backward.bind(&mut tape);
            let na = Tensor::zeros(vec![4, 2]);
            let out = fb_loss(&mut tape, &model, &fv, &bv, &batch, &na, 0.98).unwrap();
            let vc = vc_penalty(
                &mut tape, &model, &fv, &batch, &cfg, &samples, out.q1_data, out.q2_data,
            )
            .unwrap();
            let mc = mc_penalty(
                &mut tape, &model, &fv, &bv, &batch, &cfg, &samples, out.f1, out.f2,
            )
            .unwrap();
            assert!(vc.value >= -1e-9, "seed {seed}: vc {}", vc.value);
            assert!(mc.value >= -1e-9, "seed {seed}: mc {}", mc.value);
        }
    }

    /// With B constant and equal to every row's z, measures equal values and
    /// MC reduces to VC.
    #[test]
    fn mc_reduces_to_vc_when_backward_is_the_task_vector() {
        let mut model = tiny_model(4, 13);
        for l in model.backward.mlp.layers.iter_mut() {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        let last = model.backward.mlp.layers.len() - 1;
        {
            let b = model.backward.mlp.layers[last].b.data_mut();
            b[0] = 0.4;
            b[1] = -0.3;
            b[2] = 0.8;
            b[3] = 0.1;
        }
        let const_b = model
            .backward
            .embed(&Tensor::zeros(vec![1, 3]))
            .unwrap()
            .row(0)
            .to_vec();

        let mut batch = random_batch(&model, 5, 14);
        batch.z = Tensor::new(const_b.repeat(5), vec![5, 4]);

        let cfg = cfg_n(2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let samples = build_action_sample_set(&model, &batch, &cfg, &mut rng).unwrap();

        let mut tape = Tape::new();
        let fv = model.forward.bind(&mut tape);
        let bv = model.backward.bind(&mut tape);
        let na = Tensor::zeros(vec![5, 2]);
        let out = fb_loss(&mut tape, &model, &fv, &bv, &batch, &na, 0.98).unwrap();
        let vc = vc_penalty(
            &mut tape, &model, &fv, &batch, &cfg, &samples, out.q1_data, out.q2_data,
        )
        .unwrap();
        let mc = mc_penalty(
            &mut tape, &model, &fv, &bv, &batch, &cfg, &samples, out.f1, out.f2,
        )
        .unwrap();
        let scale = vc.value.abs().max(1.0);
        assert!(
            (vc.value - mc.value).abs() / scale < 1e-9,
            "vc {} vs mc {}",
            vc.value,
            mc.value
        );
    }

    #[test]
    fn alpha_fixed_point_at_budget() {
        let mut st = AlphaState::new(1e-2);
        let a0 = st.alpha();
        for _ in 0..10 {
            tune_alpha(&mut st, 50.0, 50.0).unwrap();
        }
        assert_eq!(st.alpha(), a0);
    }

    #[test]
    fn alpha_rises_when_penalty_exceeds_budget() {
        let mut st = AlphaState::new(1e-2);
        let a0 = st.alpha();
        let a1 = tune_alpha(&mut st, 60.0, 50.0).unwrap();
        assert!(a1 > a0, "{a1} vs {a0}");
    }

    #[test]
    fn alpha_decays_toward_zero_under_the_budget() {
        let mut st = AlphaState::new(1e-2);
        let start = st.alpha();
        let mut prev = start;
        let mut last = prev;
        for step in 0..1000 {
            last = tune_alpha(&mut st, 0.0, 50.0).unwrap();
            assert!(last <= prev + 1e-12, "step {step}: {last} > {prev}");
            prev = last;
        }
        assert!(
            last < 0.01 * start,
            "alpha should approach 0, got {last} from {start}"
        );
    }

    #[test]
    fn alpha_stays_clamped() {
        let mut st = AlphaState::new(0.5);
        for _ in 0..200 {
            let a = tune_alpha(&mut st, 1e9, 0.0).unwrap();
            assert!((0.0..=ALPHA_MAX).contains(&a));
        }
        let mut st2 = AlphaState::new(0.5);
        for _ in 0..200 {
            let a = tune_alpha(&mut st2, -1e9, 0.0).unwrap();
            assert!((0.0..=ALPHA_MAX).contains(&a));
        }
    }

    #[test]
    fn cql_penalty_of_constant_critic_is_log_k() {
        let model = tiny_model(4, 16);
        let batch = random_batch(&model, 5, 17);
        let cfg = cfg_n(3);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let samples = build_action_sample_set(&model, &batch, &cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let constant_q = |tape: &mut Tape, s: Var, _a: Var| -> LossResult<Var> {
            let rows = tape.shape(s)[0];
            Ok(tape.leaf(Tensor::new(vec![3.25; rows], vec![rows, 1])))
        };
        let pen = cql_penalty(
            &mut tape,
            constant_q,
            &batch.states,
            &batch.actions,
            &cfg,
            &samples,
        )
        .unwrap();
        let expected = (cfg.total_samples() as f64).ln();
        assert!((tape.value(pen).item() - expected).abs() < 1e-9);
    }
}
