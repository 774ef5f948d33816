//! Zero-shot rollout evaluation and the reporting statistics: interquartile
//! means, stratified-bootstrap confidence intervals, learning-curve emission
//! and the didactic-experiment judge.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::losses::LossError;
use crate::maze::{MazeEnv, MazeSpec, MazeTask};
use crate::nets::FbModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("iqm of an empty value list")]
    Empty,
    #[error("stratified bootstrap undefined: stratum `{0}` has fewer than two seeds")]
    SingleSeed(String),
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("didactic judge needs matching seed sets for both models")]
    MismatchedSeeds,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Derive a decorrelated stream seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// n undiscounted episode returns for a goal task under the deterministic
/// policy π_z. Zero-shot: the model is read-only.
pub fn rollout_maze(
    model: &FbModel,
    spec: &MazeSpec,
    task: MazeTask,
    z: &Tensor,
    n: usize,
    seed: u64,
) -> EvalResult<Vec<f64>> {
    let z_row = Tensor::new(z.data().to_vec(), vec![1, z.numel()]);
    let mut returns = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64 + 1));
        let mut env = MazeEnv::new(spec.clone());
        let mut state = env.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let s = Tensor::new(state.to_vec(), vec![1, 4]);
            let a = model.act(&s, &z_row, None).map_err(LossError::from)?;
            let (next, done) = env.step([a.data()[0], a.data()[1]]);
            ret += spec.reward(&next, task);
            state = next;
            if done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(returns)
}

/// Interquartile mean: mean of the middle 50%, with fractional trimming by
/// linear weighting of the boundary order statistics when n is not a
/// multiple of four.
pub fn iqm(values: &[f64]) -> EvalResult<f64> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN scores"));
    let n = sorted.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        acc += w * x;
    }
    Ok(acc / (n / 2.0))
}

/// Percentile interval of the cross-task IQM under seed resampling within
/// each task stratum. `per_task_scores[t]` holds task t's per-seed scores.
/// The returned interval is widened, if needed, to contain the plug-in IQM.
pub fn stratified_bootstrap_ci<R: Rng>(
    per_task_scores: &[Vec<f64>],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> EvalResult<(f64, f64)> {
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(EvalError::BadLevel(level));
    }
    for (t, scores) in per_task_scores.iter().enumerate() {
        if scores.len() < 2 {
            return Err(EvalError::SingleSeed(format!("task {t}")));
        }
    }
    let pooled: Vec<f64> = per_task_scores.iter().flatten().copied().collect();
    let plug_in = iqm(&pooled)?;

    let mut stats = Vec::with_capacity(resamples);
    let mut resampled = Vec::with_capacity(pooled.len());
    for _ in 0..resamples {
        resampled.clear();
        for scores in per_task_scores {
            for _ in 0..scores.len() {
                resampled.push(scores[rng.random_range(0..scores.len())]);
            }
        }
        stats.push(iqm(&resampled)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("no NaN stats"));
    let quantile = |q: f64| -> f64 {
        let pos = q * (stats.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        stats[lo] * (1.0 - frac) + stats[hi] * frac
    };
    let tail = (1.0 - level) / 2.0;
    let (mut lo, mut hi) = (quantile(tail), quantile(1.0 - tail));
    lo = lo.min(plug_in);
    hi = hi.max(plug_in);
    Ok((lo, hi))
}

/// Plain percentile bootstrap over one set of returns (per-curve-row CI).
pub fn bootstrap_iqm_ci<R: Rng>(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> EvalResult<(f64, f64)> {
    stratified_bootstrap_ci(&[values.to_vec()], resamples, level, rng)
}

// ── reports ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RolloutRecord {
    pub task: String,
    pub seed: u64,
    pub checkpoint: usize,
    pub returns: Vec<f64>,
}

/// Per-task rollout returns plus IQM and bootstrap-CI aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub records: Vec<RolloutRecord>,
    /// IQM of per-seed scores, per task.
    pub per_task_iqm: BTreeMap<String, f64>,
    /// IQM across all (task, seed) scores.
    pub all_task_iqm: f64,
    /// 95% stratified-bootstrap interval; present with at least two seeds
    /// per task.
    pub ci: Option<(f64, f64)>,
}

impl EvalReport {
    /// Aggregate records: each (task, seed) contributes one score, the IQM
    /// of its rollout returns.
    pub fn from_records(records: Vec<RolloutRecord>, resamples: usize) -> EvalResult<EvalReport> {
        let mut by_task: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &records {
            by_task
                .entry(r.task.clone())
                .or_default()
                .push(iqm(&r.returns)?);
        }
        let mut per_task_iqm = BTreeMap::new();
        for (task, scores) in &by_task {
            per_task_iqm.insert(task.clone(), iqm(scores)?);
        }
        let pooled: Vec<f64> = by_task.values().flatten().copied().collect();
        let all_task_iqm = iqm(&pooled)?;
        let strata: Vec<Vec<f64>> = by_task.values().cloned().collect();
        let ci = if strata.iter().all(|s| s.len() >= 2) {
            let mut rng = ChaCha8Rng::seed_from_u64(0x1B00_757A);
            Some(stratified_bootstrap_ci(&strata, resamples, 0.95, &mut rng)?)
        } else {
            None
        };
        Ok(EvalReport {
            records,
            per_task_iqm,
            all_task_iqm,
            ci,
        })
    }

    pub fn save_json(&self, path: &Path) -> EvalResult<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> EvalResult<EvalReport> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub checkpoint: usize,
    pub task: String,
    pub seed: u64,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Plot-ready CSV: checkpoint, task, seed, iqm, ci_lo, ci_hi.
pub fn write_learning_curves(path: &Path, points: &[CurvePoint]) -> EvalResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "checkpoint,task,seed,iqm,ci_lo,ci_hi")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.checkpoint, p.task, p.seed, p.iqm, p.ci_lo, p.ci_hi
        )?;
    }
    Ok(())
}

// ── didactic judge ──────────────────────────────────────────────────────

/// Best-checkpoint rollout returns of one training run, per didactic goal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DidacticRun {
    pub seed: u64,
    pub best_checkpoint: usize,
    pub goal_returns: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedJudge {
    pub seed: u64,
    pub vcfb_reaches_both: bool,
    pub fb_fails_a_goal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub seeds: Vec<SeedJudge>,
    pub reach_threshold: f64,
}

/// PASS iff, per seed majority, VC-FB's best checkpoint reaches both
/// didactic goals while FB misses at least one. A goal counts as reached
/// when any rollout return exceeds the threshold.
pub fn didactic_judge(
    fb: &[DidacticRun],
    vcfb: &[DidacticRun],
    reach_threshold: f64,
) -> EvalResult<JudgeOutcome> {
    let mut fb_seeds: Vec<u64> = fb.iter().map(|r| r.seed).collect();
    let mut vc_seeds: Vec<u64> = vcfb.iter().map(|r| r.seed).collect();
    fb_seeds.sort_unstable();
    vc_seeds.sort_unstable();
    if fb_seeds != vc_seeds || fb.is_empty() {
        return Err(EvalError::MismatchedSeeds);
    }

    let reaches = |run: &DidacticRun, goal: &str| {
        run.goal_returns
            .get(goal)
            .is_some_and(|rets| rets.iter().any(|r| *r > reach_threshold))
    };

    let mut seeds = Vec::new();
    for seed in fb_seeds {
        let f = fb.iter().find(|r| r.seed == seed).expect("seed present");
        let v = vcfb.iter().find(|r| r.seed == seed).expect("seed present");
        let goals: Vec<&String> = v.goal_returns.keys().collect();
        let vcfb_reaches_both = goals.iter().all(|g| reaches(v, g));
        let fb_fails_a_goal = goals.iter().any(|g| !reaches(f, g));
        seeds.push(SeedJudge {
            seed,
            vcfb_reaches_both,
            fb_fails_a_goal,
        });
    }
    let passes = seeds
        .iter()
        .filter(|s| s.vcfb_reaches_both && s.fb_fails_a_goal)
        .count();
    let verdict = if passes * 2 > seeds.len() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(JudgeOutcome {
        verdict,
        seeds,
        reach_threshold,
    })
}
