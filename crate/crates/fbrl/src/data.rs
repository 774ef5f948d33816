//! Offline transition storage, the FBDS file format, dataset generation from
//! the maze behaviour policies, uniform subsampling, reward relabelling and
//! the didactic action filter.
//!
//! FBDS layout (little-endian): magic "FBDS", version byte 0x01, u32
//! state_dim, u32 action_dim, u64 count, then `count` records of
//! (state f64×s, action f64×a, next_state f64×s, reward f64, terminal u8),
//! then u32 metadata length and a JSON metadata blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::maze::{random_action, Behaviour, ExplorePolicy, MazeEnv, MazeSpec, MazeTask};

const MAGIC: &[u8; 4] = b"FBDS";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic at offset 0: expected FBDS")]
    BadMagic,
    #[error("unsupported version {0} at offset 4")]
    BadVersion(u8),
    #[error("dimension mismatch at offset {offset}: {what}")]
    DimMismatch { offset: u64, what: String },
    #[error("truncated file at offset {offset}: {what}")]
    Truncated { offset: u64, what: String },
    #[error("metadata is not valid JSON at offset {offset}: {source}")]
    BadMetadata {
        offset: u64,
        source: serde_json::Error,
    },
    #[error("dataset must contain at least one transition")]
    Empty,
    #[error("cannot subsample {n} from {count} rows")]
    SubsampleTooLarge { n: usize, count: usize },
    #[error("dataset exhausted by filter")]
    FilterEmptied,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Metadata {
    pub generator: String,
    pub seed: u64,
    pub env_hash: String,
    /// Applied transforms, oldest first.
    #[serde(default)]
    pub transforms: Vec<String>,
}

/// One (s, a, s', r, terminal) record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// Contiguous column storage of transitions; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
    rewards: Vec<f64>,
    terminals: Vec<u8>,
    pub meta: Metadata,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize, meta: Metadata) -> Self {
        Dataset {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert_eq!(t.state.len(), self.state_dim);
        debug_assert_eq!(t.action.len(), self.action_dim);
        debug_assert!(t.reward >= 0.0, "rewards are non-negative");
        self.states.extend_from_slice(&t.state);
        self.actions.extend_from_slice(&t.action);
        self.next_states.extend_from_slice(&t.next_state);
        self.rewards.push(t.reward);
        self.terminals.push(u8::from(t.terminal));
    }

    pub fn get(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            next_state: self.next_state(i).to_vec(),
            reward: self.rewards[i],
            terminal: self.terminals[i] != 0,
        }
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.next_state_offset()..][..self.state_dim]
    }

    fn next_state_offset(&self) -> usize {
        self.state_dim
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn terminal(&self, i: usize) -> bool {
        self.terminals[i] != 0
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Gather rows into batch tensors: states, actions, next states.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor, Tensor) {
        let b = idx.len();
        let mut s = Vec::with_capacity(b * self.state_dim);
        let mut a = Vec::with_capacity(b * self.action_dim);
        let mut ns = Vec::with_capacity(b * self.state_dim);
        for &i in idx {
            s.extend_from_slice(self.state(i));
            a.extend_from_slice(self.action(i));
            ns.extend_from_slice(self.next_state(i));
        }
        (
            Tensor::new(s, vec![b, self.state_dim]),
            Tensor::new(a, vec![b, self.action_dim]),
            Tensor::new(ns, vec![b, self.state_dim]),
        )
    }

    pub fn gather_rewards(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.rewards[i]).collect()
    }

    pub fn gather_terminals(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| f64::from(self.terminals[i])).collect()
    }

    /// All states (or next states) as a [n, state_dim] tensor.
    pub fn states_tensor(&self) -> Tensor {
        Tensor::new(self.states.clone(), vec![self.len(), self.state_dim])
    }

    pub fn next_states_tensor(&self) -> Tensor {
        Tensor::new(self.next_states.clone(), vec![self.len(), self.state_dim])
    }

    /// n rows drawn uniformly without replacement, order randomized.
    pub fn subsample<R: Rng>(&self, n: usize, rng: &mut R) -> DataResult<Dataset> {
        if n > self.len() {
            return Err(DataError::SubsampleTooLarge {
                n,
                count: self.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        let mut meta = self.meta.clone();
        meta.transforms.push(format!("subsample:{n}"));
        let mut out = Dataset::new(self.state_dim, self.action_dim, meta);
        for i in idx {
            out.push(self.get(i));
        }
        Ok(out)
    }

    /// Reward column recomputed for `task`; (s, a, s') untouched.
    pub fn relabel(&self, spec: &MazeSpec, task: MazeTask) -> Dataset {
        let mut meta = self.meta.clone();
        meta.transforms.push(format!("relabel:{}", task.name()));
        let mut out = Dataset::new(self.state_dim, self.action_dim, meta);
        for i in 0..self.len() {
            let mut t = self.get(i);
            let next = crate::maze::MazeState::from_slice(&t.next_state);
            t.reward = spec.reward(&next, task);
            out.push(t);
        }
        out
    }

    /// Retain exactly the transitions with a_x ≥ 0 (the didactic filter).
    pub fn filter_left_actions(&self) -> DataResult<Dataset> {
        let mut meta = self.meta.clone();
        meta.transforms.push("filter_left".to_string());
        let mut out = Dataset::new(self.state_dim, self.action_dim, meta);
        for i in 0..self.len() {
            if self.action(i)[0] >= 0.0 {
                out.push(self.get(i));
            }
        }
        if out.is_empty() {
            return Err(DataError::FilterEmptied);
        }
        Ok(out)
    }

    // ── FBDS persistence ────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> DataResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.state_dim as u32).to_le_bytes())?;
        w.write_all(&(self.action_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            for v in self.state(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in self.action(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in self.next_state(i) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&self.rewards[i].to_le_bytes())?;
            w.write_all(&[self.terminals[i]])?;
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> DataResult<Dataset> {
        let mut r = CountingReader {
            inner: BufReader::new(File::open(path)?),
            offset: 0,
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver, "version")?;
        if ver[0] != VERSION {
            return Err(DataError::BadVersion(ver[0]));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf, "state_dim")?;
        let state_dim = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf, "action_dim")?;
        let action_dim = u32::from_le_bytes(u32buf) as usize;
        if state_dim == 0 || action_dim == 0 {
            return Err(DataError::DimMismatch {
                offset: 5,
                what: format!("state_dim {state_dim}, action_dim {action_dim}"),
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf, "count")?;
        let count = u64::from_le_bytes(u64buf) as usize;

        let mut ds = Dataset::new(state_dim, action_dim, Metadata::default());
        let mut byte = [0u8; 1];
        for i in 0..count {
            let what = format!("record {i}");
            let t = Transition {
                state: r.read_f64s(state_dim, &what)?,
                action: r.read_f64s(action_dim, &what)?,
                next_state: r.read_f64s(state_dim, &what)?,
                reward: r.read_f64s(1, &what)?[0],
                terminal: {
                    r.read_exact(&mut byte, &what)?;
                    byte[0] != 0
                },
            };
            ds.push(t);
        }
        r.read_exact(&mut u32buf, "metadata length")?;
        let meta_len = u32::from_le_bytes(u32buf) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        let meta_off = r.offset;
        r.read_exact(&mut meta_buf, "metadata")?;
        ds.meta = serde_json::from_slice(&meta_buf).map_err(|source| DataError::BadMetadata {
            offset: meta_off,
            source,
        })?;
        Ok(ds)
    }
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> DataResult<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| DataError::Truncated {
            offset: at,
            what: what.to_string(),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_f64s(&mut self, n: usize, what: &str) -> DataResult<Vec<f64>> {
        let mut buf = [0u8; 8];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            self.read_exact(&mut buf, what)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn env_hash(spec: &MazeSpec) -> String {
    let json = serde_json::to_vec(spec).expect("spec serializes");
    format!("{:016x}", fnv1a64(&json))
}

/// Roll `episodes` maze episodes under the given behaviour policy. Rewards
/// are zero (task-agnostic collection; relabel later), terminal marks the
/// horizon. Reproducible from the seed alone.
pub fn generate(
    spec: &MazeSpec,
    behaviour: Behaviour,
    episodes: usize,
    seed: u64,
) -> DataResult<Dataset> {
    if episodes == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meta = Metadata {
        generator: behaviour.name().to_string(),
        seed,
        env_hash: env_hash(spec),
        transforms: Vec::new(),
    };
    let mut ds = Dataset::new(crate::maze::STATE_DIM, crate::maze::ACTION_DIM, meta);
    let mut env = MazeEnv::new(spec.clone());
    let mut explore = ExplorePolicy::default();
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        explore.reset();
        loop {
            let a = match behaviour {
                Behaviour::Random => random_action(&mut rng),
                Behaviour::Explore => explore.act(spec, &state, &mut rng),
            };
            let (next, done) = env.step(a);
            ds.push(Transition {
                state: state.to_vec(),
                action: a.to_vec(),
                next_state: next.to_vec(),
                reward: 0.0,
                terminal: done,
            });
            state = next;
            if done {
                break;
            }
        }
    }
    Ok(ds)
}
