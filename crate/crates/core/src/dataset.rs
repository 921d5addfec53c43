//! Trajectory datasets: collection recipes, the `MDP1` binary format, and
//! window sampling.
//!
//! Collection simulates in f64 but rounds every action and state to f32
//! before it is stored or fed back into the dynamics, so re-simulating the
//! stored actions from the stored first state reproduces the stored states.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvId, TaskId};
use crate::error::{invalid, FormatError, Result};
use crate::rng::rng_from;

pub const MAGIC: [u8; 4] = *b"MDP1";
pub const VERSION: u32 = 1;
pub const DEFAULT_EP_LEN: usize = 200;

/// Fraction of a mixed dataset drawn from each behaviour source.
const MIXED_EXPERT_SHARE: f64 = 0.25;
const MIXED_RANDOM_SHARE: f64 = 0.50;
const MIXED_EPSILON: f64 = 0.5;
const EXPERT_NOISE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    NearExpert,
    Mixed,
}

/// Behaviour used to generate episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicySpec {
    Expert { task: TaskId, noise_std: f64 },
    UniformRandom,
    /// With probability `epsilon` a uniform random action, otherwise the
    /// noise-free expert action.
    EpsilonMix { task: TaskId, epsilon: f64 },
}

impl PolicySpec {
    fn act<R: Rng + ?Sized>(&self, env: EnvId, state: &[f64], rng: &mut R) -> Vec<f64> {
        match *self {
            PolicySpec::Expert { task, noise_std } => task.expert_action(state, noise_std, rng),
            PolicySpec::UniformRandom => uniform_action(env, rng),
            PolicySpec::EpsilonMix { task, epsilon } => {
                if rng.gen_bool(epsilon) {
                    uniform_action(env, rng)
                } else {
                    task.expert_action(state, 0.0, rng)
                }
            }
        }
    }

    fn task(&self) -> Option<TaskId> {
        match *self {
            PolicySpec::Expert { task, .. } | PolicySpec::EpsilonMix { task, .. } => Some(task),
            PolicySpec::UniformRandom => None,
        }
    }
}

pub fn uniform_action<R: Rng + ?Sized>(env: EnvId, rng: &mut R) -> Vec<f64> {
    (0..env.action_dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// One fixed-length episode, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    /// `rewards[t * n_tasks + k]` is task `k`'s reward for the transition
    /// out of step `t`, evaluated on the resulting state.
    pub rewards: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvId,
    pub ep_len: usize,
    pub tasks: Vec<TaskId>,
    pub provenance: Provenance,
    pub seed: u64,
    pub episodes: Vec<Trajectory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    env: EnvId,
    tasks: Vec<TaskId>,
    provenance: Provenance,
    seed: u64,
}

/// A contiguous slice of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub episode: usize,
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn state(&self, t: usize, state_dim: usize) -> &[f32] {
        &self.states[t * state_dim..(t + 1) * state_dim]
    }

    pub fn action(&self, t: usize, action_dim: usize) -> &[f32] {
        &self.actions[t * action_dim..(t + 1) * action_dim]
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn rollout_episode(env: EnvId, policy: &PolicySpec, ep_len: usize, seed: &[u64]) -> Trajectory {
    let tasks = env.tasks();
    let mut rng = rng_from(seed);
    let (ds, da) = (env.state_dim(), env.action_dim());
    let mut traj = Trajectory {
        states: Vec::with_capacity(ep_len * ds),
        actions: Vec::with_capacity(ep_len * da),
        rewards: Vec::with_capacity(ep_len * tasks.len()),
    };
    let mut s = round_f32(&env.reset(&mut rng));
    for _ in 0..ep_len {
        let a = round_f32(&policy.act(env, &s, &mut rng));
        let next = round_f32(&env.step_unchecked(&s, &a));
        traj.states.extend(s.iter().map(|&v| v as f32));
        traj.actions.extend(a.iter().map(|&v| v as f32));
        traj.rewards
            .extend(tasks.iter().map(|t| t.reward(&next, &a) as f32));
        s = next;
    }
    traj
}

/// Rolls out `n_episodes` episodes of `policy`. Episode `e` draws from a
/// stream seeded by `(seed, e)`.
pub fn collect(
    env: EnvId,
    policy: PolicySpec,
    n_episodes: usize,
    ep_len: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_episodes == 0 || ep_len == 0 {
        return Err(invalid("collect needs at least one episode of length ≥ 1"));
    }
    if let Some(task) = policy.task() {
        if task.env() != env {
            return Err(invalid(format!(
                "task {} does not belong to {}",
                task.name(),
                env.name()
            )));
        }
    }
    let episodes = (0..n_episodes)
        .map(|e| rollout_episode(env, &policy, ep_len, &[seed, e as u64]))
        .collect();
    let provenance = match policy {
        PolicySpec::Expert { .. } => Provenance::NearExpert,
        _ => Provenance::Mixed,
    };
    Ok(Dataset {
        env,
        ep_len,
        tasks: env.tasks().to_vec(),
        provenance,
        seed,
        episodes,
    })
}

/// Near-expert recipe: the scripted expert with N(0, 0.2²) action noise.
pub fn collect_near_expert(
    task: TaskId,
    n_episodes: usize,
    ep_len: usize,
    seed: u64,
) -> Result<Dataset> {
    collect(
        task.env(),
        PolicySpec::Expert {
            task,
            noise_std: EXPERT_NOISE,
        },
        n_episodes,
        ep_len,
        seed,
    )
}

/// Near-expert data for every task of a domain, concatenated.
pub fn collect_near_expert_domain(
    env: EnvId,
    per_task: usize,
    ep_len: usize,
    seed: u64,
) -> Result<Dataset> {
    let parts = env
        .tasks()
        .iter()
        .enumerate()
        .map(|(k, &task)| collect_near_expert(task, per_task, ep_len, crate::rng::derive_seed(&[seed, k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mut d = Dataset::concat(parts)?;
    d.seed = seed;
    Ok(d)
}

/// Mixed recipe: a quarter noisy-expert episodes, half uniform random, a
/// quarter ε-greedy mixtures; task-specific shares rotate over the domain's
/// tasks.
pub fn collect_mixed(env: EnvId, n_episodes: usize, ep_len: usize, seed: u64) -> Result<Dataset> {
    if n_episodes == 0 || ep_len == 0 {
        return Err(invalid("collect needs at least one episode of length ≥ 1"));
    }
    let tasks = env.tasks();
    let n_expert = (n_episodes as f64 * MIXED_EXPERT_SHARE).round() as usize;
    let n_random = (n_episodes as f64 * MIXED_RANDOM_SHARE).round() as usize;
    let episodes = (0..n_episodes)
        .map(|e| {
            let policy = if e < n_expert {
                PolicySpec::Expert {
                    task: tasks[e % tasks.len()],
                    noise_std: EXPERT_NOISE,
                }
            } else if e < n_expert + n_random {
                PolicySpec::UniformRandom
            } else {
                PolicySpec::EpsilonMix {
                    task: tasks[e % tasks.len()],
                    epsilon: MIXED_EPSILON,
                }
            };
            rollout_episode(env, &policy, ep_len, &[seed, e as u64])
        })
        .collect();
    Ok(Dataset {
        env,
        ep_len,
        tasks: tasks.to_vec(),
        provenance: Provenance::Mixed,
        seed,
        episodes,
    })
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.env.action_dim()
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Joins datasets of one domain and episode length.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let mut first = iter.next().ok_or_else(|| invalid("nothing to concatenate"))?;
        for d in iter {
            if d.env != first.env || d.ep_len != first.ep_len || d.tasks != first.tasks {
                return Err(invalid("concatenated datasets must share env, tasks and episode length"));
            }
            if d.provenance != first.provenance {
                first.provenance = Provenance::Mixed;
            }
            first.episodes.extend(d.episodes);
        }
        Ok(first)
    }

    pub fn window(&self, episode: usize, start: usize, len: usize) -> Result<Window> {
        if len == 0 || start + len > self.ep_len {
            return Err(invalid(format!(
                "window [{start}, {}) outside episode of length {}",
                start + len,
                self.ep_len
            )));
        }
        let traj = self
            .episodes
            .get(episode)
            .ok_or_else(|| invalid(format!("episode {episode} out of range")))?;
        let (ds, da) = (self.state_dim(), self.action_dim());
        Ok(Window {
            states: traj.states[start * ds..(start + len) * ds].to_vec(),
            actions: traj.actions[start * da..(start + len) * da].to_vec(),
            episode,
            start,
            len,
        })
    }

    /// Uniform episode, then uniform start offset in `[0, ep_len - len]`.
    pub fn sample_window<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Window> {
        let all: Vec<usize> = (0..self.n_episodes()).collect();
        self.sample_window_from(&all, len, rng)
    }

    /// As [`Dataset::sample_window`], restricted to the listed episodes.
    pub fn sample_window_from<R: Rng + ?Sized>(
        &self,
        episodes: &[usize],
        len: usize,
        rng: &mut R,
    ) -> Result<Window> {
        if len == 0 || len > self.ep_len {
            return Err(invalid(format!(
                "window length {len} must be in [1, {}]",
                self.ep_len
            )));
        }
        if episodes.is_empty() {
            return Err(invalid("no episodes to sample from"));
        }
        let episode = episodes[rng.gen_range(0..episodes.len())];
        let start = rng.gen_range(0..=self.ep_len - len);
        self.window(episode, start, len)
    }

    /// Largest deviation between stored states and the states obtained by
    /// re-simulating the stored actions from each episode's first state.
    pub fn replay_error(&self) -> f64 {
        let (ds, da) = (self.state_dim(), self.action_dim());
        let mut worst = 0.0f64;
        for traj in &self.episodes {
            let mut s: Vec<f64> = traj.states[..ds].iter().map(|&v| v as f64).collect();
            for t in 1..self.ep_len {
                let a: Vec<f64> = traj.actions[(t - 1) * da..t * da]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                s = round_f32(&self.env.step_unchecked(&s, &a));
                for (x, &y) in s.iter().zip(&traj.states[t * ds..(t + 1) * ds]) {
                    worst = worst.max((x - y as f64).abs());
                }
            }
        }
        worst
    }

    /// Mean undiscounted episode return for `task`.
    pub fn mean_return(&self, task: TaskId) -> Result<f64> {
        let k = self.task_column(task)?;
        let n = self.tasks.len();
        let total: f64 = self
            .episodes
            .iter()
            .map(|tr| (0..self.ep_len).map(|t| tr.rewards[t * n + k] as f64).sum::<f64>())
            .sum();
        Ok(total / self.n_episodes() as f64)
    }

    pub fn task_column(&self, task: TaskId) -> Result<usize> {
        self.tasks
            .iter()
            .position(|&t| t == task)
            .ok_or_else(|| invalid(format!("task {} absent from dataset rewards", task.name())))
    }

    /// Serialises into the `MDP1` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Metadata {
            env: self.env,
            tasks: self.tasks.clone(),
            provenance: self.provenance,
            seed: self.seed,
        })
        .expect("metadata serialises");
        let per_ep = self.ep_len * (self.state_dim() + self.action_dim() + self.tasks.len());
        let mut out = Vec::with_capacity(32 + meta.len() + 4 * per_ep * self.n_episodes());
        out.extend_from_slice(&MAGIC);
        for v in [
            VERSION,
            self.state_dim() as u32,
            self.action_dim() as u32,
            self.tasks.len() as u32,
            self.n_episodes() as u32,
            self.ep_len as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for traj in &self.episodes {
            for block in [&traj.states, &traj.actions, &traj.rewards] {
                for v in block.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, FormatError> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array4()?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let state_dim = r.u32()? as usize;
        let action_dim = r.u32()? as usize;
        let n_tasks = r.u32()? as usize;
        let n_episodes = r.u32()? as usize;
        let ep_len = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FormatError::Metadata(e.to_string()))?;
        if meta.env.state_dim() != state_dim || meta.env.action_dim() != action_dim {
            return Err(FormatError::Inconsistent(format!(
                "{} has dims ({}, {}), header says ({state_dim}, {action_dim})",
                meta.env.name(),
                meta.env.state_dim(),
                meta.env.action_dim()
            )));
        }
        if meta.tasks.len() != n_tasks {
            return Err(FormatError::Inconsistent(format!(
                "{} task names for {n_tasks} reward columns",
                meta.tasks.len()
            )));
        }
        let mut episodes = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            episodes.push(Trajectory {
                states: r.f32s(ep_len * state_dim)?,
                actions: r.f32s(ep_len * action_dim)?,
                rewards: r.f32s(ep_len * n_tasks)?,
            });
        }
        if r.remaining() != 0 {
            return Err(FormatError::Inconsistent(format!(
                "{} trailing bytes after the last episode",
                r.remaining()
            )));
        }
        Ok(Dataset {
            env: meta.env,
            ep_len,
            tasks: meta.tasks,
            provenance: meta.provenance,
            seed: meta.seed,
            episodes,
        })
    }
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&d.to_bytes())?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    Ok(Dataset::from_bytes(&bytes)?)
}

/// Little-endian cursor over a byte slice with truncation reporting.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - avail,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array4(&mut self) -> Result<[u8; 4], FormatError> {
        Ok(self.take(4)?.try_into().expect("four bytes"))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array4()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| {
            FormatError::Inconsistent("payload size overflows".into())
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
