//! Continuous point-mass maze: a four-room layout on [0,1]², tilt-controlled
//! dynamics with damping and wall sliding, four goal-reaching tasks, and the
//! behaviour policies used to generate offline datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MazeError {
    #[error("state ({0}, {1}) lies inside a wall or outside the maze")]
    BlockedState(f64, f64),
    #[error("unknown task name `{0}`")]
    UnknownTask(String),
}

/// Axis-aligned wall block, inclusive bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum MazeTask {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl MazeTask {
    pub const ALL: [MazeTask; 4] = [
        MazeTask::TopLeft,
        MazeTask::TopRight,
        MazeTask::BottomLeft,
        MazeTask::BottomRight,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MazeTask::TopLeft => "top_left",
            MazeTask::TopRight => "top_right",
            MazeTask::BottomLeft => "bottom_left",
            MazeTask::BottomRight => "bottom_right",
        }
    }
}

impl std::str::FromStr for MazeTask {
    type Err = MazeError;

    fn from_str(s: &str) -> Result<Self, MazeError> {
        match s {
            "top_left" | "top-left" => Ok(MazeTask::TopLeft),
            "top_right" | "top-right" => Ok(MazeTask::TopRight),
            "bottom_left" | "bottom-left" => Ok(MazeTask::BottomLeft),
            "bottom_right" | "bottom-right" => Ok(MazeTask::BottomRight),
            other => Err(MazeError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MazeState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl MazeState {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        MazeState {
            pos: [v[0], v[1]],
            vel: [v[2], v[3]],
        }
    }
}

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Maze geometry, dynamics constants, tasks and episode settings. Loadable
/// from the run config so wall layouts are editable without code changes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MazeSpec {
    pub walls: Vec<Rect>,
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub goal_radius: f64,
    pub horizon: usize,
    pub start_region: Rect,
    pub goal_top_left: [f64; 2],
    pub goal_top_right: [f64; 2],
    pub goal_bottom_left: [f64; 2],
    pub goal_bottom_right: [f64; 2],
}

impl Default for MazeSpec {
    fn default() -> Self {
        // Four rooms: a vertical and a horizontal wall band with two doors
        // each. Band thickness exceeds the maximum per-step travel so the
        // mass cannot tunnel.
        let walls = vec![
            Rect { x0: 0.46, x1: 0.54, y0: 0.00, y1: 0.18 },
            Rect { x0: 0.46, x1: 0.54, y0: 0.30, y1: 0.68 },
            Rect { x0: 0.46, x1: 0.54, y0: 0.80, y1: 1.00 },
            Rect { x0: 0.00, x1: 0.18, y0: 0.46, y1: 0.54 },
            Rect { x0: 0.30, x1: 0.68, y0: 0.46, y1: 0.54 },
            Rect { x0: 0.80, x1: 1.00, y0: 0.46, y1: 0.54 },
        ];
        MazeSpec {
            walls,
            dt: 0.05,
            damping: 0.95,
            max_speed: 1.0,
            goal_radius: 0.1,
            horizon: 200,
            start_region: Rect { x0: 0.05, x1: 0.25, y0: 0.75, y1: 0.95 },
            goal_top_left: [0.2, 0.8],
            goal_top_right: [0.75, 0.75],
            goal_bottom_left: [0.2, 0.2],
            goal_bottom_right: [0.75, 0.25],
        }
    }
}

impl MazeSpec {
    pub fn goal(&self, task: MazeTask) -> [f64; 2] {
        match task {
            MazeTask::TopLeft => self.goal_top_left,
            MazeTask::TopRight => self.goal_top_right,
            MazeTask::BottomLeft => self.goal_bottom_left,
            MazeTask::BottomRight => self.goal_bottom_right,
        }
    }

    /// Goal state used for z = B(s_g): the goal position at rest.
    pub fn goal_state(&self, task: MazeTask) -> Vec<f64> {
        let g = self.goal(task);
        vec![g[0], g[1], 0.0, 0.0]
    }

    pub fn in_free_space(&self, x: f64, y: f64) -> bool {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return false;
        }
        !self.walls.iter().any(|w| w.contains(x, y))
    }

    /// One dynamics step: damped tilt acceleration, speed clamp, and
    /// axis-separated wall blocking that slides along walls.
    pub fn step(&self, state: &MazeState, action: [f64; 2]) -> MazeState {
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let mut vx = self.damping * state.vel[0] + self.dt * ax;
        let mut vy = self.damping * state.vel[1] + self.dt * ay;
        let speed = (vx * vx + vy * vy).sqrt();
        if speed > self.max_speed {
            vx *= self.max_speed / speed;
            vy *= self.max_speed / speed;
        }
        let (x, y) = (state.pos[0], state.pos[1]);
        let mut nx = x + self.dt * vx;
        if !self.in_free_space(nx, y) {
            nx = x;
            vx = 0.0;
        }
        let mut ny = y + self.dt * vy;
        if !self.in_free_space(nx, ny) {
            ny = y;
            vy = 0.0;
        }
        MazeState {
            pos: [nx, ny],
            vel: [vx, vy],
        }
    }

    /// Sparse shaped reward: 0 outside the goal radius, linear inside, 1 at
    /// the goal.
    pub fn reward(&self, next: &MazeState, task: MazeTask) -> f64 {
        let g = self.goal(task);
        let dx = next.pos[0] - g[0];
        let dy = next.pos[1] - g[1];
        let dist = (dx * dx + dy * dy).sqrt();
        (1.0 - dist / self.goal_radius).max(0.0)
    }

    pub fn sample_start<R: Rng>(&self, rng: &mut R) -> MazeState {
        loop {
            let x = rng.random_range(self.start_region.x0..=self.start_region.x1);
            let y = rng.random_range(self.start_region.y0..=self.start_region.y1);
            if self.in_free_space(x, y) {
                return MazeState {
                    pos: [x, y],
                    vel: [0.0, 0.0],
                };
            }
        }
    }

    pub fn sample_free_point<R: Rng>(&self, rng: &mut R) -> [f64; 2] {
        loop {
            let x = rng.random_range(0.0..=1.0);
            let y = rng.random_range(0.0..=1.0);
            if self.in_free_space(x, y) {
                return [x, y];
            }
        }
    }
}

/// A maze episode: spec plus current state and step counter; done at t = T.
#[derive(Debug, Clone)]
pub struct MazeEnv {
    pub spec: MazeSpec,
    pub state: MazeState,
    pub t: usize,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> Self {
        let state = MazeState {
            pos: [
                (spec.start_region.x0 + spec.start_region.x1) / 2.0,
                (spec.start_region.y0 + spec.start_region.y1) / 2.0,
            ],
            vel: [0.0, 0.0],
        };
        MazeEnv { spec, state, t: 0 }
    }

    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> MazeState {
        self.state = self.spec.sample_start(rng);
        self.t = 0;
        self.state
    }

    pub fn reset_to(&mut self, state: MazeState) -> Result<MazeState, MazeError> {
        if !self.spec.in_free_space(state.pos[0], state.pos[1]) {
            return Err(MazeError::BlockedState(state.pos[0], state.pos[1]));
        }
        self.state = state;
        self.t = 0;
        Ok(self.state)
    }

    pub fn step(&mut self, action: [f64; 2]) -> (MazeState, bool) {
        self.state = self.spec.step(&self.state, action);
        self.t += 1;
        (self.state, self.t >= self.spec.horizon)
    }
}

// ── behaviour policies ──────────────────────────────────────────────────

/// Uniform random actions on [-1, 1]².
pub fn random_action<R: Rng>(rng: &mut R) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

/// Random-waypoint exploration: steer toward a uniformly drawn free-space
/// waypoint with a proportional controller plus Gaussian action noise,
/// re-drawing the waypoint on arrival or timeout. A desk-scale stand-in for
/// exploratory data collection with high state diversity.
#[derive(Debug, Clone)]
pub struct ExplorePolicy {
    waypoint: Option<[f64; 2]>,
    age: usize,
    pub kp: f64,
    pub kd: f64,
    pub noise: f64,
    pub timeout: usize,
    pub arrive_radius: f64,
}

impl Default for ExplorePolicy {
    fn default() -> Self {
        ExplorePolicy {
            waypoint: None,
            age: 0,
            kp: 6.0,
            kd: 2.0,
            noise: 0.3,
            timeout: 80,
            arrive_radius: 0.06,
        }
    }
}

impl ExplorePolicy {
    pub fn reset(&mut self) {
        self.waypoint = None;
        self.age = 0;
    }

    pub fn act<R: Rng>(&mut self, spec: &MazeSpec, state: &MazeState, rng: &mut R) -> [f64; 2] {
        let need_new = match self.waypoint {
            None => true,
            Some(w) => {
                let d = ((state.pos[0] - w[0]).powi(2) + (state.pos[1] - w[1]).powi(2)).sqrt();
                d < self.arrive_radius || self.age >= self.timeout
            }
        };
        if need_new {
            self.waypoint = Some(spec.sample_free_point(rng));
            self.age = 0;
        }
        self.age += 1;
        let w = self.waypoint.unwrap();
        let n1: f64 = rng.sample(rand_distr::StandardNormal);
        let n2: f64 = rng.sample(rand_distr::StandardNormal);
        [
            (self.kp * (w[0] - state.pos[0]) - self.kd * state.vel[0] + self.noise * n1)
                .clamp(-1.0, 1.0),
            (self.kp * (w[1] - state.pos[1]) - self.kd * state.vel[1] + self.noise * n2)
                .clamp(-1.0, 1.0),
        ]
    }
}

/// Which behaviour policy generates a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behaviour {
    Random,
    Explore,
}

impl Behaviour {
    pub fn name(&self) -> &'static str {
        match self {
            Behaviour::Random => "random",
            Behaviour::Explore => "explore",
        }
    }
}

impl std::str::FromStr for Behaviour {
    type Err = MazeError;

    fn from_str(s: &str) -> Result<Self, MazeError> {
        match s {
            "random" => Ok(Behaviour::Random),
            "explore" => Ok(Behaviour::Explore),
            other => Err(MazeError::UnknownTask(other.to_string())),
        }
    }
}

/// Occupancy over an n×n grid; used for coverage diagnostics.
pub struct OccupancyGrid {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl OccupancyGrid {
    pub fn new(n: usize) -> Self {
        OccupancyGrid {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn record(&mut self, x: f64, y: f64) {
        let i = ((x * self.n as f64) as usize).min(self.n - 1);
        let j = ((y * self.n as f64) as usize).min(self.n - 1);
        self.counts[j * self.n + i] += 1;
    }

    pub fn visited_cells(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }

    /// Fraction of free cells (by cell center) visited at least once.
    pub fn free_coverage(&self, spec: &MazeSpec) -> f64 {
        let mut free = 0usize;
        let mut hit = 0usize;
        for j in 0..self.n {
            for i in 0..self.n {
                let cx = (i as f64 + 0.5) / self.n as f64;
                let cy = (j as f64 + 0.5) / self.n as f64;
                if spec.in_free_space(cx, cy) {
                    free += 1;
                    if self.counts[j * self.n + i] > 0 {
                        hit += 1;
                    }
                }
            }
        }
        hit as f64 / free as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_action_at_rest_stays_put() {
        let spec = MazeSpec::default();
        let s = MazeState {
            pos: [0.2, 0.8],
            vel: [0.0, 0.0],
        };
        let n = spec.step(&s, [0.0, 0.0]);
        assert_eq!(n.pos, s.pos);
        assert_eq!(n.vel, [0.0, 0.0]);
    }

    #[test]
    fn unit_tilt_from_rest_matches_the_update_rule() {
        let spec = MazeSpec::default();
        let s = MazeState {
            pos: [0.2, 0.8],
            vel: [0.0, 0.0],
        };
        let n = spec.step(&s, [1.0, 0.0]);
        assert!((n.vel[0] - 0.05).abs() < 1e-12);
        assert!((n.pos[0] - 0.2025).abs() < 1e-12);
    }

    #[test]
    fn pushing_into_a_wall_blocks_and_zeroes_velocity() {
        let spec = MazeSpec::default();
        // just left of the vertical band, moving right
        let s = MazeState {
            pos: [0.455, 0.4],
            vel: [1.0, 0.0],
        };
        let n = spec.step(&s, [1.0, 0.0]);
        assert_eq!(n.pos[0], 0.455);
        assert_eq!(n.vel[0], 0.0);
    }

    #[test]
    fn reward_shape_matches_the_contract() {
        let spec = MazeSpec::default();
        let task = MazeTask::TopRight;
        let g = spec.goal(task);
        let at_goal = MazeState {
            pos: g,
            vel: [0.0, 0.0],
        };
        assert_eq!(spec.reward(&at_goal, task), 1.0);
        let at_edge = MazeState {
            pos: [g[0] + spec.goal_radius, g[1]],
            vel: [0.0, 0.0],
        };
        assert!(spec.reward(&at_edge, task).abs() < 1e-12);
        let halfway = MazeState {
            pos: [g[0] + spec.goal_radius / 2.0, g[1]],
            vel: [0.0, 0.0],
        };
        assert!((spec.reward(&halfway, task) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn episode_ends_exactly_at_the_horizon() {
        let spec = MazeSpec::default();
        let mut env = MazeEnv::new(spec.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.reset(&mut rng);
        for t in 1..=spec.horizon {
            let (_, done) = env.step([0.1, -0.1]);
            assert_eq!(done, t == spec.horizon);
        }
    }

    #[test]
    fn reset_to_rejects_states_inside_walls() {
        let mut env = MazeEnv::new(MazeSpec::default());
        let blocked = MazeState {
            pos: [0.5, 0.5],
            vel: [0.0, 0.0],
        };
        assert!(env.reset_to(blocked).is_err());
    }

    #[test]
    fn goals_lie_in_free_space_and_start_in_the_top_left() {
        let spec = MazeSpec::default();
        for task in MazeTask::ALL {
            let g = spec.goal(task);
            assert!(spec.in_free_space(g[0], g[1]), "{task:?}");
        }
        assert!(spec.start_region.x1 < 0.46);
        assert!(spec.start_region.y0 > 0.54);
    }

    #[test]
    fn random_actions_are_centered_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut sum = [0.0, 0.0];
        for _ in 0..n {
            let a = random_action(&mut rng);
            assert!(a[0].abs() <= 1.0 && a[1].abs() <= 1.0);
            sum[0] += a[0];
            sum[1] += a[1];
        }
        assert!((sum[0] / n as f64).abs() < 0.02);
        assert!((sum[1] / n as f64).abs() < 0.02);
    }

    #[test]
    fn fixed_seed_reproduces_trajectories_bitwise() {
        let spec = MazeSpec::default();
        let run = || {
            let mut env = MazeEnv::new(spec.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut policy = ExplorePolicy::default();
            env.reset(&mut rng);
            let mut trace = Vec::new();
            for _ in 0..300 {
                let a = policy.act(&spec, &env.state, &mut rng);
                let (s, _) = env.step(a);
                trace.push(s.pos[0].to_bits());
                trace.push(s.pos[1].to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn explore_covers_most_free_cells_and_beats_random() {
        let spec = MazeSpec::default();
        let steps = 50_000;
        let run = |explore: bool| {
            let mut env = MazeEnv::new(spec.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut policy = ExplorePolicy::default();
            let mut grid = OccupancyGrid::new(10);
            env.reset(&mut rng);
            for t in 0..steps {
                let a = if explore {
                    policy.act(&spec, &env.state, &mut rng)
                } else {
                    random_action(&mut rng)
                };
                let (s, done) = env.step(a);
                grid.record(s.pos[0], s.pos[1]);
                if done || (t + 1) % spec.horizon == 0 {
                    env.reset(&mut rng);
                    policy.reset();
                }
            }
            grid
        };
        let explore_grid = run(true);
        let random_grid = run(false);
        let cov = explore_grid.free_coverage(&spec);
        assert!(cov >= 0.9, "explore coverage {cov}");
        assert!(
            explore_grid.visited_cells() > random_grid.visited_cells(),
            "explore {} vs random {}",
            explore_grid.visited_cells(),
            random_grid.visited_cells()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn position_never_penetrates_a_wall(
            seed in 0u64..1000,
            actions in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..400)
        ) {
            let spec = MazeSpec::default();
            let mut env = MazeEnv::new(spec.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            env.reset(&mut rng);
            for (ax, ay) in actions {
                let (s, _) = env.step([ax, ay]);
                prop_assert!(spec.in_free_space(s.pos[0], s.pos[1]),
                    "blocked at ({}, {})", s.pos[0], s.pos[1]);
            }
        }
    }
}
