//! Benchmark environments: Taxi, a reward-shaped grid room and random MDPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DiceError, Result};
use crate::mdp::{StochasticPolicy, TabularMdp};

pub const TAXI_GAMMA: f64 = 0.995;
pub const GRID_GAMMA: f64 = 0.995;

/// Number of encoded Taxi states before the absorbing state is appended.
pub const TAXI_ENCODED_STATES: usize = 500;
/// Index of the zero-reward absorbing state reached after a successful dropoff.
pub const TAXI_ABSORBING: usize = 500;

const TAXI_MAP: [&str; 7] = [
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
];

/// Pickup/dropoff locations as (row, col): R, G, Y, B.
pub const TAXI_LOCS: [(usize, usize); 4] = [(0, 0), (0, 4), (4, 0), (4, 3)];

/// Taxi actions.
pub mod taxi_action {
    pub const SOUTH: usize = 0;
    pub const NORTH: usize = 1;
    pub const EAST: usize = 2;
    pub const WEST: usize = 3;
    pub const PICKUP: usize = 4;
    pub const DROPOFF: usize = 5;
}

/// Decoded Taxi state. `passenger == 4` means the passenger is in the taxi.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxiState {
    pub row: usize,
    pub col: usize,
    pub passenger: usize,
    pub destination: usize,
}

impl TaxiState {
    pub fn encode(self) -> usize {
        ((self.row * 5 + self.col) * 5 + self.passenger) * 4 + self.destination
    }

    pub fn decode(s: usize) -> Self {
        let destination = s % 4;
        let rest = s / 4;
        let passenger = rest % 5;
        let rest = rest / 5;
        Self {
            row: rest / 5,
            col: rest % 5,
            passenger,
            destination,
        }
    }
}

fn taxi_wall(row: usize, col_char: usize) -> bool {
    TAXI_MAP[1 + row].as_bytes()[col_char] == b'|'
}

/// One deterministic Taxi step: `(next_state, reward, delivered)`.
pub fn taxi_step(state: TaxiState, action: usize) -> (TaxiState, f64, bool) {
    use taxi_action::*;
    let mut next = state;
    let mut reward = -1.0;
    let mut delivered = false;
    let here = (state.row, state.col);
    match action {
        SOUTH => next.row = (state.row + 1).min(4),
        NORTH => next.row = state.row.saturating_sub(1),
        EAST => {
            if !taxi_wall(state.row, 2 * state.col + 2) {
                next.col = (state.col + 1).min(4);
            }
        }
        WEST => {
            if !taxi_wall(state.row, 2 * state.col) {
                next.col = state.col.saturating_sub(1);
            }
        }
        PICKUP => {
            if state.passenger < 4 && here == TAXI_LOCS[state.passenger] {
                next.passenger = 4;
            } else {
                reward = -10.0;
            }
        }
        DROPOFF => {
            if state.passenger == 4 && here == TAXI_LOCS[state.destination] {
                next.passenger = state.destination;
                reward = 20.0;
                delivered = true;
            } else if state.passenger == 4 && TAXI_LOCS.contains(&here) {
                next.passenger = TAXI_LOCS.iter().position(|&l| l == here).unwrap();
            } else {
                reward = -10.0;
            }
        }
        _ => panic!("taxi action {action} out of range"),
    }
    (next, reward, delivered)
}

/// Dietterich's Taxi with the delivered state replaced by an absorbing
/// zero-reward self-loop (state 500). γ = 0.995.
///
/// Episodes start with the taxi anywhere and the passenger waiting at one
/// of the four stands with a different destination (300 start states).
pub fn taxi_env() -> TabularMdp {
    let ns = TAXI_ENCODED_STATES + 1;
    let na = 6;
    let mut transitions = Vec::with_capacity(ns * na);
    let mut rewards = Vec::with_capacity(ns * na);
    for s in 0..TAXI_ENCODED_STATES {
        let state = TaxiState::decode(s);
        for a in 0..na {
            let (next, r, delivered) = taxi_step(state, a);
            let target = if delivered {
                TAXI_ABSORBING
            } else {
                next.encode()
            };
            transitions.push(vec![(target, 1.0)]);
            rewards.push(r);
        }
    }
    for _ in 0..na {
        transitions.push(vec![(TAXI_ABSORBING, 1.0)]);
        rewards.push(0.0);
    }
    let mut init = vec![0.0; ns];
    let mut starts = 0;
    for s in 0..TAXI_ENCODED_STATES {
        let st = TaxiState::decode(s);
        if st.passenger < 4 && st.passenger != st.destination {
            init[s] = 1.0;
            starts += 1;
        }
    }
    for p in &mut init {
        *p /= starts as f64;
    }
    TabularMdp::new(
        ns,
        na,
        transitions,
        rewards,
        vec![0.0; ns * na],
        init,
        TAXI_GAMMA,
    )
    .expect("taxi construction is valid")
}

/// Grid actions.
pub mod grid_action {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;
    pub const UP: usize = 2;
    pub const DOWN: usize = 3;
}

/// Cell index of `(x, y)` in a `size × size` grid.
pub fn grid_state(size: usize, x: usize, y: usize) -> usize {
    y * size + x
}

/// `(x, y)` of a grid cell index.
pub fn grid_coords(size: usize, s: usize) -> (usize, usize) {
    (s % size, s / size)
}

/// Reward of cell `(x, y)`: `exp(−0.2|x − (n−1)| − 0.2|y − (n−1)|)`.
pub fn grid_reward(size: usize, x: usize, y: usize) -> f64 {
    let goal = (size - 1) as f64;
    (-0.2 * (x as f64 - goal).abs() - 0.2 * (y as f64 - goal).abs()).exp()
}

/// `size × size` room with deterministic, wall-clipped moves and a reward
/// peaked at the bottom-right corner. Uniform start state, γ = 0.995.
pub fn grid_env(size: usize) -> Result<TabularMdp> {
    if size < 2 {
        return Err(DiceError::InvalidArgument(format!(
            "grid size must be at least 2, got {size}"
        )));
    }
    let ns = size * size;
    let na = 4;
    let mut transitions = Vec::with_capacity(ns * na);
    let mut rewards = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let (x, y) = grid_coords(size, s);
        for a in 0..na {
            let (nx, ny) = match a {
                grid_action::LEFT => (x.saturating_sub(1), y),
                grid_action::RIGHT => ((x + 1).min(size - 1), y),
                grid_action::UP => (x, y.saturating_sub(1)),
                _ => (x, (y + 1).min(size - 1)),
            };
            transitions.push(vec![(grid_state(size, nx, ny), 1.0)]);
            rewards.push(grid_reward(size, x, y));
        }
    }
    TabularMdp::new(
        ns,
        na,
        transitions,
        rewards,
        vec![0.0; ns * na],
        vec![1.0 / ns as f64; ns],
        GRID_GAMMA,
    )
}

/// Random MDP with dense transition rows, rewards in [0, 1] and a random
/// initial distribution.
pub fn random_mdp(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_states * num_actions;
    let transitions = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter()
                .enumerate()
                .map(|(s, p)| (s, p / total))
                .collect()
        })
        .collect();
    let rewards = (0..n).map(|_| rng.gen::<f64>()).collect();
    let raw: Vec<f64> = (0..num_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let init = raw.into_iter().map(|p| p / total).collect();
    TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        rewards,
        vec![0.0; n],
        init,
        gamma,
    )
}

/// Random fully supported policy (every probability at least `floor / |A|`).
pub fn random_policy(num_states: usize, num_actions: usize, floor: f64, seed: u64) -> StochasticPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Vec::with_capacity(num_states * num_actions);
    for _ in 0..num_states {
        let raw: Vec<f64> = (0..num_actions).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let row: Vec<f64> = raw
            .iter()
            .map(|p| (1.0 - floor) * p / total + floor / num_actions as f64)
            .collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / total));
    }
    StochasticPolicy::new(num_states, num_actions, probs).expect("rows normalized")
}
