"""Repeated N-player matrix games and a two-player Coins gridworld.

Matrix games resolve each agent's reward as the mean over every pairwise
interaction it takes part in: for agents i < j, i is the row player of the
payoff table and j the column player.

Coins spawn rule (the generator contract): the episode generator is
``np.random.default_rng(seed)``. At reset, ``rng.choice(W*H, n_agents + 1,
replace=False)`` gives agent cells (first n_agents) and the coin cell (last);
then ``rng.integers(n_agents)`` gives the coin color. After a pickup the coin
respawns at ``free[rng.integers(len(free))]`` where ``free`` is the sorted list
of cells not occupied by an agent, followed by ``rng.integers(n_agents)`` for
its color. Cells are indexed ``y * W + x``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


DEFAULT_PAYOFFS = {
    # match -> 1 each, mismatch -> 0, three colors
    "pure_coordination": [[[1, 1], [0, 0], [0, 0]], [[0, 0], [1, 1], [0, 0]], [[0, 0], [0, 0], [1, 1]]],
    # actions: 0 = dove, 1 = hawk
    "chicken": [[[3, 3], [2, 4]], [[4, 2], [0, 0]]],
    # actions: 0 = cooperate, 1 = defect
    "prisoners_dilemma": [[[3, 3], [0, 4]], [[4, 0], [1, 1]]],
}

# (dx, dy) for up, down, left, right
COIN_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass
class GameSpec:
    kind: str = "matrix_repeated"
    n_agents: int = 2
    action_count: int = 2
    payoff: list | None = None
    episode_length: int = 200
    width: int = 3
    height: int = 3
    gamma: float = 0.99
    coin_penalty: float = -2.0
    coin_reward: float = 1.0
    penalty_to: str = "owner"
    # executed action = action_permutation[chosen action]; used to train relabelled conventions
    action_permutation: list | None = None
    name: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in ("matrix_repeated", "coins_grid"):
            raise ConfigError(f"unknown game kind {self.kind!r}")
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if self.action_count < 2:
            raise ConfigError("action_count must be >= 2")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.kind == "matrix_repeated":
            if self.payoff is None:
                raise ConfigError("matrix game needs a payoff table")
            table = np.asarray(self.payoff, dtype=np.float64)
            a = self.action_count
            if table.shape != (a, a, 2):
                raise ConfigError(f"payoff table must have shape ({a}, {a}, 2), got {table.shape}")
        else:
            if self.n_agents != 2:
                raise ConfigError("coins_grid supports exactly 2 agents")
            if self.action_count != len(COIN_MOVES):
                raise ConfigError("coins_grid has 4 move actions")
            if self.width * self.height < self.n_agents + 1:
                raise ConfigError("grid too small for agents plus a coin")
            if self.penalty_to not in ("owner", "collector"):
                raise ConfigError("penalty_to must be 'owner' or 'collector'")
        if self.action_permutation is not None:
            if sorted(self.action_permutation) != list(range(self.action_count)):
                raise ConfigError("action_permutation must permute range(action_count)")

    @property
    def obs_dim(self) -> int:
        n, a = self.n_agents, self.action_count
        if self.kind == "matrix_repeated":
            return n + n * a
        return n + 3 * self.width * self.height + n

    @property
    def state_dim(self) -> int:
        """Centralized critic input: all observations plus the owner's one-hot id."""
        return self.n_agents * self.obs_dim + self.n_agents

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GameSpec":
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            base = make_game(preset, n_agents=d.pop("n_agents", 2)).to_dict()
            base.update(d)
            d = base
        return cls(**d)


def make_game(name: str, n_agents: int = 2, episode_length: int = 200, **overrides) -> GameSpec:
    """Shipped defaults: canonical game-theory payoffs, overridable."""
    if name == "coins":
        kw = dict(kind="coins_grid", n_agents=2, action_count=4, episode_length=episode_length, name="coins")
    elif name in DEFAULT_PAYOFFS:
        payoff = DEFAULT_PAYOFFS[name]
        kw = dict(kind="matrix_repeated", n_agents=n_agents, action_count=len(payoff),
                  payoff=payoff, episode_length=episode_length, name=name)
    else:
        raise ConfigError(f"unknown game preset {name!r}")
    kw.update(overrides)
    return GameSpec(**kw)


@dataclass
class EnvState:
    timestep: int
    last_actions: np.ndarray | None = None
    positions: np.ndarray | None = None
    coin_pos: int = -1
    coin_color: int = -1
    rng: np.random.Generator | None = field(default=None, repr=False)


@dataclass
class StepResult:
    observations: np.ndarray
    rewards: np.ndarray
    done: bool


def enumerate_joint_actions(spec: GameSpec) -> list[tuple[int, ...]]:
    return list(itertools.product(range(spec.action_count), repeat=spec.n_agents))


def matrix_rewards(spec: GameSpec, joint_action) -> np.ndarray:
    table = np.asarray(spec.payoff, dtype=np.float64)
    n = spec.n_agents
    r = np.zeros(n)
    for i in range(n):
        for j in range(i + 1, n):
            ai, aj = joint_action[i], joint_action[j]
            r[i] += table[ai, aj, 0]
            r[j] += table[ai, aj, 1]
    return r / (n - 1)


def _matrix_obs(spec: GameSpec, last: np.ndarray | None) -> np.ndarray:
    n, a = spec.n_agents, spec.action_count
    obs = np.zeros((n, spec.obs_dim))
    for i in range(n):
        obs[i, i] = 1.0
        if last is not None:
            obs[i, n + last[i]] = 1.0
            others = [j for j in range(n) if j != i]
            for k, j in enumerate(others):
                obs[i, n + a * (k + 1) + last[j]] = 1.0
    return obs


def _cell_xy(spec: GameSpec, cell: int) -> tuple[int, int]:
    return cell % spec.width, cell // spec.width


def _coins_obs(spec: GameSpec, state: EnvState) -> np.ndarray:
    n, W, H = spec.n_agents, spec.width, spec.height
    cells = W * H
    obs = np.zeros((n, spec.obs_dim))
    for i in range(n):
        obs[i, i] = 1.0
        x0, y0 = _cell_xy(spec, state.positions[i])

        def ego(cell):
            x, y = _cell_xy(spec, cell)
            return ((y - y0) % H) * W + (x - x0) % W

        for j in range(n):
            if j != i:
                obs[i, n + ego(state.positions[j])] = 1.0
        channel = 1 if state.coin_color == i else 2
        obs[i, n + channel * cells + ego(state.coin_pos)] = 1.0
        obs[i, n + 3 * cells + i] = 1.0
    return obs


def observe(spec: GameSpec, state: EnvState) -> np.ndarray:
    if spec.kind == "matrix_repeated":
        return _matrix_obs(spec, state.last_actions)
    return _coins_obs(spec, state)


def _respawn_coin(spec: GameSpec, state: EnvState) -> None:
    occupied = set(int(p) for p in state.positions)
    free = [c for c in range(spec.width * spec.height) if c not in occupied]
    state.coin_pos = free[int(state.rng.integers(len(free)))]
    state.coin_color = int(state.rng.integers(spec.n_agents))


def reset(spec: GameSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    spec.validate()
    rng = np.random.default_rng(seed)
    state = EnvState(timestep=0, rng=rng)
    if spec.kind == "coins_grid":
        cells = rng.choice(spec.width * spec.height, size=spec.n_agents + 1, replace=False)
        state.positions = np.array(cells[: spec.n_agents], dtype=np.int64)
        state.coin_pos = int(cells[-1])
        state.coin_color = int(rng.integers(spec.n_agents))
    return state, observe(spec, state)


def step(spec: GameSpec, state: EnvState, joint_action) -> StepResult:
    """Advance one step in place and return observations, rewards and done."""
    if state.timestep >= spec.episode_length:
        raise EpisodeDone("step() called on a finished episode; reset first")
    acts = np.asarray(joint_action, dtype=np.int64)
    if acts.shape != (spec.n_agents,) or np.any(acts < 0) or np.any(acts >= spec.action_count):
        raise ValueError(f"invalid joint action {joint_action!r}")
    if spec.action_permutation is not None:
        acts = np.asarray(spec.action_permutation, dtype=np.int64)[acts]

    if spec.kind == "matrix_repeated":
        rewards = matrix_rewards(spec, acts)
        state.last_actions = acts
    else:
        rewards = np.zeros(spec.n_agents)
        W, H = spec.width, spec.height
        for i, a in enumerate(acts):
            x, y = _cell_xy(spec, state.positions[i])
            dx, dy = COIN_MOVES[a]
            state.positions[i] = ((y + dy) % H) * W + (x + dx) % W
        collectors = [i for i in range(spec.n_agents) if state.positions[i] == state.coin_pos]
        if collectors:
            owner = state.coin_color
            for i in collectors:
                rewards[i] += spec.coin_reward
                if i != owner:
                    target = owner if spec.penalty_to == "owner" else i
                    rewards[target] += spec.coin_penalty
            _respawn_coin(spec, state)
    state.timestep += 1
    done = state.timestep == spec.episode_length
    return StepResult(observe(spec, state), rewards, done)


def global_state(spec: GameSpec, obs: np.ndarray) -> np.ndarray:
    """Critic inputs for every agent: concatenated observations plus one-hot owner id."""
    n = spec.n_agents
    flat = obs.reshape(-1)
    return np.concatenate([np.tile(flat, (n, 1)), np.eye(n)], axis=1)
