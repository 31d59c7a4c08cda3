"""Focal/background evaluation: scenarios, per-capita returns, normalization and
joint-action-distribution export.

A scenario fixes a substrate, a focal mask c (1 = focal seat) and a frozen
background population for the remaining seats. Each evaluation episode draws
one policy per seat, focal seats from the focal population and background
seats from the background population, from a single generator in seat order.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs, mappo, nn
from .seeding import derive_rng

log = logging.getLogger(__name__)

DEFAULT_EPISODES = 10
FAMILIES = ("plain", "flipped", "mixed")


@dataclass(frozen=True)
class PopulationRef:
    label: str
    checkpoint: str
    method: str = "mappo"
    seed: int = 0
    run_id: str = ""
    action_permutation: tuple[int, ...] | None = None

    def load(self) -> nn.Mlp:
        net = nn.load_checkpoint(self.checkpoint)
        return net if self.action_permutation is None else nn.relabel_actions(net, self.action_permutation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ScenarioSpec:
    substrate: envs.GameSpec
    focal_mask: tuple[int, ...]
    background: list[nn.Mlp]
    episodes: int = DEFAULT_EPISODES
    seed: int = 0
    name: str = ""
    family: str = ""

    def __post_init__(self):
        self.focal_mask = tuple(int(b) for b in self.focal_mask)
        if len(self.focal_mask) != self.substrate.n_agents:
            raise ValueError("focal mask length must equal n_agents")
        if any(b not in (0, 1) for b in self.focal_mask):
            raise ValueError("focal mask must be binary")
        if self.m < len(self.focal_mask) and not self.background:
            raise ValueError("background seats need a background population")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")

    @property
    def m(self) -> int:
        return sum(self.focal_mask)


@dataclass
class MetricRow:
    method: str
    substrate: str
    scenario: str
    seed: int
    episodes: int
    focal_return: float
    normalized_return: float | None = None

    FIELDS = ("method", "substrate", "scenario", "seed", "episodes", "focal_return", "normalized_return")


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Sum over the time axis (axis 1) of gamma^t r_t."""
    T = rewards.shape[1]
    w = gamma ** np.arange(T)
    return np.tensordot(rewards, w, axes=([1], [0]))


def _episode_returns(spec: envs.GameSpec, seats, seed: int, discounted: bool) -> np.ndarray:
    W, N = len(seats), spec.n_agents
    batch = mappo.collect_with_seats(spec, seats, np.ones((W, N), dtype=bool), None, seed, 0)
    if discounted:
        return discounted_returns(batch.rewards, spec.gamma)
    return batch.episode_returns()


def _draw(pop: list[nn.Mlp], rng: np.random.Generator) -> nn.Mlp:
    return pop[int(rng.integers(len(pop)))]


def per_capita_return(substrate: envs.GameSpec, population: list[nn.Mlp], episodes: int = DEFAULT_EPISODES,
                      seed: int = 0, discounted: bool = False) -> float:
    """Mean over agents and episodes of each agent's return, seats drawn from `population` per episode."""
    if not population:
        raise ValueError("population is empty")
    rng = derive_rng(seed, "population_draw")
    seats = [[_draw(population, rng) for _ in range(substrate.n_agents)] for _ in range(episodes)]
    return float(_episode_returns(substrate, seats, seed, discounted).mean())


def focal_seats(scenario: ScenarioSpec, focal: list[nn.Mlp]) -> list[list[nn.Mlp]]:
    rng = derive_rng(scenario.seed, "population_draw")
    return [[_draw(focal, rng) if c else _draw(scenario.background, rng) for c in scenario.focal_mask]
            for _ in range(scenario.episodes)]


def focal_per_capita_return(scenario: ScenarioSpec, focal: list[nn.Mlp], discounted: bool = False) -> float:
    """(1/m) sum_i c_i R_i averaged over episodes; background rewards are ignored."""
    if scenario.m == 0:
        raise nn.ContractError("focal mask has no focal seat")
    if not focal:
        raise ValueError("focal population is empty")
    returns = _episode_returns(scenario.substrate, focal_seats(scenario, focal), scenario.seed, discounted)
    c = np.asarray(scenario.focal_mask, dtype=np.float64)
    return float((returns @ c / scenario.m).mean())


def flipped_permutation(action_count: int) -> list[int]:
    return list(range(action_count))[::-1]


def flipped_substrate(substrate: envs.GameSpec, permutation: list[int] | None = None) -> envs.GameSpec:
    """Same game with relabelled actions, for training a population with a divergent convention."""
    perm = permutation if permutation is not None else flipped_permutation(substrate.action_count)
    return dataclasses.replace(substrate, action_permutation=list(perm))


@dataclass
class BackgroundRecipe:
    seeds: list[int] = field(default_factory=lambda: [100, 101, 102])
    iterations: int | None = None
    ppo: dict = field(default_factory=dict)
    flip_permutation: list[int] | None = None
    families: tuple[str, ...] = ("plain", "flipped")


def build_background_populations(substrate: envs.GameSpec, recipe: BackgroundRecipe,
                                 output_dir: str | Path | None = None) -> dict[str, list[PopulationRef]]:
    """Train held-out MAPPO populations; the flipped family learns on a relabelled action channel.

    Returns a mapping family -> PopulationRefs, one per recipe seed. A flipped
    population is loaded acting through its permutation, so it keeps the
    convention it learned. Replaying its raw labels instead would often match
    the plain family, since relabelling leaves the equilibria of symmetric
    games such as chicken or pure coordination intact.
    """
    from .config import RunConfig
    from .train import load_manifest, manifest_file, train_seed

    out: dict[str, list[PopulationRef]] = {}
    base_name = substrate.name or substrate.kind
    for family in recipe.families:
        game = flipped_substrate(substrate, recipe.flip_permutation) if family == "flipped" else substrate
        if family not in ("plain", "flipped"):
            raise ValueError(f"unknown background family {family!r}")
        cfg = RunConfig(substrate=game, method="mappo", seeds=list(recipe.seeds), iterations=recipe.iterations,
                        output_dir=None if output_dir is None else str(output_dir),
                        ppo={**dataclasses.asdict(mappo.PpoConfig(episode_length=substrate.episode_length)), **recipe.ppo},
                        name=f"background_{base_name}_{family}")
        refs = []
        for s in recipe.seeds:
            man = load_manifest(train_seed(cfg, s))
            perm = tuple(game.action_permutation) if game.action_permutation is not None else None
            refs.append(PopulationRef(f"{family}_{s}", str(manifest_file(man, "actor")), "mappo", s, man["run_id"], perm))
        out[family] = refs
    return out


def focal_masks(n_agents: int, m: int) -> list[tuple[int, ...]]:
    """Every mask with exactly m focal seats, in lexicographic order."""
    return [bits for bits in itertools.product((0, 1), repeat=n_agents) if sum(bits) == m]


def build_scenarios(substrate: envs.GameSpec, backgrounds: dict[str, list[nn.Mlp]],
                    families=FAMILIES, episodes: int = DEFAULT_EPISODES, seed: int = 0) -> list[tuple[str, ScenarioSpec]]:
    """(scenario id, spec) pairs.

    plain / flipped: one background family fills every non-focal seat,
    m = N - 1 focal seats down to 1. mixed: background seats drawn from the
    union of plain and flipped populations, for every m in 1..N-1.
    """
    n = substrate.n_agents
    out = []
    for family in families:
        if family == "mixed":
            pop = backgrounds.get("plain", []) + backgrounds.get("flipped", [])
        else:
            pop = backgrounds.get(family, [])
        if not pop:
            continue
        for m in range(1, n):
            for mask in focal_masks(n, m):
                sid = f"{family}_m{m}"
                out.append((sid, ScenarioSpec(substrate, mask, pop, episodes, seed, sid, family)))
    return out


def evaluate_population(focal: list[nn.Mlp], scenarios: list[tuple[str, ScenarioSpec]],
                        discounted: bool = False) -> dict[str, float]:
    """Focal return per scenario id, averaged over the masks sharing that id."""
    acc: dict[str, list[float]] = {}
    for sid, sc in scenarios:
        acc.setdefault(sid, []).append(focal_per_capita_return(sc, focal, discounted))
    return {sid: float(np.mean(v)) for sid, v in acc.items()}


def minmax_normalize(values) -> np.ndarray:
    """(x - min) / (max - min); an all-equal input maps to all ones with a warning."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return x
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("all values equal; normalized to 1.0", RuntimeWarning, stacklevel=2)
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def mean_by_method(rows: list[MetricRow]) -> dict[tuple[str, str, str], float]:
    """(substrate, scenario, method) -> mean focal return over seeds."""
    acc: dict[tuple[str, str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r.substrate, r.scenario, r.method), []).append(r.focal_return)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def normalize_table(rows: list[MetricRow]) -> list[MetricRow]:
    """One row per (substrate, scenario, method) holding the seed mean and its normalized value."""
    means = mean_by_method(rows)
    seeds: dict[tuple[str, str, str], list[int]] = {}
    eps: dict[tuple[str, str, str], int] = {}
    for r in rows:
        seeds.setdefault((r.substrate, r.scenario, r.method), []).append(r.seed)
        eps[(r.substrate, r.scenario, r.method)] = r.episodes
    out = []
    groups = sorted({(s, sc) for s, sc, _ in means})
    for sub, sc in groups:
        methods = sorted(m for s, c, m in means if (s, c) == (sub, sc))
        norm = minmax_normalize([means[(sub, sc, m)] for m in methods])
        for m, v in zip(methods, norm):
            key = (sub, sc, m)
            out.append(MetricRow(m, sub, sc, len(seeds[key]), eps[key], means[key], float(v)))
    return out


def write_rows(rows: list[MetricRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricRow.FIELDS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v)
                        for v in (getattr(r, f) for f in MetricRow.FIELDS)])


def read_rows(path: str | Path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(MetricRow(d["method"], d["substrate"], d["scenario"], int(d["seed"]), int(d["episodes"]),
                                 float(d["focal_return"]),
                                 float(d["normalized_return"]) if d["normalized_return"] else None))
        return out


def joint_distribution(probs_per_agent) -> np.ndarray:
    """Flattened outer product; entry order matches enumerate_joint_actions."""
    out = np.ones(1)
    for p in probs_per_agent:
        out = np.multiply.outer(out, np.asarray(p, dtype=np.float64)).ravel()
    return out


def export_joint_action_distributions(populations: list[nn.Mlp], substrate: envs.GameSpec, sample_count: int,
                                      seed: int = 0, path: str | Path | None = None, label: str = "") -> np.ndarray:
    """Joint action distributions at observations visited when `populations` play together.

    populations[i] drives seat i. Observations come from self-play rollouts;
    `sample_count` timesteps are drawn without replacement (with replacement
    if fewer are available).
    """
    if len(populations) != substrate.n_agents:
        raise ValueError("need one policy per agent")
    T = substrate.episode_length
    episodes = max(1, -(-sample_count // T))
    seats = [list(populations) for _ in range(episodes)]
    batch = mappo.collect_with_seats(substrate, seats, np.ones((episodes, substrate.n_agents), bool), None, seed, 0)
    obs = batch.obs.reshape(episodes * T, substrate.n_agents, -1)
    rng = derive_rng(seed, "export_sample")
    idx = rng.choice(len(obs), size=sample_count, replace=sample_count > len(obs))
    rows = np.stack([
        joint_distribution([net(obs[j, i]) for i, net in enumerate(populations)]) for j in idx
    ]) if sample_count else np.zeros((0, substrate.action_count ** substrate.n_agents))
    if path is not None:
        header = ["label"] + ["_".join(map(str, a)) for a in envs.enumerate_joint_actions(substrate)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([label] + [repr(float(v)) for v in r])
    return rows
