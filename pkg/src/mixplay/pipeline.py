"""End-to-end generalization benchmark: backgrounds, focal training, evaluation, tables."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import nn, protocol
from .config import RunConfig
from .envs import GameSpec, make_game
from .train import load_actor, load_manifest, manifest_file, train_seed

log = logging.getLogger(__name__)


@dataclass
class BenchmarkSpec:
    games: list[str] = field(default_factory=lambda: ["chicken", "pure_coordination"])
    methods: list[str] = field(default_factory=lambda: ["mappo", "pp", "bidist"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    iterations: int | None = None
    ppo: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    background_seeds: list[int] = field(default_factory=lambda: [100, 101, 102])
    families: list[str] = field(default_factory=lambda: ["plain", "flipped"])
    episodes: int = protocol.DEFAULT_EPISODES
    eval_seed: int = 12345
    n_agents: int = 2
    output_dir: str = "runs/benchmark"

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkSpec":
        return cls(**json.loads(Path(path).read_text()))


def game_spec(name: str, bench: BenchmarkSpec) -> GameSpec:
    ep = bench.ppo.get("episode_length", 200)
    return make_game(name, n_agents=bench.n_agents, episode_length=ep)


def run_config(bench: BenchmarkSpec, game: GameSpec, method: str, out: Path) -> RunConfig:
    return RunConfig(substrate=game, method=method, seeds=list(bench.seeds), iterations=bench.iterations,
                     ppo=dict(bench.ppo), distill=dict(bench.distill), output_dir=str(out),
                     name=f"{game.name}_{method.replace(':', '_')}")


def evaluate_runs(manifests: dict[str, list[dict]], scenarios, substrate_name: str, episodes: int) -> list[protocol.MetricRow]:
    rows = []
    for method, mans in manifests.items():
        for man in mans:
            focal = [load_actor(man)]
            for sid, value in protocol.evaluate_population(focal, scenarios).items():
                rows.append(protocol.MetricRow(method, substrate_name, sid, man["seed"], episodes, value))
    return rows


def run_benchmark(bench: BenchmarkSpec) -> dict:
    """Returns {"raw": rows, "normalized": rows, "timings": {(game, method): seconds}, "paths": {...}}."""
    out = Path(bench.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw: list[protocol.MetricRow] = []
    timings: dict[str, float] = {}
    provenance: dict[str, list[str]] = {}
    for name in bench.games:
        game = game_spec(name, bench)
        t0 = time.perf_counter()
        recipe = protocol.BackgroundRecipe(seeds=list(bench.background_seeds), iterations=bench.iterations,
                                           ppo=dict(bench.ppo), families=tuple(f for f in bench.families if f != "mixed"))
        refs = protocol.build_background_populations(game, recipe, out)
        bg_time = time.perf_counter() - t0
        provenance[f"{name}/background"] = [r.run_id for fam in refs.values() for r in fam]
        backgrounds = {fam: [r.load() for r in rs] for fam, rs in refs.items()}
        scenarios = protocol.build_scenarios(game, backgrounds, bench.families, bench.episodes, bench.eval_seed)
        for method in bench.methods:
            t1 = time.perf_counter()
            cfg = run_config(bench, game, method, out)
            mans = [load_manifest(train_seed(cfg, s)) for s in bench.seeds]
            provenance[f"{name}/{method}"] = [m["run_id"] for m in mans]
            raw.extend(evaluate_runs({method: mans}, scenarios, name, bench.episodes))
            # each method is charged the shared background cost as well
            timings[f"{name}/{method}"] = time.perf_counter() - t1 + bg_time
            log.info("%s %s done in %.1fs", name, method, timings[f"{name}/{method}"])
    normalized = protocol.normalize_table(raw)
    paths = {"raw": out / "raw.csv", "normalized": out / "normalized.csv", "summary": out / "benchmark.json"}
    protocol.write_rows(raw, paths["raw"])
    protocol.write_rows(normalized, paths["normalized"])
    paths["summary"].write_text(json.dumps({
        "spec": dataclasses.asdict(bench), "timings_s": timings, "provenance": provenance,
    }, indent=2, sort_keys=True))
    return {"raw": raw, "normalized": normalized, "timings": timings, "paths": paths, "provenance": provenance}


def family_means(rows: list[protocol.MetricRow], game: str, family: str) -> dict[str, float]:
    """Method -> mean focal return over seeds and every scenario id of a background family."""
    acc: dict[str, list[float]] = {}
    for r in rows:
        if r.substrate == game and r.scenario.startswith(family + "_"):
            acc.setdefault(r.method, []).append(r.focal_return)
    return {m: sum(v) / len(v) for m, v in acc.items()}
