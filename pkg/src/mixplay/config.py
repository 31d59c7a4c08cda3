"""Run configuration: one JSON document per run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .bidist import PERTURB_KINDS, DistillSchedule
from .envs import ConfigError, GameSpec, make_game
from .mappo import PpoConfig

OUTPUT_ENV = "MIXPLAY_OUT"

BASE_METHODS = ("mappo", "bidist", "pp", "rpm", "v0", "forward_only", "no_distill")
METHODS = BASE_METHODS + tuple(f"perturb:{k}" for k in PERTURB_KINDS)
ASSIGNMENT_RULES = ("auto", "sampled", "all_trained", "all_fictitious")

# method -> (assignment rule, distillation mode)
_METHOD_PLAN = {
    "mappo": ("all_trained", "none"),
    "pp": ("all_trained", "none"),
    "rpm": ("all_trained", "none"),
    "bidist": ("sampled", "bidist"),
    "forward_only": ("sampled", "forward_only"),
    "no_distill": ("sampled", "none"),
    "v0": ("all_fictitious", "bidist"),
}


def default_p(n_agents: int) -> float:
    return 0.4 if n_agents <= 4 else 0.2


def default_iterations(spec: GameSpec) -> int:
    return 5000 if spec.kind == "coins_grid" else 2000


@dataclass
class RunConfig:
    substrate: GameSpec = field(default_factory=lambda: make_game("chicken"))
    method: str = "bidist"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    distill: DistillSchedule = field(default_factory=DistillSchedule)
    p: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    iterations: int | None = None
    output_dir: str | None = None
    name: str = ""
    width_scale: float = 1.0
    assignment: str = "auto"
    log_wallclock: bool = False
    pp_current_prob: float = 0.7
    rpm_p: float = 0.3
    rpm_warmup: int = 10
    snapshot_interval: int = 10

    def __post_init__(self):
        if isinstance(self.substrate, dict):
            self.substrate = GameSpec.from_dict(self.substrate)
        if isinstance(self.ppo, dict):
            self.ppo = PpoConfig(**self.ppo)
        if isinstance(self.distill, dict):
            self.distill = DistillSchedule(**self.distill)
        self.seeds = [int(s) for s in self.seeds]
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.assignment not in ASSIGNMENT_RULES:
            raise ConfigError(f"assignment must be one of {ASSIGNMENT_RULES}")
        if self.width_scale <= 0:
            raise ConfigError("width_scale must be positive")
        if self.p is None:
            self.p = default_p(self.substrate.n_agents)
        if not 0.0 < self.p < 1.0:
            raise ConfigError("p must lie in (0, 1)")
        if self.iterations is None:
            self.iterations = default_iterations(self.substrate)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.name:
            self.name = f"{self.substrate.name or self.substrate.kind}_{self.method.replace(':', '_')}"
        if self.method.startswith("perturb:"):
            kind = self.method.split(":", 1)[1]
            if self.distill.mode != "perturb" or self.distill.perturb_kind != kind:
                self.distill = dataclasses.replace(self.distill, mode="perturb", perturb_kind=kind)
        elif self.method in _METHOD_PLAN:
            mode = _METHOD_PLAN[self.method][1]
            if self.method != "bidist" and self.distill.mode != mode:
                self.distill = dataclasses.replace(self.distill, mode=mode)
        if self.method == "v0" and self.assignment not in ("auto", "all_fictitious"):
            raise ConfigError("v0 runs every agent on the distilled policy; assignment must be all_fictitious")
        self.substrate = dataclasses.replace(self.substrate, episode_length=self.ppo.episode_length)

    @property
    def assignment_rule(self) -> str:
        if self.assignment != "auto":
            return self.assignment
        if self.method.startswith("perturb:"):
            return "sampled"
        return _METHOD_PLAN[self.method][0]

    @property
    def uses_pool(self) -> bool:
        return self.method in ("pp", "rpm")

    def out_root(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV, "runs"))

    def run_dir(self, seed: int) -> Path:
        return self.out_root() / self.name / f"seed_{seed}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ppo"]["hidden"] = list(self.ppo.hidden)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        """Hash of the settings that shape results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def replace(self, **overrides) -> "RunConfig":
        """Copy with overrides; nested keys use dotted names, e.g. ``{"distill.k_d": 3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            target = d
            for part in parts[:-1]:
                target = target[part]
            target[parts[-1]] = value
        if "method" in overrides and "distill.mode" not in overrides:
            d["distill"]["mode"] = DistillSchedule().mode
            d["distill"]["perturb_kind"] = None
        if "name" not in overrides:
            d["name"] = ""
        return RunConfig.from_dict(d)
