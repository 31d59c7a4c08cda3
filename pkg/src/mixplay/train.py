"""The mixed-play training loop, run artifacts and manifests.

Per iteration k (1-based):
  1. shuffle agent indexes and draw the trained/fictitious assignment
  2. gather one episode per rollout worker (trained seats act with the
     learning policy, fictitious seats with the distilled one; PP and RPM
     seats may load stored snapshots instead)
  3. PPO update of the shared actor and critic
  4. distillation event: forward at odd multiples of k_d, reverse at even ones
Every random draw comes from a stream derived from (seed, purpose, k).
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bidist, mappo, nn
from .config import RunConfig
from .seeding import derive_rng

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "iteration", "wallclock", "per_capita_return", "policy_loss", "value_loss", "entropy",
    "distill_event", "distill_kl_before", "distill_kl_after", "shift_rate",
)
CHECKPOINTS = ("actor", "critic", "distilled")


class RunAborted(RuntimeError):
    def __init__(self, message: str, manifest_path: Path):
        super().__init__(message)
        self.manifest_path = manifest_path


def code_hash() -> str:
    """sha256 over the package sources, in file-name order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def distilled_spec(actor_spec: nn.MlpSpec, width_scale: float) -> nn.MlpSpec:
    w = actor_spec.layer_widths
    hidden = tuple(max(1, int(round(h * width_scale))) for h in w[1:-1])
    return nn.MlpSpec((w[0], *hidden, w[-1]), actor_spec.activation, actor_spec.head)


def iteration_bits(config: RunConfig, k: int, seed: int) -> np.ndarray:
    n = config.substrate.n_agents
    rule = config.assignment_rule
    if rule == "all_trained":
        return np.ones(n, dtype=np.int64)
    if rule == "all_fictitious":
        return np.zeros(n, dtype=np.int64)
    return bidist.sample_training_assignment(config.p, n, derive_rng(seed, "assignment", k)).bits


@dataclass
class TrainState:
    learner: mappo.Learner
    distiller: bidist.Distiller
    pool: bidist.PolicyPool = field(default_factory=bidist.PolicyPool)
    memory: bidist.RankedMemory | None = None
    pending: tuple[float, np.ndarray] | None = None  # RPM snapshot waiting to be filed
    snapshot_nets: dict = field(default_factory=dict)

    def snapshot_net(self, params: np.ndarray) -> nn.Mlp:
        key = id(params)
        if key not in self.snapshot_nets:
            self.snapshot_nets[key] = nn.Mlp(self.learner.actor.spec, params)
        return self.snapshot_nets[key]


def init_state(config: RunConfig, seed: int) -> TrainState:
    learner = mappo.Learner.create(config.substrate, config.ppo, seed)
    phi = nn.Mlp.init(distilled_spec(learner.actor.spec, config.width_scale), derive_rng(seed, "distilled_init"))
    distiller = bidist.Distiller(phi, config.distill, derive_rng(seed, "distill", 0))
    memory = bidist.RankedMemory(warmup=config.rpm_warmup) if config.method == "rpm" else None
    return TrainState(learner, distiller, memory=memory)


def build_seats(config: RunConfig, state: TrainState, bits: np.ndarray, k: int, seed: int):
    W, N = config.ppo.rollout_threads, config.substrate.n_agents
    theta, phi = state.learner.actor, state.distiller.net
    if not config.uses_pool:
        row = [theta if b else phi for b in bits]
        return [list(row) for _ in range(W)], np.tile(bits.astype(bool), (W, 1))
    rng = derive_rng(seed, "pool", k)
    seats, trained = [], np.zeros((W, N), dtype=bool)
    for w in range(W):
        if config.method == "pp":
            picks = [bidist.pp_sample(state.pool, rng, config.pp_current_prob) for _ in range(N)]
        else:
            ret, params = state.pending if (w == 0 and state.pending is not None) else (None, None)
            picks = bidist.rpm_store_and_sample(state.memory, ret, params, N, config.rpm_p, rng)
        row = []
        for i, snap in enumerate(picks):
            if snap is None:
                row.append(theta)
                trained[w, i] = True
            else:
                row.append(state.snapshot_net(snap))
        seats.append(row)
    state.pending = None
    return seats, trained


def train_iteration(config: RunConfig, state: TrainState, k: int, seed: int) -> dict:
    bits = iteration_bits(config, k, seed)
    seats, trained = build_seats(config, state, bits, k, seed)
    batch = mappo.collect_with_seats(config.substrate, seats, trained, state.learner.critic, seed, k)
    batch.assignment = bits
    mappo.compute_gae(batch, config.ppo)

    if config.uses_pool:
        pre_update = state.learner.actor.params.copy()
    info = mappo.ppo_update(batch, state.learner, config.ppo, derive_rng(seed, "ppo", k))
    ret = batch.per_capita_return()

    if config.uses_pool and k % config.snapshot_interval == 0:
        if config.method == "pp":
            state.pool.append(pre_update)
        else:
            # the snapshot is ranked by the return its own seats earned this iteration
            seat_ret = batch.episode_returns()[trained] if trained.any() else batch.episode_returns()
            state.pending = (float(seat_ret.mean()), pre_update)

    row = {
        "iteration": k, "wallclock": None, "per_capita_return": ret,
        "policy_loss": info["policy_loss"], "value_loss": info["value_loss"], "entropy": info["entropy"],
        "distill_event": "none", "distill_kl_before": None, "distill_kl_after": None, "shift_rate": None,
    }
    event = config.distill.event(k)
    if event is not None:
        state.distiller.rng = derive_rng(seed, "distill", k)
        buffer = batch.obs.reshape(-1, batch.obs.shape[-1])
        res = state.distiller.run_event(event, state.learner.actor, buffer)
        if not all(np.isfinite([res["kl_before"], res["kl_after"]])) or not np.all(np.isfinite(state.distiller.net.params)):
            raise FloatingPointError(f"non-finite distillation result at iteration {k}: {res}")
        row.update(distill_event=event, distill_kl_before=res["kl_before"],
                   distill_kl_after=res["kl_after"], shift_rate=res["shift_rate"])
    return row


def _write_manifest(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def train_seed(config: RunConfig, seed: int, progress: bool = False) -> Path:
    """Train one seed; returns the manifest path."""
    run_dir = config.run_dir(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "config": "config.json",
        "metrics": "metrics.csv",
        **{name: f"{name}.json" for name in CHECKPOINTS},
    }
    (run_dir / files["config"]).write_text(config.to_json())
    manifest = {
        "run_id": f"{config.name}/seed_{seed}",
        "method": config.method,
        "substrate": config.substrate.name or config.substrate.kind,
        "seed": seed,
        "config_hash": config.config_hash(),
        "code_hash": code_hash(),
        "started": _now(),
        "finished": None,
        "status": "running",
        "iterations_completed": 0,
        "loaded_checkpoints": [],
        "files": {"config": files["config"], "metrics": files["metrics"]},
    }
    manifest_path = run_dir / "manifest.json"
    state = init_state(config, seed)
    t0 = time.perf_counter()
    with open(run_dir / files["metrics"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for k in range(1, config.iterations + 1):
            try:
                row = train_iteration(config, state, k, seed)
            except FloatingPointError as exc:
                fh.flush()
                manifest.update(status="aborted", error=str(exc), finished=_now())
                _write_manifest(manifest_path, manifest)
                raise RunAborted(f"run {manifest['run_id']} aborted at iteration {k}: {exc}", manifest_path) from exc
            if config.log_wallclock:
                row["wallclock"] = round(time.perf_counter() - t0, 3)
            writer.writerow([_fmt(row[f]) for f in METRIC_FIELDS])
            manifest["iterations_completed"] = k
            if progress and k % max(1, config.iterations // 10) == 0:
                log.info("%s seed %d: iteration %d/%d return %.4f", config.name, seed, k, config.iterations,
                         row["per_capita_return"])

    nets = {"actor": state.learner.actor, "critic": state.learner.critic, "distilled": state.distiller.net}
    for name, net in nets.items():
        nn.save_checkpoint(net, run_dir / files[name])
        manifest["files"][name] = files[name]
    manifest["param_hashes"] = {name: net.param_hash() for name, net in nets.items()}
    manifest.update(status="complete", finished=_now())
    _write_manifest(manifest_path, manifest)
    return manifest_path


def train(config: RunConfig, seeds: list[int] | None = None, progress: bool = False) -> list[Path]:
    return [train_seed(config, s, progress) for s in (seeds if seeds is not None else config.seeds)]


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    doc["_dir"] = str(path.parent)
    return doc


def manifest_file(manifest: dict, key: str) -> Path:
    return Path(manifest["_dir"]) / manifest["files"][key]


def load_actor(manifest: dict) -> nn.Mlp:
    """The run's actor, acting through the action relabelling it was trained under."""
    actor = nn.load_checkpoint(manifest_file(manifest, "actor"))
    cfg = json.loads(manifest_file(manifest, "config").read_text())
    perm = cfg.get("substrate", {}).get("action_permutation")
    return actor if perm is None else nn.relabel_actions(actor, perm)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
