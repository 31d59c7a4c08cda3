"""Command line: train, eval, ablate, theory, report, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import nn, pipeline, protocol, report, verify
from .config import RunConfig
from .envs import GameSpec
from .train import RunAborted, load_actor, load_manifest, manifest_file, train

log = logging.getLogger("mixplay")

INTERVALS = (1, 3, 5, 10, 20, 40)
WIDTHS = (0.7, 0.5, 0.3, 0.1)
SUITES = {
    "component": [{"method": m} for m in ("bidist", "v0", "forward_only", "no_distill")],
    "perturbation": [{"method": m} for m in ("bidist", "perturb:entropy", "perturb:random", "perturb:noise")],
    "interval": [{"distill.k_d": k} for k in INTERVALS],
    "width": [{"width_scale": w} for w in WIDTHS],
}


def _suite_name(base: RunConfig, overrides: dict) -> str:
    tag = "_".join(f"{k.split('.')[-1]}{v}" for k, v in overrides.items()).replace(":", "_")
    return f"{base.name}_{tag}"


def expand_suite(suite: str, base: RunConfig) -> list[RunConfig]:
    """Suite id or JSON file holding a list of override dicts -> one RunConfig per entry."""
    if suite in SUITES:
        entries = SUITES[suite]
    else:
        path = Path(suite)
        if not path.exists():
            raise FileNotFoundError(f"unknown suite {suite!r} (not a built-in id {sorted(SUITES)} nor a file)")
        entries = json.loads(path.read_text())
        if not isinstance(entries, list):
            raise ValueError("a suite file must hold a JSON list of override objects")
    out = []
    for overrides in entries:
        overrides = dict(overrides)
        overrides.setdefault("name", _suite_name(base, overrides))
        out.append(base.replace(**overrides))
    return out


def _load_base(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if args.iterations is not None:
        config = config.replace(iterations=args.iterations, name=config.name)
    seeds = [args.seed] if args.seed is not None else None
    try:
        paths = train(config, seeds, progress=True)
    except RunAborted as exc:
        print(f"error: {exc} (partial manifest: {exc.manifest_path})", file=sys.stderr)
        return 3
    for p in paths:
        print(p)
    return 0


def load_scenario_file(path: str | Path) -> dict:
    """Scenario file keys: substrate, methods {name: [manifest paths]},
    backgrounds {family: [manifest paths]}, families, episodes, seed, output_dir."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    doc = json.loads(path.read_text())
    for key in ("substrate", "methods", "backgrounds"):
        if key not in doc:
            raise ValueError(f"scenario file {path} is missing {key!r}")
    return doc


def run_eval(doc: dict) -> tuple[list[protocol.MetricRow], list[protocol.MetricRow], Path]:
    substrate = GameSpec.from_dict(doc["substrate"])
    episodes = int(doc.get("episodes", protocol.DEFAULT_EPISODES))
    backgrounds = {}
    for fam, mans in doc["backgrounds"].items():
        backgrounds[fam] = [load_actor(load_manifest(m)) for m in mans]
    scenarios = protocol.build_scenarios(substrate, backgrounds, doc.get("families", protocol.FAMILIES),
                                         episodes, int(doc.get("seed", 0)))
    manifests = {name: [load_manifest(m) for m in mans] for name, mans in doc["methods"].items()}
    raw = pipeline.evaluate_runs(manifests, scenarios, substrate.name or substrate.kind, episodes)
    norm = protocol.normalize_table(raw)
    out = Path(doc.get("output_dir", "eval"))
    out.mkdir(parents=True, exist_ok=True)
    protocol.write_rows(raw, out / "raw.csv")
    protocol.write_rows(norm, out / "normalized.csv")
    return raw, norm, out


def cmd_eval(args) -> int:
    doc = load_scenario_file(args.scenario)
    if args.output_dir:
        doc["output_dir"] = args.output_dir
    _, norm, out = run_eval(doc)
    print(report.format_table(norm))
    print(f"wrote {out / 'raw.csv'} and {out / 'normalized.csv'}")
    return 0


def cmd_ablate(args) -> int:
    configs = expand_suite(args.suite, _load_base(args.config))
    if args.iterations is not None:
        configs = [c.replace(iterations=args.iterations, name=c.name) for c in configs]
    for c in configs:
        print(f"{c.name}: method={c.method} k_d={c.distill.k_d} width_scale={c.width_scale} mode={c.distill.mode}")
    if args.dry_run:
        return 0
    for c in configs:
        for p in train(c, progress=True):
            print(p)
    return 0


def cmd_theory(args) -> int:
    actor = None
    if args.checkpoint:
        actor = nn.load_checkpoint(args.checkpoint)
    else:
        config = _load_base(args.config)
        from .mappo import Learner

        actor = Learner.create(config.substrate, config.ppo, 0).actor
    results = verify.run_all(actor, args.beta, simplex_draws=args.simplex_draws)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    paths = report.find_manifests(args.runs)
    try:
        res = report.build_report(paths, args.out)
    except report.EmptyReport as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.format_table(res["summary"]))
    for f in res["files"]:
        print(f"wrote {f}")
    return 0


def cmd_bench(args) -> int:
    bench = pipeline.BenchmarkSpec.load(args.spec) if args.spec else pipeline.BenchmarkSpec()
    res = pipeline.run_benchmark(bench)
    print(report.format_table(res["normalized"]))
    for key, secs in res["timings"].items():
        print(f"{key}: {secs:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixplay", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="train only this seed (default: every seed in the config)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate focal populations against background scenarios")
    p.add_argument("--scenario", required=True)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="expand and run an ablation suite")
    p.add_argument("--suite", required=True, help=f"one of {sorted(SUITES)} or a JSON file of overrides")
    p.add_argument("--config", help="base run config (default: built-in defaults)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("theory", help="run the numerical theory checks")
    p.add_argument("--config", help="run config whose actor network is reported")
    p.add_argument("--checkpoint", help="actor checkpoint to report instead")
    p.add_argument("--beta", type=float, help="input norm bound (default sqrt(input width))")
    p.add_argument("--simplex-draws", type=int, default=100_000)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("report", help="charts and summary table from run manifests")
    p.add_argument("--runs", required=True, help="glob of manifest files or run directories")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="backgrounds, focal training and evaluation in one go")
    p.add_argument("--spec", help="benchmark JSON (default: built-in)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
