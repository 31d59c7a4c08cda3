import json
from pathlib import Path

import numpy as np
import pytest

from mixplay import cli, mappo, nn, protocol, report, verify
from mixplay.config import RunConfig, default_p
from mixplay.envs import make_game
from mixplay.train import load_manifest, read_metrics

TINY_PPO = dict(episode_length=5, rollout_threads=2, hidden=[16])


def tiny(method="bidist", iterations=20, **kw):
    kw.setdefault("ppo", dict(TINY_PPO))
    return RunConfig(method=method, iterations=iterations, seeds=[0], **kw)


def write_config(path: Path, cfg: RunConfig) -> Path:
    path.write_text(cfg.to_json())
    return path


def events(manifest_path):
    man = load_manifest(manifest_path)
    return [(int(r["iteration"]), r["distill_event"]) for r in read_metrics(Path(man["_dir"]) / "metrics.csv")
            if r["distill_event"] != "none"]


class TestConfig:
    def test_defaults_match_tables(self):
        c = RunConfig()
        p, d = c.ppo, c.distill
        assert (p.actor_lr, p.critic_lr, p.gamma, p.gae_lambda, p.epochs, p.minibatches) == (5e-4, 5e-4, 0.99, 0.95, 5, 5)
        assert (p.grad_clip_norm, p.entropy_coef, p.value_huber_delta, p.adam_eps, p.clip) == (10.0, 0.01, 10.0, 1e-5, 0.2)
        assert (d.eta_f, d.eta_r, d.k_d) == (1e-3, 1e-5, 5)
        assert c.p == 0.4 and c.width_scale == 1.0
        assert default_p(2) == 0.4 and default_p(4) == 0.4 and default_p(8) == 0.2
        assert RunConfig(substrate=make_game("chicken", n_agents=6)).p == 0.2
        assert c.iterations == 2000 and RunConfig(substrate=make_game("coins")).iterations == 5000

    def test_method_plan(self):
        assert RunConfig(method="mappo").distill.mode == "none"
        assert RunConfig(method="forward_only").distill.mode == "forward_only"
        assert RunConfig(method="perturb:noise").distill.perturb_kind == "noise"
        assert RunConfig(method="v0").assignment_rule == "all_fictitious"
        with pytest.raises(ValueError):
            RunConfig(method="v0", assignment="sampled")
        with pytest.raises(ValueError):
            RunConfig(method="ranet")
        with pytest.raises(ValueError):
            RunConfig(width_scale=0.0)

    def test_round_trip_and_hash(self, tmp_path):
        c = tiny(output_dir=str(tmp_path))
        path = write_config(tmp_path / "c.json", c)
        back = RunConfig.load(path)
        assert back.to_dict() == c.to_dict()
        assert back.config_hash() == c.replace(output_dir="elsewhere").config_hash()
        assert c.replace(**{"distill.k_d": 3}).config_hash() != c.config_hash()

    def test_unknown_key_and_missing_file(self, tmp_path):
        with pytest.raises(ValueError):
            RunConfig.from_dict({"methd": "bidist"})
        with pytest.raises(FileNotFoundError, match="nope.json"):
            RunConfig.load(tmp_path / "nope.json")

    def test_width_scale_shrinks_distilled_hidden(self):
        from mixplay.train import init_state
        state = init_state(tiny(width_scale=0.5, ppo=dict(TINY_PPO, hidden=[64, 64])), 0)
        assert state.distiller.net.spec.layer_widths[1:-1] == (32, 32)
        assert state.learner.actor.spec.layer_widths[1:-1] == (64, 64)


class TestTrain:
    def test_mappo_has_no_events(self, tmp_out):
        path = write_config(tmp_out / "c.json", tiny("mappo"))
        assert cli.main(["train", "--config", str(path), "--seed", "0"]) == 0
        man = next((tmp_out / "runs").rglob("manifest.json"))
        assert events(man) == []

    def test_bidist_event_schedule(self, tmp_out):
        path = write_config(tmp_out / "c.json", tiny("bidist", 20))
        assert cli.main(["train", "--config", str(path), "--seed", "0"]) == 0
        man = next((tmp_out / "runs").rglob("manifest.json"))
        assert events(man) == [(5, "F"), (10, "R"), (15, "F"), (20, "R")]
        rows = read_metrics(Path(load_manifest(man)["_dir"]) / "metrics.csv")
        assert list(rows[0]) == ["iteration", "wallclock", "per_capita_return", "policy_loss", "value_loss", "entropy",
                                 "distill_event", "distill_kl_before", "distill_kl_after", "shift_rate"]
        assert len(rows) == 20 and rows[0]["wallclock"] == ""
        for r in rows:
            if r["distill_event"] == "F":
                assert float(r["distill_kl_after"]) < float(r["distill_kl_before"])

    def test_iterations_override(self, tmp_out):
        path = write_config(tmp_out / "c.json", tiny("mappo", 50))
        assert cli.main(["train", "--config", str(path), "--seed", "0", "--iterations", "3"]) == 0
        man = load_manifest(next((tmp_out / "runs").rglob("manifest.json")))
        assert man["iterations_completed"] == 3

    @pytest.mark.parametrize("method", ["bidist", "pp", "rpm", "v0"])
    def test_deterministic_bytes(self, tmp_path, method):
        outs = []
        for tag in ("a", "b"):
            cfg = tiny(method, 12, output_dir=str(tmp_path / tag))
            path = write_config(tmp_path / f"{tag}.json", cfg)
            assert cli.main(["train", "--config", str(path), "--seed", "1"]) == 0
            run = tmp_path / tag / cfg.name / "seed_1"
            outs.append({f: (run / f).read_bytes() for f in ("metrics.csv", "actor.json", "critic.json", "distilled.json")})
        assert outs[0] == outs[1]

    def test_manifest_completeness(self, tmp_out):
        path = write_config(tmp_out / "c.json", tiny("bidist", 6))
        cli.main(["train", "--config", str(path), "--seed", "0"])
        man_path = next((tmp_out / "runs").rglob("manifest.json"))
        man = load_manifest(man_path)
        referenced = set(man["files"].values()) | {"manifest.json"}
        present = {p.name for p in man_path.parent.iterdir()}
        assert present == referenced
        for key in ("run_id", "config_hash", "code_hash", "seed", "started", "finished", "param_hashes"):
            assert man[key] is not None
        assert man["status"] == "complete"
        assert man["param_hashes"]["actor"] == nn.load_checkpoint(man_path.parent / "actor.json").param_hash()

    def test_nan_writes_partial_manifest(self, tmp_out, monkeypatch, capsys):
        orig = mappo.ppo_update
        calls = {"n": 0}

        def poisoned(batch, learner, cfg, rng):
            calls["n"] += 1
            if calls["n"] == 3:
                batch.returns[...] = np.nan
            return orig(batch, learner, cfg, rng)
        monkeypatch.setattr(mappo, "ppo_update", poisoned)
        path = write_config(tmp_out / "c.json", tiny("mappo", 10))
        assert cli.main(["train", "--config", str(path), "--seed", "0"]) == 3
        man = load_manifest(next((tmp_out / "runs").rglob("manifest.json")))
        assert man["status"] == "aborted" and man["iterations_completed"] == 2
        assert "partial manifest" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "gone.json")]) == 2
        assert "gone.json" in capsys.readouterr().err

    def test_mappo_equals_bidist_without_fictitious_or_distillation(self, tmp_path):
        a = tiny("mappo", 8, output_dir=str(tmp_path / "a"))
        b = tiny("bidist", 8, output_dir=str(tmp_path / "b"), assignment="all_trained").replace(**{"distill.mode": "none"})
        from mixplay.train import train_seed
        pa, pb = train_seed(a, 0).parent, train_seed(b, 0).parent
        assert (pa / "metrics.csv").read_bytes() == (pb / "metrics.csv").read_bytes()
        assert (pa / "actor.json").read_bytes() == (pb / "actor.json").read_bytes()


class TestAblate:
    def test_interval_suite(self):
        runs = cli.expand_suite("interval", RunConfig())
        assert [r.distill.k_d for r in runs] == [1, 3, 5, 10, 20, 40]
        assert len({r.name for r in runs}) == 6

    def test_width_suite(self):
        runs = cli.expand_suite("width", RunConfig())
        assert [r.width_scale for r in runs] == [0.7, 0.5, 0.3, 0.1]

    def test_component_suite(self):
        runs = cli.expand_suite("component", RunConfig())
        assert {r.method for r in runs} == {"bidist", "v0", "forward_only", "no_distill"}
        plans = {r.method: (r.assignment_rule, r.distill.mode) for r in runs}
        assert plans["forward_only"] == ("sampled", "forward_only")
        assert plans["no_distill"] == ("sampled", "none")
        assert plans["v0"] == ("all_fictitious", "bidist")

    def test_perturbation_suite(self):
        runs = cli.expand_suite("perturbation", RunConfig())
        assert [r.distill.perturb_kind for r in runs] == [None, "entropy", "random", "noise"]

    def test_suite_file(self, tmp_path):
        f = tmp_path / "s.json"
        f.write_text(json.dumps([{"p": 0.3}, {"distill.eta_r": 1e-4, "name": "hot"}]))
        runs = cli.expand_suite(str(f), RunConfig())
        assert runs[0].p == 0.3 and runs[1].distill.eta_r == 1e-4 and runs[1].name == "hot"

    def test_unknown_suite(self, capsys):
        assert cli.main(["ablate", "--suite", "nonsense", "--dry-run"]) == 2
        assert "nonsense" in capsys.readouterr().err

    def test_dry_run_and_execute(self, tmp_out, capsys):
        path = write_config(tmp_out / "c.json", tiny("bidist", 2))
        assert cli.main(["ablate", "--suite", "width", "--config", str(path), "--dry-run"]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 4
        assert not (tmp_out / "runs").exists()
        assert cli.main(["ablate", "--suite", "width", "--config", str(path)]) == 0
        assert len(list((tmp_out / "runs").rglob("manifest.json"))) == 4


@pytest.fixture(scope="module")
def trained_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    mans = {}
    for method in ("mappo", "bidist"):
        cfg = RunConfig(method=method, iterations=6, ppo=dict(TINY_PPO), seeds=[0, 1], output_dir=str(out))
        from mixplay.train import train
        mans[method] = [str(p) for p in train(cfg)]
    bg = RunConfig(method="mappo", iterations=3, ppo=dict(TINY_PPO), seeds=[100], output_dir=str(out), name="bg")
    from mixplay.train import train
    return out, mans, [str(p) for p in train(bg)]


class TestEval:
    def scenario(self, out, mans, bgs, **kw):
        doc = {"substrate": make_game("chicken", episode_length=5).to_dict(), "methods": mans,
               "backgrounds": {"plain": bgs}, "families": ["plain"], "episodes": 4, "output_dir": str(out / "eval")}
        doc.update(kw)
        path = out / "scenario.json"
        path.write_text(json.dumps(doc))
        return path

    def test_tables(self, trained_runs, capsys):
        out, mans, bgs = trained_runs
        assert cli.main(["eval", "--scenario", str(self.scenario(out, mans, bgs))]) == 0
        norm = protocol.read_rows(out / "eval" / "normalized.csv")
        raw = protocol.read_rows(out / "eval" / "raw.csv")
        assert len(raw) == 4
        values = sorted(r.normalized_return for r in norm)
        assert values == [0.0, 1.0]
        assert "plain_m1" in capsys.readouterr().out

    def test_missing_checkpoint_names_path(self, trained_runs, capsys):
        out, mans, bgs = trained_runs
        bad = {"mappo": mans["mappo"] + [str(out / "ghost" / "manifest.json")]}
        assert cli.main(["eval", "--scenario", str(self.scenario(out, bad, bgs))]) == 2
        assert "ghost" in capsys.readouterr().err

    def test_missing_scenario_key(self, tmp_path, capsys):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"substrate": {}}))
        assert cli.main(["eval", "--scenario", str(p)]) == 2
        assert "methods" in capsys.readouterr().err


class TestTheory:
    def test_report_lines(self, tmp_out, capsys):
        path = write_config(tmp_out / "c.json", tiny())
        code = cli.main(["theory", "--config", str(path), "--simplex-draws", "2000"])
        out = capsys.readouterr().out
        assert "lambda=" in out and "lipschitz constant of configured actor" in out
        # the only failing check is the maximality claim for the softmax Jacobian norm
        failed = [line for line in out.splitlines() if line.startswith("[FAIL]")]
        assert [line.split(":")[0] for line in failed] == ["[FAIL] softmax Jacobian norm maximal at uniform"]
        assert code == 1

    def test_fresh_build_all_checks_pass(self, capsys):
        # Release gate: every check passes. Fails while the maximality claim is false for |A| >= 3.
        assert cli.main(["theory", "--simplex-draws", "20000"]) == 0

    def test_checkpoint_lambda(self, tmp_path, capsys):
        net = nn.Mlp.init(nn.MlpSpec((8, 16, 4)), np.random.default_rng(0))
        nn.save_checkpoint(net, tmp_path / "a.json")
        cli.main(["theory", "--checkpoint", str(tmp_path / "a.json"), "--beta", "1.0", "--simplex-draws", "100"])
        lam = verify.configured_lipschitz(net, 1.0).values["lambda"]
        assert f"lambda={lam:.6g}" in capsys.readouterr().out

    def test_sign_error_in_reverse_distillation_detected(self, monkeypatch, capsys):
        from mixplay import bidist
        orig = bidist.reverse_distill

        def flipped(obs, teacher, student, lr=1e-5, **kw):
            return orig(obs, teacher, student, -lr, **kw)
        monkeypatch.setattr(bidist, "reverse_distill", flipped)
        cli.main(["theory", "--simplex-draws", "100"])
        out = capsys.readouterr().out
        assert "[FAIL] reverse distillation ascends KL" in out


class TestReport:
    def test_empty(self, tmp_path, capsys):
        assert cli.main(["report", "--runs", str(tmp_path / "none*" / "manifest.json"), "--out", str(tmp_path / "r")]) == 2
        assert "empty report" in capsys.readouterr().err

    def test_points_and_summary(self, trained_runs, tmp_path):
        out, mans, _ = trained_runs
        paths = [p for ps in mans.values() for p in ps]
        res = report.build_report(paths, tmp_path / "rep")
        for p in paths:
            man = load_manifest(p)
            rows = read_metrics(Path(man["_dir"]) / "metrics.csv")
            assert res["return_points"][man["run_id"]] == len(rows)
            n_events = sum(r["distill_event"] != "none" for r in rows)
            assert res["kl_points"].get(man["run_id"], 0) == n_events
        means = protocol.mean_by_method(res["raw"])
        keys = sorted(means)
        expect = protocol.minmax_normalize([means[k] for k in keys])
        got = {(r.substrate, r.scenario, r.method): r.normalized_return for r in res["summary"]}
        assert [got[k] for k in keys] == expect.tolist()
        for f in res["files"]:
            assert Path(f).exists()

    def test_report_bytes_deterministic(self, trained_runs, tmp_path):
        out, mans, _ = trained_runs
        paths = mans["bidist"]
        report.build_report(paths, tmp_path / "a")
        report.build_report(paths, tmp_path / "b")
        for f in ("returns.svg", "distill_kl.svg", "summary.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_cli_glob(self, trained_runs, tmp_path, capsys):
        out, _, _ = trained_runs
        assert cli.main(["report", "--runs", str(out / "chicken_*" / "seed_*" / "manifest.json"),
                         "--out", str(tmp_path / "r")]) == 0
        assert "training" in capsys.readouterr().out
