import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixplay import envs, nn, protocol
from mixplay.train import load_manifest


def fixed_policy(obs_dim, logits):
    """History-independent policy: zero weights, the given logits as bias."""
    spec = nn.MlpSpec((obs_dim, len(logits)))
    params = np.zeros(spec.n_params)
    nn.unpack(spec, params)[-1][1][...] = logits
    return nn.Mlp(spec, params)


def one_step_game(table):
    return envs.GameSpec(payoff=table, episode_length=1)


def brute_expected_returns(spec, policies):
    """Exact expected per-agent return by enumerating every trajectory."""
    n = spec.n_agents
    total = np.zeros(n)

    def recurse(state_actions, prob):
        nonlocal total
        state, obs = envs.reset(spec, 0)
        ret = np.zeros(n)
        for joint in state_actions:
            ret += envs.step(spec, state, joint).rewards
            obs = envs.observe(spec, state)
        if len(state_actions) == spec.episode_length:
            total += prob * ret
            return
        probs = [policies[i](obs[i]) for i in range(n)]
        for joint in itertools.product(range(spec.action_count), repeat=n):
            recurse(state_actions + [joint], prob * np.prod([probs[i][a] for i, a in enumerate(joint)]))
    recurse([], 1.0)
    return total


class TestPerCapita:
    def test_deterministic_one_step(self):
        g = one_step_game([[[2, 4], [0, 0]], [[0, 0], [0, 0]]])
        sure = fixed_policy(g.obs_dim, [50.0, -50.0])
        assert protocol.per_capita_return(g, [sure], episodes=5) == pytest.approx(3.0, abs=1e-6)

    def test_symmetric_identical_agents(self):
        g = one_step_game([[[1, 1], [0, 0]], [[0, 0], [2, 2]]])
        sure = fixed_policy(g.obs_dim, [-50.0, 50.0])
        sc = protocol.ScenarioSpec(g, (1, 0), [sure], episodes=3)
        assert protocol.per_capita_return(g, [sure], 3) == pytest.approx(protocol.focal_per_capita_return(sc, [sure]))

    def test_matches_exhaustive_expectation(self):
        g = one_step_game([[[3, 1], [0, 2]], [[5, 0], [1, 4]]])
        for a, b in [([50.0, -50.0], [-50.0, 50.0]), ([-50.0, 50.0], [50.0, -50.0])]:
            pol = [fixed_policy(g.obs_dim, a), fixed_policy(g.obs_dim, b)]
            exact = brute_expected_returns(g, pol).mean()
            sc = protocol.ScenarioSpec(g, (1, 0), [pol[1]], episodes=4)
            focal = protocol.focal_per_capita_return(sc, [pol[0]])
            assert focal == pytest.approx(brute_expected_returns(g, pol)[0], abs=1e-6)
            mixed = protocol.per_capita_return(g, pol[:1], 4)
            assert mixed == pytest.approx(brute_expected_returns(g, [pol[0], pol[0]]).mean(), abs=1e-6)
            assert np.isfinite(exact)

    def test_stochastic_expectation_within_standard_error(self):
        g = one_step_game([[[3, 1], [0, 2]], [[5, 0], [1, 4]]])
        pol = fixed_policy(g.obs_dim, [0.3, -0.4])
        est = protocol.per_capita_return(g, [pol], episodes=20_000, seed=3)
        exact = brute_expected_returns(g, [pol, pol]).mean()
        assert abs(est - exact) < 4 * 2.5 / np.sqrt(20_000)

    def test_two_step_exhaustive(self):
        g = envs.GameSpec(payoff=[[[3, 1], [0, 2]], [[5, 0], [1, 4]]], episode_length=2)
        rng = np.random.default_rng(4)
        a = nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=2.0)
        b = nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=2.0)
        exact = brute_expected_returns(g, [a, b])[0]
        sc = protocol.ScenarioSpec(g, (1, 0), [b], episodes=20_000, seed=5)
        est = protocol.focal_per_capita_return(sc, [a])
        assert abs(est - exact) < 4 * 5.0 / np.sqrt(20_000)

    def test_empty_population(self):
        with pytest.raises(ValueError):
            protocol.per_capita_return(envs.make_game("chicken"), [], 1)


class TestFocal:
    def setup_method(self):
        self.g = one_step_game([[[3, 7], [0, 0]], [[0, 0], [0, 0]]])
        self.sure = fixed_policy(self.g.obs_dim, [50.0, -50.0])

    def test_one_focal_seat(self):
        sc = protocol.ScenarioSpec(self.g, (1, 0), [self.sure], episodes=3)
        assert protocol.focal_per_capita_return(sc, [self.sure]) == pytest.approx(3.0, abs=1e-6)

    def test_all_focal(self):
        sc = protocol.ScenarioSpec(self.g, (1, 1), [], episodes=3)
        assert protocol.focal_per_capita_return(sc, [self.sure]) == pytest.approx(5.0, abs=1e-6)

    def test_no_focal_seat(self):
        sc = protocol.ScenarioSpec(self.g, (0, 0), [self.sure], episodes=3)
        with pytest.raises(nn.ContractError):
            protocol.focal_per_capita_return(sc, [self.sure])

    @pytest.mark.parametrize("mask", [(1,), (1, 2), (1, 0, 1)])
    def test_invalid_mask(self, mask):
        with pytest.raises(ValueError):
            protocol.ScenarioSpec(self.g, mask, [self.sure])

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 3))
    def test_all_ones_equals_per_capita(self, seed, n):
        g = envs.make_game("chicken", n_agents=n, episode_length=4)
        rng = np.random.default_rng(seed)
        pop = [nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=1.0) for _ in range(3)]
        sc = protocol.ScenarioSpec(g, (1,) * n, [], episodes=6, seed=seed % 1000)
        assert protocol.focal_per_capita_return(sc, pop) == protocol.per_capita_return(g, pop, 6, seed % 1000)

    def test_background_frozen_and_deterministic(self):
        g = envs.make_game("chicken", episode_length=5)
        rng = np.random.default_rng(0)
        bg = [nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=1.0) for _ in range(2)]
        focal = [nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=1.0)]
        before = [nn.param_hash(b.params) for b in bg]
        sc = protocol.ScenarioSpec(g, (1, 0), bg, episodes=10, seed=7)
        first = protocol.focal_per_capita_return(sc, focal)
        assert [nn.param_hash(b.params) for b in bg] == before
        assert protocol.focal_per_capita_return(sc, focal) == first

    def test_discounted_variant(self):
        g = envs.GameSpec(payoff=[[[1, 1], [1, 1]], [[1, 1], [1, 1]]], episode_length=3, gamma=0.5)
        pol = fixed_policy(g.obs_dim, [0.0, 0.0])
        assert protocol.per_capita_return(g, [pol], 2, discounted=True) == pytest.approx(1.75)
        assert protocol.per_capita_return(g, [pol], 2) == pytest.approx(3.0)


class TestMasksAndScenarios:
    def test_masks(self):
        assert protocol.focal_masks(3, 1) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]
        assert len(protocol.focal_masks(4, 2)) == 6
        assert protocol.focal_masks(2, 0) == [(0, 0)]

    def test_build_scenarios(self):
        g = envs.make_game("chicken", n_agents=3, episode_length=3)
        bg = {"plain": [fixed_policy(g.obs_dim, [0, 0])], "flipped": [fixed_policy(g.obs_dim, [1, 0])]}
        sc = protocol.build_scenarios(g, bg, episodes=2)
        ids = sorted({sid for sid, _ in sc})
        assert ids == ["flipped_m1", "flipped_m2", "mixed_m1", "mixed_m2", "plain_m1", "plain_m2"]
        mixed = [s for sid, s in sc if sid == "mixed_m1"]
        assert len(mixed) == 3 and len(mixed[0].background) == 2
        assert all(s.m == int(sid[-1]) for sid, s in sc)

    def test_missing_family_skipped(self):
        g = envs.make_game("chicken", episode_length=3)
        sc = protocol.build_scenarios(g, {"plain": [fixed_policy(g.obs_dim, [0, 0])]}, ("plain", "flipped"))
        assert {sid for sid, _ in sc} == {"plain_m1"}


class TestNormalize:
    def test_example(self):
        np.testing.assert_allclose(protocol.minmax_normalize([2, 4, 6]), [0, 0.5, 1])

    def test_degenerate(self):
        with pytest.warns(RuntimeWarning):
            out = protocol.minmax_normalize([3.0, 3.0])
        assert out.tolist() == [1.0, 1.0]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.floats(0.1, 10), st.floats(-50, 50))
    def test_affine_invariance_and_order(self, xs, a, b):
        x = np.array(xs)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            n1 = protocol.minmax_normalize(x)
            n2 = protocol.minmax_normalize(a * x + b)
        if np.ptp(x) > 1e-6:
            np.testing.assert_allclose(n1, n2, atol=1e-7)
            assert n1.min() == 0.0 and n1.max() == 1.0
            order = np.argsort(x, kind="stable")
            assert np.all(np.diff(n1[order]) >= 0)

    def test_table(self):
        rows = [protocol.MetricRow(m, "chicken", "plain_m1", s, 10, v)
                for m, vals in (("a", [1, 3]), ("b", [5, 5]), ("c", [0, 2])) for s, v in enumerate(vals)]
        table = {r.method: r for r in protocol.normalize_table(rows)}
        assert table["b"].normalized_return == 1.0 and table["c"].normalized_return == 0.0
        assert table["a"].normalized_return == pytest.approx(1 / 4)
        assert table["a"].focal_return == 2.0 and table["a"].seed == 2

    def test_csv_round_trip(self, tmp_path):
        rows = [protocol.MetricRow("a", "g", "s", 0, 10, 1.25, 0.5), protocol.MetricRow("b", "g", "s", 1, 10, 0.1)]
        protocol.write_rows(rows, tmp_path / "t.csv")
        assert protocol.read_rows(tmp_path / "t.csv") == rows


class TestExport:
    def test_rows_are_distributions(self, tmp_path):
        g = envs.make_game("chicken", episode_length=4)
        rng = np.random.default_rng(0)
        pols = [nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), rng, output_gain=1.0) for _ in range(2)]
        rows = protocol.export_joint_action_distributions(pols, g, 10, path=tmp_path / "j.csv", label="x")
        assert rows.shape == (10, 4)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)
        lines = (tmp_path / "j.csv").read_text().splitlines()
        assert lines[0] == "label,0_0,0_1,1_0,1_1" and len(lines) == 11

    def test_identical_policies_identical_rows(self):
        g = envs.make_game("chicken", episode_length=1)
        pol = nn.Mlp.init(nn.MlpSpec((g.obs_dim, 8, 2)), np.random.default_rng(1), output_gain=1.0)
        rows = protocol.export_joint_action_distributions([pol, pol], g, 5)
        assert np.all(rows == rows[0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 3), st.integers(2, 3), st.integers(0, 2**31))
    def test_product_oracle(self, n, a, seed):
        rng = np.random.default_rng(seed)
        probs = [rng.dirichlet(np.ones(a)) for _ in range(n)]
        g = envs.GameSpec(n_agents=n, action_count=a, payoff=np.zeros((a, a, 2)).tolist())
        row = protocol.joint_distribution(probs)
        brute = [np.prod([probs[i][j[i]] for i in range(n)]) for j in envs.enumerate_joint_actions(g)]
        np.testing.assert_allclose(row, brute, atol=1e-15)

    def test_seat_count_checked(self):
        g = envs.make_game("chicken")
        with pytest.raises(ValueError):
            protocol.export_joint_action_distributions([fixed_policy(g.obs_dim, [0, 0])], g, 1)


class TestRelabel:
    def test_flipped_permutation(self):
        assert protocol.flipped_permutation(3) == [2, 1, 0]
        g = protocol.flipped_substrate(envs.make_game("chicken"))
        assert g.action_permutation == [1, 0]

    def test_relabelled_policy(self):
        pol = nn.Mlp.init(nn.MlpSpec((4, 8, 3)), np.random.default_rng(0), output_gain=2.0)
        x = np.random.default_rng(1).random((5, 4))
        perm = [1, 2, 0]
        np.testing.assert_allclose(nn.relabel_actions(pol, perm)(x)[:, perm], pol(x), atol=1e-15)
        with pytest.raises(ValueError):
            nn.relabel_actions(pol, [0, 0, 1])


@pytest.fixture(scope="module")
def chicken_backgrounds(tmp_path_factory):
    out = tmp_path_factory.mktemp("bg")
    g = envs.make_game("chicken", episode_length=10)
    recipe = protocol.BackgroundRecipe(seeds=[101, 102], iterations=200, ppo=dict(episode_length=10, rollout_threads=8))
    return g, protocol.build_background_populations(g, recipe, out)


class TestBackgrounds:
    def test_distinct_checkpoints(self, tmp_path):
        g = envs.make_game("chicken", episode_length=3)
        recipe = protocol.BackgroundRecipe(seeds=[100, 101, 102], iterations=2,
                                           ppo=dict(episode_length=3, rollout_threads=2), families=("plain",))
        refs = protocol.build_background_populations(g, recipe, tmp_path)["plain"]
        assert len(refs) == 3
        assert len({nn.param_hash(r.load().params) for r in refs}) == 3
        assert len({r.run_id for r in refs}) == 3

    def test_unknown_family(self, tmp_path):
        recipe = protocol.BackgroundRecipe(seeds=[1], iterations=1, families=("weird",))
        with pytest.raises(ValueError):
            protocol.build_background_populations(envs.make_game("chicken", episode_length=2), recipe, tmp_path)

    def test_flipped_prefers_hawk_where_plain_prefers_dove(self, chicken_backgrounds):
        g, refs = chicken_backgrounds
        obs = envs.reset(g, 0)[1]
        dove, hawk = 0, 1
        checked = 0
        for plain, flipped in zip(refs["plain"], refs["flipped"]):
            assert plain.seed == flipped.seed
            p_act = plain.load()(obs).argmax(axis=1)
            f_act = flipped.load()(obs).argmax(axis=1)
            for seat in range(g.n_agents):
                if p_act[seat] == dove:
                    assert f_act[seat] == hawk, f"seed {plain.seed} seat {seat}"
                    checked += 1
        assert checked >= 2

    def test_flipped_loads_through_permutation(self, chicken_backgrounds):
        g, refs = chicken_backgrounds
        ref = refs["flipped"][0]
        assert ref.action_permutation == (1, 0)
        raw = nn.load_checkpoint(ref.checkpoint)
        obs = envs.reset(g, 0)[1]
        np.testing.assert_allclose(ref.load()(obs)[:, [1, 0]], raw(obs), atol=1e-15)

    def test_backgrounds_not_in_focal_provenance(self, chicken_backgrounds, tmp_path):
        from mixplay.config import RunConfig
        from mixplay.train import train_seed
        g, refs = chicken_backgrounds
        bg_ids = {r.run_id for fam in refs.values() for r in fam}
        cfg = RunConfig(substrate=g, method="bidist", iterations=3, output_dir=str(tmp_path),
                        ppo=dict(episode_length=10, rollout_threads=2))
        man = load_manifest(train_seed(cfg, 0))
        assert man["run_id"] not in bg_ids
        assert not bg_ids & set(man["loaded_checkpoints"])
        assert not any(str(r.checkpoint) in json.dumps(man) for fam in refs.values() for r in fam)
