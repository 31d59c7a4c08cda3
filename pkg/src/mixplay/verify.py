"""Numerical checks behind the `theory` command.

Each check returns a CheckResult; the command fails when any check fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bidist, nn, theory
from .seeding import derive_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_lipschitz_formula() -> CheckResult:
    a = theory.lipschitz_constant(theory.ArchSpec(0, 0, 0, 1.0, 1.0, 8))
    b = theory.lipschitz_constant(theory.ArchSpec(0, 1, 2, 2.0, 1.0, 4))
    ok = abs(a - math.sqrt(7) / 8) < 1e-12 and abs(b - 10 * math.sqrt(3)) < 1e-9
    return CheckResult("lipschitz constant formula", ok, f"|A|=8 bare softmax {a:.6f}; |A|=4 n_f=2 n_a=1 alpha=2 {b:.4f}",
                       {"bare": a, "mixed": b})


def check_jacobian_at_uniform(sizes=range(2, 17)) -> CheckResult:
    errs = [abs(theory.softmax_jacobian_fro_norm(np.full(n, 1.0 / n)) - theory.softmax_lipschitz_factor(n)) for n in sizes]
    worst = max(errs)
    return CheckResult("softmax Jacobian norm at uniform", worst <= 1e-9,
                       f"max |norm(uniform) - sqrt(|A|-1)/|A|| = {worst:.2e} over |A| in 2..16", {"max_error": worst})


def random_simplices(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """Uniform draws on the probability simplex."""
    return rng.dirichlet(np.ones(n), size=count)


def jacobian_fro_norms(P: np.ndarray) -> np.ndarray:
    s2 = (P**2).sum(axis=1)
    return np.sqrt(np.maximum(s2**2 - (P**4).sum(axis=1) + (P**2 * (1 - P) ** 2).sum(axis=1), 0.0))


def check_jacobian_maximum(sizes=range(2, 17), count: int = 100_000, seed: int = 0) -> CheckResult:
    """Claim under test: the Jacobian norm never exceeds its value at uniform."""
    worst = {}
    for n in sizes:
        P = random_simplices(derive_rng(seed, "simplex", n), n, count)
        norms = jacobian_fro_norms(P)
        bound = theory.softmax_lipschitz_factor(n)
        worst[n] = (float(norms.max()), bound, int((norms > bound + 1e-12).sum()))
    bad = {n: w for n, w in worst.items() if w[2]}
    if bad:
        n0 = min(bad)
        detail = (f"exceeded at |A| in {sorted(bad)}; e.g. |A|={n0}: max {bad[n0][0]:.4f} > bound {bad[n0][1]:.4f} "
                  f"on {bad[n0][2]}/{count} draws; p=(1/2,1/2,0,...) gives 0.5")
    else:
        detail = f"no draw above sqrt(|A|-1)/|A| over {count} draws per size"
    return CheckResult("softmax Jacobian norm maximal at uniform", not bad, detail, {"worst": worst})


def conforming_mlp(rng: np.random.Generator, n_f: int, alpha: float, in_dim: int = 8, hidden: int = 16,
                   actions: int = 8) -> nn.Mlp:
    """Random ReLU softmax MLP with every weight row's absolute sum rescaled to at most alpha."""
    widths = (in_dim,) + (hidden,) * (n_f - 1) + (actions,)
    net = nn.Mlp.init(nn.MlpSpec(widths), rng, output_gain=1.0)
    return theory.conform_to_alpha(net, alpha)


LIPSCHITZ_FIXTURES = ((1, 0.5), (2, 1.0), (3, 2.0), (1, 2.0), (2, 0.5), (3, 1.0), (1, 1.0), (2, 2.0), (3, 0.5), (2, 1.0))


def check_empirical_lipschitz(pairs: int = 10_000, beta: float = 1.0, seed: int = 0) -> CheckResult:
    rows, violations = [], 0
    for t, (n_f, alpha) in enumerate(LIPSCHITZ_FIXTURES):
        rng = derive_rng(seed, "lipschitz_net", t)
        net = conforming_mlp(rng, n_f, alpha)
        xs, ys = rng.standard_normal((pairs, 8)), rng.standard_normal((pairs, 8))
        est = theory.empirical_lipschitz_estimate(net, xs, ys, beta)
        lam = theory.lipschitz_constant(theory.mlp_arch(net, alpha, beta))
        violations += est > lam
        rows.append((n_f, alpha, est, lam))
    ratio = max(r[2] / r[3] for r in rows)
    return CheckResult("empirical Lipschitz estimate within analytic constant", violations == 0,
                       f"{violations} violations on {len(rows)} nets x {pairs} pairs; worst estimate/lambda = {ratio:.3f}",
                       {"rows": rows})


def check_generalization_bound() -> CheckResult:
    b = theory.generalization_bound(theory.BoundInputs(0.1, 0.330719, 1.0, 0.05, 1000, 8))
    deltas = np.linspace(0.0, 0.4, 5)
    ns = [10, 100, 1000, 10_000, 100_000]
    grid = np.array([[theory.generalization_bound(theory.BoundInputs(d, 0.330719, 1.0, 0.05, n, 8)) for n in ns]
                     for d in deltas])
    mono = bool(np.all(np.diff(grid, axis=0) > 0) and np.all(np.diff(grid, axis=1) < 0))
    ok = abs(b - 0.336349) <= 1e-5 and mono
    return CheckResult("generalization bound arithmetic", ok,
                       f"bound = {b:.6f} (fixture 0.336349); monotone in delta and 1/n: {mono}", {"bound": b})


def check_shift_margin() -> CheckResult:
    uni = np.full(4, 0.25)
    q_uni = theory.ShiftQuery(tuple(uni), 0, 1)
    m_uni = theory.min_shift_margin(q_uni)
    uni_ok = m_uni == 0.0 and theory.shifts_preference(uni, 0, 1, 1e-6)
    fix = (0.6, 0.2, 0.2)
    m = theory.min_shift_margin(theory.ShiftQuery(fix, 0, 1))
    fix_ok = (abs(m - 0.2) < 1e-12 and theory.shifts_preference(fix, 0, 1, 0.2 + 1e-9)
              and not theory.shifts_preference(fix, 0, 1, 0.2 - 1e-9))
    loose = theory.loose_shift_margin(theory.ShiftQuery(fix, 0, 1))
    return CheckResult("preference-shift margin", uni_ok and fix_ok,
                       f"uniform margin {m_uni}; (0.6, 0.2) tight margin {m:.3f} vs sufficient condition {loose:.3f}",
                       {"tight": m, "loose": loose})


def check_kl_transfer(seed: int = 0) -> CheckResult:
    rng = derive_rng(seed, "kl_transfer")
    ok, checked = True, 0
    for n in range(2, 9):
        phi = np.full(n, 1.0 / n)
        for delta in rng.uniform(1e-6, 1.0 / n * 0.99, size=5):
            ok &= theory.kl_change_under_transfer(phi, phi, 0, 1, delta) > 0
            checked += 1
    return CheckResult("KL grows under any mass transfer from uniform", bool(ok), f"{checked} random transfers")


def reverse_fixture(seed: int, action_count: int = 8, obs_dim: int = 8, n_obs: int = 256):
    rng = derive_rng(seed, "reverse_fixture")
    spec = nn.MlpSpec((obs_dim, 64, 64, action_count))
    teacher = nn.Mlp.init(spec, rng, output_gain=1.0)
    return teacher, rng.random((n_obs, obs_dim)), rng


def kl_ascent_trace(seed: int, steps: int = 100, eta_r: float = 1e-5):
    teacher, obs, rng = reverse_fixture(seed)
    res = bidist.reverse_distill(obs, teacher, teacher.copy(), eta_r, epochs=steps, minibatches=1, rng=rng,
                                 max_update_norm=None, trace=True)
    return res


def check_kl_ascent(seeds=range(5), steps: int = 100) -> CheckResult:
    details, ok = [], True
    for s in seeds:
        res = kl_ascent_trace(s, steps)
        trace = [res.kl_before] + res.trace
        viol = int(np.sum(np.diff(trace) < 0))
        ok &= res.kl_after > res.kl_before and viol < 0.05 * steps
        details.append(f"{res.kl_after:.2e}/{viol}")
    return CheckResult("reverse distillation ascends KL from phi = theta", bool(ok),
                       f"final KL / non-monotone steps per seed: {', '.join(details)}")


def configured_lipschitz(actor: nn.Mlp, beta: float) -> CheckResult:
    alpha = theory.row_abs_sum_bound(actor)
    lam = theory.lipschitz_constant(theory.mlp_arch(actor, alpha, beta))
    return CheckResult("lipschitz constant of configured actor", np.isfinite(lam),
                       f"widths {actor.spec.layer_widths}, alpha={alpha:.4f}, beta={beta:.4f}: lambda={lam:.6g}",
                       {"alpha": alpha, "beta": beta, "lambda": lam})


def run_all(actor: nn.Mlp | None = None, beta: float | None = None, simplex_draws: int = 100_000) -> list[CheckResult]:
    checks = [
        check_lipschitz_formula(),
        check_jacobian_at_uniform(),
        check_jacobian_maximum(count=simplex_draws),
        check_empirical_lipschitz(),
        check_generalization_bound(),
        check_shift_margin(),
        check_kl_transfer(),
        check_kl_ascent(),
    ]
    if actor is not None:
        checks.append(configured_lipschitz(actor, beta if beta is not None else math.sqrt(actor.spec.n_in)))
    return checks


SHIFT_KINDS = ("kl", "entropy", "noise")


def shift_fixture(seed: int, teacher_gain: float = 4.0, pre_steps: int = 300, n_obs: int = 256):
    """A teacher with clear preferences and a distilled copy trained toward it."""
    rng = derive_rng(seed, "shift_fixture")
    spec = nn.MlpSpec((8, 64, 64, 8))
    teacher = nn.Mlp.init(spec, rng, output_gain=teacher_gain)
    obs = rng.random((n_obs, 8))
    student = nn.Mlp.init(spec, rng)
    student = bidist.forward_distill(obs, teacher, student, 1e-3, epochs=pre_steps, minibatches=1, rng=rng).net
    return teacher, student, obs


def shift_rates(seed: int, steps: int = 100, eta_r: float = 1e-5, sigma: float = 0.01, **fixture_kw) -> dict:
    """Preference-shift rate after each perturbation under the same step budget."""
    teacher, student, obs = shift_fixture(seed, **fixture_kw)
    out = {"base": bidist.preference_shift_rate(teacher, student, obs)}
    rng = derive_rng(seed, "shift_perturb")
    kl = bidist.reverse_distill(obs, teacher, student, eta_r, epochs=steps, minibatches=1, rng=rng).net
    out["kl"] = bidist.preference_shift_rate(teacher, kl, obs)
    ent = bidist.apply_perturbation("entropy", student, obs, steps=steps, lr=eta_r, rng=rng)
    out["entropy"] = bidist.preference_shift_rate(teacher, ent, obs)
    noise = bidist.apply_perturbation("noise", student, obs, sigma=sigma, rng=rng)
    out["noise"] = bidist.preference_shift_rate(teacher, noise, obs)
    return out
