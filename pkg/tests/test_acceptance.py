"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``CRITERION n PASS|FAIL`` line before asserting.
"""
import json
import time

import numpy as np
import pytest

from jumpwass.cli import main as cli_main
from jumpwass.config import apply_overrides, build_experiment, preset
from jumpwass.losses import loss_decoupled_w2sq, loss_w2sq_traj
from jumpwass.nn import MlpParams
from jumpwass.process import (CoefficientSet, InitialLaw, ProcessSpec, make_example1, make_example2,
                              make_example3)
from jumpwass.reconstruction import (COMPONENTS, NetConfig, TrainConfig,
                                     assemble_surrogate, error_metrics_matrix,
                                     error_metrics_scalar, init_networks, run_experiment,
                                     train_step)
from jumpwass.simulate import Ensemble, TimeGrid, moment_oracle_example1, simulate_ensemble
from jumpwass.transport import (estimate_moment_matrices, gaussian_lower_bound, optimal_assignment,
                                w1_bruteforce, w1_exact, w2sq_1d, w2sq_bruteforce, w2sq_exact)


@pytest.fixture
def verdict(capsys):
    """Print the criterion line (outside capture) and assert it."""
    t0 = time.perf_counter()

    def record(n: int, ok: bool, detail: str, budget_s: float):
        elapsed = time.perf_counter() - t0
        ok = bool(ok) and elapsed < budget_s
        with capsys.disabled():
            print(f"\nCRITERION {n:>2} {'PASS' if ok else 'FAIL'}  {detail}  "
                  f"[{elapsed:.1f}s of {budget_s:.0f}s]")
        assert ok, detail

    return record


def test_c01_ot_oracle_equivalence(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        M, k = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        x, y = rng.normal(size=(M, k)), rng.normal(size=(M, k))
        worst = max(worst, abs(w2sq_exact(x, y)[0] - w2sq_bruteforce(x, y)),
                    abs(w1_exact(x, y) - w1_bruteforce(x, y)))
    verdict(1, worst <= 1e-10, f"max |exact - brute force| = {worst:.2e} over 200 cases", 10)


def test_c02_one_dimensional_closed_form(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        M = int(rng.integers(1, 201))
        x, y = rng.normal(size=M) * 3, rng.standard_t(3, size=M)
        worst = max(worst, abs(w2sq_1d(x, y)[0] - w2sq_exact(x, y)[0]))
    verdict(2, worst <= 1e-10, f"max |sorted - assignment| = {worst:.2e} over 200 clouds", 30)


def test_c03_decoupled_below_trajectory_coupled(verdict):
    rng = np.random.default_rng(3)
    law = InitialLaw((2.0,), 0.5)
    violations = 0
    for i in range(50):
        M, N = int(rng.integers(2, 41)), int(rng.integers(2, 16))
        grid = TimeGrid(0.2 * N, N)
        truth = make_example1()
        other = make_example1(b=float(rng.uniform(2, 6)), a=float(rng.uniform(-2, 0)),
                              sigma0=float(rng.uniform(0, 1)), y0=float(rng.uniform(0, 2)))
        E = simulate_ensemble(truth, grid, law, M, seed=i)
        F = simulate_ensemble(other, grid, law, M, seed=1000 + i)
        violations += not loss_decoupled_w2sq(E, F).value <= loss_w2sq_traj(E, F).value
    verdict(3, violations == 0, f"{violations} ordering violations in 50 pairs", 120)


def test_c04_simulator_moment_oracle(verdict):
    grid = TimeGrid(1.0, 20)
    ens = simulate_ensemble(make_example1(4, -1, 0.4, 1), grid, InitialLaw((2.0,)), 10_000, seed=4)
    x1 = ens.states[:, -1, 0]
    target = moment_oracle_example1(1.0, 4, -1, 1, 2)
    se = x1.std(ddof=1) / np.sqrt(len(x1))
    gap = abs(x1.mean() - target)
    verdict(4, gap <= 3 * se + 0.05,
            f"mean {x1.mean():.4f} vs {target:.4f} (gap {gap:.4f}, 3SE+0.05 = {3 * se + 0.05:.4f})",
            60)


def test_c05_compensated_jump_martingale(verdict):
    spec = make_example2("const", "const", sigma0=0.0, beta0=0.1, r0=0.0)
    grid = TimeGrid(1.0, 20)
    ens = simulate_ensemble(spec, grid, InitialLaw((1.0,)), 10_000, seed=5)
    x = ens.states[:, :, 0]
    dev = np.abs(x.mean(axis=0) - 1.0)
    se = x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    ok = bool(np.all(dev <= 3 * se))
    worst = float(np.max(np.where(se > 0, dev / np.where(se > 0, se, 1), 0.0)))
    verdict(5, ok, f"max |mean - X0| / SE = {worst:.2f} over {grid.N + 1} grid points", 30)


def _frozen_decoupled(obs: np.ndarray, hat: np.ndarray, perms) -> float:
    M = obs.shape[0]
    return sum(float(np.sum((hat[p, i] - obs[:, i]) ** 2)) / M
               for i, p in zip(range(1, obs.shape[1] - 1), perms))


def _with_flat(nets: dict[str, MlpParams], vec: np.ndarray) -> dict[str, MlpParams]:
    out, k = {}, 0
    for name in COMPONENTS:
        if name in nets:
            out[name] = nets[name].with_flat(vec[k:k + nets[name].size])
            k += nets[name].size
    return out


def test_c06_gradient_fidelity(verdict):
    rng = np.random.default_rng(6)
    truth, law = make_example1(), InitialLaw((2.0,), 0.2)
    worst = 0.0
    for inst in range(20):
        M, N = int(rng.integers(3, 7)), int(rng.integers(3, 6))
        layers, width = int(rng.integers(1, 3)), int(rng.integers(3, 7))
        cfg = TrainConfig(epochs=1, n_traj=M, dt=0.2, N=N, seed=inst,
                          nets={c: NetConfig(layers, width) for c in COMPONENTS})
        obs = simulate_ensemble(truth, cfg.grid, law, M, seed=100 + inst)
        nets = init_networks(cfg, truth)
        sur = assemble_surrogate("none", nets, truth)
        noise_seed = 200 + inst
        _, grad = train_step(sur, obs, law, cfg, noise_seed)
        base = simulate_ensemble(sur, cfg.grid, law, M, seed=noise_seed)
        perms = loss_decoupled_w2sq(obs, base).couplings
        theta = np.concatenate([nets[c].flat() for c in COMPONENTS])

        def frozen(vec):
            s = assemble_surrogate("none", _with_flat(nets, vec), truth)
            hat = simulate_ensemble(s, cfg.grid, law, M, seed=noise_seed).states
            return _frozen_decoupled(obs.states, hat, perms)

        h = 1e-6
        fd = np.empty_like(theta)
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h
            fd[j] = (frozen(theta + e) - frozen(theta - e)) / (2 * h)
        err = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
    verdict(6, worst <= 1e-5, f"max relative error {worst:.2e} over 20 instances", 120)


def test_c07_time_refinement(verdict):
    truth, wrong = make_example1(), make_example1(y0=0.5)
    law = InitialLaw((2.0,))
    T, M = 4.0, 100
    fine = TimeGrid(T, 40)
    passes, details = 0, []
    for seed in range(5):
        a = simulate_ensemble(truth, fine, law, M, seed=seed)
        b = simulate_ensemble(wrong, fine, law, M, seed=1000 + seed)
        vals = []
        for dt, stride in ((0.4, 4), (0.2, 2), (0.1, 1)):
            g = TimeGrid(T, fine.N // stride)
            vals.append(dt * loss_w2sq_traj(Ensemble(a.states[:, ::stride], g),
                                            Ensemble(b.states[:, ::stride], g)).value)
        gaps = np.abs(np.diff(vals))
        passes += gaps[1] < gaps[0]
        details.append(f"{gaps[0]:.3f}>{gaps[1]:.3f}")
    verdict(7, passes >= 3, f"{passes}/5 seeds with shrinking gaps ({', '.join(details)})", 300)


def test_c08_empirical_convergence(verdict):
    rng = np.random.default_rng(8)
    means = []
    for M in (50, 100, 200, 400):
        means.append(np.mean([w2sq_1d(rng.normal(size=M), rng.normal(size=M))[0]
                              for _ in range(20)]))
    ok = all(a > b for a, b in zip(means, means[1:]))
    verdict(8, ok, "E[w2sq] over M=50..400: " + ", ".join(f"{m:.4f}" for m in means), 120)


def test_c09_desk_scale_example2(verdict):
    rows = []
    for seed in range(5):
        cfg = apply_overrides(preset("example2"), [
            ("train.epochs", 150), ("train.n_traj", 200), ("train.prior", "drift_given"),
            ("train.nets", {"diffusion": {"hidden_layers": 2, "width": 150},
                            "jump": {"hidden_layers": 2, "width": 150}}),
            ("train.seed", seed), ("data_seed", seed)])
        _, rep = run_experiment(build_experiment(cfg))
        rows.append((rep.diffusion_err, rep.jump_err))
    good = sum(d <= 0.35 and j <= 0.35 for d, j in rows)
    verdict(9, good >= 3, f"{good}/5 runs within 0.35 (diffusion, jump): "
            + "; ".join(f"({d:.3f}, {j:.3f})" for d, j in rows), 1800)


def _spec(f, s, b, d, m, n, like):
    return ProcessSpec(d, m, like.measure, CoefficientSet(f, s, b))


def test_c10_metric_identities(verdict):
    ens1 = simulate_ensemble(make_example1(), TimeGrid(2.0, 10), InitialLaw((2.0,), 0.3), 20, seed=10)
    t1 = make_example1()
    c = t1.coefficients
    same = error_metrics_scalar(t1, t1, ens1)
    doubled = error_metrics_scalar(
        t1, _spec(lambda x, t: 2 * c.drift(x, t), c.diffusion, c.jump, 1, 1, 1, t1), ens1)
    t3 = make_example3()
    ens3 = simulate_ensemble(t3, TimeGrid(2.0, 10), InitialLaw((1.7, 1.1)), 20, seed=10)
    c3 = t3.coefficients
    same3 = error_metrics_matrix(t3, t3, ens3)
    scaled = error_metrics_matrix(
        t3, _spec(c3.drift, lambda x, t: np.sqrt(2.0) * c3.diffusion(x, t), c3.jump, 2, 2, 2, t3),
        ens3)
    ok = (same.drift_err == same.diffusion_err == same.jump_err == 0.0
          and same3.drift_err == same3.diffusion_err == same3.jump_err == 0.0
          and abs(doubled.drift_err - 1.0) <= 1e-12 and abs(scaled.diffusion_err - 0.25) <= 1e-12)
    verdict(10, ok, f"zeros exact; forced ratios {doubled.drift_err!r}, {scaled.diffusion_err!r}", 5)


def test_c11_lower_bound_direction(verdict):
    # Example 1 on its training grid (dt 0.2, N 101) against the y0-halved variant
    truth, wrong = make_example1(), make_example1(y0=0.5)
    law, grid, M, R = InitialLaw((2.0,)), TimeGrid.from_dt(0.2, 101), 400, 20
    lb, dd = [], []
    for r in range(R):
        a = simulate_ensemble(truth, grid, law, M, seed=r)
        b = simulate_ensemble(wrong, grid, law, M, seed=10_000 + r)
        mm = estimate_moment_matrices(truth, wrong, (a, b), grid, grid.N)
        lb.append(gaussian_lower_bound(mm, grid))
        dd.append(grid.dt * sum(optimal_assignment(a.slice(i), b.slice(i)).cost
                                for i in range(grid.N)))
    lb, dd = np.array(lb), np.array(dd)
    se_lb, se_dd = lb.std(ddof=1) / np.sqrt(R), dd.std(ddof=1) / np.sqrt(R)
    positive = lb.mean() > 3 * se_lb
    below = lb.mean() <= dd.mean() + 3 * se_dd
    verdict(11, positive and below,
            f"bound {lb.mean():.4g} (SE {se_lb:.2g}) vs decoupled {dd.mean():.4g} (SE {se_dd:.2g}); "
            f"positive={positive} below={below}", 300)


def test_c12_end_to_end_determinism(verdict, tmp_path):
    args = ["train", "--preset", "example1-desk"]
    assert cli_main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(args + ["--out", str(tmp_path / "b")]) == 0

    def read(d, name):
        return json.loads((tmp_path / d / name).read_text())

    ta, tb = read("a", "trace.json"), read("b", "trace.json")
    same = (ta["losses"] == tb["losses"] and read("a", "report.json") == read("b", "report.json")
            and len(ta["losses"]) == 100)
    verdict(12, same, f"{len(ta['losses'])}-epoch traces and reports identical: {same}", 600)
