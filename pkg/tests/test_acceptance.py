"""Acceptance criteria 1-10.

Each test prints one ``criterion N: PASS|FAIL ...`` line to the terminal
(capture disabled) and then asserts the criterion at its stated tolerance.
"""
import struct
import time

import numpy as np
import pytest

from ssrkit import autodiff as ad
from ssrkit.checkpoint import ParameterMap, from_bytes, to_bytes
from ssrkit.errors import (BadMagicError, CheckpointError, MalformedHeaderError, OffsetOverrunError,
                           VersionMismatchError)
from ssrkit.grpo import (GrpoConfig, arm_probabilities, bandit_env, constant_env, grpo_train,
                         group_advantages)
from ssrkit.interference import BoundSpec, scaffold_transfer_experiment, verify_bound_quadratic
from ssrkit.merge import (MergeConfig, TaskVector, merge_average, merge_wudi, wudi_closed_form,
                          wudi_objective)
from ssrkit.tensor import svd
from ssrkit.toy import SsrConfig, build_suite, run_paradigm, ssr_pipeline
from ssrkit.toy.pipeline import transfer_routes
from helpers import fd_grad, rel_err, value


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_criterion_1_wudi_matches_closed_form(report):
    rng = np.random.default_rng(0)
    cfg = MergeConfig(iterations=5000, lr=1e-2)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(200):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(2, 17))
        taus = [rng.standard_normal((n, n)) for _ in range(k)]
        base = ParameterMap({"w": np.zeros((n, n))})
        merged, _ = merge_wudi(base, [TaskVector({"w": t}) for t in taus], cfg)
        star = wudi_closed_form(taus)
        worst = max(worst, float(np.linalg.norm(merged["w"] - star) / np.linalg.norm(star)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed < 60
    report(1, ok, f"worst relative deviation {worst:.2e} over 200 instances in {elapsed:.1f}s")
    assert ok


def test_criterion_2_orthogonal_experts(report):
    base = ParameterMap({"w": np.array([[0.3, -0.2], [0.1, 0.4]])})
    e1, e2 = np.diag([1.0, 0.0]), np.diag([0.0, 1.0])
    taus = [TaskVector({"w": e1}), TaskVector({"w": e2})]
    merged, rep = merge_wudi(base, taus, MergeConfig(iterations=5000, lr=1e-2))
    avg = merge_average([t.apply(base) for t in taus])
    dev_w = float(np.max(np.abs(merged["w"] - (base["w"] + np.eye(2)))))
    dev_a = float(np.max(np.abs(avg["w"] - (base["w"] + np.eye(2) / 2))))
    obj = wudi_objective(merged["w"].astype(np.float64) - base["w"], [e1, e2])
    ok = rep.final_objective < 1e-8 and obj < 1e-8 and dev_w < 1e-4 and dev_a < 1e-7
    report(2, ok, f"wudi objective {rep.final_objective:.1e}, |wudi-(base+I)| {dev_w:.1e}, "
                  f"|avg-(base+I/2)| {dev_a:.1e}")
    assert ok


def test_criterion_3_interference_bound(report):
    t0 = time.perf_counter()
    chk = verify_bound_quadratic(BoundSpec(max_dim=32, max_tasks=5), 1000, 0)
    iso = verify_bound_quadratic(BoundSpec(isotropic=True), 200, 0)
    elapsed = time.perf_counter() - t0
    ok = chk.passed and not chk.violations and iso.worst_abs_isotropic <= 1e-9 and elapsed < 30
    report(3, ok, f"{chk.summary()}; isotropic |slack| {iso.worst_abs_isotropic:.1e}; {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def routes():
    return transfer_routes(SsrConfig())


def test_criterion_4_transfer_pattern(report, routes):
    ad_gain = 100 * (routes["spatial->ad"] - routes["base->ad"])
    emb_base = 100 * (routes["base->embodied"] - routes["base"]["embodied"])
    emb_sp = 100 * (routes["spatial->embodied"] - routes["base"]["embodied"])
    ok = ad_gain >= 3 and emb_base <= 0 and emb_sp > 0
    report(4, ok, f"spatial->ad minus base->ad {ad_gain:+.1f}; base->embodied vs base {emb_base:+.1f}; "
                  f"spatial->embodied vs base {emb_sp:+.1f}")
    assert ok


@pytest.fixture(scope="module")
def paradigms():
    cfg = SsrConfig()
    return {p: run_paradigm(p, cfg) for p in ("ssr", "sequential", "joint")}


def test_criterion_5_paradigm_pattern(report, paradigms):
    ssr, seq, joint = paradigms["ssr"], paradigms["sequential"], paradigms["joint"]
    budgets = {p: r.total_steps for p, r in paradigms.items()}
    experts = {m: ssr.accuracy(m, m) for m in ("spatial", "ad", "uav")}
    seq_loss = 100 * (experts["spatial"] - seq.accuracy("uav", "spatial"))
    ssr_loss = {m: 100 * (experts[m] - ssr.accuracy("merge", m)) for m in experts}
    joint_gap = {m: 100 * (experts[m] - joint.accuracy("joint", m)) for m in experts}
    checks = {
        "matched budget": len(set(budgets.values())) == 1,
        "sequential loses >=10 on spatial": seq_loss >= 10,
        "ssr within 3 on every earlier domain": all(v <= 3 for v in ssr_loss.values()),
        "joint trails every expert": all(v > 0 for v in joint_gap.values()),
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(5, ok, f"sequential spatial loss {seq_loss:.1f}; ssr losses "
                  + ", ".join(f"{m} {v:.1f}" for m, v in ssr_loss.items())
                  + "; expert minus joint " + ", ".join(f"{m} {v:+.1f}" for m, v in joint_gap.items())
                  + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


def test_criterion_6_merge_method_ordering(report):
    suite = build_suite(0)
    means = {}
    for method in ("wudi", "tsvm", "avg"):
        r = ssr_pipeline(SsrConfig(merge={"method": method}, embodied=None), suite)
        means[method] = 100 * np.mean([r.accuracy("merge", m) for m in ("spatial", "ad", "uav")])
    # a comparison holds when the first leads by >= 0.5 points or the two are within 0.5 (a tie)
    holds = lambda a, b: means[a] - means[b] > -0.5
    checks = {"wudi >= tsvm": holds("wudi", "tsvm"), "tsvm >= avg": holds("tsvm", "avg")}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(6, ok, ", ".join(f"{k} {v:.2f}" for k, v in means.items())
                  + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


def test_criterion_7_grpo(report):
    t0 = time.perf_counter()
    env = bandit_env()
    pol, _ = grpo_train(env.make_policy(0), env, GrpoConfig(steps=500, seed=0))
    p_best = float(arm_probabilities(pol)[2])
    elapsed = time.perf_counter() - t0

    cenv = constant_env()
    cpol = cenv.make_policy(0)
    after, _ = grpo_train(cpol, cenv, GrpoConfig(steps=50))
    identical = all(after.params[k].tobytes() == cpol.params[k].tobytes() for k in cpol.params)

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        r = rng.random(int(rng.integers(2, 33))) * rng.uniform(0.1, 10)
        ref = (r - r.mean()) / np.sqrt(np.mean((r - r.mean()) ** 2))
        worst = max(worst, float(np.max(np.abs(group_advantages(r) - ref))))
    ok = p_best > 0.9 and elapsed < 10 and identical and worst <= 1e-6
    report(7, ok, f"P(best arm) {p_best:.3f} in {elapsed:.1f}s; constant env unchanged {identical}; "
                  f"advantage error {worst:.1e}")
    assert ok


def _gradient_cases():
    """100 seeded functions cycling through the differentiable operations."""
    fns = [
        lambda p: (ad.tanh(p["a"] @ p["b"]) @ p["c"]).sum(),
        lambda p: ad.log_softmax(p["a"] @ p["b"], axis=-1).mean() * 3.0,
        lambda p: (ad.exp(p["a"] * 0.2) / (p["c"] * p["c"] + 1.0)).sum(),
        lambda p: ((p["a"] @ p["b"]) ** 2).mean() + ad.log(p["c"] * p["c"] + 2.0).sum(),
        lambda p: ad.take_along(ad.log_softmax(p["a"] @ p["b"]), np.zeros((3, 1), dtype=int)).sum(),
        lambda p: (ad.concat([p["a"], p["c"]], axis=1).T @ p["c"]).sum(),
        lambda p: (ad.minimum(p["c"] * 2.0, ad.tanh(p["c"])) - p["c"].mean(axis=0)).sum(),
        lambda p: (p["a"].reshape(-1)[2:7] * 1.5 - 1.0 / (p["c"].sum() ** 2 + 1.0)).sum(),
    ]
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 3)),
                  "c": rng.standard_normal((3, 4)) * 0.8}
        yield fns[i % len(fns)], params


def test_criterion_8_numerics(report):
    worst_grad = 0.0
    for fn, params in _gradient_cases():
        _, g = ad.value_and_grad(fn, params)
        worst_grad = max(worst_grad, rel_err(g, fd_grad(lambda p: value(fn(p)), params)))
    rng = np.random.default_rng(8)
    worst_svd = 0.0
    for _ in range(100):
        a = rng.standard_normal((int(rng.integers(1, 17)), int(rng.integers(1, 17))))
        u, s, vt = svd(a)
        worst_svd = max(worst_svd, float(np.linalg.norm(u @ np.diag(s) @ vt - a) / np.linalg.norm(a)))
    ok = worst_grad <= 1e-4 and worst_svd <= 1e-5
    report(8, ok, f"worst gradient relative error {worst_grad:.1e} over 100 cases; "
                  f"worst SVD residual {worst_svd:.1e} over 100 matrices")
    assert ok


def _random_map(rng):
    tensors = {}
    for i in range(int(rng.integers(0, 8))):
        shape = tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 4))))
        tensors[f"p{i}.{int(rng.integers(1e9))}"] = rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3)
    meta = {f"k{j}": str(rng.integers(1e6)) for j in range(int(rng.integers(0, 4)))}
    return ParameterMap(tensors, meta)


def _expected_kind(blob, pos, corrupted):
    if pos < 4:
        return BadMagicError
    if pos < 8:
        return VersionMismatchError
    h = struct.unpack_from("<Q", corrupted, 8)[0]
    return OffsetOverrunError if h > len(blob) - 16 else MalformedHeaderError


def test_criterion_9_serialization(report):
    rng = np.random.default_rng(9)
    identical = 0
    for _ in range(1000):
        buf = to_bytes(_random_map(rng))
        back = from_bytes(buf)
        identical += to_bytes(back) == buf
    blob = to_bytes(_random_map(np.random.default_rng(99)).with_meta(stage="x"))
    wrong = []
    tried = 0
    for pos in range(16):
        for flip in range(1, 256):
            bad = bytearray(blob)
            bad[pos] ^= flip
            want = _expected_kind(blob, pos, bad)
            tried += 1
            try:
                from_bytes(bytes(bad))
                wrong.append((pos, flip, "accepted"))
            except CheckpointError as exc:
                if type(exc) is not want:
                    wrong.append((pos, flip, type(exc).__name__))
    ok = identical == 1000 and not wrong
    report(9, ok, f"{identical}/1000 round trips byte-identical; {tried - len(wrong)}/{tried} "
                  "fixed-header corruptions rejected with the expected error kind")
    assert ok, wrong[:5]


def test_criterion_10_transfer_experiment(report):
    rep = scaffold_transfer_experiment(seed=0)
    ok = abs(rep.zero_shift_gap) <= rep.zero_shift_band and rep.spearman_delta >= 0.9
    report(10, ok, f"delta=0 gap {rep.zero_shift_gap:+.4f} within band {rep.zero_shift_band:.4f}; "
                   f"spearman(delta, risk) {rep.spearman_delta:.3f}")
    assert ok
