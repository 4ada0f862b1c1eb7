"""Acceptance gate: one test (or group) per criterion, tagged with ``criterion``.

The terminal summary prints one PASS/FAIL line per criterion.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import candidate, fixture_text, make_task
from kernelmem.cli import main
from kernelmem.generator import ASCEND_SCHEMA, parse_candidate
from kernelmem.memory import MemoryBank
from kernelmem.metrics import compute_speedup
from kernelmem.orchestrator import SharedState, run_episode, run_refinement_baseline
from kernelmem.simenv import (
    SyntheticGenerator,
    SyntheticVerifier,
    WorldSpec,
    ablation_spec,
    build_world,
    run_ablation,
    run_transfer,
    sim_config,
    simulate,
)
from kernelmem.valuation import QTable, RewardStats, StepMode, make_key, mc_step, refine_reward, update_q
from kernelmem.verifier import (
    BackendResponse,
    CountingBackend,
    HackRuleSet,
    StaticBackend,
    VerifierOutcome,
    aggregate_latency,
    ascend_rules,
    check_rules,
    compare_outputs,
    verify,
)


def elapsed(start: float) -> float:
    return time.perf_counter() - start


# ---------------------------------------------------------------------------
# 1. exact update
# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "Q update exactness (constant 0.55, harmonic = running mean)")
def test_c01_update_exactness():
    start = time.perf_counter()
    table = QTable(alpha=0.1, q_init=0.5)
    key = make_key("draft", "m")
    update_q(table, key, 1.0)
    assert table.q(key) == 0.55

    rng = random.Random(1)
    for trial in range(20):
        rewards = [Fraction(rng.randint(-1000, 1000), 1000) for _ in range(200)]
        harmonic = QTable(step_mode=StepMode.HARMONIC, q_init=Fraction(rng.randint(-5, 5), 5))
        total = Fraction(0)
        for n, r in enumerate(rewards, start=1):
            total += r
            harmonic.update(key, r)
            assert harmonic.q(key) == total / n
    assert elapsed(start) < 1.0


# ---------------------------------------------------------------------------
# 2. boundedness
# ---------------------------------------------------------------------------


@pytest.mark.criterion(2, "boundedness over 100 trials x 1e5 updates")
def test_c02_boundedness():
    start = time.perf_counter()
    trials, steps = 100, 100_000
    gen = np.random.default_rng(2)
    alpha = gen.uniform(0.0, 1.0, trials)
    alpha[:5] = 1.0  # the extreme step size
    q_const = gen.uniform(-1.0, 1.0, trials)
    q_harm = gen.uniform(-1.0, 1.0, trials)
    violations = 0
    for n in range(1, steps + 1):
        r = gen.uniform(-1.0, 1.0, trials)
        if n % 97 == 0:
            r = np.sign(r)  # hit the endpoints regularly
        q_const = mc_step(q_const, r, alpha, n, StepMode.CONSTANT)
        q_harm = mc_step(q_harm, r, 0.0, n, StepMode.HARMONIC)
        violations += int(np.count_nonzero(np.abs(q_const) > 1.0) + np.count_nonzero(np.abs(q_harm) > 1.0))
    assert violations == 0
    assert elapsed(start) < 10.0

    # The table applies the same step: replay one trial through it.
    local = np.random.default_rng(5)
    table = QTable(alpha=0.3, q_init=0.2)
    key = make_key("refine", "x")
    q = 0.2
    for _ in range(1000):
        r = float(local.uniform(-1.0, 1.0))
        q = float(mc_step(q, r, 0.3, 1))
        assert table.update(key, r) == q


# ---------------------------------------------------------------------------
# 3. refine reward bounds
# ---------------------------------------------------------------------------


@pytest.mark.criterion(3, "refine reward strictly in (-1, 1); (2l, l) -> 0.6")
def test_c03_refine_reward_bounds():
    start = time.perf_counter()
    gen = np.random.default_rng(3)
    b = np.exp(gen.uniform(math.log(1e-9), math.log(1e9), 1_000_000))
    lat = np.exp(gen.uniform(math.log(1e-9), math.log(1e9), 1_000_000))
    outcome = VerifierOutcome(True, True, True, latency_ms=1.0)
    lo, hi = 0.0, 0.0
    for bi, li in zip(b.tolist(), lat.tolist()):
        object.__setattr__(outcome, "latency_ms", li)
        r = refine_reward(bi, outcome)
        lo, hi = min(lo, r), max(hi, r)
    assert -1.0 < lo and hi < 1.0
    for ell in (1e-6, 0.37, 13.31, 4.2e5):
        assert abs(refine_reward(2 * ell, VerifierOutcome(True, True, True, latency_ms=ell)) - 0.6) < 1e-12
    assert elapsed(start) < 10.0


# ---------------------------------------------------------------------------
# 4. streaming statistics
# ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "streaming stats on 1e5 normal samples; sigma floor")
def test_c04_streaming_stats():
    stats = RewardStats()
    for x in np.random.default_rng(4).standard_normal(100_000).tolist():
        stats.update(x)
    assert abs(stats.mean) < 0.02
    assert abs(stats.sigma - 1.0) < 0.02
    flat = RewardStats(sigma_min=0.01)
    for _ in range(1000):
        flat.update(0.25)
    assert flat.sigma == 0.01
    assert flat.normalize(0.26) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# 5. stationary variance
# ---------------------------------------------------------------------------


@pytest.mark.criterion(5, "stationary variance of q near alpha/(2-alpha)")
def test_c05_stationary_variance():
    start = time.perf_counter()
    alpha = 0.1
    table = QTable(alpha=alpha)
    key = make_key("draft", "m")
    samples = []
    for i, r in enumerate(np.random.default_rng(5).standard_normal(1_000 + 100_000).tolist()):
        q = table.update(key, r)
        if i >= 1_000:
            samples.append(q)
    expected = alpha / (2 - alpha)
    assert expected == pytest.approx(0.05263, abs=1e-5)
    assert abs(float(np.var(samples)) - expected) / expected < 0.15
    assert elapsed(start) < 10.0


# ---------------------------------------------------------------------------
# 6. harmonic convergence
# ---------------------------------------------------------------------------


@pytest.mark.criterion(6, "harmonic steps converge to the mean in 50 trials")
def test_c06_harmonic_convergence():
    trials, steps = 50, 100_000
    gen = np.random.default_rng(6)
    q = gen.uniform(-1.0, 1.0, trials)
    for n in range(1, steps + 1):
        q = mc_step(q, gen.uniform(-0.4, 1.0, trials), 0.0, n, StepMode.HARMONIC)
    assert np.all(np.abs(q - 0.3) < 0.01)


# ---------------------------------------------------------------------------
# 7. gate table
# ---------------------------------------------------------------------------


@pytest.mark.criterion(7, "verifier gate table and zero backend calls on hack failure")
def test_c07_gate_table():
    rules = HackRuleSet(required_dispatch_tokens={"kernel_src": ("LAUNCH",)})
    for g_hack, g_comp, g_corr in itertools.product([False, True], repeat=3):
        response = BackendResponse(g_comp, g_corr, latency_samples=(3.0,) if g_corr else ())
        backend = CountingBackend(StaticBackend(response))
        source = {"kernel_src": "LAUNCH k" if g_hack else "nothing"}
        outcome = verify(make_task(), candidate(source), backend, rules)
        assert outcome.feasible() == (g_hack and g_comp and g_corr)
        if not g_hack:
            assert backend.calls == 0


# ---------------------------------------------------------------------------
# 8. fixtures
# ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "rejected model refused; Tanh fixture passes and has 6 sections")
def test_c08_fixtures():
    parsed = parse_candidate(fixture_text("tanh_candidate.txt"), ASCEND_SCHEMA, candidate_id="tanh", iteration=1)
    assert len(parsed.source_sections) == 6
    assert check_rules(parsed, ascend_rules()) == []
    sections = dict(parsed.source_sections)
    sections["model_src"] = fixture_text("rejected_model.py.txt")
    violations = check_rules(candidate(sections), ascend_rules())
    assert any(v.category == "direct_layer_call" for v in violations)


# ---------------------------------------------------------------------------
# 9. latency aggregation and comparator
# ---------------------------------------------------------------------------


def brute_force_mismatch(exp: np.ndarray, got: np.ndarray, atol: float, rtol: float):
    cells = [
        idx for idx in itertools.product(*(range(d) for d in exp.shape))
        if abs(got[idx] - exp[idx]) > atol + rtol * abs(exp[idx])
    ]
    if not cells:
        return 0, None
    box = tuple((min(c[a] for c in cells), max(c[a] for c in cells)) for a in range(exp.ndim))
    return len(cells), box


@pytest.mark.criterion(9, "latency mean 13.31 and comparator vs brute force on 1000 tensors")
def test_c09_latency_and_comparator():
    assert abs(aggregate_latency([13.64, 13.38, 12.913]).mean - 13.31) <= 0.01
    gen = np.random.default_rng(9)
    for _ in range(1000):
        shape = tuple(int(d) for d in gen.integers(1, 7, size=int(gen.integers(1, 4))))
        exp = gen.normal(size=shape)
        noise = gen.normal(scale=0.1, size=shape) * (gen.random(size=shape) < gen.uniform(0.0, 0.4))
        got = exp + noise
        atol, rtol = float(gen.uniform(1e-4, 0.05)), float(gen.uniform(1e-4, 0.05))
        count, box = brute_force_mismatch(exp, got, atol, rtol)
        report = compare_outputs(exp, got, atol, rtol)
        if count == 0:
            assert report is None
        else:
            trial = report.trials[0]
            assert trial.mismatch_count == count
            assert trial.bounding_box == box


# ---------------------------------------------------------------------------
# 10. speedup
# ---------------------------------------------------------------------------


@pytest.mark.criterion(10, "speedup rows 5.69, 3.62, 2.21")
def test_c10_speedups():
    rows = [((23.873, 4.199), 5.69), ((34.756, 9.598), 3.62), ((3814.723, 1725.443), 2.21)]
    for (ref, opt), expected in rows:
        assert abs(compute_speedup(ref, opt) - expected) <= 0.01


# ---------------------------------------------------------------------------
# 11-12. synthetic directions
# ---------------------------------------------------------------------------


@pytest.mark.criterion(11, "value-driven >= heuristic in >= 15/20 trials, mean delta > 0")
def test_c11_ablation_direction():
    start = time.perf_counter()
    report = run_ablation(ablation_spec(), trials=20, seed=0, budget_T=10)
    print(f"wins={report.wins()}/20 mean_delta={report.mean_delta():+.4f}")
    assert report.wins() >= 15
    assert report.mean_delta() > 0
    assert elapsed(start) < 120.0


@pytest.mark.criterion(12, "warm start solves hard tasks no later in >= 15/20 trials, mean earlier")
def test_c12_transfer_direction():
    start = time.perf_counter()
    report = run_transfer(trials=20, seed=0, budget_T=10)
    print(f"earlier_or_equal={report.earlier_or_equal()}/20 warm={report.mean_warm():.3f} scratch={report.mean_scratch():.3f}")
    assert report.earlier_or_equal() >= 15
    assert report.mean_warm() < report.mean_scratch()
    assert elapsed(start) < 120.0


# ---------------------------------------------------------------------------
# 13. baseline equivalence
# ---------------------------------------------------------------------------


@pytest.mark.criterion(13, "refinement baseline equals the full loop on a task-restricted bank")
def test_c13_baseline_equivalence():
    world = build_world(WorldSpec(categories=3), seed=13)
    cfg = sim_config(budget_T=6, seed=13)
    # Populate a bank with traces from every task, then replay 5 tasks both ways.
    _, shared = simulate(world, cfg)
    bank = shared.bank
    tasks = [t.to_task() for t in world.tasks][:5]
    assert len(tasks) == 5
    for task in tasks:
        own = [e for e in bank.snapshot() if e.origin_task == task.id]
        assert own, task.id
        verifier = SyntheticVerifier(world, 13)
        baseline = run_refinement_baseline(task, bank, SyntheticGenerator(world), verifier, cfg)
        reference = run_episode(task, SharedState(MemoryBank(own), cfg.value), SyntheticGenerator(world), verifier, cfg)
        assert baseline.records == reference.records
        assert baseline.final_status == reference.final_status


# ---------------------------------------------------------------------------
# 14. end-to-end determinism
# ---------------------------------------------------------------------------


def tree_hashes(root) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.mark.criterion(14, "simulate twice gives hash-identical report files")
def test_c14_cli_determinism(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"budget_T": 8, "seed": 21, "parallelism": 1}), encoding="utf-8")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
        outs.append(tree_hashes(out))
    assert outs[0] and outs[0] == outs[1]
