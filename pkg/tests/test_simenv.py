from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernelmem.errors import ConfigError
from kernelmem.memory import RetrievalConfig
from kernelmem.orchestrator import SharedState, run_episode
from kernelmem.simenv import (
    SyntheticGenerator,
    SyntheticTask,
    SyntheticVerifier,
    SyntheticWorld,
    WorldSpec,
    build_world,
    decode_candidate,
    run_ablation,
    run_transfer,
    sim_config,
    simulate,
)
from kernelmem.valuation import QEntry, ValueConfig, make_key


def single_task_world(base=100.0, floor=5.0, gamma=0.3, hints=3, sigma=0.0, p_hit=1.0, p_miss=0.0) -> SyntheticWorld:
    spec = WorldSpec(noise_sigma=sigma, hint_gain=gamma)
    task = SyntheticTask("x", "cat0", "easy", frozenset({"k_cat0_0"}), p_hit, p_miss, base, floor, gamma)
    return SyntheticWorld(
        spec=spec, seed=0, knowledge=frozenset({"k_cat0_0"}),
        hints=frozenset(f"h_cat0_{i}" for i in range(hints)), distractors=frozenset({"d_cat0_0"}),
        tasks=(task,),
    )


def test_zero_distractors_only_knowledge_and_hints():
    world = build_world(WorldSpec(distractors_per_category=0), seed=1)
    assert {e.id for e in world.entries} == world.knowledge | world.hints


def test_world_is_pure_function_of_spec_and_seed():
    assert build_world(WorldSpec(), 7) == build_world(WorldSpec(), 7)
    assert build_world(WorldSpec(), 7).tasks != build_world(WorldSpec(), 8).tasks


def test_full_overlap_hard_subset_of_easy_union():
    world = build_world(WorldSpec(overlap_fraction=1.0, required_easy=2, required_hard=2), seed=3)
    easy_union = set().union(*(t.required_knowledge for t in world.tasks if t.level == "easy"))
    for t in world.tasks:
        if t.level == "hard":
            assert t.required_knowledge <= easy_union


def test_context_covering_requirements_always_feasible():
    world = single_task_world(p_hit=1.0)
    verifier = SyntheticVerifier(world, seed=5)
    for it in range(1, 50):
        assert verifier.outcome_for("x", it, frozenset({"k_cat0_0"}), frozenset()).feasible()


def test_latency_without_hints_is_base_times_noise():
    world = single_task_world(sigma=0.0)
    out = SyntheticVerifier(world).outcome_for("x", 1, frozenset({"k_cat0_0"}), frozenset())
    assert out.latency_ms == 100.0


def test_three_hints_example():
    world = single_task_world(base=100.0, floor=5.0, gamma=0.3, sigma=0.0)
    hints = frozenset(f"h_cat0_{i}" for i in range(3))
    out = SyntheticVerifier(world).outcome_for("x", 1, frozenset({"k_cat0_0"}), hints)
    assert out.latency_ms == pytest.approx(34.3, abs=1e-9)
    assert out.profiling_digest["mte_ratio"] == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10), st.integers(1, 1000), st.floats(0.01, 0.5))
def test_latency_never_below_floor(n_hints, iteration, sigma):
    world = single_task_world(base=100.0, floor=30.0, hints=10, sigma=sigma)
    hints = frozenset(f"h_cat0_{i}" for i in range(n_hints))
    out = SyntheticVerifier(world, seed=iteration).outcome_for("x", iteration, frozenset({"k_cat0_0"}), hints)
    assert out.latency_ms >= 30.0
    assert all(s >= 30.0 for s in out.latency_samples)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.sets(st.sampled_from(["k_cat0_0", "h_cat0_0", "h_cat0_1"])))
def test_distractors_are_inert(seed, iteration, ids):
    world = single_task_world(p_hit=0.7, p_miss=0.2, sigma=0.05)
    verifier = SyntheticVerifier(world, seed)
    ids = frozenset(ids)
    a = verifier.outcome_for("x", iteration, ids & world.knowledge, ids & world.hints)
    b = verifier.outcome_for("x", iteration, (ids & world.knowledge) | {"d_cat0_0"}, (ids & world.hints) | {"d_cat0_0"})
    assert a == b


def test_generator_encodes_context_and_inherits_start_point():
    from kernelmem.generator import ContextItem, GenerationRequest

    world = build_world(WorldSpec(), 0)
    gen = SyntheticGenerator(world)
    task = world.task_list()[0]
    items = tuple(ContextItem(i, "experience", "") for i in ("k_cat0_1", "d_cat0_0", "h_cat0_2"))
    text = gen.generate(GenerationRequest(task, "draft", items))
    body = text.split("'''")[1]
    assert decode_candidate(body) == (frozenset({"k_cat0_1"}), frozenset({"h_cat0_2"}))
    refined = gen.generate(GenerationRequest(task, "refine", (), start_point_source=body))
    assert decode_candidate(refined.split("'''")[1]) == (frozenset({"k_cat0_1"}), frozenset({"h_cat0_2"}))


def test_world_spec_validation_and_round_trip():
    with pytest.raises(ConfigError):
        WorldSpec(hint_gain=1.5).validate()
    with pytest.raises(ConfigError):
        WorldSpec.from_dict({"bogus": 1})
    spec = WorldSpec(categories=2)
    assert WorldSpec.from_dict(spec.to_dict()) == spec


def test_needed_knowledge_present_solves_earlier():
    spec = WorldSpec(categories=1, easy_per_category=1, hard_per_category=0, required_easy=1, p_hit=1.0, p_miss=0.0,
                     distractors_per_category=2)
    world = build_world(spec, seed=4)
    task = world.task_list()[0]
    (needed,) = world.task(task.id).required_knowledge
    cfg = sim_config(budget_T=8, seed=4, value=ValueConfig(rng_seed=4, epsilon_start=0.0, epsilon_end=0.0))

    with_k = SharedState(world.bank(), cfg.value)
    with_k.qtable._values[make_key("draft", needed)] = QEntry(1.0, 1)
    present = run_episode(task, with_k, SyntheticGenerator(world), SyntheticVerifier(world, 4), cfg)

    from kernelmem.memory import MemoryBank

    without = SharedState(MemoryBank(e for e in world.entries if e.id != needed), cfg.value)
    absent = run_episode(task, without, SyntheticGenerator(world), SyntheticVerifier(world, 4), cfg)
    assert present.first_solve_iteration == 1
    assert absent.first_solve_iteration is None


def test_warm_memory_solves_hard_task_at_first_greedy_iteration():
    spec = WorldSpec(categories=2, p_hit=1.0, p_miss=0.0, overlap_fraction=1.0, required_easy=2, required_hard=2)
    world = build_world(spec, seed=9)
    cfg = sim_config(
        budget_T=5, seed=9, value=ValueConfig(rng_seed=9, epsilon_start=0.0, epsilon_end=0.0),
        retrieval=RetrievalConfig(final_count_N=4, over_retrieval_lambda=len(world.entries)),
    )
    shared = SharedState(world.bank(), cfg.value)
    for k in world.knowledge:
        shared.qtable._values[make_key("draft", k)] = QEntry(1.0, 1)
    for st_ in world.tasks:
        if st_.level == "hard":
            report = run_episode(st_.to_task(), shared, SyntheticGenerator(world), SyntheticVerifier(world, 9), cfg)
            assert report.first_solve_iteration == 1


def test_null_world_modes_indistinguishable():
    spec = WorldSpec(distractors_per_category=0, p_hit=0.5, p_miss=0.5)
    report = run_ablation(spec, trials=5, seed=2, budget_T=6)
    assert report.mean_delta() == 0.0
    assert report.wins() == 5


def test_single_trial_report_byte_identical():
    a = run_ablation(trials=1, seed=3, budget_T=5)
    b = run_ablation(trials=1, seed=3, budget_T=5)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    assert a.to_csv().splitlines()[0] == "trial,mode,iteration,cum_correct"


def test_ablation_summary_round_trip():
    report = run_ablation(trials=2, seed=1, budget_T=4)
    from kernelmem.simenv import AblationReport

    again = AblationReport.from_summary(report.summary())
    assert again.to_csv() == report.to_csv()


def test_transfer_report_shape():
    report = run_transfer(trials=2, seed=0, budget_T=5)
    summary = report.summary()
    assert len(summary["trials"]) == 2
    assert 1 <= report.mean_warm() <= 6 and 1 <= report.mean_scratch() <= 6


def test_simulate_deterministic():
    world = build_world(WorldSpec(categories=2), seed=11)
    a, _ = simulate(world, sim_config(6, 11))
    b, _ = simulate(world, sim_config(6, 11))
    assert [e.to_dict() for e in a.episodes] == [e.to_dict() for e in b.episodes]


def test_simulate_parallel_matches_task_set():
    world = build_world(WorldSpec(categories=2), seed=11)
    report, shared = simulate(world, replace(sim_config(4, 11), parallelism=3))
    assert sorted(e.task_id for e in report.episodes) == sorted(t.id for t in world.tasks)
    assert len(shared.bank) == len(world.entries) + 2 * 4 * len(world.tasks)
