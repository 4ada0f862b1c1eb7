"""Command-line driver.

Exit codes: 0 success, 1 other engine error, 2 configuration error,
3 malformed memory file, 4 infrastructure failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import RunConfig, check_paths, load_config
from .errors import ConfigError, InfraError, KernelMemError, MemoryFormatError
from .generator import PromptTemplates, RemoteChatGenerator, ScriptedGenerator
from .memory import MemoryBank, load, persist
from .metrics import compute_suite_metrics
from .orchestrator import (
    EpisodeReport,
    Mode,
    SharedState,
    SuiteReport,
    run_pass_at_k,
    run_refinement_baseline,
    run_suite,
)
from .reporting import dumps, metrics_from_dir, suite_csv, write_suite
from .simenv import AblationReport, build_world, run_ablation, run_transfer, simulate
from .task import Task
from .valuation import QTable, Stage, make_key
from .verifier import HackRuleSet, SubprocessBackend, Timeouts, Verifier, ascend_rules

log = logging.getLogger("kernelmem")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def load_tasks(path: str | Path) -> list[Task]:
    """A JSON array of task objects, or one object per line."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    try:
        if stripped.startswith("["):
            rows = json.loads(stripped)
        else:
            rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return [Task.from_dict(row) for row in rows]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read tasks from {path}: {exc}", ["paths.tasks"]) from None


def build_generator(cfg: RunConfig):
    g = cfg.generator
    templates = PromptTemplates.from_dir(g.templates_dir) if g.templates_dir else PromptTemplates()
    if g.kind == "scripted":
        table = {}
        default = g.default
        if g.script:
            data = json.loads(Path(g.script).read_text(encoding="utf-8"))
            default = data.get("default", default)
            for row in data.get("entries", []):
                table[(row["task_id"], row["stage"], tuple(row.get("context_ids", ())))] = row["text"]
        return ScriptedGenerator(table, default=default)
    return RemoteChatGenerator(
        model=g.model,
        endpoint_env=g.endpoint_env,
        api_key_env=g.api_key_env,
        temperature=g.temperature,
        seed=g.seed,
        timeout_s=g.timeout_s,
        templates=templates,
        max_feedback_chars=g.max_feedback_chars,
        char_budget=g.char_budget,
    )


def build_verifier(cfg: RunConfig) -> Verifier:
    v = cfg.verifier
    if not v.command:
        raise ConfigError("verifier.command must name the backend executable", ["verifier.command"])
    rules = ascend_rules() if v.rules == "ascend" else HackRuleSet()
    return Verifier(
        SubprocessBackend(v.command, wall_timeout_s=v.wall_timeout_s),
        rules,
        Timeouts(correctness_s=v.correctness_timeout_s, call_ceiling_s=v.wall_timeout_s),
        auditor_policy=v.auditor_policy,
    )


def _open_shared(cfg: RunConfig) -> SharedState:
    bank = load(cfg.paths.bank) if cfg.paths.bank and Path(cfg.paths.bank).exists() else MemoryBank()
    shared = SharedState(bank, replace(cfg.value, rng_seed=cfg.seed))
    if cfg.paths.qtable and Path(cfg.paths.qtable).exists():
        shared.qtable = QTable.load(
            cfg.paths.qtable, step_mode=cfg.value.step_mode, alpha=cfg.value.alpha, q_init=cfg.value.q_init
        )
    return shared


def _save_shared(cfg: RunConfig, shared: SharedState) -> None:
    if cfg.paths.bank:
        persist(shared.bank, cfg.paths.bank)
    if cfg.paths.qtable:
        shared.qtable.save(cfg.paths.qtable)


def _report_dir(cfg: RunConfig, override: str | None) -> Path:
    return Path(override or cfg.paths.report_dir)


def _config_with(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_with(args)
    check_paths(cfg, need_tasks=True)
    tasks = load_tasks(cfg.paths.tasks)
    shared = _open_shared(cfg)
    suite = run_suite(
        tasks, shared, build_generator(cfg), build_verifier(cfg), cfg.orchestrator(),
        order_by_level=cfg.experiment.order_by_level,
    )
    write_suite(_report_dir(cfg, args.out), suite)
    _save_shared(cfg, shared)
    _print_summary(suite)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config_with(args)
    world = build_world(cfg.world, cfg.seed)
    suite, shared = simulate(world, cfg.sim_orchestrator(), order_by_level=cfg.experiment.order_by_level)
    write_suite(_report_dir(cfg, args.out), suite, extra={"seed": cfg.seed, "world": cfg.world.to_dict()})
    _save_shared(cfg, shared)
    _print_summary(suite)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config_with(args)
    out = _report_dir(cfg, args.out)
    out.mkdir(parents=True, exist_ok=True)
    trials = args.trials or cfg.experiment.trials
    if args.kind == "transfer":
        report = run_transfer(cfg.world, trials=trials, seed=cfg.seed, budget_T=cfg.budget_T)
        (out / "transfer.json").write_text(dumps(report.summary()), encoding="utf-8")
        print(
            f"warm<=scratch in {report.earlier_or_equal()}/{trials} trials; "
            f"mean first solve warm={report.mean_warm():.3f} scratch={report.mean_scratch():.3f}"
        )
        return 0
    ablation = run_ablation(cfg.world, trials=trials, seed=cfg.seed, budget_T=cfg.budget_T)
    (out / "ablation.csv").write_text(ablation.to_csv(), encoding="utf-8")
    (out / "ablation.json").write_text(dumps(ablation.summary()), encoding="utf-8")
    print(f"value_driven>=heuristic in {ablation.wins()}/{trials} trials; mean delta {ablation.mean_delta():+.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.report_dir)
    if not root.is_dir():
        raise ConfigError(f"report directory not found: {root}", ["report_dir"])
    ablation_json = root / "ablation.json"
    if ablation_json.exists():
        report = AblationReport.from_summary(json.loads(ablation_json.read_text(encoding="utf-8")))
        sys.stdout.write(report.to_csv())
        return 0
    if (root / "episodes").is_dir():
        sys.stdout.write(suite_csv(metrics_from_dir(root)))
        return 0
    raise ConfigError(f"{root} holds neither episodes/ nor ablation.json", ["report_dir"])


def cmd_memory_ls(args: argparse.Namespace) -> int:
    bank = load(args.bank)
    table = QTable.load(args.qtable) if args.qtable else QTable()
    print("\t".join(("id", "kind", "tags", "q_draft", "q_refine")))
    for entry in bank.snapshot():
        q1 = table.q(make_key(Stage.DRAFT, entry.id))
        q2 = table.q(make_key(Stage.REFINE, entry.id))
        print("\t".join((entry.id, entry.kind.value, ",".join(sorted(entry.tags)), f"{q1:.4f}", f"{q2:.4f}")))
    return 0


def cmd_memory_show(args: argparse.Namespace) -> int:
    bank = load(args.bank)
    if args.entry_id not in bank:
        print(f"no entry {args.entry_id!r}", file=sys.stderr)
        return 1
    sys.stdout.write(dumps(bank.get(args.entry_id).to_dict()))
    return 0


def _run_baseline(args: argparse.Namespace, mode: Mode) -> int:
    cfg = _config_with(args)
    check_paths(cfg, need_tasks=True)
    tasks = load_tasks(cfg.paths.tasks)
    generator, verifier = build_generator(cfg), build_verifier(cfg)
    orch = replace(cfg.orchestrator(), mode=mode)
    episodes: list[EpisodeReport] = []
    if mode is Mode.PASS_AT_K:
        k = args.k or cfg.pass_k or cfg.budget_T
        episodes = [run_pass_at_k(task, generator, verifier, k, orch) for task in tasks]
    else:
        bank = _open_shared(cfg).bank
        episodes = [run_refinement_baseline(task, bank, generator, verifier, orch) for task in tasks]
    episodes.sort(key=lambda e: e.task_id)
    suite = SuiteReport(tuple(episodes), compute_suite_metrics(episodes), mode.value)
    write_suite(_report_dir(cfg, args.out), suite)
    _print_summary(suite)
    return 0


def _print_summary(suite: SuiteReport) -> None:
    m = suite.metrics
    print(f"mode={suite.mode} tasks={len(suite.episodes)} CR={m.final_cr:.3f} Acc={m.final_acc:.3f}")
    if m.speedup_summary is not None:
        s = m.speedup_summary
        print(f"speedup median={s.median:.3f} IQR=({s.q1:.3f}, {s.q3:.3f})")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernelmem", description="Value-driven memory engine for kernel synthesis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="override paths.report_dir")
        return p

    with_config(sub.add_parser("run", help="run a task suite")).set_defaults(func=cmd_run)
    with_config(sub.add_parser("simulate", help="run the synthetic environment")).set_defaults(func=cmd_simulate)
    ablate = with_config(sub.add_parser("ablate", help="paired synthetic comparisons"))
    ablate.add_argument("--kind", choices=("retrieval", "transfer"), default="retrieval")
    ablate.add_argument("--trials", type=int)
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("report", help="print CSV summaries from a report directory")
    report.add_argument("report_dir")
    report.set_defaults(func=cmd_report)

    memory = sub.add_parser("memory", help="inspect a memory bank")
    msub = memory.add_subparsers(dest="memory_command", required=True)
    ls = msub.add_parser("ls", help="list entries with kind, tags and Q values")
    ls.add_argument("bank")
    ls.add_argument("--qtable")
    ls.set_defaults(func=cmd_memory_ls)
    show = msub.add_parser("show", help="print one entry")
    show.add_argument("bank")
    show.add_argument("entry_id")
    show.set_defaults(func=cmd_memory_show)

    baseline = sub.add_parser("baseline", help="baseline policies")
    bsub = baseline.add_subparsers(dest="baseline_command", required=True)
    pk = with_config(bsub.add_parser("pass-at-k", help="k stateless generations per task"))
    pk.add_argument("--k", type=int)
    pk.set_defaults(func=lambda a: _run_baseline(a, Mode.PASS_AT_K))
    with_config(bsub.add_parser("refine", help="within-task refinement loop")).set_defaults(
        func=lambda a: _run_baseline(a, Mode.REFINEMENT_BASELINE)
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        keys = f" (keys: {', '.join(exc.keys)})" if exc.keys else ""
        print(f"config error: {exc}{keys}", file=sys.stderr)
        return 2
    except MemoryFormatError as exc:
        print(f"memory file error: {exc}", file=sys.stderr)
        return 3
    except InfraError as exc:
        print(f"infrastructure error ({exc.kind}): {exc}", file=sys.stderr)
        return 4
    except KernelMemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
