"""Deterministic report files.

Layout under a report directory::

    suite.json            suite metrics (CR/Acc curves, per-task speedups)
    suite.csv             iteration, cumulative_CR, cumulative_Acc
    episodes/<task>.json  per-iteration records for one task
    ablation.csv/.json    written by the ablation driver instead

JSON is written with sorted keys and a fixed indent so that identical runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Sequence

from .metrics import SUITE_CSV_HEADER, SuiteMetrics, compute_suite_metrics
from .orchestrator import EpisodeReport, SuiteReport


def dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def suite_csv(metrics: SuiteMetrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUITE_CSV_HEADER)
    for t, cr, acc in metrics.csv_rows():
        writer.writerow([t, f"{cr:.6f}", f"{acc:.6f}"])
    return buf.getvalue()


def _safe_name(task_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in task_id)


def write_suite(report_dir: str | Path, suite: SuiteReport, extra: dict[str, Any] | None = None) -> list[Path]:
    root = Path(report_dir)
    episodes_dir = root / "episodes"
    episodes_dir.mkdir(parents=True, exist_ok=True)
    written = []
    summary = suite.to_dict()
    if extra:
        summary.update(extra)
    for name, text in (("suite.json", dumps(summary)), ("suite.csv", suite_csv(suite.metrics))):
        path = root / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    for episode in suite.episodes:
        path = episodes_dir / f"{_safe_name(episode.task_id)}.json"
        path.write_text(dumps(episode.to_dict()), encoding="utf-8")
        written.append(path)
    return written


def read_episodes(report_dir: str | Path) -> list[EpisodeReport]:
    episodes_dir = Path(report_dir) / "episodes"
    return [
        EpisodeReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in sorted(episodes_dir.glob("*.json"))
    ]


def metrics_from_dir(report_dir: str | Path) -> SuiteMetrics:
    """Recompute suite metrics from the per-episode records alone."""
    episodes: Sequence[EpisodeReport] = read_episodes(report_dir)
    return compute_suite_metrics(episodes)
