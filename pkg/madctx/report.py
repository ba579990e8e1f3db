"""Aggregate transcript summaries from one or more run directories into tidy CSVs."""
import csv
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

from madctx.exceptions import ConfigurationError
from madctx.schemas import TranscriptSummary

logger = logging.getLogger(__name__)

TRANSCRIPT_SUFFIX = ".transcript.jsonl"


def read_summary(path: Path) -> TranscriptSummary:
    lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines:
        raise ConfigurationError(f"Transcript {path} is empty")
    payload = json.loads(lines[-1])
    if "final_answer" not in payload:
        raise ConfigurationError(f"Transcript {path} has no summary record")
    return TranscriptSummary(**payload)


def collect_summaries(run_dir: Path) -> List[TranscriptSummary]:
    paths = sorted(run_dir.glob(f"*{TRANSCRIPT_SUFFIX}"))
    if not paths:
        raise ConfigurationError(f"No transcripts found in {run_dir}")
    return [read_summary(p) for p in paths]


def _write_csv(path: Path, header: List[str], rows: List[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_report(run_dirs: Sequence, out) -> Dict[str, Path]:
    """Write discrepancy.csv, discrepancy_by_round.csv and accuracy.csv; run ids are directory names."""
    if not run_dirs:
        raise ConfigurationError("report needs at least one run directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    per_problem, by_round, accuracy = [], [], []
    for run_dir in map(Path, run_dirs):
        run_id = run_dir.name
        summaries = collect_summaries(run_dir)
        series_by_round: Dict[int, List[float]] = defaultdict(list)
        for summary in summaries:
            for round_index, value in enumerate(summary.discrepancy_series, start=1):
                per_problem.append([run_id, summary.problem_id, round_index, repr(value)])
                series_by_round[round_index].append(value)
        for round_index in sorted(series_by_round):
            values = series_by_round[round_index]
            by_round.append([run_id, round_index, repr(sum(values) / len(values)), len(values)])
        graded = [s for s in summaries if s.correct is not None]
        correct = sum(1 for s in graded if s.correct)
        rate = repr(correct / len(graded)) if graded else ""
        accuracy.append([run_id, len(graded), correct, rate])
        logger.info("Run %s: %d transcripts, %d/%d correct", run_id, len(summaries), correct, len(graded))

    paths = {
        "discrepancy": out / "discrepancy.csv",
        "discrepancy_by_round": out / "discrepancy_by_round.csv",
        "accuracy": out / "accuracy.csv",
    }
    _write_csv(paths["discrepancy"], ["run_id", "problem_id", "round", "discrepancy"], per_problem)
    _write_csv(paths["discrepancy_by_round"], ["run_id", "round", "mean_discrepancy", "problems"], by_round)
    _write_csv(paths["accuracy"], ["run_id", "problems", "correct", "accuracy"], accuracy)
    return paths
