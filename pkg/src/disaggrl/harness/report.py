"""Curriculum summaries across seeds in the style of the ADR results table."""

from __future__ import annotations

from pathlib import Path

from ..learner.trainer import read_metrics
from .memory import UsageError


def _final(records: list[dict]) -> dict:
    if not records:
        raise UsageError("a run has no metrics records")
    return records[-1]


def report_table2(runs) -> dict:
    """``runs``: metrics files or lists of metric records, one per seed.

    adr_increase  mean final ADR fraction over seeds
    pct_full_adr  fraction of seeds whose final fraction is 1
    sr_at_terminal  mean final success rate over the seeds at fraction 1, and 0
                    when no seed got there
    """
    runs = list(runs)
    if not runs:
        raise UsageError("report needs at least one run")
    finals = [_final(read_metrics(r) if isinstance(r, (str, Path)) else list(r)) for r in runs]
    fractions = [float(f["adr_fraction"]) for f in finals]
    full = [f for f in finals if float(f["adr_fraction"]) >= 1.0]
    return {
        "seeds": len(finals),
        "adr_increase": sum(fractions) / len(fractions),
        "pct_full_adr": len(full) / len(finals),
        "sr_at_terminal": sum(float(f["sr"]) for f in full) / len(full) if full else 0.0,
    }


def format_table2(rep: dict) -> str:
    return (
        f"{'ADR increase':<16}{'% Full ADR':<12}{'SR':<6}\n"
        f"{rep['adr_increase']:<16.2f}{100 * rep['pct_full_adr']:<12.0f}{rep['sr_at_terminal']:<6.2f}"
    )
