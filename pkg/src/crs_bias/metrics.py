"""Bias and rank-accuracy metrics over ranked recommendation runs.

A run pairs each evaluated (dialogue, turn) with the model's ranked item
list and the ground-truth targets. This module scores:

* initial item coverage — fraction of the catalog that training dialogues touch;
* popularity bias — position-discounted popular-item utility times the
  popular fraction of the list;
* cross-episode popularity — popularity bias scaled by how strongly the
  list's popularity profile correlates with the previous episode's final
  recommendations (|Pearson|);
* intent-oriented popularity gap — |pop(target) - popularity bias| averaged
  over targets;
* Hit/NDCG/MRR at configurable cutoffs.

Entries that a metric cannot score (no targets, first episode, empty list,
...) are skipped and the skip reasons are disclosed in the report; means and
standard deviations cover the scored entries only.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import fsum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Corpus, CorpusError
from .popularity import PopularityTable

DEFAULT_CUTOFFS = (10, 50)


@dataclass(frozen=True)
class Skipped:
    """Marker result for an entry a metric cannot score, with the reason why."""

    reason: str


@dataclass(frozen=True)
class RunEntry:
    """One evaluated recommendation turn of a model run."""

    dialogue_id: str
    turn_index: int
    episode_index: int
    ranked_item_ids: tuple[str, ...]
    target_item_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(set(self.ranked_item_ids)) != len(self.ranked_item_ids):
            raise CorpusError(
                f"run entry ({self.dialogue_id!r}, turn {self.turn_index}): "
                f"ranked list contains duplicate item ids"
            )


@dataclass(frozen=True)
class RankedRun:
    """A model's ranked lists for a set of recommendation turns."""

    model_name: str
    entries: tuple[RunEntry, ...]
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS


def load_run(
    path: str | Path,
    model_name: str | None = None,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> RankedRun:
    """Read a run file: one record per line with dialogue_id, turn_index,
    episode_index, ranked, targets."""
    path = Path(path)
    entries: list[RunEntry] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc.msg}") from exc
            try:
                entry = RunEntry(
                    dialogue_id=str(record["dialogue_id"]),
                    turn_index=int(record["turn_index"]),
                    episode_index=int(record["episode_index"]),
                    ranked_item_ids=tuple(str(i) for i in record["ranked"]),
                    target_item_ids=tuple(str(i) for i in record["targets"]),
                )
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: run record missing {exc.args[0]!r}") from exc
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            entries.append(entry)
    return RankedRun(
        model_name=model_name or path.stem,
        entries=tuple(entries),
        cutoffs=tuple(cutoffs),
    )


# ---------------------------------------------------------------------------
# corpus-level coverage


def initial_item_coverage(corpus: Corpus) -> float:
    """Unique catalog items appearing in training dialogues / catalog size."""
    seen: set[str] = set()
    for dialogue in corpus.split("train"):
        for item_id in dialogue.item_ids():
            if item_id in corpus.catalog:
                seen.add(item_id)
    return len(seen) / len(corpus.catalog)


# ---------------------------------------------------------------------------
# popularity-oriented scores (per ranked list)


def _rank_discount(rank: int, log_base: float) -> float:
    # rank is 1-based; the top item always contributes 1/(log(1)+1) = 1.
    return math.log(rank) / math.log(log_base) + 1.0


def ranking_utility(
    ranked: Sequence[str],
    popular_set: frozenset[str] | set[str],
    log_base: float = math.e,
) -> float:
    """Position-discounted count of popular items: sum of 1/(log(rank)+1)."""
    return fsum(
        1.0 / _rank_discount(rank, log_base)
        for rank, item_id in enumerate(ranked, start=1)
        if item_id in popular_set
    )


def popularity_coverage(ranked: Sequence[str], popular_set: frozenset[str] | set[str]) -> float:
    """Fraction of the ranked list drawn from the popular set (0 for an empty list)."""
    if not ranked:
        return 0.0
    return sum(1 for item_id in ranked if item_id in popular_set) / len(ranked)


def popularity_bias(
    ranked: Sequence[str],
    popular_set: frozenset[str] | set[str],
    log_base: float = math.e,
) -> float:
    """Ranking utility times popularity coverage."""
    return ranking_utility(ranked, popular_set, log_base) * popularity_coverage(ranked, popular_set)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation, defined as 0.0 when either side has zero variance."""
    n = len(x)
    if n != len(y):
        raise ValueError("pearson requires sequences of equal length")
    if n < 2:
        raise ValueError("pearson requires at least 2 points")
    mean_x = fsum(x) / n
    mean_y = fsum(y) / n
    sxy = fsum((a - mean_x) * (b - mean_y) for a, b in zip(x, y))
    sxx = fsum((a - mean_x) ** 2 for a in x)
    syy = fsum((b - mean_y) ** 2 for b in y)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    # clamp rounding spill so |rho| <= 1 holds exactly
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def cross_episode_popularity(
    current: RunEntry,
    previous_episode_entries: Sequence[RunEntry],
    table: PopularityTable,
    log_base: float = math.e,
) -> float | Skipped:
    """Popularity bias of the current list, scaled by |Pearson| between its
    popularity profile and the previous episode's final recommendations.

    Popularity vectors are aligned by rank position and truncated to the
    shorter list; the comparator is the previous episode's last
    recommendation turn. First-episode entries and truncations shorter than
    2 are skipped; zero-variance profiles correlate as 0.
    """
    if current.episode_index == 0:
        return Skipped("first_episode")
    if not previous_episode_entries:
        return Skipped("no_previous_episode")
    if not current.ranked_item_ids:
        return Skipped("empty_ranked_list")
    previous = max(previous_episode_entries, key=lambda e: e.turn_index)
    length = min(len(current.ranked_item_ids), len(previous.ranked_item_ids))
    if length < 2:
        return Skipped("insufficient_overlap")
    cur_pops = [table.pop_of(i) for i in current.ranked_item_ids[:length]]
    prev_pops = [table.pop_of(i) for i in previous.ranked_item_ids[:length]]
    rho = pearson(cur_pops, prev_pops)
    return popularity_bias(current.ranked_item_ids, table.popular_set, log_base) * abs(rho)


def intent_oriented_popularity(
    entry: RunEntry,
    table: PopularityTable,
    log_base: float = math.e,
) -> float | Skipped:
    """Gap between target popularity and the list's popularity bias,
    |pop(target) - pi*P|, averaged when a turn has several targets."""
    if not entry.target_item_ids:
        return Skipped("no_targets")
    if not entry.ranked_item_ids:
        return Skipped("empty_ranked_list")
    bias = popularity_bias(entry.ranked_item_ids, table.popular_set, log_base)
    gaps = [abs(table.pop_of(t) - bias) for t in entry.target_item_ids]
    return fsum(gaps) / len(gaps)


# ---------------------------------------------------------------------------
# rank-accuracy metrics


def rank_metrics(
    entry: RunEntry,
    cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
) -> dict[str, float] | Skipped:
    """Hit, NDCG (binary relevance, log2 discount) and MRR at each cutoff.

    NDCG normalizes by the full ideal ranking (all targets at the top,
    untruncated), so the normalizer does not change with the cutoff and all
    three metrics are monotone non-decreasing in k.
    """
    targets = set(entry.target_item_ids)
    if not targets:
        return Skipped("no_targets")
    idcg = fsum(1.0 / math.log2(rank + 1) for rank in range(1, len(targets) + 1))
    out: dict[str, float] = {}
    for k in cutoffs:
        top = entry.ranked_item_ids[:k]
        hit_ranks = [rank for rank, item_id in enumerate(top, start=1) if item_id in targets]
        dcg = fsum(1.0 / math.log2(rank + 1) for rank in hit_ranks)
        out[f"hit@{k}"] = 1.0 if hit_ranks else 0.0
        out[f"ndcg@{k}"] = dcg / idcg
        out[f"mrr@{k}"] = 1.0 / hit_ranks[0] if hit_ranks else 0.0
    return out


# ---------------------------------------------------------------------------
# run-level evaluation


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    n: int
    n_skipped: int
    skip_reasons: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class BiasReport:
    """Per-metric mean/std over scored entries, with skip accounting."""

    model_name: str
    n_entries: int
    metrics: dict[str, MetricSummary]

    def to_records(self) -> list[dict]:
        return [
            {
                "model": self.model_name,
                "metric": name,
                "mean": summary.mean,
                "std": summary.std,
                "n": summary.n,
                "n_skipped": summary.n_skipped,
                "skip_reasons": summary.skip_reasons,
            }
            for name, summary in self.metrics.items()
        ]


def _validate_join(run: RankedRun, corpus: Corpus) -> None:
    by_id = corpus.by_id()
    problems: list[str] = []
    for entry in run.entries:
        dialogue = by_id.get(entry.dialogue_id)
        if dialogue is None:
            problems.append(f"unknown dialogue {entry.dialogue_id!r}")
            continue
        if not 0 <= entry.turn_index < len(dialogue.turns):
            problems.append(
                f"dialogue {entry.dialogue_id!r}: turn_index {entry.turn_index} out of range"
            )
            continue
        episodes = dialogue.episode_index_per_turn
        if episodes is not None and episodes[entry.turn_index] != entry.episode_index:
            problems.append(
                f"dialogue {entry.dialogue_id!r} turn {entry.turn_index}: episode_index "
                f"{entry.episode_index} does not match corpus segmentation "
                f"({episodes[entry.turn_index]})"
            )
    if problems:
        shown = "; ".join(sorted(set(problems))[:20])
        raise CorpusError(f"run {run.model_name!r} does not join against corpus: {shown}")


def _score_entry(
    entry: RunEntry,
    previous_by_key: Mapping[tuple[str, int], list[RunEntry]],
    table: PopularityTable,
    cutoffs: tuple[int, ...],
    log_base: float,
) -> dict[str, float | Skipped]:
    scores: dict[str, float | Skipped] = {}
    if entry.ranked_item_ids:
        scores["pop_bias"] = popularity_bias(entry.ranked_item_ids, table.popular_set, log_base)
    else:
        scores["pop_bias"] = Skipped("empty_ranked_list")
    previous = previous_by_key.get((entry.dialogue_id, entry.episode_index - 1), [])
    scores["cep"] = cross_episode_popularity(entry, previous, table, log_base)
    scores["uiop"] = intent_oriented_popularity(entry, table, log_base)

    ranked_scores = rank_metrics(entry, cutoffs)
    if isinstance(ranked_scores, Skipped):
        for k in cutoffs:
            for prefix in ("hit", "ndcg", "mrr"):
                scores[f"{prefix}@{k}"] = ranked_scores
    else:
        scores.update(ranked_scores)
    return scores


def _metric_order(cutoffs: tuple[int, ...]) -> list[str]:
    order = ["pop_bias", "cep", "uiop"]
    for prefix in ("hit", "ndcg", "mrr"):
        order.extend(f"{prefix}@{k}" for k in cutoffs)
    return order


def evaluate_run(
    run: RankedRun,
    corpus: Corpus,
    table: PopularityTable,
    *,
    log_base: float = math.e,
    n_workers: int = 1,
) -> BiasReport:
    """Score every entry and aggregate mean/std per metric.

    Per-entry scoring is pure, so it may fan out over ``n_workers`` threads;
    aggregation always runs in entry order with exact (fsum) summation, so
    parallel and serial evaluations produce identical reports. Metrics with
    zero scored entries are omitted from the report rather than reported as 0.
    """
    _validate_join(run, corpus)

    previous_by_key: dict[tuple[str, int], list[RunEntry]] = {}
    for entry in run.entries:
        previous_by_key.setdefault((entry.dialogue_id, entry.episode_index), []).append(entry)

    def score(entry: RunEntry) -> dict[str, float | Skipped]:
        return _score_entry(entry, previous_by_key, table, run.cutoffs, log_base)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            per_entry = list(pool.map(score, run.entries))
    else:
        per_entry = [score(entry) for entry in run.entries]

    metrics: dict[str, MetricSummary] = {}
    for name in _metric_order(run.cutoffs):
        values: list[float] = []
        skip_reasons: dict[str, int] = {}
        for scores in per_entry:
            result = scores[name]
            if isinstance(result, Skipped):
                skip_reasons[result.reason] = skip_reasons.get(result.reason, 0) + 1
            else:
                values.append(result)
        if not values:
            continue
        mean = fsum(values) / len(values)
        std = math.sqrt(fsum((v - mean) ** 2 for v in values) / len(values))
        metrics[name] = MetricSummary(
            mean=mean,
            std=std,
            n=len(values),
            n_skipped=sum(skip_reasons.values()),
            skip_reasons=skip_reasons,
        )
    return BiasReport(model_name=run.model_name, n_entries=len(run.entries), metrics=metrics)


# ---------------------------------------------------------------------------
# report rendering


def save_report(report: BiasReport, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in report.to_records():
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def load_report_records(path: str | Path) -> list[dict]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_report_table(reports: Iterable[BiasReport]) -> str:
    """Aligned-column text table: one row per (model, metric)."""
    rows = [("model", "metric", "mean", "std", "n", "skipped")]
    for report in reports:
        for name, summary in report.metrics.items():
            rows.append(
                (
                    report.model_name,
                    name,
                    f"{summary.mean:.4f}",
                    f"{summary.std:.4f}",
                    str(summary.n),
                    str(summary.n_skipped),
                )
            )
    widths = [max(len(row[col]) for row in rows) for col in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)
