"""Training-corpus augmentation with synthetic recommendation dialogues.

Two strategies:

* ``once_aug`` — append the entire synthetic pool to the training split once.
* ``pop_nudge`` — walk the training data in seeded shuffled batches; for each
  anchor dialogue, sample up to k synthetic dialogues whose item is no more
  popular than the anchor's most popular item, weighting draws by item
  popularity. The result is a deterministic plan (batch -> anchor -> sampled
  synthetic ids) that trainers can consume batch-by-batch or as a flat corpus.

Plans are bitwise reproducible: batch order comes from one seeded shuffle and
every (batch, anchor) pair gets its own RNG stream derived from
(seed, batch_index, anchor_position), so generating batches in parallel
cannot change the output. Sequential draws also make sampled sets grow as
prefixes in k, which keeps post-augmentation coverage monotone in k for a
fixed seed.
"""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import stats

from .corpus import Corpus, Dialogue, load_dialogues
from .metrics import initial_item_coverage
from .popularity import PopularityTable

# stream tags keep the shuffle RNG disjoint from per-anchor sampling RNGs
_STREAM_SHUFFLE = 0
_STREAM_ANCHOR = 1


class AugmentError(ValueError):
    """Invalid augmentation input (bad pool, inconsistent plan, ...)."""


class AuditError(RuntimeError):
    """A generated plan violates the popularity filter invariant."""


@dataclass(frozen=True)
class SyntheticPool:
    """Generated single-item dialogues available as augmentation material."""

    dialogues: tuple[Dialogue, ...]
    item_of: dict[str, str]

    @classmethod
    def from_dialogues(cls, dialogues: Sequence[Dialogue]) -> "SyntheticPool":
        """Validate that each dialogue recommends exactly one distinct item."""
        item_of: dict[str, str] = {}
        for d in dialogues:
            if d.provenance != "synthetic":
                raise AugmentError(f"pool dialogue {d.dialogue_id!r} is not synthetic")
            if d.dialogue_id in item_of:
                raise AugmentError(f"pool contains duplicate dialogue_id {d.dialogue_id!r}")
            items = d.item_ids()
            if len(items) != 1:
                raise AugmentError(
                    f"pool dialogue {d.dialogue_id!r} mentions {len(items)} distinct items; "
                    f"exactly one is required"
                )
            item_of[d.dialogue_id] = items[0]
        return cls(dialogues=tuple(dialogues), item_of=item_of)

    def by_id(self) -> dict[str, Dialogue]:
        return {d.dialogue_id: d for d in self.dialogues}

    def __len__(self) -> int:
        return len(self.dialogues)


def load_pool(path: str | Path) -> SyntheticPool:
    return SyntheticPool.from_dialogues(load_dialogues(path))


def pool_digest(pool: SyntheticPool) -> str:
    """Content digest of (dialogue_id, item_id) pairs, order-independent."""
    digest = hashlib.sha256()
    for dialogue_id in sorted(pool.item_of):
        digest.update(f"{dialogue_id}\t{pool.item_of[dialogue_id]}\n".encode("utf-8"))
    return digest.hexdigest()


def anchor_popularity(dialogue: Dialogue, table: PopularityTable) -> float:
    """Popularity of a training dialogue: the max over its items' scores."""
    return max((table.pop_of(i) for i in dialogue.item_ids()), default=0.0)


# ---------------------------------------------------------------------------
# once_aug


def once_aug(train: Corpus, pool: SyntheticPool) -> Corpus:
    """Append every pool dialogue to the training split; other splits untouched."""
    appended = tuple(
        replace(d, split="train", provenance="synthetic") for d in pool.dialogues
    )
    return Corpus(catalog=train.catalog, dialogues=train.dialogues + appended)


# ---------------------------------------------------------------------------
# weighted sampling


def weighted_sample_without_replacement(
    candidates: Sequence,
    weights: Sequence[float],
    k: int,
    rng: np.random.Generator,
) -> list:
    """Draw up to k distinct candidates, each draw proportional to the
    remaining weights; once all remaining weight is zero, draws are uniform.

    Each draw consumes exactly one RNG variate, so the first j draws of a
    k-draw run equal the draws of a j-draw run on the same stream.
    """
    if len(candidates) != len(weights):
        raise AugmentError("candidates and weights must have equal length")
    if any(w < 0 for w in weights):
        raise AugmentError("weights must be non-negative")
    k = min(k, len(candidates))
    remaining = list(range(len(candidates)))
    live_weights = np.asarray(weights, dtype=float)
    chosen: list = []
    for _ in range(k):
        total = float(live_weights.sum())
        if total > 0.0:
            cut = rng.random() * total
            pos = int(np.searchsorted(np.cumsum(live_weights), cut, side="right"))
            pos = min(pos, len(remaining) - 1)
        else:
            pos = int(rng.integers(len(remaining)))
        chosen.append(candidates[remaining[pos]])
        del remaining[pos]
        live_weights = np.delete(live_weights, pos)
    return chosen


# ---------------------------------------------------------------------------
# pop_nudge plans


@dataclass(frozen=True)
class PlanBatch:
    """One training batch: its anchors and the ids sampled per anchor."""

    index: int
    anchor_ids: tuple[str, ...]
    samples: dict[str, tuple[str, ...]]

    def appended_ids(self) -> tuple[str, ...]:
        """Batch-level appendage: per-anchor samples deduplicated in order."""
        seen: dict[str, None] = {}
        for anchor_id in self.anchor_ids:
            for synthetic_id in self.samples.get(anchor_id, ()):
                seen.setdefault(synthetic_id, None)
        return tuple(seen)


@dataclass(frozen=True)
class AugmentationPlan:
    seed: int
    k: int
    batch_size: int
    strategy: str
    pool_digest: str
    batches: tuple[PlanBatch, ...]
    n_anchors_without_candidates: int = 0
    n_anchors_truncated: int = 0

    def appended_ids(self) -> tuple[str, ...]:
        """All synthetic ids the plan appends, deduplicated across batches."""
        seen: dict[str, None] = {}
        for batch in self.batches:
            for synthetic_id in batch.appended_ids():
                seen.setdefault(synthetic_id, None)
        return tuple(seen)


def pop_nudge(
    train: Corpus,
    pool: SyntheticPool,
    table: PopularityTable,
    k: int,
    batch_size: int,
    seed: int,
) -> AugmentationPlan:
    """Build a deterministic batch-by-batch augmentation plan.

    Per anchor dialogue, the candidate set is every pool dialogue whose item
    is at most as popular as the anchor; k candidates are drawn with weights
    proportional to their item popularity (uniform once only zero-weight
    candidates remain). Anchors with no candidates contribute nothing and are
    counted; anchors with fewer than k candidates take them all.
    """
    if k < 1:
        raise AugmentError("k must be >= 1")
    if batch_size < 1:
        raise AugmentError("batch_size must be >= 1")
    if len(pool) == 0:
        raise AugmentError("synthetic pool is empty")
    if seed < 0:
        raise AugmentError("seed must be a non-negative integer")

    train_dialogues = train.split("train")
    order = np.random.default_rng(
        np.random.SeedSequence((seed, _STREAM_SHUFFLE))
    ).permutation(len(train_dialogues))
    shuffled = [train_dialogues[i] for i in order]

    # canonical candidate order: by (item popularity, dialogue_id); a sorted
    # prefix then gives each anchor its candidate set via one bisect
    ranked_pool = sorted(
        pool.dialogues, key=lambda d: (table.pop_of(pool.item_of[d.dialogue_id]), d.dialogue_id)
    )
    pool_pops = [table.pop_of(pool.item_of[d.dialogue_id]) for d in ranked_pool]
    pool_ids = [d.dialogue_id for d in ranked_pool]

    batches: list[PlanBatch] = []
    n_without = 0
    n_truncated = 0
    for batch_index in range(0, len(shuffled), batch_size):
        batch_dialogues = shuffled[batch_index : batch_index + batch_size]
        samples: dict[str, tuple[str, ...]] = {}
        for anchor_position, anchor in enumerate(batch_dialogues):
            cut = bisect_right(pool_pops, anchor_popularity(anchor, table))
            if cut == 0:
                n_without += 1
                samples[anchor.dialogue_id] = ()
                continue
            if cut < k:
                n_truncated += 1
            rng = np.random.default_rng(
                np.random.SeedSequence(
                    (seed, _STREAM_ANCHOR, batch_index // batch_size, anchor_position)
                )
            )
            drawn = weighted_sample_without_replacement(
                pool_ids[:cut], pool_pops[:cut], k, rng
            )
            samples[anchor.dialogue_id] = tuple(drawn)
        batches.append(
            PlanBatch(
                index=batch_index // batch_size,
                anchor_ids=tuple(d.dialogue_id for d in batch_dialogues),
                samples=samples,
            )
        )
    return AugmentationPlan(
        seed=seed,
        k=k,
        batch_size=batch_size,
        strategy="pop_nudge",
        pool_digest=pool_digest(pool),
        batches=tuple(batches),
        n_anchors_without_candidates=n_without,
        n_anchors_truncated=n_truncated,
    )


# ---------------------------------------------------------------------------
# materialization


@dataclass(frozen=True)
class MaterializedBatch:
    index: int
    anchors: tuple[Dialogue, ...]
    appended: tuple[Dialogue, ...]


def _check_plan_references(plan: AugmentationPlan, train: Corpus, pool: SyntheticPool) -> None:
    train_ids = {d.dialogue_id for d in train.split("train")}
    pool_by_id = pool.by_id()
    for batch in plan.batches:
        for anchor_id in batch.anchor_ids:
            if anchor_id not in train_ids:
                raise AugmentError(f"plan references unknown training dialogue {anchor_id!r}")
        for sampled in batch.samples.values():
            for synthetic_id in sampled:
                if synthetic_id not in pool_by_id:
                    raise AugmentError(f"plan references unknown pool dialogue {synthetic_id!r}")


def iter_batches(
    plan: AugmentationPlan, train: Corpus, pool: SyntheticPool
) -> Iterator[MaterializedBatch]:
    """Replay the plan batch by batch, for trainers that consume batches.

    References are validated up front, before the first batch is yielded.
    """
    _check_plan_references(plan, train, pool)
    train_by_id = train.by_id()
    pool_by_id = pool.by_id()

    def generate() -> Iterator[MaterializedBatch]:
        for batch in plan.batches:
            yield MaterializedBatch(
                index=batch.index,
                anchors=tuple(train_by_id[a] for a in batch.anchor_ids),
                appended=tuple(
                    replace(pool_by_id[s], split="train", provenance="synthetic")
                    for s in batch.appended_ids()
                ),
            )

    return generate()


def materialize_flat(plan: AugmentationPlan, train: Corpus, pool: SyntheticPool) -> Corpus:
    """Union every appended synthetic dialogue into the training split once."""
    _check_plan_references(plan, train, pool)
    pool_by_id = pool.by_id()
    appended = tuple(
        replace(pool_by_id[s], split="train", provenance="synthetic")
        for s in plan.appended_ids()
    )
    return Corpus(catalog=train.catalog, dialogues=train.dialogues + appended)


def materialize(
    plan: AugmentationPlan,
    train: Corpus,
    pool: SyntheticPool,
    mode: str = "flat_corpus",
) -> Corpus | Iterator[MaterializedBatch]:
    if mode == "flat_corpus":
        return materialize_flat(plan, train, pool)
    if mode == "batch_stream":
        return iter_batches(plan, train, pool)
    raise AugmentError(f"unknown materialize mode {mode!r}")


def audit_plan(
    plan: AugmentationPlan,
    train: Corpus,
    pool: SyntheticPool,
    table: PopularityTable,
) -> list[str]:
    """Independent filter check: every appended item must be at most as
    popular as its anchor. Returns a list of violations (empty = pass)."""
    violations: list[str] = []
    train_by_id = train.by_id()
    for batch in plan.batches:
        for anchor_id, sampled in batch.samples.items():
            anchor = train_by_id.get(anchor_id)
            if anchor is None:
                violations.append(f"batch {batch.index}: unknown anchor {anchor_id!r}")
                continue
            anchor_pop = anchor_popularity(anchor, table)
            if len(set(sampled)) != len(sampled):
                violations.append(f"batch {batch.index}: anchor {anchor_id!r} has duplicate samples")
            if len(sampled) > plan.k:
                violations.append(
                    f"batch {batch.index}: anchor {anchor_id!r} has {len(sampled)} samples > k"
                )
            for synthetic_id in sampled:
                item_id = pool.item_of.get(synthetic_id)
                if item_id is None:
                    violations.append(
                        f"batch {batch.index}: sample {synthetic_id!r} is not in the pool"
                    )
                    continue
                if table.pop_of(item_id) > anchor_pop:
                    violations.append(
                        f"batch {batch.index}: anchor {anchor_id!r} (pop {anchor_pop:.6f}) "
                        f"was augmented with {synthetic_id!r} "
                        f"(item pop {table.pop_of(item_id):.6f})"
                    )
    return violations


# ---------------------------------------------------------------------------
# plan files


def save_plan(plan: AugmentationPlan, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "record": "header",
            "seed": plan.seed,
            "k": plan.k,
            "batch_size": plan.batch_size,
            "strategy": plan.strategy,
            "pool_digest": plan.pool_digest,
            "n_anchors_without_candidates": plan.n_anchors_without_candidates,
            "n_anchors_truncated": plan.n_anchors_truncated,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for batch in plan.batches:
            record = {
                "record": "batch",
                "index": batch.index,
                "anchors": list(batch.anchor_ids),
                "samples": {a: list(s) for a, s in batch.samples.items()},
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_plan(path: str | Path) -> AugmentationPlan:
    path = Path(path)
    header: dict | None = None
    batches: list[PlanBatch] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            if record.get("record") == "header":
                header = record
            elif record.get("record") == "batch":
                batches.append(
                    PlanBatch(
                        index=int(record["index"]),
                        anchor_ids=tuple(record["anchors"]),
                        samples={a: tuple(s) for a, s in record["samples"].items()},
                    )
                )
            else:
                raise AugmentError(f"{path}:{lineno}: unknown plan record")
    if header is None:
        raise AugmentError(f"{path}: plan file has no header record")
    return AugmentationPlan(
        seed=int(header["seed"]),
        k=int(header["k"]),
        batch_size=int(header["batch_size"]),
        strategy=header["strategy"],
        pool_digest=header["pool_digest"],
        batches=tuple(sorted(batches, key=lambda b: b.index)),
        n_anchors_without_candidates=int(header.get("n_anchors_without_candidates", 0)),
        n_anchors_truncated=int(header.get("n_anchors_truncated", 0)),
    )


# ---------------------------------------------------------------------------
# distribution reporting


def train_frequencies(corpus: Corpus) -> dict[str, int]:
    """Per-catalog-item mention counts over the training split."""
    freq = {item_id: 0 for item_id in corpus.catalog.items}
    for dialogue in corpus.split("train"):
        for turn in dialogue.turns:
            for item_id in turn.item_ids():
                if item_id in freq:
                    freq[item_id] += 1
    return freq


@dataclass(frozen=True)
class LongtailReport:
    """Frequency-distribution comparison between two corpora (same catalog)."""

    freq_before: dict[str, int]
    freq_after: dict[str, int]
    rank_correlation: float
    coverage_before: float
    coverage_after: float
    n_items_gained: int
    max_frequency_drop: int
    curve_before: tuple[int, ...]
    curve_after: tuple[int, ...]


def longtail_report(before: Corpus, after: Corpus) -> LongtailReport:
    if set(before.catalog.items) != set(after.catalog.items):
        raise AugmentError("longtail_report requires corpora over the same catalog")
    freq_before = train_frequencies(before)
    freq_after = train_frequencies(after)
    items = list(freq_before)
    x = [freq_before[i] for i in items]
    y = [freq_after[i] for i in items]
    if x == y:
        rank_correlation = 1.0
    else:
        rank_correlation = float(stats.spearmanr(x, y).statistic)
    return LongtailReport(
        freq_before=freq_before,
        freq_after=freq_after,
        rank_correlation=rank_correlation,
        coverage_before=initial_item_coverage(before),
        coverage_after=initial_item_coverage(after),
        n_items_gained=sum(1 for i in items if freq_before[i] == 0 and freq_after[i] > 0),
        max_frequency_drop=max((freq_before[i] - freq_after[i] for i in items), default=0),
        curve_before=tuple(sorted(x, reverse=True)),
        curve_after=tuple(sorted(y, reverse=True)),
    )
