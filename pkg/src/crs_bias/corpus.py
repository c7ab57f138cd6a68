"""Data model and file I/O for conversational recommendation corpora.

A corpus is a catalog of recommendable items plus a set of multi-turn
dialogues. Dialogues carry per-turn item mentions (the ``@<item_id>`` token
convention inside utterance text, with the authoritative id list in each
turn record) and per-turn ground-truth target items. Dialogues can be
segmented into "episodes": spans that end when a recommendation is accepted,
i.e. when a turn carries a non-empty target list.

File formats (UTF-8, one JSON record per line):

* corpus file — ``{"dialogue_id", "split", "turns": [{"speaker", "text",
  "items", "targets"}], "episodes"?, "provenance"?}``
* catalog file — ``{"item_id", "name"}``
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

SPEAKERS = frozenset({"seeker", "recommender"})
SPLITS = frozenset({"train", "valid", "test"})
PROVENANCES = frozenset({"original", "synthetic"})
EPISODE_POLICIES = frozenset({"explicit", "accept_boundary"})


class CorpusError(ValueError):
    """Malformed corpus input or a violated corpus invariant."""


def mention_token(item_id: str) -> str:
    """Token used to mark an item mention inside utterance text."""
    return f"@{item_id}"


@dataclass(frozen=True)
class ItemCatalog:
    """The full item universe: item_id -> display name."""

    items: dict[str, str]

    def __post_init__(self) -> None:
        if not self.items:
            raise CorpusError("catalog is empty")
        for item_id in self.items:
            if not item_id:
                raise CorpusError("catalog contains an empty item_id")

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.items

    def __len__(self) -> int:
        return len(self.items)

    def name_of(self, item_id: str) -> str:
        return self.items[item_id]


@dataclass(frozen=True)
class Turn:
    """One utterance: who spoke, the text, and item ids mentioned/accepted."""

    speaker: str
    text: str
    mentioned_item_ids: tuple[str, ...] = ()
    target_item_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.speaker not in SPEAKERS:
            raise CorpusError(f"unknown speaker {self.speaker!r}")

    def item_ids(self) -> tuple[str, ...]:
        """Unique item ids touched by this turn (mentions first, then targets)."""
        seen: dict[str, None] = {}
        for item_id in self.mentioned_item_ids + self.target_item_ids:
            seen.setdefault(item_id, None)
        return tuple(seen)


@dataclass(frozen=True)
class Dialogue:
    """A multi-turn conversation, optionally segmented into episodes.

    ``episode_index_per_turn`` is None until segmentation assigns indices
    (or the source file provides them). When present it must start at 0 and
    only ever step by +1.
    """

    dialogue_id: str
    turns: tuple[Turn, ...]
    split: str = "train"
    episode_index_per_turn: tuple[int, ...] | None = None
    provenance: str = "original"

    def __post_init__(self) -> None:
        if not self.dialogue_id:
            raise CorpusError("dialogue_id must be non-empty")
        if not self.turns:
            raise CorpusError(f"dialogue {self.dialogue_id!r} has no turns")
        if self.split not in SPLITS:
            raise CorpusError(f"dialogue {self.dialogue_id!r}: unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise CorpusError(
                f"dialogue {self.dialogue_id!r}: unknown provenance {self.provenance!r}"
            )
        episodes = self.episode_index_per_turn
        if episodes is not None:
            if len(episodes) != len(self.turns):
                raise CorpusError(
                    f"dialogue {self.dialogue_id!r}: {len(episodes)} episode indices "
                    f"for {len(self.turns)} turns"
                )
            if episodes[0] != 0:
                raise CorpusError(f"dialogue {self.dialogue_id!r}: episodes must start at 0")
            for prev, cur in zip(episodes, episodes[1:]):
                if cur - prev not in (0, 1):
                    raise CorpusError(
                        f"dialogue {self.dialogue_id!r}: episode indices must be "
                        f"non-decreasing with steps of at most 1"
                    )

    def item_ids(self) -> tuple[str, ...]:
        """Unique item ids across all turns, in first-appearance order."""
        seen: dict[str, None] = {}
        for turn in self.turns:
            for item_id in turn.item_ids():
                seen.setdefault(item_id, None)
        return tuple(seen)

    def n_episodes(self) -> int:
        if self.episode_index_per_turn is None:
            raise CorpusError(f"dialogue {self.dialogue_id!r} has no episode indices")
        return self.episode_index_per_turn[-1] + 1


@dataclass(frozen=True)
class Corpus:
    """An immutable catalog + dialogue collection, safe to share across readers."""

    catalog: ItemCatalog
    dialogues: tuple[Dialogue, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for d in self.dialogues:
            if d.dialogue_id in seen:
                raise CorpusError(f"duplicate dialogue_id {d.dialogue_id!r}")
            seen.add(d.dialogue_id)

    def split(self, name: str) -> tuple[Dialogue, ...]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return tuple(d for d in self.dialogues if d.split == name)

    def by_id(self) -> dict[str, Dialogue]:
        return {d.dialogue_id: d for d in self.dialogues}


@dataclass
class LoadSummary:
    """What the loader saw: sizes plus unknown-mention accounting.

    Unknown item ids (mentions or targets absent from the catalog) are kept
    in the loaded dialogues and reported here, never silently dropped.
    """

    n_dialogues: int = 0
    n_turns: int = 0
    dialogues_per_split: Counter = field(default_factory=Counter)
    n_unknown_mentions: int = 0
    unknown_item_ids: Counter = field(default_factory=Counter)


# ---------------------------------------------------------------------------
# line-delimited I/O


def _read_records(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed record: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: record is not an object")
            yield lineno, record


def load_catalog(path: str | Path) -> ItemCatalog:
    path = Path(path)
    items: dict[str, str] = {}
    for lineno, record in _read_records(path):
        try:
            item_id = record["item_id"]
            name = record["name"]
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: catalog record missing {exc.args[0]!r}") from exc
        if item_id in items:
            raise CorpusError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
        items[str(item_id)] = str(name)
    if not items:
        raise CorpusError(f"{path}: catalog is empty")
    return ItemCatalog(items)


def _turn_from_record(record: dict, where: str) -> Turn:
    for key in ("speaker", "text", "items", "targets"):
        if key not in record:
            raise CorpusError(f"{where}: turn record missing {key!r}")
    return Turn(
        speaker=record["speaker"],
        text=str(record["text"]),
        mentioned_item_ids=tuple(str(i) for i in record["items"]),
        target_item_ids=tuple(str(i) for i in record["targets"]),
    )


def dialogue_from_record(record: dict, where: str = "<record>") -> Dialogue:
    for key in ("dialogue_id", "split", "turns"):
        if key not in record:
            raise CorpusError(f"{where}: record missing {key!r}")
    turns_raw = record["turns"]
    if not isinstance(turns_raw, list) or not turns_raw:
        raise CorpusError(f"{where}: 'turns' must be a non-empty array")
    turns = tuple(_turn_from_record(t, where) for t in turns_raw)
    episodes = record.get("episodes")
    try:
        return Dialogue(
            dialogue_id=str(record["dialogue_id"]),
            turns=turns,
            split=record["split"],
            episode_index_per_turn=tuple(int(e) for e in episodes) if episodes is not None else None,
            provenance=record.get("provenance", "original"),
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def dialogue_to_record(dialogue: Dialogue) -> dict:
    record: dict = {
        "dialogue_id": dialogue.dialogue_id,
        "split": dialogue.split,
        "provenance": dialogue.provenance,
        "turns": [
            {
                "speaker": t.speaker,
                "text": t.text,
                "items": list(t.mentioned_item_ids),
                "targets": list(t.target_item_ids),
            }
            for t in dialogue.turns
        ],
    }
    if dialogue.episode_index_per_turn is not None:
        record["episodes"] = list(dialogue.episode_index_per_turn)
    return record


def load_dialogues(path: str | Path) -> list[Dialogue]:
    path = Path(path)
    return [dialogue_from_record(record, f"{path}:{lineno}") for lineno, record in _read_records(path)]


def load_corpus(corpus_path: str | Path, catalog_path: str | Path) -> tuple[Corpus, LoadSummary]:
    """Load and validate a corpus; unknown mentions are counted, not dropped."""
    catalog = load_catalog(catalog_path)
    dialogues = load_dialogues(corpus_path)
    corpus = Corpus(catalog=catalog, dialogues=tuple(dialogues))

    summary = LoadSummary(n_dialogues=len(dialogues))
    for d in dialogues:
        summary.dialogues_per_split[d.split] += 1
        summary.n_turns += len(d.turns)
        for turn in d.turns:
            for item_id in turn.item_ids():
                if item_id not in catalog:
                    summary.n_unknown_mentions += 1
                    summary.unknown_item_ids[item_id] += 1
    return corpus, summary


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    save_dialogues(corpus.dialogues, path)


def save_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(dialogue_to_record(d), ensure_ascii=False) + "\n")


def save_catalog(catalog: ItemCatalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for item_id, name in catalog.items.items():
            fh.write(json.dumps({"item_id": item_id, "name": name}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# episode segmentation


def segment_episodes(dialogue: Dialogue, policy: str = "accept_boundary") -> Dialogue:
    """Assign episode indices to a dialogue.

    ``explicit`` keeps indices already present on the dialogue (and errors if
    they are missing). ``accept_boundary`` starts a new episode on the turn
    following any turn with a non-empty target list: accepting a
    recommendation closes the episode.
    """
    if policy not in EPISODE_POLICIES:
        raise CorpusError(f"unknown episode policy {policy!r}")
    if policy == "explicit":
        if dialogue.episode_index_per_turn is None:
            raise CorpusError(
                f"dialogue {dialogue.dialogue_id!r}: explicit episode policy "
                f"requires episode indices in the input"
            )
        return dialogue

    indices: list[int] = []
    episode = 0
    for turn in dialogue.turns:
        indices.append(episode)
        if turn.target_item_ids:
            episode += 1
    return replace(dialogue, episode_index_per_turn=tuple(indices))


def segment_corpus(corpus: Corpus, policy: str = "accept_boundary") -> Corpus:
    return Corpus(
        catalog=corpus.catalog,
        dialogues=tuple(segment_episodes(d, policy) for d in corpus.dialogues),
    )
