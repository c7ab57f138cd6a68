"""Shared corpus/pool builders for the test suite.

The "standard fixture" is a deterministic 500-train-dialogue corpus over a
120-item catalog: mentions follow a long-tail (Zipf-like) distribution over
the first 80 items, the remaining 40 never appear in training data, and a
block of "niche" dialogues only touches the unpopular end. The pool covers
the whole catalog with one single-mention synthetic dialogue per item.
"""

from __future__ import annotations

import numpy as np

from crs_bias.augment import SyntheticPool
from crs_bias.corpus import Corpus, Dialogue, ItemCatalog, Turn, mention_token, segment_episodes

CATALOG_SIZE = 120
MENTIONED_ITEMS = 80
NICHE_BAND = (60, 80)  # item ranks only the niche dialogues draw from
N_TRAIN_NATURAL = 435
N_TRAIN_NICHE = 50
N_TRAIN_CHAT = 15  # dialogues without any item mention (pure chitchat)
N_VALID = 30
N_TEST = 30
FIXTURE_SEED = 7


def item_id(i: int) -> str:
    return f"m{i:03d}"


def standard_catalog() -> ItemCatalog:
    return ItemCatalog({item_id(i): f"Movie {i:03d}" for i in range(CATALOG_SIZE)})


def make_dialogue(
    dialogue_id: str,
    items: list[str],
    split: str = "train",
    two_episodes: bool = False,
) -> Dialogue:
    """A small dialogue mentioning ``items``, accepting the first as target."""
    turns = [
        Turn("seeker", "Can you recommend something to watch?"),
        Turn(
            "recommender",
            "You could try " + " or ".join(mention_token(i) for i in items) + ".",
            mentioned_item_ids=tuple(items),
            target_item_ids=(items[0],),
        ),
    ]
    if two_episodes and len(items) > 1:
        turns += [
            Turn("seeker", "Anything else along those lines?"),
            Turn(
                "recommender",
                f"Also {mention_token(items[-1])}.",
                mentioned_item_ids=(items[-1],),
                target_item_ids=(items[-1],),
            ),
        ]
    return segment_episodes(Dialogue(dialogue_id, tuple(turns), split=split), "accept_boundary")


def build_standard_corpus(seed: int = FIXTURE_SEED) -> Corpus:
    rng = np.random.default_rng(seed)
    weights = 1.0 / (np.arange(1, MENTIONED_ITEMS + 1) ** 1.1)
    weights /= weights.sum()
    niche_lo, niche_hi = NICHE_BAND

    dialogues: list[Dialogue] = []

    def natural(name: str, split: str) -> Dialogue:
        n_items = int(rng.integers(1, 4))
        picks = rng.choice(MENTIONED_ITEMS, size=n_items, replace=False, p=weights)
        items = [item_id(int(i)) for i in picks]
        return make_dialogue(name, items, split=split, two_episodes=rng.random() < 0.3)

    for n in range(N_TRAIN_NATURAL):
        dialogues.append(natural(f"train-{n:04d}", "train"))
    for n in range(N_TRAIN_NICHE):
        n_items = int(rng.integers(1, 3))
        picks = rng.choice(np.arange(niche_lo, niche_hi), size=n_items, replace=False)
        items = [item_id(int(i)) for i in picks]
        dialogues.append(make_dialogue(f"niche-{n:04d}", items, split="train"))
    for n in range(N_TRAIN_CHAT):
        dialogues.append(
            segment_episodes(
                Dialogue(
                    f"chat-{n:04d}",
                    (
                        Turn("seeker", "Watched anything fun lately?"),
                        Turn("recommender", "Plenty! What mood are you in?"),
                    ),
                    split="train",
                ),
                "accept_boundary",
            )
        )
    for n in range(N_VALID):
        dialogues.append(natural(f"valid-{n:04d}", "valid"))
    for n in range(N_TEST):
        dialogues.append(natural(f"test-{n:04d}", "test"))

    return Corpus(catalog=standard_catalog(), dialogues=tuple(dialogues))


def single_mention_pool(catalog: ItemCatalog) -> SyntheticPool:
    """One synthetic dialogue per catalog item, mentioning the item once."""
    dialogues = []
    for iid, name in catalog.items.items():
        dialogues.append(
            Dialogue(
                dialogue_id=f"syn-{iid}",
                turns=(
                    Turn("seeker", "What should I watch tonight?"),
                    Turn(
                        "recommender",
                        f"I suggest {mention_token(iid)} — it suits your taste.",
                        mentioned_item_ids=(iid,),
                        target_item_ids=(iid,),
                    ),
                ),
                split="train",
                episode_index_per_turn=(0, 0),
                provenance="synthetic",
            )
        )
    return SyntheticPool.from_dialogues(dialogues)


def freq_fixture_corpus() -> Corpus:
    """4-item corpus with training mention frequencies a:10, b:5, c:2, d:0."""
    catalog = ItemCatalog({"a": "Alpha", "b": "Beta", "c": "Gamma", "d": "Delta"})
    dialogues = []
    counter = 0
    for iid, count in (("a", 10), ("b", 5), ("c", 2)):
        for _ in range(count):
            dialogues.append(make_dialogue(f"d{counter:03d}", [iid]))
            counter += 1
    return Corpus(catalog=catalog, dialogues=tuple(dialogues))
