"""Synthetic paraphrase clusters built from shared-token question templates.

A cluster is one (relation, entity) combination; its questions are different
surface frames of the same request, with the relation word drawn from a small
synonym set. Clusters sharing an entity or a relation overlap heavily in
tokens, which gives realistic hard negatives.
"""

from __future__ import annotations

import random
from typing import Sequence

from .datasetprep import QuestionCluster

FRAMES = (
    "what is the {r} of {e}",
    "what's {e}'s {r}",
    "tell me the {r} of {e}",
    "{e} {r}",
    "do you know the {r} of {e}",
    "can you tell me {e}'s {r}",
    "i want to know the {r} of {e}",
    "{r} of {e} please",
    "what {r} does {e} have",
    "please find the {r} for {e}",
    "show me {e} {r}",
    "what would the {r} of {e} be",
)

RELATIONS = (
    ("age", "years"), ("height", "stature"), ("birthplace", "hometown"), ("spouse", "partner"),
    ("salary", "income"), ("address", "residence"), ("nickname", "alias"), ("weight", "mass"),
    ("nationality", "citizenship"), ("religion", "faith"), ("employer", "company"),
    ("hobby", "pastime"), ("birthday", "birthdate"), ("language", "tongue"), ("team", "club"),
    ("coach", "trainer"), ("manager", "boss"), ("school", "college"), ("degree", "diploma"),
    ("award", "prize"), ("album", "record"), ("movie", "film"), ("book", "novel"),
    ("song", "track"), ("car", "vehicle"), ("pet", "animal"), ("diet", "food"),
    ("phone", "number"), ("email", "mailbox"), ("website", "homepage"), ("genre", "style"),
    ("position", "role"), ("rank", "ranking"), ("score", "points"), ("record", "best"),
    ("debut", "beginning"), ("retirement", "farewell"), ("injury", "wound"),
    ("contract", "deal"), ("agent", "representative"),
)

_SYLLABLES = ("ka", "lo", "mi", "ra", "to", "ne", "su", "vi", "da", "ze", "po", "li", "qu",
              "an", "er", "os", "ul", "in", "ba", "fe", "go", "hu", "ja", "wy")


def _names(n: int, rng: random.Random) -> list[str]:
    out: dict[str, None] = {}
    while len(out) < n:
        first = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))
        last = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))
        out[f"{first} {last}" if rng.random() < 0.6 else first] = None
    return list(out)


def _misspell(word: str, rng: random.Random) -> str:
    i = rng.randrange(len(word))
    return word[:i] + rng.choice("abcdefghijklmnopqrstuvwxyz") + word[i + 1:]


def template_clusters(
    n_clusters: int = 1000, seed: int = 0, min_size: int = 4, max_size: int = 8,
    n_entities: int | None = None, typo_rate: float = 0.0,
) -> list[QuestionCluster]:
    """``n_clusters`` distinct (relation, entity) clusters of ``min_size..max_size`` questions.

    With ``typo_rate`` > 0 each entity word is misspelled (one character
    replaced) with that probability, per question.
    """
    rng = random.Random(seed)
    n_entities = n_entities or max(10, n_clusters // 4)
    if n_entities * len(RELATIONS) < n_clusters:
        raise ValueError("not enough (relation, entity) combinations")
    if max_size > len(FRAMES):
        raise ValueError(f"max_size is limited to {len(FRAMES)} frames")
    entities = _names(n_entities, rng)
    combos = rng.sample([(r, e) for r in range(len(RELATIONS)) for e in range(n_entities)], n_clusters)
    clusters = []
    for cid, (r, e) in enumerate(combos):
        size = rng.randint(min_size, max_size)
        questions = []
        for frame in rng.sample(FRAMES, size):
            rel = rng.choice(RELATIONS[r])
            ent = " ".join(_misspell(w, rng) if rng.random() < typo_rate else w
                           for w in entities[e].split())
            questions.append(frame.format(r=rel, e=ent))
        clusters.append(QuestionCluster(f"c{cid}", tuple(questions)))
    return clusters


def split_for_noise(
    clusters: Sequence[QuestionCluster], fraction: float = 0.1, seed: int = 0
) -> list[QuestionCluster]:
    """Split ``fraction`` of the clusters into two halves to create false negatives.

    The halves become separate clusters, so paraphrases across the halves are
    treated as non-paraphrases downstream.
    """
    rng = random.Random(seed)
    splittable = [i for i, c in enumerate(clusters) if len(c.questions) >= 2]
    chosen = set(rng.sample(splittable, round(fraction * len(clusters))))
    out = []
    for i, c in enumerate(clusters):
        if i in chosen:
            qs = list(c.questions)
            rng.shuffle(qs)
            cut = len(qs) // 2
            out.append(QuestionCluster(f"{c.cluster_id}a", tuple(qs[:cut])))
            out.append(QuestionCluster(f"{c.cluster_id}b", tuple(qs[cut:])))
        else:
            out.append(c)
    return out
