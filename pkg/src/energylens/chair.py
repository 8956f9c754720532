"""Caption hallucination scoring against ground-truth object annotations.

Matching is vocabulary-restricted and purely lexical: surface forms from
a synonym list are matched on word boundaries, longest form first, with
a single trailing-'s' plural fallback. No parsing, no embeddings, so
scores are deterministic and auditable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass


@dataclass(frozen=True)
class ObjectVocabulary:
    canonical: frozenset[str]
    synonyms: dict[str, str]  # lowercase surface form -> canonical object

    def __post_init__(self):
        bad = {c for c in self.synonyms.values() if c not in self.canonical}
        if bad:
            raise ValueError(f"synonyms map to unknown canonical objects: {sorted(bad)}")

    @property
    def max_surface_words(self) -> int:
        return max((form.count(" ") + 1 for form in self.synonyms), default=1)


def build_vocabulary(groups) -> ObjectVocabulary:
    """Vocabulary from {canonical: [surface forms...]}; identity entries implied."""
    canonical = set()
    synonyms: dict[str, str] = {}
    for name, forms in groups.items():
        name = name.strip().lower()
        canonical.add(name)
        for form in [name, *forms]:
            form = " ".join(form.strip().lower().split())
            if form:
                synonyms[form] = name
    return ObjectVocabulary(canonical=frozenset(canonical), synonyms=synonyms)


def load_vocabulary(path) -> ObjectVocabulary:
    """Parse a synonym list: one line per object, comma-separated forms,
    first form canonical. Blank lines and #-comments are skipped."""
    groups: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            forms = [p.strip() for p in line.split(",") if p.strip()]
            if forms:
                groups[forms[0]] = forms[1:]
    if not groups:
        raise ValueError(f"vocabulary file {path} contains no objects")
    return build_vocabulary(groups)


_TOKEN = re.compile(r"[a-z0-9]+")


def _lookup(vocab: ObjectVocabulary, surface: str):
    hit = vocab.synonyms.get(surface)
    if hit is None and surface.endswith("s"):
        hit = vocab.synonyms.get(surface[:-1])
    return hit


def extract_objects(caption: str, vocab: ObjectVocabulary) -> set[str]:
    """Canonical objects mentioned in a caption.

    Greedy left-to-right scan trying the longest n-gram first, so a
    multiword form wins over any of its words ("hot dog" never counts
    as "dog").
    """
    words = _TOKEN.findall(caption.lower())
    found: set[str] = set()
    i = 0
    limit = vocab.max_surface_words
    while i < len(words):
        consumed = 1
        for n in range(min(limit, len(words) - i), 0, -1):
            hit = _lookup(vocab, " ".join(words[i : i + n]))
            if hit is not None:
                found.add(hit)
                consumed = n
                break
        i += consumed
    return found


@dataclass(frozen=True)
class CaptionJudgment:
    image_id: str
    mentioned: frozenset[str]
    hallucinated: frozenset[str]

    def __post_init__(self):
        if not self.hallucinated <= self.mentioned:
            raise ValueError("hallucinated objects must be a subset of mentioned")


@dataclass(frozen=True)
class ChairScores:
    chair_i: float
    chair_s: float
    mentioned_total: int
    hallucinated_total: int
    captions: int
    captions_with_hallucination: int
    degenerate: bool = False  # no mentioned objects anywhere


def judge_caption(image_id: str, caption: str, truth: set[str], vocab: ObjectVocabulary) -> CaptionJudgment:
    mentioned = extract_objects(caption, vocab)
    return CaptionJudgment(
        image_id=image_id,
        mentioned=frozenset(mentioned),
        hallucinated=frozenset(mentioned - set(truth)),
    )


def score_judgments(judgments) -> ChairScores:
    """Instance- and sentence-level hallucination ratios over judged captions.

    Instance level: hallucinated mentions over all mentions, each object
    counted once per caption. Sentence level: captions containing any
    hallucinated object over all captions.
    """
    judgments = list(judgments)
    if not judgments:
        raise ValueError("cannot score an empty corpus")
    mentioned = sum(len(j.mentioned) for j in judgments)
    hallucinated = sum(len(j.hallucinated) for j in judgments)
    with_hall = sum(1 for j in judgments if j.hallucinated)
    return ChairScores(
        chair_i=hallucinated / mentioned if mentioned else 0.0,
        chair_s=with_hall / len(judgments),
        mentioned_total=mentioned,
        hallucinated_total=hallucinated,
        captions=len(judgments),
        captions_with_hallucination=with_hall,
        degenerate=mentioned == 0,
    )


def score_corpus(entries, vocab: ObjectVocabulary) -> ChairScores:
    """Score (image_id, caption, ground-truth objects) triples."""
    return score_judgments(
        judge_caption(image_id, caption, truth, vocab) for image_id, caption, truth in entries
    )


def load_annotations(path) -> dict[str, set[str]]:
    """Ground-truth objects per image id.

    Accepts a JSON object {image_id: [objects...]} or JSONL with
    image/objects fields.
    """
    with open(path, "r", encoding="utf-8") as f:
        text = f.read().strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict) and all(isinstance(v, list) for v in obj.values()):
        return {str(k): {str(o).lower() for o in v} for k, v in obj.items()}
    truth: dict[str, set[str]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        image = obj.get("image", obj.get("image_id"))
        objects = obj.get("objects", [])
        if image is None:
            raise ValueError(f"annotation line missing image id: {line[:80]}")
        truth[str(image)] = {str(o).lower() for o in objects}
    return truth


def load_captions(path) -> list[tuple[str, str]]:
    """(image_id, caption) pairs from a JSONL file."""
    captions = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            image = obj.get("image", obj.get("image_id", obj.get("id")))
            caption = obj.get("caption", obj.get("text", obj.get("response")))
            if image is None or caption is None:
                raise ValueError(f"caption line {lineno} missing image id or caption")
            captions.append((str(image), str(caption)))
    return captions
