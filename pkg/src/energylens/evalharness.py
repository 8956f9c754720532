"""Yes/no VQA evaluation: loading, answer parsing, and every report metric.

Covers the balanced polling-style benchmarks (3000-item splits with one
yes/no question per line), the four-subtask two-questions-per-image
benchmark, and the yes/no subset of the visual-patterns benchmark, which
shares the polling file shape. All counts are kept at full precision;
rounding happens only when formatting.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

PARSE_RULES = ("first-word", "substring")
MME_SUBTASKS = ("existence", "count", "position", "color")


class ProtocolViolationError(ValueError):
    """Dataset breaks a benchmark protocol (e.g. image without 2 questions)."""

    def __init__(self, message: str, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class AlignmentError(ValueError):
    """Two answer sets do not cover the same item ids."""

    def __init__(self, message: str, missing=(), extra=()):
        super().__init__(message)
        self.missing = sorted(missing)
        self.extra = sorted(extra)


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    image_id: str
    question: str
    gold: bool
    split_tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ParsedAnswer:
    verdict: str  # "yes" | "no" | "unparsed"
    raw_text: str = ""
    confidence: float = 0.0


@dataclass(frozen=True)
class MetricBundle:
    """Confusion counts plus every derived ratio, all on the 0..1 scale.

    Unparsed answers sit outside the confusion counts: they score as
    incorrect and as non-yes. Ratios with a zero denominator are 0 and
    the metric name lands in `degenerate`.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    unparsed: int
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f1: float
    yes_ratio: float
    gap: float
    degenerate: frozenset[str] = frozenset()

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn + self.unparsed


def format_percent(x: float) -> str:
    """0..1 ratio as a percent string, 2 decimals, half-up."""
    return str(Decimal(repr(x * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


_LABEL_TRUE = {"yes", "true", "1"}
_LABEL_FALSE = {"no", "false", "0"}

_ID_KEYS = ("question_id", "item_id", "id")
_IMAGE_KEYS = ("image", "image_id")
_QUESTION_KEYS = ("text", "question")
_SUBTASK_KEYS = ("subtask", "category")


def _first_key(obj: dict, keys):
    for k in keys:
        if k in obj:
            return obj[k]
    return None


def load_pope_jsonl(path):
    """Load a line-delimited question file.

    Returns (items, errors): items in file order; each malformed line
    becomes an (line_number, message) entry instead of being dropped
    silently. Lines may carry a subtask/category field, which lands in
    split_tags (used by the two-questions-per-image protocol).
    """
    items: list[EvalItem] = []
    errors: list[tuple[int, str]] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                errors.append((lineno, f"invalid JSON: {e}"))
                continue
            if not isinstance(obj, dict):
                errors.append((lineno, "line is not a JSON object"))
                continue
            raw_id = _first_key(obj, _ID_KEYS)
            image = _first_key(obj, _IMAGE_KEYS)
            question = _first_key(obj, _QUESTION_KEYS)
            label = obj.get("label")
            missing = [
                name
                for name, val in [
                    ("question id", raw_id),
                    ("image", image),
                    ("question", question),
                    ("label", label),
                ]
                if val is None
            ]
            if missing:
                errors.append((lineno, f"missing required field(s): {', '.join(missing)}"))
                continue
            norm = str(label).strip().lower()
            if norm in _LABEL_TRUE:
                gold = True
            elif norm in _LABEL_FALSE:
                gold = False
            else:
                errors.append((lineno, f"label {label!r} is not a yes/no value"))
                continue
            item_id = str(raw_id)
            if item_id in seen_ids:
                errors.append((lineno, f"duplicate item id {item_id!r}"))
                continue
            seen_ids.add(item_id)
            tags = set()
            subtask = _first_key(obj, _SUBTASK_KEYS)
            if subtask is not None:
                tags.add(str(subtask).strip().lower())
            if "split" in obj:
                tags.add(str(obj["split"]).strip().lower())
            items.append(
                EvalItem(
                    item_id=item_id,
                    image_id=str(image),
                    question=str(question),
                    gold=gold,
                    split_tags=frozenset(tags),
                )
            )
    return items, errors


_WORD = re.compile(r"[a-z]+")


def parse_answer(raw: str, rule: str = "first-word") -> str:
    """Extract a yes/no verdict from generated text.

    "first-word" checks only the first alphabetic word. "substring"
    falls back to a whole-text scan when the first word is neither:
    yes present and no absent means yes, and conversely.
    """
    if rule not in PARSE_RULES:
        raise ValueError(f"rule must be one of {PARSE_RULES}")
    text = raw.lower()
    first = _WORD.search(text)
    if first is not None:
        if first.group() == "yes":
            return "yes"
        if first.group() == "no":
            return "no"
    if rule == "substring":
        words = set(_WORD.findall(text))
        if "yes" in words and "no" not in words:
            return "yes"
        if "no" in words and "yes" not in words:
            return "no"
    return "unparsed"


def compute_metrics(pairs) -> MetricBundle:
    """Aggregate (EvalItem, ParsedAnswer) pairs into a MetricBundle."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot compute metrics over zero items")
    tp = fp = tn = fn = unparsed = 0
    for item, answer in pairs:
        if answer.verdict == "yes":
            tp, fp = (tp + 1, fp) if item.gold else (tp, fp + 1)
        elif answer.verdict == "no":
            tn, fn = (tn + 1, fn) if not item.gold else (tn, fn + 1)
        else:
            unparsed += 1
    return bundle_from_counts(tp, fp, tn, fn, unparsed)


def bundle_from_counts(tp: int, fp: int, tn: int, fn: int, unparsed: int = 0) -> MetricBundle:
    total = tp + fp + tn + fn + unparsed
    if total == 0:
        raise ValueError("cannot compute metrics over zero items")
    degenerate = set()

    def ratio(num, den, name):
        if den == 0:
            degenerate.add(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    specificity = ratio(tn, tn + fp, "specificity")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    yes_ratio = (tp + fp) / total
    return MetricBundle(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        unparsed=unparsed,
        accuracy=(tp + tn) / total,
        precision=precision,
        recall=recall,
        specificity=specificity,
        f1=f1,
        yes_ratio=yes_ratio,
        gap=abs(yes_ratio - 0.5),
        degenerate=frozenset(degenerate),
    )


@dataclass(frozen=True)
class MmeSubtaskScore:
    subtask: str
    questions: int
    images: int
    correct: int
    both_correct: int
    acc: float  # percent
    acc_plus: float  # percent

    @property
    def score(self) -> float:
        return self.acc + self.acc_plus


@dataclass(frozen=True)
class MmeScore:
    subtasks: tuple[MmeSubtaskScore, ...]

    @property
    def total(self) -> float:
        return sum(s.score for s in self.subtasks)


def compute_mme(pairs) -> MmeScore:
    """Score the two-questions-per-image protocol.

    Every item's split_tags must name one of the four subtasks, and every
    image must carry exactly two questions; violations raise
    ProtocolViolationError listing the offending image ids.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot compute a score over zero items")
    by_subtask: dict[str, dict[str, list]] = {}
    for item, answer in pairs:
        named = [t for t in item.split_tags if t in MME_SUBTASKS]
        if len(named) != 1:
            raise ProtocolViolationError(
                f"item {item.item_id!r} must be tagged with exactly one subtask "
                f"out of {MME_SUBTASKS}, got tags {sorted(item.split_tags)}",
                offenders=[item.item_id],
            )
        by_subtask.setdefault(named[0], {}).setdefault(item.image_id, []).append(
            (item, answer)
        )
    offenders = [
        f"{sub}/{image}"
        for sub, images in sorted(by_subtask.items())
        for image, rows in sorted(images.items())
        if len(rows) != 2
    ]
    if offenders:
        raise ProtocolViolationError(
            f"every image needs exactly 2 questions; offending: {offenders}",
            offenders=offenders,
        )
    scores = []
    for sub in MME_SUBTASKS:
        images = by_subtask.get(sub)
        if not images:
            continue
        questions = correct = both = 0
        for rows in images.values():
            ok = [
                (answer.verdict == ("yes" if item.gold else "no"))
                for item, answer in rows
            ]
            questions += len(ok)
            correct += sum(ok)
            both += all(ok)
        scores.append(
            MmeSubtaskScore(
                subtask=sub,
                questions=questions,
                images=len(images),
                correct=correct,
                both_correct=both,
                acc=100.0 * correct / questions,
                acc_plus=100.0 * both / len(images),
            )
        )
    return MmeScore(subtasks=tuple(scores))


@dataclass(frozen=True)
class TransferCounts:
    """2x2 verdict agreement between two aligned runs (first x second)."""

    yes_yes: int
    yes_no: int
    no_yes: int
    no_no: int
    unparsed_flagged: int = 0

    @property
    def total(self) -> int:
        return self.yes_yes + self.yes_no + self.no_yes + self.no_no


def yes_ratio_transfer(answers_a, answers_b) -> TransferCounts:
    """Pairwise verdict tally between two runs over the same item ids.

    Inputs are mappings or (item_id, ParsedAnswer) iterables. Unparsed
    verdicts count under "no" and are flagged.
    """
    a = dict(answers_a)
    b = dict(answers_b)
    if a.keys() != b.keys():
        missing = b.keys() - a.keys()
        extra = a.keys() - b.keys()
        raise AlignmentError(
            f"answer sets are misaligned: {len(missing)} ids only in second, "
            f"{len(extra)} only in first",
            missing=missing,
            extra=extra,
        )
    counts = {(True, True): 0, (True, False): 0, (False, True): 0, (False, False): 0}
    flagged = 0
    for item_id in a:
        va, vb = a[item_id].verdict, b[item_id].verdict
        flagged += (va == "unparsed") + (vb == "unparsed")
        counts[(va == "yes", vb == "yes")] += 1
    return TransferCounts(
        yes_yes=counts[(True, True)],
        yes_no=counts[(True, False)],
        no_yes=counts[(False, True)],
        no_no=counts[(False, False)],
        unparsed_flagged=flagged,
    )


@dataclass(frozen=True)
class CalibrationRow:
    verdict: str
    accuracy: float
    mean_confidence: float
    count: int

    @property
    def calibration_gap(self) -> float:
        return abs(self.accuracy - self.mean_confidence)


def accuracy_vs_confidence(pairs):
    """Per-verdict accuracy vs. mean confidence.

    Accuracy of yes-answers is precision, of no-answers specificity.
    Returns (rows, flags); a verdict with no answers is omitted and
    flagged rather than reported as zero.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot compute calibration over zero items")
    bundle = compute_metrics(pairs)
    rows = []
    flags = []
    for verdict, accuracy in (("yes", bundle.precision), ("no", bundle.specificity)):
        confs = [ans.confidence for _, ans in pairs if ans.verdict == verdict]
        if not confs:
            flags.append(f"no {verdict} answers")
            continue
        rows.append(
            CalibrationRow(
                verdict=verdict,
                accuracy=accuracy,
                mean_confidence=sum(confs) / len(confs),
                count=len(confs),
            )
        )
    return rows, flags


def load_answers_jsonl(path):
    """Load generated answers: one JSON object per line.

    Required: an item id and an answer text field; optional confidence.
    Returns (mapping item_id -> (text, confidence), errors).
    """
    answers: dict[str, tuple[str, float]] = {}
    errors: list[tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                errors.append((lineno, f"invalid JSON: {e}"))
                continue
            raw_id = _first_key(obj, _ID_KEYS)
            text = _first_key(obj, ("answer", "text", "response"))
            if raw_id is None or text is None:
                errors.append((lineno, "missing item id or answer text"))
                continue
            conf = obj.get("confidence", 0.0)
            try:
                conf = float(conf)
            except (TypeError, ValueError):
                errors.append((lineno, f"confidence {conf!r} is not a number"))
                continue
            answers[str(raw_id)] = (str(text), conf)
    return answers, errors


def join_answers(items, answers, rule: str = "first-word", jobs: int = 1):
    """Pair items with their parsed answers; missing answers are unparsed.

    Parsing is per-item and order-preserving, so any worker count
    produces the same pairing.
    """
    items = list(items)

    def one(item):
        text, conf = answers.get(item.item_id, ("", 0.0))
        return item, ParsedAnswer(
            verdict=parse_answer(text, rule), raw_text=text, confidence=conf
        )

    if jobs <= 1 or len(items) < 2:
        return [one(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, items))
