import random

import pytest

from energylens import chair


@pytest.fixture
def vocab():
    return chair.build_vocabulary(
        {
            "dog": ["puppy"],
            "cat": ["kitten"],
            "car": ["automobile"],
            "frisbee": [],
            "table": ["desk", "dining table"],
            "hot_dog": ["hot dog"],
        }
    )


def test_extract_plural_and_direct(vocab):
    assert chair.extract_objects("Two dogs play with a frisbee.", vocab) == {"dog", "frisbee"}


def test_extract_empty_caption(vocab):
    assert chair.extract_objects("", vocab) == set()


def test_extract_longest_match_first(vocab):
    # "hot dog" must win over "dog", and the multiword synonym for table works
    assert chair.extract_objects("a hot dog on a table", vocab) == {"hot_dog", "table"}
    assert chair.extract_objects("a hot dog on the dining table", vocab) == {"hot_dog", "table"}
    # exhaustive check: "dog" alone still matches elsewhere
    assert chair.extract_objects("a hot dog and a dog", vocab) == {"hot_dog", "dog"}


def test_extract_plural_of_multiword(vocab):
    assert chair.extract_objects("two hot dogs", vocab) == {"hot_dog"}


def test_extract_is_case_insensitive(vocab):
    assert chair.extract_objects("A PUPPY and a KITTEN", vocab) == {"dog", "cat"}


def test_vocabulary_rejects_dangling_synonyms():
    with pytest.raises(ValueError):
        chair.ObjectVocabulary(canonical=frozenset({"dog"}), synonyms={"kitten": "cat"})


def test_all_grounded_corpus_scores_zero(vocab):
    entries = [
        ("i1", "a dog with a frisbee", {"dog", "frisbee"}),
        ("i2", "a cat", {"cat", "table"}),
    ]
    scores = chair.score_corpus(entries, vocab)
    assert scores.chair_i == 0.0
    assert scores.chair_s == 0.0


def test_hand_corpus_one_third(vocab):
    entries = [
        ("a", "a dog and a cat", {"dog"}),  # mentions {dog, cat}, cat hallucinated
        ("b", "a car", {"car"}),
        ("c", "nothing to see", {"dog"}),  # mentions nothing
    ]
    scores = chair.score_corpus(entries, vocab)
    assert scores.chair_i == pytest.approx(1 / 3)
    assert scores.chair_s == pytest.approx(1 / 3)
    assert scores.mentioned_total == 3
    assert scores.hallucinated_total == 1
    assert scores.captions == 3
    assert scores.captions_with_hallucination == 1


def test_empty_corpus_rejected(vocab):
    with pytest.raises(ValueError):
        chair.score_corpus([], vocab)


def test_caption_counted_once_regardless_of_hallucination_count(vocab):
    entries = [("a", "a dog, a cat and a car", set())]
    scores = chair.score_corpus(entries, vocab)
    assert scores.captions_with_hallucination == 1
    assert scores.chair_s == 1.0
    assert scores.hallucinated_total == 3


def test_duplicate_mentions_count_once_per_caption(vocab):
    entries = [("a", "a dog and another dog and more dogs", set())]
    scores = chair.score_corpus(entries, vocab)
    assert scores.mentioned_total == 1
    assert scores.hallucinated_total == 1


def brute_force_scores(entries, vocab):
    mentioned = 0
    hallucinated = 0
    dirty = 0
    for _, caption, truth in entries:
        objs = chair.extract_objects(caption, vocab)
        bad = {o for o in objs if o not in truth}
        mentioned += len(objs)
        hallucinated += len(bad)
        dirty += 1 if bad else 0
    ci = hallucinated / mentioned if mentioned else 0.0
    cs = dirty / len(entries)
    return ci, cs


def test_monotonicity_against_brute_force(vocab):
    objects = sorted(vocab.canonical)
    rnd = random.Random(7)
    for _ in range(100):
        entries = []
        for i in range(rnd.randint(1, 6)):
            mention = rnd.sample(objects, rnd.randint(0, 3))
            truth = set(rnd.sample(objects, rnd.randint(0, 3)))
            caption = "a photo of " + " and ".join(o.replace("_", " ") for o in mention)
            entries.append((f"img{i}", caption, truth))
        base = chair.score_corpus(entries, vocab)
        assert (base.chair_i, base.chair_s) == pytest.approx(
            brute_force_scores(entries, vocab)
        )
        # append one guaranteed-hallucinated, not-yet-mentioned object
        idx = rnd.randrange(len(entries))
        image, caption, truth = entries[idx]
        already = chair.extract_objects(caption, vocab)
        candidates = [o for o in objects if o not in truth and o not in already]
        if not candidates:
            continue
        extra = rnd.choice(candidates)
        entries[idx] = (image, caption + " and a " + extra.replace("_", " "), truth)
        bumped = chair.score_corpus(entries, vocab)
        assert bumped.chair_i >= base.chair_i
        assert bumped.chair_s >= base.chair_s


def test_determinism(vocab):
    entries = [("a", "a dog and a cat", {"dog"})] * 5
    a = chair.score_corpus(entries, vocab)
    b = chair.score_corpus(entries, vocab)
    assert a == b


def test_degenerate_flag(vocab):
    scores = chair.score_corpus([("a", "nothing here", {"dog"})], vocab)
    assert scores.degenerate
    assert scores.chair_i == 0.0


def test_vocabulary_file_round_trip(tmp_path, vocab):
    path = tmp_path / "synonyms.txt"
    path.write_text(
        "# objects\n"
        "dog, puppy\n"
        "cat, kitten\n"
        "hot dog, hotdog\n"
        "\n"
    )
    loaded = chair.load_vocabulary(path)
    assert loaded.canonical == frozenset({"dog", "cat", "hot dog"})
    assert chair.extract_objects("a hotdog", loaded) == {"hot dog"}
    assert chair.extract_objects("a hot dog", loaded) == {"hot dog"}


def test_annotation_and_caption_loaders(tmp_path):
    ann_map = tmp_path / "ann.json"
    ann_map.write_text('{"img1": ["dog"], "img2": ["cat", "car"]}')
    truth = chair.load_annotations(ann_map)
    assert truth == {"img1": {"dog"}, "img2": {"cat", "car"}}

    ann_lines = tmp_path / "ann.jsonl"
    ann_lines.write_text(
        '{"image": "img1", "objects": ["dog"]}\n{"image": "img2", "objects": ["cat"]}\n'
    )
    truth = chair.load_annotations(ann_lines)
    assert truth == {"img1": {"dog"}, "img2": {"cat"}}

    caps = tmp_path / "caps.jsonl"
    caps.write_text('{"image": "img1", "caption": "a dog"}\n')
    assert chair.load_captions(caps) == [("img1", "a dog")]


def test_judgment_invariant():
    with pytest.raises(ValueError):
        chair.CaptionJudgment(
            image_id="x", mentioned=frozenset({"dog"}), hallucinated=frozenset({"cat"})
        )
