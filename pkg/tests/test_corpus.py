import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmoe.corpus import (
    ALPHABET,
    BatchPlan,
    CharTokenizer,
    CorpusConfig,
    LanguageCorpus,
    build_corpora,
    generate_family,
    generate_languages,
    generate_text,
    load_corpora,
    make_batches,
    read_language_text,
    sample_language_weights,
    total_variation,
    write_corpus,
)


def small_config(**kw):
    base = dict(max_chars=6000, min_chars=2000, new_language_chars=2000, doc_min_chars=16, doc_max_chars=64)
    base.update(kw)
    return CorpusConfig(**base)


def fake_corpus(code, family, n=5000, seed=0):
    ids = np.random.default_rng(seed).integers(0, 32, size=n).astype(np.uint8)
    return LanguageCorpus(code, family, ids, ids[:100], n)


def test_tokenizer_round_trip_and_vocab():
    tok = CharTokenizer()
    assert tok.vocab_size == 33 and tok.separator_id == 32
    text = "hello, world;\nit's a-test."
    assert tok.decode(tok.encode(text)) == text
    with pytest.raises(ValueError):
        tok.encode("Capital")


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet=ALPHABET + "\n", max_size=200))
def test_tokenizer_is_bijective(text):
    tok = CharTokenizer()
    ids = tok.encode(text)
    assert tok.decode(ids) == text
    assert ids.size == len(text)


def test_family_degenerate_mixtures():
    same = generate_family(3, 7, 0.0)
    for s in same[1:]:
        np.testing.assert_array_equal(s.transition_table, same[0].transition_table)
    indep = generate_family(3, 7, 1.0)
    assert total_variation(indep[0].transition_table, indep[1].transition_table) > 0.3
    for s in same + indep:
        np.testing.assert_allclose(s.transition_table.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        generate_family(3, 7, 1.5)


def test_within_family_distance_below_cross_family():
    for seed in range(20):
        a = generate_family(3, 2 * seed, 0.2)
        b = generate_family(3, 2 * seed + 1, 0.2)
        within = np.mean(
            [total_variation(x.transition_table, y.transition_table) for fam in (a, b) for i, x in enumerate(fam) for y in fam[i + 1 :]]
        )
        cross = np.mean([total_variation(x.transition_table, y.transition_table) for x in a for y in b])
        assert within < cross


def test_family_separability_monotone_in_perturbation():
    means = []
    for p in (0.05, 0.2, 0.5):
        d = []
        for seed in range(10):
            fam = generate_family(3, seed, p)
            d += [total_variation(fam[i].transition_table, fam[j].transition_table) for i in range(3) for j in range(i + 1, 3)]
        means.append(np.mean(d))
    assert means[0] <= means[1] <= means[2]


def test_sampling_weights_examples():
    w = sample_language_weights({"a": 3, "b": 1}, 1.0)
    assert w["a"] == pytest.approx(0.75) and w["b"] == pytest.approx(0.25)
    w = sample_language_weights({"a": 1000, "b": 1}, 0.3)
    assert w["a"] == pytest.approx(1000**0.3 / (1000**0.3 + 1), abs=1e-12)
    assert w["a"] == pytest.approx(0.8882, abs=1e-4)
    w = sample_language_weights({"a": 1e6, "b": 1.0, "c": 50.0}, 1e-6)
    assert max(abs(v - 1 / 3) for v in w.values()) < 1e-3
    with pytest.raises(ValueError):
        sample_language_weights({}, 0.3)


def test_generation_is_deterministic_and_sized():
    cfg = small_config()
    train, new = generate_languages(cfg, 3)
    assert [s.code for s in train] == [f"l{i:02d}" for i in range(12)]
    assert [s.family_id for s in train] == [i % 4 for i in range(12)]
    assert len(new) == 1 and new[0].family_id == 0
    text = generate_text(train[0], cfg)
    assert len(text) == train[0].corpus_size_chars
    assert text == generate_text(train[0], cfg)
    lines = text.split("\n")
    assert all(len(x) <= cfg.doc_max_chars for x in lines)
    again, _ = generate_languages(cfg, 3)
    np.testing.assert_array_equal(train[5].transition_table, again[5].transition_table)


def test_heldout_split_and_tiers():
    cfg = small_config()
    train, _ = generate_languages(cfg, 0)
    corpora = build_corpora(train, cfg)
    c = corpora["l00"]
    assert c.heldout_ids.size == pytest.approx(0.05 * c.size_chars, abs=1)
    assert c.train_ids.size + c.heldout_ids.size == c.size_chars
    tiers = [corpora[f"l{i:02d}"].tier for i in range(12)]
    assert tiers == ["high"] * 4 + ["medium"] * 4 + ["low"] * 4


def test_single_language_batches():
    corpora = {"a": fake_corpus("a", 0)}
    batch = next(make_batches(corpora, BatchPlan(2, 8), 0, group_of={"a": 0}))
    assert batch.tokens.shape == (2, 8)
    assert batch.languages == ["a", "a"]
    assert batch.groups.tolist() == [0, 0]


def test_homogeneous_batches_never_mix_groups():
    corpora = {c: fake_corpus(c, i % 2, seed=i) for i, c in enumerate("abcd")}
    group_of = {"a": 0, "b": 1, "c": 0, "d": 1}
    stream = make_batches(corpora, BatchPlan(4, 8, homogeneous=True), 1, group_of=group_of)
    for _ in range(1000):
        b = next(stream)
        assert len(set(b.groups.tolist())) == 1 and b.group == b.groups[0]
    with pytest.raises(ValueError):
        next(make_batches(corpora, BatchPlan(4, 8, homogeneous=True), 1, group_of={"a": 0}))


def test_language_frequencies_follow_weights():
    sizes = {"a": 40000, "b": 8000, "c": 2000}
    corpora = {c: fake_corpus(c, 0, n, seed=n) for c, n in sizes.items()}
    target = sample_language_weights({c: corpora[c].size for c in corpora}, 0.3)
    for homogeneous in (False, True):
        stream = make_batches(
            corpora, BatchPlan(100, 2, homogeneous=homogeneous), 5, group_of={"a": 0, "b": 1, "c": 0}
        )
        counts = {c: 0 for c in corpora}
        for _ in range(1000):
            for code in next(stream).languages:
                counts[code] += 1
        for c in corpora:
            assert abs(counts[c] / 1e5 - target[c]) < 0.02


def test_batches_are_reproducible():
    corpora = {c: fake_corpus(c, 0, seed=i) for i, c in enumerate("ab")}
    s1 = make_batches(corpora, BatchPlan(3, 16), 9)
    s2 = make_batches(corpora, BatchPlan(3, 16), 9)
    for _ in range(5):
        np.testing.assert_array_equal(next(s1).tokens, next(s2).tokens)


def test_corpus_directory_round_trip(tmp_path):
    cfg = small_config()
    train, new = generate_languages(cfg, 1)
    specs = train + new
    texts = {s.code: generate_text(s, cfg) for s in specs}
    write_corpus(tmp_path, specs, texts, new_codes=[s.code for s in new])
    loaded = load_corpora(tmp_path)
    assert sorted(loaded) == [s.code for s in train]
    direct = build_corpora(train, cfg, texts)
    np.testing.assert_array_equal(loaded["l03"].train_ids, direct["l03"].train_ids)
    assert read_language_text(tmp_path, "n00") == texts["n00"]
    with pytest.raises(FileNotFoundError, match="zz.txt"):
        read_language_text(tmp_path, "zz")
