"""Acceptance criteria 1-12 at the reduced desk profile.

Every criterion records one PASS/FAIL line (see ``acceptance_log``); the lines
are printed at the end of the pytest run. Per-seed artifacts (corpus, base
model, probes, trained models) are cached and shared between criteria, so the
first test that needs a seed pays for it. Set ``DMOE_SKIP_ACCEPTANCE=1`` to
skip the whole module.
"""

from __future__ import annotations

import functools
import json
import os
import time

import numpy as np
import pytest

from acceptance_log import record
from dmoe.adaptation import choose_expert, dla_finetune, graft_expert, lapt_finetune, score_experts
from dmoe.cli import main as cli_main
from dmoe.clustering import (
    adjusted_rand_index,
    exhaustive_cluster,
    greedy_cluster,
    group_sizes,
    objective,
    random_balanced_assignment,
)
from dmoe.corpus import BatchPlan, CorpusConfig, build_corpora, generate_languages
from dmoe.evaluation import compare_models, evaluate, perplexity, router_top1_stats
from dmoe.gradcheck import check_gradients
from dmoe.model import ModelConfig, Routing
from dmoe.optim import OptimizerConfig
from dmoe.probe import SimilarityMatrix, cosine, similarity_matrix
from dmoe.rng import derive_seed, make_rng
from dmoe.training import (
    ExtensionConfig,
    PretrainSettings,
    TrainSettings,
    extend_to_moe,
    pretrain_base,
    random_layers,
    select_layers,
    train_dense_baseline,
    train_dmoe,
)
from primitive_cases import CASES

pytestmark = pytest.mark.skipif(os.environ.get("DMOE_SKIP_ACCEPTANCE") == "1", reason="acceptance run disabled")

# desk profile: the default corpus and context length at half model width,
# 1024 training tokens per step, default probe batch (4096 tokens per step)
CORPUS = CorpusConfig()
MODEL = ModelConfig(num_layers=8, hidden_dim=64, num_heads=4, ffn_dim=256, vocab_size=33, max_sequence_length=128)
TRAIN = TrainSettings(batch_size=8, sequence_length=128, sampling_exponent=0.3, log_interval=50)
PRETRAIN = PretrainSettings(steps=1500, lr=2e-3, warmup_steps=100)
OPT = OptimizerConfig()
PROBE_PLAN = BatchPlan(32, 128)
PROBE_STEPS = 10
STAGE1, STAGE2 = 400, 200
ADAPT_STEPS = 200
EVAL_CHARS = 4096
NUM_EXPERTS = 4
FAMILY_SEEDS = (0, 1, 2, 3, 4)
SEEDS = (0, 1, 2)


def _minutes(seconds: float) -> str:
    return f"{seconds / 60:.1f} min"


# ---------------------------------------------------------------------------
# shared per-seed artifacts
# ---------------------------------------------------------------------------

_TIMES: dict[tuple, float] = {}


def _timed(key):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args):
            t = time.perf_counter()
            out = fn(*args)
            _TIMES[(key,) + args] = time.perf_counter() - t
            return out

        return functools.lru_cache(maxsize=None)(inner)

    return wrap


@functools.lru_cache(maxsize=None)
def corpora(seed: int):
    train, new = generate_languages(CORPUS, seed)
    allc = build_corpora(train + new, CORPUS)
    tr = {s.code: allc[s.code] for s in train}
    nw = {s.code: allc[s.code] for s in new}
    return tr, nw


def heldout(seed: int) -> dict[str, np.ndarray]:
    tr, _ = corpora(seed)
    return {c: v.heldout_ids[:EVAL_CHARS] for c, v in tr.items()}


@_timed("base")
def base(seed: int):
    tr, _ = corpora(seed)
    _, model = pretrain_base(tr, MODEL, PRETRAIN, OPT, TRAIN, derive_seed(seed, "pretrain"))
    return model


@_timed("probe")
def probes(seed: int):
    """Deviation records per language at 10 steps (and 40 steps for seed 0, for the stability check)."""
    from dmoe.probe import probe_languages

    tr, _ = corpora(seed)
    snaps = [PROBE_STEPS, 40] if seed == 0 else None
    steps = 40 if seed == 0 else PROBE_STEPS
    out = probe_languages(
        base(seed), {c: v.train_ids for c, v in tr.items()}, steps, opt=OPT, plan=PROBE_PLAN, seed=seed, snapshots=snaps
    )
    if snaps is None:
        return {c: {PROBE_STEPS: r} for c, r in out.items()}
    return out


def records10(seed: int):
    p = probes(seed)
    return [p[c][PROBE_STEPS] for c in sorted(p)]


@functools.lru_cache(maxsize=None)
def groups(seed: int, kind: str):
    tr, _ = corpora(seed)
    if kind == "random":
        return random_balanced_assignment(sorted(tr), NUM_EXPERTS, make_rng(seed, "random-groups"))
    return greedy_cluster(similarity_matrix(records10(seed)), NUM_EXPERTS)


@functools.lru_cache(maxsize=None)
def layers(seed: int, kind: str) -> tuple[int, ...]:
    eps = ExtensionConfig().epsilon
    if kind == "random":
        return tuple(random_layers(MODEL.num_layers, eps, derive_seed(seed, "layers")))
    return tuple(select_layers(records10(seed), eps))


def _ext(alpha: float, s1: int, s2: int) -> ExtensionConfig:
    return ExtensionConfig(num_experts=NUM_EXPERTS, alpha=alpha, stage1_steps=s1, stage2_steps=s2)


@_timed("stage1")
def stage1(seed: int, alpha: float, group_kind: str, layer_kind: str):
    a = groups(seed, group_kind)
    moe = extend_to_moe(base(seed), list(layers(seed, layer_kind)), NUM_EXPERTS, a, derive_seed(seed, "extend"))
    _, out = train_dmoe(moe, corpora(seed)[0], a, _ext(alpha, STAGE1, 0), OPT, TRAIN, seed)
    return out


@_timed("dmoe")
def dmoe(seed: int, group_kind: str, layer_kind: str):
    # stage 2 continues from the cached stage-1 model; the batch streams are
    # keyed per stage, so this equals one train_dmoe call with both stages
    a = groups(seed, group_kind)
    _, out = train_dmoe(stage1(seed, 1.28, group_kind, layer_kind), corpora(seed)[0], a, _ext(1.28, 0, STAGE2), OPT, TRAIN, seed)
    return out


@_timed("baseline")
def baseline(seed: int):
    _, out = train_dense_baseline(base(seed), corpora(seed)[0], STAGE1 + STAGE2, OPT, TRAIN, seed)
    return out


@functools.lru_cache(maxsize=None)
def macro_ppl(seed: int, which: str) -> dict[str, float]:
    model = {
        "dmoe": lambda: dmoe(seed, "probe", "ranked"),
        "baseline": lambda: baseline(seed),
        "random-clusters": lambda: dmoe(seed, "random", "ranked"),
        "random-layers": lambda: dmoe(seed, "probe", "random"),
    }[which]()
    return evaluate(model, heldout(seed)).ppl("char_ppl")


@functools.lru_cache(maxsize=None)
def adaptation(seed: int) -> dict:
    tr, nw = corpora(seed)
    code = sorted(nw)[0]
    new = nw[code]
    model = dmoe(seed, "probe", "ranked")
    ppl = score_experts(model, new.train_ids[:EVAL_CHARS])
    chosen = choose_expert(ppl)
    grafted = graft_expert(model, chosen, derive_seed(seed, "graft", code))
    _, dla, _, frozen = dla_finetune(grafted, new.train_ids, ADAPT_STEPS, OPT, TRAIN, derive_seed(seed, "dla", code))
    _, lapt = lapt_finetune(model, new.train_ids, ADAPT_STEPS, OPT, TRAIN, derive_seed(seed, "lapt", code))
    streams = heldout(seed)
    before = evaluate(model, streams).ppl("char_ppl")
    new_stream = new.heldout_ids[:EVAL_CHARS]

    def old_degradation(m):
        after = evaluate(m, streams).ppl("char_ppl")
        return float(np.mean([after[c] - before[c] for c in before]))

    return {
        "language": code,
        "chosen": chosen,
        "dla_forgetting": old_degradation(dla),
        "lapt_forgetting": old_degradation(lapt),
        "dla_new": perplexity(dla, new_stream).char_ppl,
        "lapt_new": perplexity(lapt, new_stream).char_ppl,
        "frozen_new": perplexity(model, new_stream).char_ppl,
        "frozen_unchanged": all(dla.params[n].data.tobytes() == grafted.params[n].data.tobytes() for n in frozen),
        "num_frozen": len(frozen),
    }


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_01_gradient_correctness():
    t = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = {}
    for name, case in sorted(CASES.items()):
        errs = []
        for _ in range(20):
            fn, inputs = case(rng)
            errs.append(check_gradients(fn, [np.asarray(x, dtype=np.float64) for x in inputs], h=1e-5))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t
    bad = sorted(n for n, e in worst.items() if not e < 1e-6)
    ok = not bad and elapsed < 60
    record(1, ok, f"{len(CASES)} primitives x 20 instances, worst rel. err {max(worst.values()):.2e} (< 1e-6), {elapsed:.1f} s (< 60 s)")
    assert not bad, bad
    assert elapsed < 60


def _random_similarity(n: int, rng) -> SimilarityMatrix:
    a = rng.uniform(-1, 1, size=(n, n))
    m = (a + a.T) / 2
    np.fill_diagonal(m, 1.0)
    return SimilarityMatrix([f"l{i:02d}" for i in range(n)], m, [0])


def test_02_clustering_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    summary = []
    ok = True
    for k in (2, 4):
        not_above_exhaustive = 0
        beats_random = 0
        for _ in range(100):
            m = _random_similarity(8, rng)
            g = objective(m, greedy_cluster(m, k))
            e = objective(m, exhaustive_cluster(m, k))
            rand = np.mean([objective(m, random_balanced_assignment(m.languages, k, rng)) for _ in range(50)])
            not_above_exhaustive += g <= e + 1e-12
            beats_random += g >= rand
        summary.append(f"K={k}: greedy<=exhaustive {not_above_exhaustive}/100, greedy>=random mean {beats_random}/100")
        ok &= not_above_exhaustive == 100 and beats_random >= 95
    elapsed = time.perf_counter() - t
    ok &= elapsed < 120
    record(2, ok, "; ".join(summary) + f"; {elapsed:.1f} s (< 120 s)")
    assert ok


def test_03_balance_guarantee():
    rng = np.random.default_rng(3)
    failures = []
    for n in range(1, 31):
        for k in range(1, n + 1):
            a = greedy_cluster(_random_similarity(n, rng), k)
            sizes = sorted(len(g) for g in a.groups)
            if len(a.groups) != k or sizes[-1] - sizes[0] > 1 or sorted(a.group_of) != sorted(f"l{i:02d}" for i in range(n)):
                failures.append((n, k))
    nine = greedy_cluster(_random_similarity(18, rng), 9)
    nine_ok = sorted(len(g) for g in nine.groups) == [2] * 9
    ok = not failures and nine_ok
    record(3, ok, f"465 (N,K) pairs with N<=30: {len(failures)} violations; N=18,K=9 sizes all 2: {nine_ok}")
    assert ok, failures[:5]


def test_04_family_recovery():
    aris = []
    for seed in FAMILY_SEEDS:
        tr, _ = corpora(seed)
        truth = {c: v.family_id for c, v in tr.items()}
        aris.append(adjusted_rand_index(groups(seed, "probe").group_of, truth))
    hits = sum(a == 1.0 for a in aris)
    cost = sum(_TIMES.get(("base", s), 0) + _TIMES.get(("probe", s), 0) for s in FAMILY_SEEDS)
    ok = hits >= 4
    record(
        4,
        ok,
        f"ARI per seed {[round(a, 3) for a in aris]}, {hits}/5 exact (>= 4); "
        f"pretrain+probe {_minutes(cost)} on {os.cpu_count()} core(s), runtime bound not asserted",
    )
    assert ok


def test_05_deviation_stability():
    p = probes(0)
    cos = {c: cosine(p[c][PROBE_STEPS].concat(), p[c][40].concat()) for c in sorted(p)}
    worst = min(cos, key=cos.get)
    ok = all(v > 0.8 for v in cos.values())
    record(5, ok, f"cos(d@10, d@40) min {cos[worst]:.3f} ({worst}), mean {np.mean(list(cos.values())):.3f}, all > 0.8 required")
    assert ok, cos


def test_06_function_preservation():
    dense = base(0)
    moe = extend_to_moe(dense, list(layers(0, "ranked")), NUM_EXPERTS, groups(0, "probe"), 0)
    x = np.stack([v.heldout_ids[: MODEL.max_sequence_length] for v in list(corpora(0)[0].values())[:4]]).astype(np.int64)
    ref, _ = dense.forward(x)
    modes = [Routing.soft_topk(), Routing.soft_topk(1), Routing.hard_group([0, 1, 2, 3])] + [
        Routing.hard_expert(e) for e in range(NUM_EXPERTS)
    ]
    worst = max(float(np.abs(moe.forward(x, r)[0].data - ref.data).max()) for r in modes)
    ok = worst <= 1e-9
    record(6, ok, f"max |logit diff| over {len(modes)} routing modes {worst:.1e} (<= 1e-9)")
    assert ok


def test_07_router_specialisation():
    a = groups(0, "probe")
    with_rc = router_top1_stats(stage1(0, 1.28, "probe", "ranked"), heldout(0)).diagonal_mass(a.group_of)
    without = router_top1_stats(stage1(0, 0.0, "probe", "ranked"), heldout(0)).diagonal_mass(a.group_of)
    mean_rc = float(np.mean(list(with_rc.values())))
    low = min(without.values())
    ok = mean_rc > 0.9 and low < 0.5
    cost = _TIMES.get(("stage1", 0, 1.28, "probe", "ranked"), 0) + _TIMES.get(("stage1", 0, 0.0, "probe", "ranked"), 0)
    record(
        7,
        ok,
        f"layers {list(layers(0, 'ranked'))}: alpha=1.28 mean own-group top-1 {mean_rc:.3f} (> 0.9); "
        f"alpha=0 lowest layer {low:.3f} (< 0.5); {_minutes(cost)}",
    )
    assert ok


def test_08_multilinguality():
    t = time.perf_counter()
    wins, lines, tier_gain = 0, [], {"high": [], "medium": [], "low": []}
    for seed in SEEDS:
        cmp = compare_models(macro_ppl(seed, "baseline"), macro_ppl(seed, "dmoe"))
        better = sum(d < 0 for d in cmp.deltas.values())
        seed_ok = cmp.macro_candidate <= cmp.macro_baseline and better >= 8
        wins += seed_ok
        lines.append(f"s{seed}: {cmp.macro_candidate:.3f} vs {cmp.macro_baseline:.3f}, {better}/12 better")
        tiers = {c: v.tier for c, v in corpora(seed)[0].items()}
        for tier in tier_gain:
            tier_gain[tier].append(np.mean([cmp.improvement_pct[c] for c in cmp.languages if tiers[c] == tier]))
    gain = {k: float(np.mean(v)) for k, v in tier_gain.items()}
    low_largest = gain["low"] > gain["medium"] and gain["low"] > gain["high"]
    ok = wins >= 2 and low_largest
    record(
        8,
        ok,
        f"DMoE vs dense: {'; '.join(lines)}; {wins}/3 seeds (>= 2); mean gain % by tier "
        + ", ".join(f"{k} {v:+.2f}" for k, v in gain.items())
        + f" (low largest: {low_largest}); {_minutes(time.perf_counter() - t)}",
    )
    assert ok


def test_09_random_cluster_ablation():
    wins, lines = 0, []
    for seed in SEEDS:
        ours = float(np.mean(list(macro_ppl(seed, "dmoe").values())))
        rand = float(np.mean(list(macro_ppl(seed, "random-clusters").values())))
        wins += ours <= rand
        lines.append(f"s{seed}: {ours:.3f} vs {rand:.3f}")
    ok = wins >= 2
    record(9, ok, f"recovered vs random clusters: {'; '.join(lines)}; {wins}/3 seeds (>= 2)")
    assert ok


def test_10_adaptation_tradeoff():
    wins, lines, frozen_ok = 0, [], True
    for seed in SEEDS:
        r = adaptation(seed)
        seed_ok = r["dla_forgetting"] <= r["lapt_forgetting"] and r["dla_new"] <= r["frozen_new"]
        wins += seed_ok
        frozen_ok &= r["frozen_unchanged"]
        lines.append(
            f"s{seed} {r['language']}: forgetting DLA {r['dla_forgetting']:+.3f} / LAPT {r['lapt_forgetting']:+.3f}, "
            f"new PPL DLA {r['dla_new']:.3f} / frozen {r['frozen_new']:.3f}"
        )
    ok = wins >= 2 and frozen_ok
    record(10, ok, f"{'; '.join(lines)}; {wins}/3 seeds (>= 2); frozen params bitwise unchanged: {frozen_ok}")
    assert ok


def test_11_layer_selection():
    ranked, rand, lines = [], [], []
    for seed in SEEDS:
        ranked.append(float(np.mean(list(macro_ppl(seed, "dmoe").values()))))
        rand.append(float(np.mean(list(macro_ppl(seed, "random-layers").values()))))
        lines.append(f"s{seed}: {list(layers(seed, 'ranked'))} {ranked[-1]:.3f} vs {list(layers(seed, 'random'))} {rand[-1]:.3f}")
    ok = np.mean(ranked) <= np.mean(rand)
    record(11, ok, f"ranked vs random layers: {'; '.join(lines)}; mean {np.mean(ranked):.3f} vs {np.mean(rand):.3f}")
    assert ok


TINY = {
    "corpus": {"max_chars": 20000, "min_chars": 5000, "new_language_chars": 5000},
    "model": {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32, "max_sequence_length": 32},
    "pretrain": {"steps": 20, "warmup_steps": 5},
    "probe": {"steps": 3, "batch_size": 4, "sequence_length": 32, "last_layers": 0},
    "extension": {"stage1_steps": 5, "stage2_steps": 5, "epsilon": 0.5},
    "training": {"batch_size": 4, "sequence_length": 32},
    "adaptation": {"steps": 5},
    "evaluation": {"max_chars": 512},
}


def test_12_reproducibility(tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY))
    steps = ["gen-corpus", "pretrain-base", "probe", "cluster", "extend", "train", "train-baseline", "adapt"]
    for run in ("a", "b"):
        for cmd in steps:
            assert cli_main([cmd, "--config", str(config), "--run-dir", str(tmp_path / run)]) == 0
        for model in ("dmoe", "baseline", "dla-n00", "lapt-n00"):
            assert cli_main(["eval", "--model", model, "--config", str(config), "--run-dir", str(tmp_path / run)]) == 0
    compared, differ = 0, []
    for sub in ("checkpoints", "reports"):
        for p in sorted((tmp_path / "a" / "default" / sub).rglob("*")):
            if p.is_file():
                other = tmp_path / "b" / p.relative_to(tmp_path / "a")
                compared += 1
                if not other.exists() or other.read_bytes() != p.read_bytes():
                    differ.append(str(p.relative_to(tmp_path / "a")))
    ok = compared > 0 and not differ
    record(12, ok, f"two seeded end-to-end runs: {compared} checkpoint/report files compared, {len(differ)} differ")
    assert ok, differ
