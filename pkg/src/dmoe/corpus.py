"""Synthetic Markov-chain languages with family structure, character tokenizer and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .rng import make_rng

ALPHABET = "abcdefghijklmnopqrstuvwxyz .,;'-"
SEPARATOR = "\n"


class CharTokenizer:
    """Bijection between characters of ``alphabet`` + separator and ids 0..V-1."""

    def __init__(self, alphabet: str = ALPHABET, separator: str = SEPARATOR):
        if len(set(alphabet)) != len(alphabet) or separator in alphabet:
            raise ValueError("alphabet symbols must be unique and exclude the separator")
        self.alphabet = alphabet
        self.separator = separator
        self.symbols = alphabet + separator
        self._ids = {c: i for i, c in enumerate(self.symbols)}
        self._lut = np.full(256, -1, dtype=np.int64)
        for c, i in self._ids.items():
            if ord(c) < 256:
                self._lut[ord(c)] = i

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    @property
    def separator_id(self) -> int:
        return len(self.alphabet)

    def encode(self, text: str) -> np.ndarray:
        try:
            raw = np.frombuffer(text.encode("latin-1"), dtype=np.uint8)
        except UnicodeEncodeError:
            raise ValueError("text contains characters outside the alphabet") from None
        ids = self._lut[raw]
        if (ids < 0).any():
            bad = sorted({text[i] for i in np.nonzero(ids < 0)[0][:10]})
            raise ValueError(f"characters outside the alphabet: {bad!r}")
        return ids.astype(np.uint8)

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in np.asarray(ids).reshape(-1))


@dataclass
class LanguageSpec:
    code: str
    family_id: int
    transition_table: np.ndarray
    corpus_size_chars: int
    seed: int

    def __post_init__(self):
        t = np.asarray(self.transition_table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("transition table must be square")
        if (t < 0).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValueError("transition table must be row-stochastic")
        if self.corpus_size_chars <= 0:
            raise ValueError("corpus_size_chars must be positive")
        self.transition_table = t


def _dirichlet_table(rng: np.random.Generator, size: int, concentration: float) -> np.ndarray:
    t = rng.dirichlet(np.full(size, concentration), size=size)
    return t / t.sum(axis=1, keepdims=True)


def generate_family(
    num_languages: int,
    base_seed: int,
    perturbation: float,
    *,
    family_id: int = 0,
    codes: Sequence[str] | None = None,
    sizes: Sequence[int] | None = None,
    alphabet_size: int = len(ALPHABET),
    concentration: float = 0.05,
) -> list[LanguageSpec]:
    """Languages whose tables mix one shared base table with independent noise tables."""
    if num_languages < 1:
        raise ValueError("num_languages must be >= 1")
    if not 0.0 <= perturbation <= 1.0:
        raise ValueError("perturbation must lie in [0, 1]")
    codes = list(codes) if codes is not None else [f"f{family_id}l{i}" for i in range(num_languages)]
    sizes = list(sizes) if sizes is not None else [200_000] * num_languages
    if len(codes) != num_languages or len(sizes) != num_languages:
        raise ValueError("codes and sizes must have num_languages entries")
    base = _dirichlet_table(make_rng(base_seed, "family-base"), alphabet_size, concentration)
    specs = []
    for i in range(num_languages):
        lang_seed = int(make_rng(base_seed, "language-seed", i).integers(0, 2**31 - 1))
        noise = _dirichlet_table(make_rng(lang_seed, "noise"), alphabet_size, concentration)
        table = (1.0 - perturbation) * base + perturbation * noise
        table /= table.sum(axis=1, keepdims=True)
        specs.append(LanguageSpec(codes[i], family_id, table, int(sizes[i]), lang_seed))
    return specs


def total_variation(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over rows of the total-variation distance between two stochastic tables."""
    return float(0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=1).mean())


def log_spaced_sizes(n: int, largest: int, smallest: int) -> list[int]:
    if n == 1:
        return [int(largest)]
    return [int(round(x)) for x in np.geomspace(largest, smallest, n)]


@dataclass
class CorpusConfig:
    num_families: int = 4
    languages_per_family: int = 3
    perturbation: float = 0.1
    max_chars: int = 2_000_000
    min_chars: int = 200_000
    heldout_fraction: float = 0.05
    num_new_languages: int = 1
    new_language_chars: int = 200_000
    concentration: float = 0.05  # sparse rows: characters carry family identity
    doc_min_chars: int = 64
    doc_max_chars: int = 512


def generate_languages(cfg: CorpusConfig, seed: int) -> tuple[list[LanguageSpec], list[LanguageSpec]]:
    """Training languages and held-out "new" languages.

    Language ``i`` belongs to family ``i % num_families`` and sizes decrease with
    ``i``, so each family spans every resource tier. New languages are extra
    members of families ``0, 1, ...`` that never appear in training.
    """
    n_train = cfg.num_families * cfg.languages_per_family
    sizes = log_spaced_sizes(n_train, cfg.max_chars, cfg.min_chars)
    family_seeds = [int(make_rng(seed, "family", f).integers(0, 2**31 - 1)) for f in range(cfg.num_families)]
    members: dict[int, list[int]] = {f: [] for f in range(cfg.num_families)}
    for i in range(n_train):
        members[i % cfg.num_families].append(i)
    new_per_family = {f: 0 for f in range(cfg.num_families)}
    for j in range(cfg.num_new_languages):
        new_per_family[j % cfg.num_families] += 1

    train: list[LanguageSpec | None] = [None] * n_train
    new: list[LanguageSpec] = []
    for f in range(cfg.num_families):
        idx = members[f]
        extra = new_per_family[f]
        codes = [f"l{i:02d}" for i in idx] + [f"n{f}{k}" for k in range(extra)]
        fam_sizes = [sizes[i] for i in idx] + [cfg.new_language_chars] * extra
        specs = generate_family(
            len(codes),
            family_seeds[f],
            cfg.perturbation,
            family_id=f,
            codes=codes,
            sizes=fam_sizes,
            concentration=cfg.concentration,
        )
        for i, spec in zip(idx, specs):
            train[i] = spec
        new.extend(specs[len(idx):])
    new.sort(key=lambda s: s.code)
    return [s for s in train if s is not None], new


def stationary_distribution(table: np.ndarray, iters: int = 200) -> np.ndarray:
    p = np.full(table.shape[0], 1.0 / table.shape[0])
    for _ in range(iters):
        p = p @ table
    return p / p.sum()


def generate_text(spec: LanguageSpec, cfg: CorpusConfig, tokenizer: CharTokenizer | None = None) -> str:
    """Documents of the language's chain, one per line, totalling ``corpus_size_chars`` characters.

    All documents are advanced in lockstep so the per-character loop runs over
    positions only; the output depends only on ``spec`` and ``cfg``.
    """
    tok = tokenizer or CharTokenizer()
    rng = make_rng(spec.seed, "text")
    total = spec.corpus_size_chars
    lengths = []
    used = 0
    while used < total:
        n = int(rng.integers(cfg.doc_min_chars, cfg.doc_max_chars + 1))
        n = min(n, total - used)
        # +1 for the separator; the last document may lose it
        lengths.append(n)
        used += n + 1
    lengths_arr = np.array(lengths)
    n_docs = len(lengths)
    max_len = int(lengths_arr.max())
    cdf = np.cumsum(spec.transition_table, axis=1)
    cdf[:, -1] = 1.0
    start = np.cumsum(stationary_distribution(spec.transition_table))
    start[-1] = 1.0
    out = np.empty((n_docs, max_len), dtype=np.int64)
    u = rng.random((n_docs, max_len))
    cur = np.searchsorted(start, u[:, 0], side="right")
    out[:, 0] = cur
    for t in range(1, max_len):
        rows = cdf[cur]
        cur = (rows < u[:, t : t + 1]).sum(axis=1)
        out[:, t] = cur
    symbols = np.frombuffer(tok.alphabet.encode("latin-1"), dtype=np.uint8)
    lines = [symbols[out[d, : lengths_arr[d]]].tobytes().decode("latin-1") for d in range(n_docs)]
    text = SEPARATOR.join(lines)
    return text[:total]


@dataclass
class LanguageCorpus:
    code: str
    family_id: int
    train_ids: np.ndarray
    heldout_ids: np.ndarray
    size_chars: int
    seed: int = 0
    tier: str = ""

    @property
    def size(self) -> int:
        return int(self.train_ids.size)


def split_corpus(ids: np.ndarray, heldout_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    cut = int(round(ids.size * (1.0 - heldout_fraction)))
    return ids[:cut], ids[cut:]


def tier_names(n: int) -> list[str]:
    """high/medium/low tier per size rank (rank 0 = largest)."""
    names = ["high", "medium", "low"]
    return [names[min(2, (3 * r) // n)] for r in range(n)]


def build_corpora(
    specs: Sequence[LanguageSpec], cfg: CorpusConfig, texts: Mapping[str, str] | None = None
) -> dict[str, LanguageCorpus]:
    tok = CharTokenizer()
    ranked = sorted(specs, key=lambda s: (-s.corpus_size_chars, s.code))
    tiers = dict(zip([s.code for s in ranked], tier_names(len(ranked))))
    out = {}
    for spec in specs:
        text = texts[spec.code] if texts is not None else generate_text(spec, cfg, tok)
        ids = tok.encode(text)
        tr, ho = split_corpus(ids, cfg.heldout_fraction)
        out[spec.code] = LanguageCorpus(spec.code, spec.family_id, tr, ho, spec.corpus_size_chars, spec.seed, tiers[spec.code])
    return out


# ---------------------------------------------------------------------------
# sampling and batching
# ---------------------------------------------------------------------------


def sample_language_weights(corpus_sizes: Mapping[str, float], exponent: float) -> dict[str, float]:
    """Temperature sampling: p_x proportional to n_x ** exponent."""
    if not corpus_sizes:
        raise ValueError("corpus_sizes is empty")
    if exponent <= 0:
        raise ValueError("exponent must be positive")
    if any(n <= 0 for n in corpus_sizes.values()):
        raise ValueError("corpus sizes must be positive")
    codes = sorted(corpus_sizes)
    raw = np.array([float(corpus_sizes[c]) for c in codes]) ** exponent
    raw /= raw.sum()
    return dict(zip(codes, raw.tolist()))


@dataclass
class BatchPlan:
    batch_size: int = 16
    sequence_length: int = 128
    homogeneous: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.sequence_length < 2:
            raise ValueError("batch_size must be >= 1 and sequence_length >= 2")


@dataclass
class Batch:
    tokens: np.ndarray  # [B, S] int64
    languages: list[str]
    groups: np.ndarray  # [B], -1 when no assignment is given
    group: int | None = None  # set for group-homogeneous batches

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.size)


def make_batches(
    corpora: Mapping[str, LanguageCorpus],
    plan: BatchPlan,
    seed: int,
    *,
    group_of: Mapping[str, int] | None = None,
    exponent: float = 0.3,
    weights: Mapping[str, float] | None = None,
) -> Iterator[Batch]:
    """Endless deterministic stream of training batches.

    Languages are drawn from the temperature-sampling weights. In homogeneous
    mode a group is drawn first (with the summed weight of its languages), then
    every sequence of the batch from languages of that group, which keeps the
    marginal language frequencies unchanged.
    """
    if not corpora:
        raise ValueError("no corpora given")
    codes = sorted(corpora)
    for c in codes:
        if corpora[c].size < plan.sequence_length:
            raise ValueError(f"corpus {c} is shorter than one sequence")
    if weights is None:
        weights = sample_language_weights({c: corpora[c].size for c in codes}, exponent)
    w = np.array([weights[c] for c in codes], dtype=np.float64)
    w /= w.sum()
    if plan.homogeneous:
        if group_of is None:
            raise ValueError("homogeneous batching needs a group assignment")
        missing = [c for c in codes if c not in group_of]
        if missing:
            raise ValueError(f"languages without a group: {missing}")
    groups_arr = np.array([group_of[c] if group_of is not None and c in group_of else -1 for c in codes])
    rng = make_rng(seed, "batches")
    B, S = plan.batch_size, plan.sequence_length
    if plan.homogeneous:
        labels = sorted(set(groups_arr.tolist()))
        members = {k: np.nonzero(groups_arr == k)[0] for k in labels}
        gw = np.array([w[members[k]].sum() for k in labels])
        gw /= gw.sum()
    while True:
        if plan.homogeneous:
            k = labels[int(rng.choice(len(labels), p=gw))]
            idx = members[k]
            lw = w[idx] / w[idx].sum()
            chosen = idx[rng.choice(len(idx), size=B, p=lw)]
            batch_group: int | None = int(k)
        else:
            chosen = rng.choice(len(codes), size=B, p=w)
            batch_group = None
        tokens = np.empty((B, S), dtype=np.int64)
        for b, li in enumerate(chosen):
            ids = corpora[codes[li]].train_ids
            start = int(rng.integers(0, ids.size - S + 1))
            tokens[b] = ids[start : start + S]
        yield Batch(tokens, [codes[i] for i in chosen], groups_arr[chosen].copy(), batch_group)


def monolingual_batches(ids: np.ndarray, plan: BatchPlan, seed: int) -> Iterator[np.ndarray]:
    """Uniformly positioned windows from one token array."""
    if ids.size < plan.sequence_length:
        raise ValueError("corpus is shorter than one sequence")
    rng = make_rng(seed, "mono")
    B, S = plan.batch_size, plan.sequence_length
    while True:
        starts = rng.integers(0, ids.size - S + 1, size=B)
        yield np.stack([ids[s : s + S] for s in starts]).astype(np.int64)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_corpus(
    directory: Path,
    specs: Sequence[LanguageSpec],
    texts: Mapping[str, str],
    new_codes: Sequence[str] = (),
    extra: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        (directory / f"{spec.code}.txt").write_text(texts[spec.code] + "\n", encoding="utf-8")
    manifest = {
        "alphabet": ALPHABET,
        "separator": SEPARATOR,
        "languages": [
            {
                "code": s.code,
                "family_id": s.family_id,
                "size_chars": s.corpus_size_chars,
                "seed": s.seed,
                "new": s.code in set(new_codes),
            }
            for s in specs
        ],
    }
    if extra:
        manifest.update(extra)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"corpus manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def read_language_text(directory: Path, code: str) -> str:
    path = Path(directory) / f"{code}.txt"
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def load_corpora(directory: Path, codes: Sequence[str] | None = None, heldout_fraction: float = 0.05) -> dict[str, LanguageCorpus]:
    manifest = read_manifest(directory)
    entries = manifest["languages"]
    known = {e["code"]: e for e in entries}
    wanted = list(codes) if codes is not None else [e["code"] for e in entries if not e.get("new", False)]
    tok = CharTokenizer(manifest["alphabet"], manifest["separator"])
    ranked = sorted((known[c] for c in wanted if c in known), key=lambda e: (-e["size_chars"], e["code"]))
    tiers = dict(zip([e["code"] for e in ranked], tier_names(len(ranked)) if ranked else []))
    out = {}
    for c in wanted:
        if c not in known:
            raise KeyError(f"language {c!r} not in corpus manifest")
        ids = tok.encode(read_language_text(directory, c))
        tr, ho = split_corpus(ids, heldout_fraction)
        e = known[c]
        out[c] = LanguageCorpus(c, e["family_id"], tr, ho, e["size_chars"], e["seed"], tiers.get(c, ""))
    return out
