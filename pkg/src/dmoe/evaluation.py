"""Held-out perplexity, router top-1 statistics and model comparison tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import SOFT, Routing, TransformerModel


@dataclass
class PerplexityResult:
    nll: float  # total, nats
    tokens: int  # predicted tokens
    units: int  # reference units for normalisation (characters)

    @property
    def token_ppl(self) -> float:
        return math.exp(self.nll / self.tokens)

    @property
    def char_ppl(self) -> float:
        return math.exp(self.nll / self.units)

    @property
    def bits_per_char(self) -> float:
        return self.nll / (math.log(2) * self.units)


def stream_windows(num_tokens: int, seq_len: int) -> list[tuple[int, int]]:
    """Windows [start, end) overlapping by one token so every token after the first is predicted once."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    out = []
    start = 0
    while start < num_tokens - 1:
        end = min(start + seq_len, num_tokens)
        out.append((start, end))
        start = end - 1
    return out


def _window_batches(stream: np.ndarray, seq_len: int, batch_size: int):
    windows = stream_windows(stream.size, seq_len)
    full = [w for w in windows if w[1] - w[0] == seq_len]
    partial = [w for w in windows if w[1] - w[0] != seq_len]
    for i in range(0, len(full), batch_size):
        chunk = full[i : i + batch_size]
        yield np.stack([stream[a:b] for a, b in chunk]).astype(np.int64)
    for a, b in partial:
        yield stream[a:b][None, :].astype(np.int64)


def perplexity(
    model: TransformerModel,
    stream,
    routing: Routing = SOFT,
    *,
    seq_len: int | None = None,
    batch_size: int = 16,
    units: int | None = None,
) -> PerplexityResult:
    """Teacher-forced NLL over a fixed token stream.

    ``units`` is the reference unit count for normalised perplexity; with the
    character tokenizer it defaults to the number of predicted tokens.
    """
    stream = np.asarray(stream).reshape(-1)
    if stream.size < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    seq_len = seq_len or model.config.max_sequence_length
    total = 0.0
    count = 0
    with T.no_grad():
        for tokens in _window_batches(stream, seq_len, batch_size):
            logits, _ = model.forward(tokens, routing)
            logp = T.log_softmax_np(logits.data[:, :-1, :])
            tgt = tokens[:, 1:]
            picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
            total -= float(picked.sum())
            count += tgt.size
    assert count == stream.size - 1
    return PerplexityResult(total, count, units if units is not None else count)


@dataclass
class EvalEntry:
    language: str
    token_ppl: float
    char_ppl: float
    bits_per_char: float
    tokens: int
    characters: int
    tier: str = ""


@dataclass
class EvalReport:
    model_id: str
    entries: dict[str, EvalEntry] = field(default_factory=dict)
    routing: str = "soft_topk"

    def ppl(self, metric: str = "char_ppl") -> dict[str, float]:
        return {c: getattr(e, metric) for c, e in sorted(self.entries.items())}

    def macro(self, metric: str = "char_ppl") -> float:
        vals = list(self.ppl(metric).values())
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "routing": self.routing,
            "languages": {c: asdict(e) for c, e in sorted(self.entries.items())},
        }

    def write(self, stem: Path) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        jpath = stem.with_suffix(".json")
        cpath = stem.with_suffix(".csv")
        jpath.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        cols = ["language", "tier", "token_ppl", "char_ppl", "bits_per_char", "tokens", "characters"]
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c, e in sorted(self.entries.items()):
                w.writerow([getattr(e, k) if not isinstance(getattr(e, k), float) else f"{getattr(e, k):.6f}" for k in cols])
        return jpath, cpath

    @classmethod
    def read(cls, path: Path) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"evaluation report not found: {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        entries = {c: EvalEntry(**e) for c, e in d["languages"].items()}
        return cls(d["model_id"], entries, d.get("routing", "soft_topk"))


def evaluate(
    model: TransformerModel,
    streams: Mapping[str, np.ndarray],
    *,
    model_id: str = "",
    routing: Routing = SOFT,
    seq_len: int | None = None,
    batch_size: int = 16,
    tiers: Mapping[str, str] | None = None,
) -> EvalReport:
    report = EvalReport(model_id or model.fingerprint(), routing=routing.mode)
    for code in sorted(streams):
        r = perplexity(model, streams[code], routing, seq_len=seq_len, batch_size=batch_size)
        report.entries[code] = EvalEntry(
            code, r.token_ppl, r.char_ppl, r.bits_per_char, r.tokens, r.units, (tiers or {}).get(code, "")
        )
    return report


@dataclass
class RouterStats:
    languages: list[str]
    layers: list[int]
    frequencies: dict[int, np.ndarray]  # layer -> [languages, g]

    def diagonal_mass(self, group_of: Mapping[str, int]) -> dict[int, float]:
        """Per layer, mean over languages of the top-1 frequency at the language's own-group expert."""
        out = {}
        for layer, F in self.frequencies.items():
            out[layer] = float(np.mean([F[i, group_of[c]] for i, c in enumerate(self.languages)]))
        return out

    def write_csv(self, directory: Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for layer, F in sorted(self.frequencies.items()):
            p = directory / f"layer_{layer}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["language"] + [f"expert_{e}" for e in range(F.shape[1])])
                for c, row in zip(self.languages, F):
                    w.writerow([c] + [f"{x:.6f}" for x in row])
            paths.append(p)
        return paths


def router_top1_stats(
    model: TransformerModel,
    streams: Mapping[str, np.ndarray],
    *,
    routing: Routing = SOFT,
    seq_len: int | None = None,
    batch_size: int = 16,
) -> RouterStats:
    """Frequency of each expert being the router's argmax, per language per MoE layer."""
    if not model.moe:
        raise ValueError("model has no MoE layers")
    seq_len = seq_len or model.config.max_sequence_length
    codes = sorted(streams)
    layers = sorted(model.moe)
    counts = {l: np.zeros((len(codes), model.moe[l].num_experts)) for l in layers}
    with T.no_grad():
        for i, code in enumerate(codes):
            stream = np.asarray(streams[code]).reshape(-1)
            for tokens in _window_batches(stream, seq_len, batch_size):
                _, routers = model.forward(tokens, routing)
                for r in routers:
                    top1 = np.argmax(r.probabilities.data, axis=1)
                    counts[r.layer][i] += np.bincount(top1, minlength=counts[r.layer].shape[1])
    freqs = {l: c / c.sum(axis=1, keepdims=True) for l, c in counts.items()}
    return RouterStats(codes, layers, freqs)


@dataclass
class Comparison:
    languages: list[str]
    baseline: dict[str, float]
    candidate: dict[str, float]

    @property
    def deltas(self) -> dict[str, float]:
        return {c: self.candidate[c] - self.baseline[c] for c in self.languages}

    @property
    def improvement_pct(self) -> dict[str, float]:
        return {c: 100.0 * (self.baseline[c] - self.candidate[c]) / self.baseline[c] for c in self.languages}

    @property
    def macro_baseline(self) -> float:
        return float(np.mean([self.baseline[c] for c in self.languages]))

    @property
    def macro_candidate(self) -> float:
        return float(np.mean([self.candidate[c] for c in self.languages]))

    @property
    def macro_delta(self) -> float:
        return self.macro_candidate - self.macro_baseline

    @property
    def macro_improvement_pct(self) -> float:
        return 100.0 * (self.macro_baseline - self.macro_candidate) / self.macro_baseline

    def rows(self) -> list[dict]:
        d, imp = self.deltas, self.improvement_pct
        out = [
            {"language": c, "baseline": self.baseline[c], "candidate": self.candidate[c], "delta": d[c], "improvement_pct": imp[c]}
            for c in self.languages
        ]
        out.append(
            {
                "language": "Avg",
                "baseline": self.macro_baseline,
                "candidate": self.macro_candidate,
                "delta": self.macro_delta,
                "improvement_pct": self.macro_improvement_pct,
            }
        )
        return out

    def write_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, ["language", "baseline", "candidate", "delta", "improvement_pct"], lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def compare_models(baseline, candidate, metric: str = "char_ppl") -> Comparison:
    """Per-language deltas (candidate - baseline), relative improvements and macro averages (lower is better)."""
    b = baseline.ppl(metric) if isinstance(baseline, EvalReport) else dict(baseline)
    c = candidate.ppl(metric) if isinstance(candidate, EvalReport) else dict(candidate)
    if set(b) != set(c):
        raise ValueError("reports cover different language sets")
    return Comparison(sorted(b), b, c)
