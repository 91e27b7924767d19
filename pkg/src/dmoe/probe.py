"""Parameter-deviation fingerprints from brief monolingual fine-tuning."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Batch, BatchPlan, monolingual_batches
from .model import TransformerModel
from .optim import OptimizerConfig, OptimizerState, adamw_step, clip_grad_norm


@dataclass
class DeviationRecord:
    language: str
    per_layer_delta: list[np.ndarray]
    per_layer_norm: list[float]
    probe_steps: int
    base_checkpoint_id: str
    layer_shapes: list[list[tuple[str, tuple[int, ...]]]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.per_layer_delta) != len(self.per_layer_norm):
            raise ValueError("one norm per layer delta is required")

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_delta)

    @classmethod
    def from_deltas(cls, language: str, deltas: Sequence[np.ndarray], probe_steps: int, base_id: str, shapes=None):
        deltas = [np.asarray(d, dtype=np.float64).reshape(-1) for d in deltas]
        norms = [float(np.linalg.norm(d)) for d in deltas]
        return cls(language, deltas, norms, probe_steps, base_id, list(shapes or []))

    def concat(self, layers: Sequence[int] | None = None) -> np.ndarray:
        idx = range(self.num_layers) if layers is None else layers
        return np.concatenate([self.per_layer_delta[i] for i in idx])


def block_vector(model: TransformerModel, layer: int) -> np.ndarray:
    return np.concatenate([model.params[n].data.reshape(-1) for n in model.block_param_names(layer)])


def probe_language(
    base: TransformerModel,
    ids: np.ndarray,
    steps: int,
    *,
    language: str = "",
    base_id: str = "",
    opt: OptimizerConfig | None = None,
    plan: BatchPlan | None = None,
    seed: int = 0,
    snapshots: Sequence[int] | None = None,
) -> DeviationRecord | dict[int, DeviationRecord]:
    """Fine-tune a copy of ``base`` on one language and return per-block parameter deltas.

    With ``snapshots`` the deltas are recorded after each listed step of the same
    run and a dict step -> record is returned; otherwise one record after ``steps``.
    """
    if steps < 1:
        raise ValueError("probe needs at least one step")
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError(f"empty corpus for language {language!r}")
    opt = opt or OptimizerConfig()
    plan = plan or BatchPlan(16, base.config.max_sequence_length)
    wanted = sorted(set(snapshots)) if snapshots else [steps]
    if wanted[-1] > steps or wanted[0] < 1:
        raise ValueError("snapshot steps must lie in [1, steps]")
    from .model import causal_lm_loss  # local to keep import graph flat

    model = base.clone()
    base_vecs = [block_vector(base, i) for i in range(base.config.num_layers)]
    shapes = [[(n, tuple(base.params[n].shape)) for n in base.block_param_names(i)] for i in range(base.config.num_layers)]
    params = model.params
    state = OptimizerState.from_config(params, opt)
    batches = monolingual_batches(ids, plan, seed)
    out: dict[int, DeviationRecord] = {}
    for step in range(1, steps + 1):
        tokens = next(batches)
        loss = causal_lm_loss(model, tokens)
        loss.backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        for p in params.values():
            p.grad = None
        if opt.grad_clip > 0:
            clip_grad_norm(grads, opt.grad_clip)
        adamw_step(params, grads, state)
        if step in wanted:
            deltas = [block_vector(model, i) - base_vecs[i] for i in range(base.config.num_layers)]
            out[step] = DeviationRecord.from_deltas(language, deltas, step, base_id, shapes)
    return out if snapshots else out[steps]


def _probe_worker(args):
    base, code, ids, steps, base_id, opt, plan, seed, snapshots = args
    return code, probe_language(
        base, ids, steps, language=code, base_id=base_id, opt=opt, plan=plan, seed=seed, snapshots=snapshots
    )


def probe_languages(
    base: TransformerModel,
    corpora: Mapping[str, np.ndarray],
    steps: int,
    *,
    base_id: str = "",
    opt: OptimizerConfig | None = None,
    plan: BatchPlan | None = None,
    seed: int = 0,
    snapshots: Sequence[int] | None = None,
    workers: int = 1,
) -> dict:
    """Probe every language; ``workers > 1`` runs probes in separate processes."""
    from .rng import derive_seed

    jobs = [
        (base, code, ids, steps, base_id, opt, plan, derive_seed(seed, "probe", code), snapshots)
        for code, ids in sorted(corpora.items())
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_probe_worker, jobs))
    else:
        results = [_probe_worker(j) for j in jobs]
    return dict(results)


def layer_profile(record: DeviationRecord) -> np.ndarray:
    """Per-layer deviation norms normalised to sum to 1."""
    norms = np.asarray(record.per_layer_norm, dtype=np.float64)
    total = norms.sum()
    if not total > 0:
        raise ValueError(f"all-zero deviation for {record.language!r}; profile undefined")
    return norms / total


@dataclass
class SimilarityMatrix:
    languages: list[str]
    values: np.ndarray
    layer_subset: list[int]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        n = len(self.languages)
        if v.shape != (n, n):
            raise ValueError(f"matrix shape {v.shape} does not match {n} languages")
        if len(set(self.languages)) != n:
            raise ValueError("duplicate language codes")
        self.values = v
        self._index = {c: i for i, c in enumerate(self.languages)}

    def index(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise KeyError(f"unknown language code {code!r}") from None

    def sim(self, a: str, b: str) -> float:
        return float(self.values[self.index(a), self.index(b)])

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([""] + self.languages)
            for code, row in zip(self.languages, self.values):
                w.writerow([code] + [f"{x:.6f}" for x in row])

    @classmethod
    def from_csv(cls, path: Path, layer_subset: Sequence[int] = ()) -> "SimilarityMatrix":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"similarity matrix not found: {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"empty similarity matrix file: {path}")
        header = rows[0][1:]
        codes = [r[0] for r in rows[1:]]
        if codes != header:
            raise ValueError("row and column labels of the similarity matrix differ")
        values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
        return cls(header, values, list(layer_subset))


def default_layer_subset(num_layers: int, last: int | None = 3) -> list[int]:
    """The last ``last`` blocks, or all blocks when ``last`` is None."""
    if last is None:
        return list(range(num_layers))
    return list(range(max(0, num_layers - last), num_layers))


def similarity_matrix(records: Sequence[DeviationRecord], layer_subset: Sequence[int] | None = None) -> SimilarityMatrix:
    """Cosine similarity between per-language deltas concatenated over ``layer_subset``."""
    if not records:
        raise ValueError("no deviation records")
    ids = {r.base_checkpoint_id for r in records}
    if len(ids) != 1:
        raise ValueError("deviation records come from different base checkpoints")
    n_layers = {r.num_layers for r in records}
    if len(n_layers) != 1:
        raise ValueError("deviation records disagree on the number of layers")
    N = n_layers.pop()
    subset = default_layer_subset(N) if layer_subset is None else list(layer_subset)
    if not subset:
        raise ValueError("layer_subset must be non-empty")
    if min(subset) < 0 or max(subset) >= N:
        raise ValueError("layer index out of range")
    vecs = np.stack([r.concat(subset) for r in records])
    norms = np.linalg.norm(vecs, axis=1)
    if (norms == 0).any():
        bad = [r.language for r, n in zip(records, norms) if n == 0]
        raise ValueError(f"zero deviation vector for {bad}")
    unit = vecs / norms[:, None]
    values = np.clip(unit @ unit.T, -1.0, 1.0)
    values = 0.5 * (values + values.T)
    np.fill_diagonal(values, 1.0)
    return SimilarityMatrix([r.language for r in records], values, subset)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# deviation files
# ---------------------------------------------------------------------------


def write_deviation(record: DeviationRecord, directory: Path, extra: dict | None = None) -> Path:
    """``<code>.json`` metadata plus ``<code>.bin`` little-endian float32 deltas in layer order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offsets = []
    offset = 0
    with open(directory / f"{record.language}.bin", "wb") as fh:
        for d in record.per_layer_delta:
            raw = np.ascontiguousarray(d, dtype="<f4").tobytes()
            fh.write(raw)
            offsets.append({"offset": offset, "count": int(d.size)})
            offset += len(raw)
    meta = {
        "language": record.language,
        "probe_steps": record.probe_steps,
        "base_checkpoint": record.base_checkpoint_id,
        "per_layer_norm": record.per_layer_norm,
        "layers": [
            {**o, "tensors": [{"name": n, "shape": list(s)} for n, s in shapes]}
            for o, shapes in zip(offsets, record.layer_shapes or [[] for _ in offsets])
        ],
    }
    if extra:
        meta.update(extra)
    path = directory / f"{record.language}.json"
    path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def read_deviation(directory: Path, code: str) -> DeviationRecord:
    directory = Path(directory)
    jpath, bpath = directory / f"{code}.json", directory / f"{code}.bin"
    for p in (jpath, bpath):
        if not p.exists():
            raise FileNotFoundError(f"deviation file not found: {p}")
    meta = json.loads(jpath.read_text(encoding="utf-8"))
    blob = bpath.read_bytes()
    deltas = [
        np.frombuffer(blob, dtype="<f4", count=l["count"], offset=l["offset"]).astype(np.float64)
        for l in meta["layers"]
    ]
    shapes = [[(t["name"], tuple(t["shape"])) for t in l.get("tensors", [])] for l in meta["layers"]]
    # norms were computed at float64 before truncation
    return DeviationRecord(meta["language"], deltas, list(meta["per_layer_norm"]), meta["probe_steps"], meta["base_checkpoint"], shapes)
