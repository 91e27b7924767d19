"""Pre-norm decoder-only transformer with optional mixture-of-experts FFN sub-layers."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import make_rng
from .tensor import Tensor

CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass
class ModelConfig:
    num_layers: int = 8
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 512
    vocab_size: int = 33
    max_sequence_length: int = 128

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def ffn_params(self) -> int:
        """Parameters of one feed-forward sub-layer (two matrices and biases)."""
        return 2 * self.hidden_dim * self.ffn_dim + self.ffn_dim + self.hidden_dim


@dataclass
class MoELayer:
    """Metadata for one extended block; weights live in the model's parameter dict."""

    num_experts: int
    top_k: int = 2
    expert_groups: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if not 1 <= self.top_k:
            raise ValueError("top_k must be >= 1")
        if not self.expert_groups:
            self.expert_groups = list(range(self.num_experts))
        if len(self.expert_groups) != self.num_experts:
            raise ValueError("expert_groups must label every expert")

    @property
    def effective_top_k(self) -> int:
        return min(self.top_k, self.num_experts)


@dataclass(frozen=True)
class Routing:
    """How MoE layers dispatch tokens: soft_topk, hard_expert(e) or hard_group(per-sequence groups)."""

    mode: str = "soft_topk"
    expert: int | None = None
    groups: tuple[int, ...] | None = None
    top_k: int | None = None
    active: int | None = None  # soft routing over the first ``active`` experts only

    @staticmethod
    def soft_topk(top_k: int | None = None, active: int | None = None) -> "Routing":
        return Routing("soft_topk", top_k=top_k, active=active)

    @staticmethod
    def hard_expert(e: int) -> "Routing":
        return Routing("hard_expert", expert=int(e))

    @staticmethod
    def hard_group(groups) -> "Routing":
        return Routing("hard_group", groups=tuple(int(g) for g in np.asarray(groups).reshape(-1)))


SOFT = Routing.soft_topk()


@dataclass
class RouterOutput:
    layer: int
    logits: Tensor  # [tokens, g]
    probabilities: Tensor  # [tokens, g]
    selected_experts: np.ndarray  # [tokens, k]
    gate_weights: np.ndarray  # [tokens, k]


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], moe: dict[int, MoELayer] | None = None):
        self.config = config
        self.params = params
        self.moe: dict[int, MoELayer] = dict(sorted((moe or {}).items()))
        self._mask_cache: dict[int, np.ndarray] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "TransformerModel":
        rng = make_rng(seed, "model-init")
        d, f, V = config.hidden_dim, config.ffn_dim, config.vocab_size
        proj_std = INIT_STD / math.sqrt(2 * config.num_layers)

        def normal(shape, std=INIT_STD):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p: dict[str, Tensor] = {
            "tok_emb": normal((V, d)),
            "pos_emb": normal((config.max_sequence_length, d)),
        }
        for i in range(config.num_layers):
            b = f"blocks.{i}."
            p[b + "ln1.weight"] = ones(d)
            p[b + "ln1.bias"] = zeros(d)
            p[b + "attn.wqkv"] = normal((d, 3 * d))
            p[b + "attn.bqkv"] = zeros(3 * d)
            p[b + "attn.wo"] = normal((d, d), proj_std)
            p[b + "attn.bo"] = zeros(d)
            p[b + "ln2.weight"] = ones(d)
            p[b + "ln2.bias"] = zeros(d)
            p[b + "ffn.w1"] = normal((d, f))
            p[b + "ffn.b1"] = zeros(f)
            p[b + "ffn.w2"] = normal((f, d), proj_std)
            p[b + "ffn.b2"] = zeros(d)
        p["ln_f.weight"] = ones(d)
        p["ln_f.bias"] = zeros(d)
        p["head.weight"] = normal((d, V))
        return cls(config, p)

    def clone(self) -> "TransformerModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return TransformerModel(copy.deepcopy(self.config), params, copy.deepcopy(self.moe))

    # -- introspection ------------------------------------------------------

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def block_param_names(self, layer: int) -> list[str]:
        prefix = f"blocks.{layer}."
        return [n for n in self.params if n.startswith(prefix)]

    def expert_prefix(self, layer: int, expert: int) -> str:
        return f"blocks.{layer}.experts.{expert}."

    def is_moe(self, layer: int) -> bool:
        return layer in self.moe

    def layer_kinds(self) -> list[str]:
        return ["moe" if i in self.moe else "dense" for i in range(self.config.num_layers)]

    def fingerprint(self) -> str:
        """Content hash over structure and every parameter's bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(_structure(self), sort_keys=True).encode())
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- forward ------------------------------------------------------------

    def _causal_mask(self, S: int) -> np.ndarray:
        m = self._mask_cache.get(S)
        if m is None:
            m = np.triu(np.full((S, S), -1e9), k=1)
            self._mask_cache[S] = m
        return m

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = T.gelu(x @ p[prefix + "w1"] + p[prefix + "b1"])
        return h @ p[prefix + "w2"] + p[prefix + "b2"]

    def _attention(self, h: Tensor, b: str) -> Tensor:
        p = self.params
        B, S, d = h.shape
        H = self.config.num_heads
        hd = d // H
        qkv = h @ p[b + "attn.wqkv"] + p[b + "attn.bqkv"]

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, S, H, hd).transpose(0, 2, 1, 3)

        q = heads(qkv[:, :, :d])
        k = heads(qkv[:, :, d : 2 * d])
        v = heads(qkv[:, :, 2 * d :])
        att = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(hd)) + self._causal_mask(S)
        att = T.softmax(att)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        return y @ p[b + "attn.wo"] + p[b + "attn.bo"]

    def _moe(self, h: Tensor, layer: int, routing: Routing, seq_len: int) -> tuple[Tensor, RouterOutput]:
        info = self.moe[layer]
        g = info.num_experts
        B, S, d = h.shape
        n = B * S
        x = h.reshape(n, d)
        router = self.params[f"blocks.{layer}.router"]
        if routing.mode == "soft_topk" and routing.active is not None:
            if not 1 <= routing.active <= g:
                raise ValueError(f"active expert count {routing.active} out of range for {g} experts")
            g = routing.active
            router = router[:, :g]
        logits = x @ router
        probs = T.softmax(logits)

        def expert(xs: Tensor, e: int) -> Tensor:
            return self._ffn(xs, self.expert_prefix(layer, e))

        if routing.mode == "soft_topk":
            k = min(routing.top_k or info.top_k, g)
            order = np.argsort(-probs.data, axis=1, kind="stable")[:, :k]
            mask = np.zeros((n, g))
            rows = np.arange(n)[:, None]
            mask[rows, order] = 1.0
            masked = probs * mask
            gates = masked / masked.sum(axis=-1, keepdims=True)
            out = None
            for e in range(g):
                idx = np.nonzero(mask[:, e])[0]
                if idx.size == 0:
                    continue
                if idx.size == n:
                    contrib = expert(x, e) * gates[:, e : e + 1]
                else:
                    contrib = expert(x[idx], e) * gates[idx, e : e + 1]
                    contrib = T.scatter_rows(contrib, idx, n)
                out = contrib if out is None else out + contrib
            selected = order
            gate_w = gates.data[rows, order]
        elif routing.mode == "hard_expert":
            e = routing.expert
            if e is None or not 0 <= e < g:
                raise ValueError(f"expert index {e} out of range for {g} experts")
            out = expert(x, e)
            selected = np.full((n, 1), e)
            gate_w = np.ones((n, 1))
        elif routing.mode == "hard_group":
            groups = np.asarray(routing.groups)
            if groups.shape != (B,):
                raise ValueError(f"hard_group needs one group per sequence ({B}), got {groups.shape}")
            if groups.min() < 0 or groups.max() >= g:
                raise ValueError(f"group id out of range for {g} experts")
            tok_groups = np.repeat(groups, S)
            present = np.unique(groups)
            if present.size == 1:
                out = expert(x, int(present[0]))
            else:
                out = None
                for e in present:
                    idx = np.nonzero(tok_groups == e)[0]
                    contrib = T.scatter_rows(expert(x[idx], int(e)), idx, n)
                    out = contrib if out is None else out + contrib
            selected = tok_groups[:, None]
            gate_w = np.ones((n, 1))
        else:
            raise ValueError(f"unknown routing mode {routing.mode!r}")
        return out.reshape(B, S, d), RouterOutput(layer, logits, probs, selected, gate_w)

    def forward(self, tokens, routing: Routing = SOFT) -> tuple[Tensor, list[RouterOutput]]:
        """Logits [B, S, V] and one RouterOutput per MoE layer (ascending layer index)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, S = tokens.shape
        cfg = self.config
        if S > cfg.max_sequence_length:
            raise ValueError(f"sequence length {S} exceeds {cfg.max_sequence_length}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id out of range")
        if routing.mode == "hard_expert" and self.moe:
            for layer, info in self.moe.items():
                if not 0 <= (routing.expert or 0) < info.num_experts or routing.expert is None:
                    raise ValueError(f"expert index {routing.expert} out of range at layer {layer}")
        p = self.params
        x = T.embedding(p["tok_emb"], tokens.astype(np.int64)) + p["pos_emb"][:S]
        routers: list[RouterOutput] = []
        for i in range(cfg.num_layers):
            b = f"blocks.{i}."
            h = T.layer_norm(x, p[b + "ln1.weight"], p[b + "ln1.bias"])
            x = x + self._attention(h, b)
            h = T.layer_norm(x, p[b + "ln2.weight"], p[b + "ln2.bias"])
            if i in self.moe:
                f, r = self._moe(h, i, routing, S)
                routers.append(r)
            else:
                f = self._ffn(h, b + "ffn.")
            x = x + f
        x = T.layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
        return x @ p["head.weight"], routers


def shifted_lm_loss(logits: Tensor, tokens: np.ndarray) -> Tensor:
    B, S, V = logits.shape
    pred = logits[:, :-1, :].reshape(B * (S - 1), V)
    return T.cross_entropy(pred, np.asarray(tokens)[:, 1:].reshape(-1).astype(np.int64))


def causal_lm_loss(model: TransformerModel, tokens, routing: Routing = SOFT) -> Tensor:
    """Mean next-token cross-entropy over positions 1..S-1."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] < 2:
        raise ValueError("causal LM loss needs sequences of length >= 2")
    logits, _ = model.forward(tokens, routing)
    return shifted_lm_loss(logits, tokens)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _structure(model: TransformerModel) -> dict:
    return {
        "config": asdict(model.config),
        "layers": [
            {"index": i, "kind": kind, **(asdict(model.moe[i]) if kind == "moe" else {})}
            for i, kind in enumerate(model.layer_kinds())
        ],
    }


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checkpoint_id(directory: Path) -> str:
    """Hash of manifest and weights together."""
    h = hashlib.sha256()
    h.update(file_sha256(Path(directory) / "manifest.json").encode())
    h.update(file_sha256(Path(directory) / "weights.bin").encode())
    return h.hexdigest()


def save_checkpoint(model: TransformerModel, directory: Path, provenance: dict | None = None, extra: dict | None = None) -> str:
    """Write manifest.json + weights.bin (little-endian float64, manifest order). Returns checkpoint id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(directory / "weights.bin", "wb") as fh:
        for name, p in model.params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dtype": "float64-le",
        **_structure(model),
        "moe_layers": sorted(model.moe),
        "tensors": tensors,
        "provenance": provenance or {},
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return checkpoint_id(directory)


def load_checkpoint(directory: Path) -> TransformerModel:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    wpath = directory / "weights.bin"
    for path in (mpath, wpath):
        if not path.exists():
            raise FileNotFoundError(f"checkpoint file not found: {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    blob = wpath.read_bytes()
    params = {}
    for t in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        params[t["name"]] = Tensor(arr.reshape(t["shape"]).astype(np.float64), requires_grad=True)
    moe = {}
    for layer in manifest["layers"]:
        if layer["kind"] == "moe":
            moe[layer["index"]] = MoELayer(layer["num_experts"], layer["top_k"], list(layer["expert_groups"]))
    return TransformerModel(ModelConfig(**manifest["config"]), params, moe)
