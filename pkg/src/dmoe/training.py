"""Layer selection, MoE extension, router classification loss and the training stages."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .clustering import GroupAssignment
from .corpus import Batch, BatchPlan, LanguageCorpus, make_batches
from .model import MoELayer, ModelConfig, RouterOutput, Routing, TransformerModel, shifted_lm_loss
from .optim import OptimizerConfig, OptimizerState, adamw_step, clip_grad_norm
from .probe import DeviationRecord, layer_profile
from .rng import derive_seed, make_rng
from .tensor import Tensor

ROUTER_INIT_STD = 0.02


@dataclass
class ExtensionConfig:
    epsilon: float = 0.4
    num_experts: int = 4
    alpha: float = 1.28
    stage1_steps: int = 600
    stage2_steps: int = 400
    aggregation: str = "mean"
    top_k: int = 2
    stage2_rc: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.aggregation not in ("mean", "max"):
            raise ValueError("aggregation must be 'mean' or 'max'")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("stage steps must be >= 0")

    @staticmethod
    def split_steps(total: int, stage1_fraction: float = 0.6) -> tuple[int, int]:
        s1 = int(round(total * stage1_fraction))
        return s1, total - s1


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)
    tokens: int = 0
    steps: int = 0
    wall_clock: float = 0.0
    checkpoint_id: str = ""

    def extend(self, other: "TrainReport", step_offset: int = 0) -> None:
        for r in other.records:
            self.records.append({**r, "step": r["step"] + step_offset, "tokens": r["tokens"] + self.tokens})
        self.tokens += other.tokens
        self.steps += other.steps
        self.wall_clock += other.wall_clock

    def losses(self, key: str = "clm") -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def write_jsonl(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


# a loss function returns (combined loss tensor, clm value, rc value, alpha)
LossFn = Callable[[TransformerModel, Batch], tuple[Tensor, float, float, float]]


def train_steps(
    model: TransformerModel,
    batches: Iterator[Batch],
    steps: int,
    loss_fn: LossFn,
    opt: OptimizerConfig,
    *,
    trainable: Sequence[str] | None = None,
    masks: Mapping[str, np.ndarray] | None = None,
    log_interval: int = 1,
    lr: float | None = None,
    warmup_steps: int = 0,
    state: OptimizerState | None = None,
) -> TrainReport:
    """Run ``steps`` AdamW updates on ``trainable`` parameters (all by default), in place."""
    report = TrainReport()
    if steps <= 0:
        return report
    names = list(model.params) if trainable is None else list(trainable)
    unknown = [n for n in names if n not in model.params]
    if unknown:
        raise KeyError(f"unknown parameters: {unknown[:5]}")
    train_set = set(names)
    saved_flags = {n: p.requires_grad for n, p in model.params.items()}
    for n, p in model.params.items():
        p.requires_grad = n in train_set
        p.grad = None
    params = {n: model.params[n] for n in names}
    base_lr = opt.effective_lr if lr is None else lr
    if state is None:
        state = OptimizerState.from_config(params, opt, lr=base_lr)
    t0 = time.perf_counter()
    try:
        for step in range(1, steps + 1):
            batch = next(batches)
            loss, clm, rc, alpha = loss_fn(model, batch)
            loss.backward()
            grads = {}
            for n, p in params.items():
                grads[n] = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.grad = None
            if opt.grad_clip > 0:
                clip_grad_norm(grads, opt.grad_clip)
            step_lr = base_lr * min(1.0, step / warmup_steps) if warmup_steps > 0 else base_lr
            adamw_step(params, grads, state, lr=step_lr, masks=masks)
            report.tokens += batch.num_tokens
            if step % log_interval == 0 or step == steps:
                report.records.append(
                    {
                        "step": step,
                        "clm": clm,
                        "rc": rc,
                        "alpha": alpha,
                        "combined": loss.item(),
                        "tokens": report.tokens,
                    }
                )
    finally:
        for n, p in model.params.items():
            p.requires_grad = saved_flags[n]
            p.grad = None
    report.steps = steps
    report.wall_clock = time.perf_counter() - t0
    return report


def clm_loss_fn(routing: Routing | None = None) -> LossFn:
    def fn(model: TransformerModel, batch: Batch):
        logits, _ = model.forward(batch.tokens, routing or Routing.soft_topk())
        loss = shifted_lm_loss(logits, batch.tokens)
        return loss, loss.item(), 0.0, 0.0

    return fn


# ---------------------------------------------------------------------------
# layer selection and extension
# ---------------------------------------------------------------------------


def num_selected_layers(epsilon: float, num_layers: int) -> int:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
    return max(1, min(num_layers, math.ceil(epsilon * num_layers - 1e-9)))


def select_layers(records: Sequence[DeviationRecord], epsilon: float, aggregation: str = "mean") -> list[int]:
    """Indices of the top ceil(epsilon * N) layers by aggregated deviation profile (ties -> lower index)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not records:
        raise ValueError("no deviation records")
    n_layers = {len(r.per_layer_norm) for r in records}
    if len(n_layers) != 1:
        raise ValueError("deviation records disagree on the number of layers")
    profiles = np.array([layer_profile(r) for r in records])
    if aggregation == "mean":
        agg = profiles.mean(axis=0)
    elif aggregation == "max":
        agg = profiles.max(axis=0)
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    n = num_selected_layers(epsilon, profiles.shape[1])
    order = sorted(range(profiles.shape[1]), key=lambda i: (-agg[i], i))
    return sorted(order[:n])


def random_layers(num_layers: int, epsilon: float, seed: int) -> list[int]:
    n = num_selected_layers(epsilon, num_layers)
    rng = make_rng(seed, "random-layers")
    return sorted(int(i) for i in rng.choice(num_layers, size=n, replace=False))


FFN_KEYS = ("w1", "b1", "w2", "b2")


def extend_to_moe(
    dense: TransformerModel,
    layers: Sequence[int],
    num_experts: int,
    assignment: GroupAssignment | None,
    seed: int,
    top_k: int = 2,
) -> TransformerModel:
    """Clone the FFN of each selected layer into ``num_experts`` experts and add a fresh router.

    Expert ``e`` serves group ``e``; router weights are drawn from N(0, 0.02^2).
    """
    cfg = dense.config
    layers = sorted(set(int(i) for i in layers))
    for i in layers:
        if not 0 <= i < cfg.num_layers:
            raise ValueError(f"layer index {i} out of range for {cfg.num_layers} layers")
        if dense.is_moe(i):
            raise ValueError(f"layer {i} is already a MoE layer")
    if assignment is not None and assignment.num_groups != num_experts:
        raise ValueError(f"num_experts ({num_experts}) must equal the number of groups ({assignment.num_groups})")
    rng = make_rng(seed, "router-init")
    params: dict[str, Tensor] = {}
    moe = dict(dense.moe)
    for name, p in dense.params.items():
        parts = name.split(".")
        if parts[0] == "blocks" and int(parts[1]) in layers and parts[2] == "ffn":
            i, key = int(parts[1]), parts[3]
            for e in range(num_experts):
                params[f"blocks.{i}.experts.{e}.{key}"] = Tensor(p.data.copy(), requires_grad=True)
            if key == FFN_KEYS[-1]:
                w = rng.normal(0.0, ROUTER_INIT_STD, size=(cfg.hidden_dim, num_experts))
                params[f"blocks.{i}.router"] = Tensor(w, requires_grad=True)
                moe[i] = MoELayer(num_experts, top_k, list(range(num_experts)))
        else:
            params[name] = Tensor(p.data.copy(), requires_grad=True)
    return TransformerModel(cfg, params, moe)


def router_classification_loss(router_outputs: Sequence, group_ids) -> Tensor:
    """Mean over tokens and MoE layers of -log P_layer(group | token).

    Items may be RouterOutput (uses its logits, numerically stable) or
    probability tensors/arrays of shape [tokens, g].
    """
    group_ids = np.asarray(group_ids).reshape(-1).astype(np.int64)
    if not len(router_outputs):
        raise ValueError("no MoE layers to classify with")
    terms = []
    for r in router_outputs:
        if isinstance(r, RouterOutput):
            g = r.logits.shape[1]
            _check_groups(group_ids, g, r.logits.shape[0])
            terms.append(T.cross_entropy(r.logits, group_ids))
        else:
            probs = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
            _check_groups(group_ids, probs.shape[1], probs.shape[0])
            terms.append(T.nll_from_probs(probs, group_ids))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(terms))


def _check_groups(group_ids: np.ndarray, g: int, n: int) -> None:
    if group_ids.shape[0] != n:
        raise ValueError(f"expected {n} group ids, got {group_ids.shape[0]}")
    if group_ids.min() < 0 or group_ids.max() >= g:
        raise ValueError(f"group id out of range for {g} experts")


def dmoe_loss_fn(alpha: float, hard: bool) -> LossFn:
    """CLM + alpha * RC; ``hard`` routes each sequence to its group's expert."""

    def fn(model: TransformerModel, batch: Batch):
        routing = Routing.hard_group(batch.groups) if hard else Routing.soft_topk()
        logits, routers = model.forward(batch.tokens, routing)
        clm = shifted_lm_loss(logits, batch.tokens)
        if alpha > 0 and routers:
            tok_groups = np.repeat(batch.groups, batch.tokens.shape[1])
            rc = router_classification_loss(routers, tok_groups)
            return clm + T.scale(rc, alpha), clm.item(), rc.item(), alpha
        rc_val = 0.0
        if routers and (batch.groups >= 0).all():
            with T.no_grad():
                tok_groups = np.repeat(batch.groups, batch.tokens.shape[1])
                rc_val = router_classification_loss(routers, tok_groups).item()
        return clm, clm.item(), rc_val, alpha

    return fn


@dataclass
class TrainSettings:
    batch_size: int = 16
    sequence_length: int = 128
    sampling_exponent: float = 0.3
    log_interval: int = 10


def train_dmoe(
    model: TransformerModel,
    corpora: Mapping[str, LanguageCorpus],
    assignment: GroupAssignment,
    config: ExtensionConfig,
    opt: OptimizerConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[TrainReport, TransformerModel]:
    """Two-stage DMoE training on a copy of ``model``.

    Stage 1: group-homogeneous batches, hard group routing, CLM + alpha*RC.
    Stage 2: mixed batches, soft top-k routing, CLM only (RC kept if ``stage2_rc``).
    """
    if not model.moe:
        raise ValueError("model has no MoE layers")
    gs = {info.num_experts for info in model.moe.values()}
    if gs != {assignment.num_groups}:
        raise ValueError(f"experts per layer {sorted(gs)} must equal the number of groups {assignment.num_groups}")
    missing = [c for c in corpora if c not in assignment.group_of]
    if missing:
        raise ValueError(f"languages without a group: {missing}")
    out = model.clone()
    report = TrainReport()
    s1, s2 = config.stage1_steps, config.stage2_steps
    if s1:
        plan = BatchPlan(settings.batch_size, settings.sequence_length, homogeneous=True)
        batches = make_batches(corpora, plan, derive_seed(seed, "stage1"), group_of=assignment.group_of, exponent=settings.sampling_exponent)
        r = train_steps(out, batches, s1, dmoe_loss_fn(config.alpha, hard=True), opt, log_interval=settings.log_interval)
        for rec in r.records:
            rec["stage"] = 1
        report.extend(r)
    if s2:
        plan = BatchPlan(settings.batch_size, settings.sequence_length, homogeneous=False)
        batches = make_batches(
            corpora, plan, derive_seed(seed, "stage2"), group_of=assignment.group_of, exponent=settings.sampling_exponent
        )
        alpha2 = config.alpha if config.stage2_rc else 0.0
        r = train_steps(out, batches, s2, dmoe_loss_fn(alpha2, hard=False), opt, log_interval=settings.log_interval)
        for rec in r.records:
            rec["stage"] = 2
        report.extend(r, step_offset=s1)
    return report, out


def train_dense_baseline(
    model: TransformerModel,
    corpora: Mapping[str, LanguageCorpus],
    steps: int,
    opt: OptimizerConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[TrainReport, TransformerModel]:
    """Continued CLM pre-training on mixed-language batches (the "+ Pre-train" baseline)."""
    if not corpora:
        raise ValueError("no corpora given")
    out = model.clone()
    if steps <= 0:
        return TrainReport(), out
    plan = BatchPlan(settings.batch_size, settings.sequence_length, homogeneous=False)
    batches = make_batches(corpora, plan, derive_seed(seed, "baseline"), exponent=settings.sampling_exponent)
    report = train_steps(out, batches, steps, clm_loss_fn(), opt, log_interval=settings.log_interval)
    return report, out


@dataclass
class PretrainSettings:
    steps: int = 2000
    lr: float = 2e-3
    warmup_steps: int = 100


def pretrain_base(
    corpora: Mapping[str, LanguageCorpus],
    model_cfg: ModelConfig,
    pre: PretrainSettings,
    opt: OptimizerConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[TrainReport, TransformerModel]:
    """Dense multilingual base model trained from scratch (stands in for the pretrained LLM)."""
    model = TransformerModel.init(model_cfg, seed)
    plan = BatchPlan(settings.batch_size, settings.sequence_length, homogeneous=False)
    batches = make_batches(corpora, plan, derive_seed(seed, "pretrain"), exponent=settings.sampling_exponent)
    report = train_steps(
        model,
        batches,
        pre.steps,
        clm_loss_fn(),
        opt,
        log_interval=settings.log_interval,
        lr=pre.lr,
        warmup_steps=pre.warmup_steps,
    )
    return report, model
