"""New-language adaptation: expert scoring, expert grafting and freeze-and-tune, plus the full fine-tune baseline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .corpus import Batch, BatchPlan, monolingual_batches
from .evaluation import perplexity
from .model import MoELayer, Routing, TransformerModel
from .optim import OptimizerConfig
from .rng import derive_seed, make_rng
from .tensor import Tensor
from .training import TrainReport, TrainSettings, clm_loss_fn, dmoe_loss_fn, train_steps

ROUTER_MODES = ("full", "new_column", "frozen")


@dataclass
class AdaptationPlan:
    new_language: str
    chosen_expert: int
    per_expert_ppl: list[float]
    frozen_parameter_names: list[str] = field(default_factory=list)
    trainable_parameter_names: list[str] = field(default_factory=list)
    new_expert: int = -1
    router_mode: str = "full"

    def __post_init__(self):
        ppl = self.per_expert_ppl
        if ppl and self.chosen_expert != int(np.argmin(ppl)):
            raise ValueError("chosen_expert must be the argmin of per_expert_ppl")
        overlap = set(self.frozen_parameter_names) & set(self.trainable_parameter_names)
        if overlap:
            raise ValueError(f"parameters both frozen and trainable: {sorted(overlap)[:3]}")

    def to_json(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def _num_experts(model: TransformerModel) -> int:
    if not model.moe:
        raise ValueError("model has no MoE layers")
    gs = {info.num_experts for info in model.moe.values()}
    if len(gs) != 1:
        raise ValueError(f"MoE layers disagree on the number of experts: {sorted(gs)}")
    return gs.pop()


def score_experts(
    model: TransformerModel,
    stream,
    *,
    seq_len: int | None = None,
    batch_size: int = 16,
) -> list[float]:
    """Held-out perplexity of ``stream`` with every token hard-routed to expert e at every MoE layer."""
    stream = np.asarray(stream).reshape(-1)
    if stream.size < 2:
        raise ValueError("empty corpus for expert scoring")
    g = _num_experts(model)
    return [
        perplexity(model, stream, Routing.hard_expert(e), seq_len=seq_len, batch_size=batch_size).token_ppl
        for e in range(g)
    ]


def choose_expert(per_expert_ppl) -> int:
    """Lowest perplexity wins; ties go to the lower index."""
    return int(np.argmin(np.asarray(per_expert_ppl)))


def graft_expert(
    model: TransformerModel,
    chosen_expert: int,
    seed: int,
    *,
    router_init: str = "copy",
    noise_std: float = 0.01,
) -> TransformerModel:
    """Append a deep copy of ``chosen_expert`` at every MoE layer and one router column.

    The new column copies the chosen expert's column plus N(0, noise_std^2) noise
    (``router_init="zero"`` starts it at zero). Existing weights are untouched.
    """
    g = _num_experts(model)
    if not 0 <= chosen_expert < g:
        raise ValueError(f"chosen expert {chosen_expert} out of range for {g} experts")
    if router_init not in ("copy", "zero"):
        raise ValueError("router_init must be 'copy' or 'zero'")
    out = model.clone()
    rng = make_rng(seed, "graft-router")
    for layer, info in out.moe.items():
        src = out.expert_prefix(layer, chosen_expert)
        dst = out.expert_prefix(layer, g)
        for name in [n for n in list(out.params) if n.startswith(src)]:
            out.params[dst + name[len(src) :]] = Tensor(out.params[name].data.copy(), requires_grad=True)
        rname = f"blocks.{layer}.router"
        w = out.params[rname].data
        if router_init == "copy":
            col = w[:, chosen_expert] + rng.normal(0.0, noise_std, size=w.shape[0])
        else:
            col = np.zeros(w.shape[0])
        out.params[rname] = Tensor(np.concatenate([w, col[:, None]], axis=1), requires_grad=True)
        groups = list(info.expert_groups) + [max(info.expert_groups) + 1]
        out.moe[layer] = MoELayer(g + 1, info.top_k, groups)
    # keep a canonical parameter order: new experts sit after the existing ones of their block
    out.params = _ordered(out)
    return out


def _ordered(model: TransformerModel) -> dict[str, Tensor]:
    def key(item):
        name = item[0]
        parts = name.split(".")
        if parts[0] == "blocks":
            layer = int(parts[1])
            if parts[2] == "experts":
                return (1, layer, 1, int(parts[3]), name)
            if parts[2] == "router":
                return (1, layer, 2, 0, name)
            return (1, layer, 0, 0, "")
        return (0 if parts[0] in ("tok_emb", "pos_emb") else 2, 0, 0, 0, "")

    items = list(model.params.items())
    # stable sort keeps original order within equal keys
    return dict(sorted(items, key=key))


def new_expert_parameters(model: TransformerModel, expert: int) -> list[str]:
    names = []
    for layer in model.moe:
        prefix = model.expert_prefix(layer, expert)
        names.extend(n for n in model.params if n.startswith(prefix))
    return names


def _batches(ids: np.ndarray, plan: BatchPlan, seed: int, group: int) -> Iterator[Batch]:
    for tokens in monolingual_batches(ids, plan, seed):
        groups = np.full(tokens.shape[0], group)
        yield Batch(tokens, [""] * tokens.shape[0], groups, group)


def dla_finetune(
    grafted: TransformerModel,
    ids,
    steps: int,
    opt: OptimizerConfig,
    settings: TrainSettings,
    seed: int,
    *,
    new_expert: int | None = None,
    router_mode: str = "full",
    routing: str = "hard",
    alpha: float = 1.28,
) -> tuple[TrainReport, TransformerModel, list[str], list[str]]:
    """Tune only the grafted experts (and the router, per ``router_mode``) on the new language.

    Returns (report, tuned model, trainable names, frozen names). With
    ``routing="hard"`` every new-language token goes to the new expert and the
    router learns the new language through the classification loss.
    """
    if router_mode not in ROUTER_MODES:
        raise ValueError(f"router_mode must be one of {ROUTER_MODES}")
    if routing not in ("hard", "soft"):
        raise ValueError("routing must be 'hard' or 'soft'")
    g = _num_experts(grafted)
    new_expert = g - 1 if new_expert is None else new_expert
    trainable = new_expert_parameters(grafted, new_expert)
    masks = None
    if router_mode != "frozen":
        routers = [f"blocks.{layer}.router" for layer in grafted.moe]
        trainable += routers
        if router_mode == "new_column":
            masks = {}
            for r in routers:
                m = np.zeros(grafted.params[r].shape, dtype=bool)
                m[:, new_expert] = True
                masks[r] = m
    frozen = [n for n in grafted.params if n not in set(trainable)]
    model = grafted.clone()
    ids = np.asarray(ids)
    if steps <= 0:
        return TrainReport(), model, trainable, frozen
    plan = BatchPlan(settings.batch_size, settings.sequence_length)
    batches = _batches(ids, plan, derive_seed(seed, "dla"), new_expert)
    use_alpha = alpha if router_mode != "frozen" else 0.0
    loss_fn = dmoe_loss_fn(use_alpha, hard=routing == "hard")
    report = train_steps(
        model, batches, steps, loss_fn, opt, trainable=trainable, masks=masks, log_interval=settings.log_interval
    )
    return report, model, trainable, frozen


def lapt_finetune(
    model: TransformerModel,
    ids,
    steps: int,
    opt: OptimizerConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[TrainReport, TransformerModel]:
    """Full fine-tuning on the new language with standard (soft top-k) routing."""
    out = model.clone()
    if steps <= 0:
        return TrainReport(), out
    plan = BatchPlan(settings.batch_size, settings.sequence_length)
    batches = _batches(np.asarray(ids), plan, derive_seed(seed, "lapt"), -1)
    report = train_steps(out, batches, steps, clm_loss_fn(), opt, log_interval=settings.log_interval)
    return report, out
