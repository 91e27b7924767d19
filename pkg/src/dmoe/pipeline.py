"""Pipeline stages over a run directory.

Layout: ``<run_dir>/<name>/{corpus,deviations,groups,checkpoints,reports}``.
Every artifact records the sha256 of each input it consumed; wall-clock
timestamps go only to the sidecar ``run.log``.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from . import clustering as C
from .adaptation import AdaptationPlan, choose_expert, dla_finetune, graft_expert, lapt_finetune, score_experts
from .config import RunConfig
from .corpus import BatchPlan, CharTokenizer, generate_languages, generate_text, load_corpora, read_manifest, write_corpus
from .evaluation import EvalReport, compare_models, evaluate, router_top1_stats
from .model import Routing, TransformerModel, checkpoint_id, file_sha256, load_checkpoint, save_checkpoint
from .probe import (
    SimilarityMatrix,
    default_layer_subset,
    probe_languages,
    read_deviation,
    similarity_matrix,
    write_deviation,
)
from .rng import derive_seed, make_rng
from .training import (
    extend_to_moe,
    pretrain_base,
    random_layers,
    select_layers,
    train_dense_baseline,
    train_dmoe,
)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.content(), sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.root

    # -- paths ---------------------------------------------------------------

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def deviation_dir(self) -> Path:
        return self.root / "deviations"

    @property
    def groups_path(self) -> Path:
        return self.root / "groups" / "groups.json"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def checkpoint_dir(self, name: str) -> Path:
        p = Path(name)
        if p.is_absolute() or len(p.parts) > 1:
            return p
        return self.root / "checkpoints" / name

    def log(self, message: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
        with open(self.root / "run.log", "a", encoding="utf-8") as fh:
            fh.write(f"{stamp} {message}\n")

    def provenance(self, **inputs: str) -> dict:
        return {"config_sha256": config_hash(self.cfg), "seed": self.cfg.seed, "inputs": dict(sorted(inputs.items()))}

    # -- inputs --------------------------------------------------------------

    def corpus_id(self) -> str:
        path = self.corpus_dir / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"corpus manifest not found: {path}")
        return file_sha256(path)

    def manifest(self) -> dict:
        return read_manifest(self.corpus_dir)

    def train_codes(self) -> list[str]:
        return [e["code"] for e in self.manifest()["languages"] if not e.get("new", False)]

    def new_codes(self) -> list[str]:
        return [e["code"] for e in self.manifest()["languages"] if e.get("new", False)]

    def corpora(self, codes: Sequence[str] | None = None):
        for code in codes or []:
            path = self.corpus_dir / f"{code}.txt"
            if not path.exists():
                raise FileNotFoundError(f"corpus file not found: {path}")
        return load_corpora(self.corpus_dir, codes, self.cfg.corpus.heldout_fraction)

    def load_model(self, name: str) -> tuple[TransformerModel, str]:
        d = self.checkpoint_dir(name)
        model = load_checkpoint(d)
        return model, checkpoint_id(d)

    def save_model(self, model: TransformerModel, name: str, provenance: dict, extra: dict | None = None) -> str:
        cid = save_checkpoint(model, self.checkpoint_dir(name), provenance, extra)
        self.log(f"checkpoint {name} {cid}")
        return cid

    def eval_streams(self, corpora) -> dict[str, np.ndarray]:
        cap = self.cfg.evaluation.max_chars
        return {c: (v.heldout_ids[:cap] if cap > 0 else v.heldout_ids) for c, v in corpora.items()}

    def batch_plan(self) -> BatchPlan:
        return BatchPlan(self.cfg.training.batch_size, self.cfg.training.sequence_length)

    # -- stages --------------------------------------------------------------

    def gen_corpus(self) -> Path:
        cfg = self.cfg
        train, new = generate_languages(cfg.corpus, cfg.seed)
        tok = CharTokenizer()
        specs = train + new
        texts = {s.code: generate_text(s, cfg.corpus, tok) for s in specs}
        hashes = {c: hashlib.sha256((t + "\n").encode("utf-8")).hexdigest() for c, t in sorted(texts.items())}
        path = write_corpus(
            self.corpus_dir,
            specs,
            texts,
            new_codes=[s.code for s in new],
            extra={"provenance": self.provenance(), "file_sha256": hashes},
        )
        # generator tables are kept for diagnostics
        np.savez(
            self.corpus_dir / "tables.npz",
            **{s.code: s.transition_table for s in specs},
        )
        self.log(f"gen-corpus {len(specs)} languages")
        return path

    def pretrain(self) -> str:
        cfg = self.cfg
        corpora = self.corpora()
        report, model = pretrain_base(corpora, cfg.model, cfg.pretrain, cfg.optimizer, cfg.training, cfg.seed)
        report.write_jsonl(self.reports_dir / "pretrain.jsonl")
        return self.save_model(model, "base", self.provenance(corpus=self.corpus_id()))

    def probe(self, languages: Sequence[str] | None = None, steps: int | None = None, base: str = "base") -> list[Path]:
        cfg = self.cfg
        codes = list(languages) if languages else None
        corpora = self.corpora(codes)
        model, base_id = self.load_model(base)
        steps = steps or cfg.probe.steps
        plan = BatchPlan(cfg.probe.batch_size, min(cfg.probe.sequence_length, model.config.max_sequence_length))
        records = probe_languages(
            model,
            {c: v.train_ids for c, v in corpora.items()},
            steps,
            base_id=base_id,
            opt=cfg.optimizer,
            plan=plan,
            seed=cfg.seed,
            workers=cfg.probe.workers,
        )
        prov = self.provenance(corpus=self.corpus_id(), base=base_id)
        paths = [write_deviation(r, self.deviation_dir, {"provenance": prov}) for _, r in sorted(records.items())]
        if languages is None:
            self.write_similarity()
        self.log(f"probe {len(paths)} languages, {steps} steps")
        return paths

    def deviation_records(self, codes: Sequence[str] | None = None):
        codes = codes or self.train_codes()
        return [read_deviation(self.deviation_dir, c) for c in codes]

    def write_similarity(self) -> Path:
        records = self.deviation_records()
        last = self.cfg.probe.last_layers
        subset = default_layer_subset(records[0].num_layers, last if last > 0 else None)
        matrix = similarity_matrix(records, subset)
        path = self.deviation_dir / "similarity.csv"
        matrix.to_csv(path)
        return path

    def cluster(self, matrix_path: Path | None = None, k: int | None = None, out: Path | None = None, method: str | None = None) -> Path:
        k = k or self.cfg.clustering.k
        method = method or self.cfg.clustering.method
        if matrix_path is None:
            matrix_path = self.deviation_dir / "similarity.csv"
            if not matrix_path.exists():
                self.write_similarity()
        matrix = SimilarityMatrix.from_csv(matrix_path)
        if method == "greedy":
            assignment = C.greedy_cluster(matrix, k)
        elif method == "exhaustive":
            assignment = C.exhaustive_cluster(matrix, k)
        else:
            raise ValueError(f"unknown clustering method {method!r}")
        out = Path(out) if out is not None else self.groups_path
        assignment.to_json(out, C.objective(matrix, assignment), file_sha256(matrix_path))
        self.log(f"cluster k={k} -> {out}")
        return out

    def random_groups(self, out: Path | None = None) -> Path:
        """Random balanced grouping with the configured K (the random-cluster ablation)."""
        codes = self.train_codes()
        a = C.random_balanced_assignment(sorted(codes), self.cfg.clustering.k, make_rng(self.cfg.seed, "random-groups"))
        out = Path(out) if out is not None else self.root / "groups" / "random.json"
        a.to_json(out, None, "")
        return out

    def extend(self, groups: Path | None = None, layers: Sequence[int] | None = None, random: bool = False, out: str = "moe-init", base: str = "base") -> str:
        cfg = self.cfg
        model, base_id = self.load_model(base)
        groups = Path(groups) if groups is not None else self.groups_path
        assignment = C.GroupAssignment.from_json(groups)
        inputs = {"base": base_id, "groups": file_sha256(groups)}
        if layers is not None:
            chosen = sorted(int(i) for i in layers)
            how = "explicit"
        elif random:
            chosen = random_layers(cfg.model.num_layers, cfg.extension.epsilon, derive_seed(cfg.seed, "layers"))
            how = "random"
        else:
            records = self.deviation_records()
            chosen = select_layers(records, cfg.extension.epsilon, cfg.extension.aggregation)
            how = "deviation"
            inputs["deviations"] = hashlib.sha256(
                "".join(file_sha256(self.deviation_dir / f"{r.language}.bin") for r in records).encode()
            ).hexdigest()
        moe = extend_to_moe(model, chosen, assignment.num_groups, assignment, derive_seed(cfg.seed, "extend"), cfg.extension.top_k)
        return self.save_model(moe, out, self.provenance(**inputs), {"selected_layers": chosen, "layer_selection": how})

    def train(self, moe: str = "moe-init", groups: Path | None = None, out: str = "dmoe") -> str:
        cfg = self.cfg
        model, mid = self.load_model(moe)
        groups = Path(groups) if groups is not None else self.groups_path
        assignment = C.GroupAssignment.from_json(groups)
        corpora = self.corpora()
        report, trained = train_dmoe(model, corpora, assignment, cfg.extension, cfg.optimizer, cfg.training, cfg.seed)
        report.write_jsonl(self.reports_dir / f"train-{out}.jsonl")
        return self.save_model(trained, out, self.provenance(moe=mid, groups=file_sha256(groups), corpus=self.corpus_id()), {"tokens": report.tokens})

    def baseline_steps(self) -> int:
        s = self.cfg.baseline.steps
        return s if s >= 0 else self.cfg.extension.stage1_steps + self.cfg.extension.stage2_steps

    def train_baseline(self, base: str = "base", out: str = "baseline") -> str:
        cfg = self.cfg
        model, bid = self.load_model(base)
        report, trained = train_dense_baseline(model, self.corpora(), self.baseline_steps(), cfg.optimizer, cfg.training, cfg.seed)
        report.write_jsonl(self.reports_dir / f"train-{out}.jsonl")
        return self.save_model(trained, out, self.provenance(base=bid, corpus=self.corpus_id()), {"tokens": report.tokens})

    def adapt(self, language: str | None = None, model_name: str = "dmoe", lapt: bool = True) -> Path:
        cfg = self.cfg
        a = cfg.adaptation
        language = language or a.language or (self.new_codes() or [None])[0]
        if not language:
            raise ValueError("no new language to adapt; pass --lang")
        corpus = self.corpora([language])[language]
        model, mid = self.load_model(model_name)
        # experts are scored on training text so the held-out split stays untouched for evaluation
        cap = cfg.evaluation.max_chars
        stream = corpus.train_ids[:cap] if cap > 0 else corpus.train_ids
        ppl = score_experts(model, stream, batch_size=cfg.evaluation.batch_size)
        chosen = choose_expert(ppl)
        grafted = graft_expert(model, chosen, derive_seed(cfg.seed, "graft", language), router_init=a.router_init, noise_std=a.noise_std)
        report, tuned, trainable, frozen = dla_finetune(
            grafted,
            corpus.train_ids,
            a.steps,
            cfg.optimizer,
            cfg.training,
            derive_seed(cfg.seed, "dla", language),
            router_mode=a.router_mode,
            routing=a.routing,
            alpha=cfg.extension.alpha,
        )
        plan = AdaptationPlan(language, chosen, ppl, frozen, trainable, len(ppl), a.router_mode)
        plan_path = self.reports_dir / f"adaptation-{language}.json"
        plan.to_json(plan_path)
        report.write_jsonl(self.reports_dir / f"train-dla-{language}.jsonl")
        prov = self.provenance(model=mid, corpus=self.corpus_id(), plan=file_sha256(plan_path))
        self.save_model(tuned, f"dla-{language}", prov)
        if lapt:
            steps = a.lapt_steps if a.lapt_steps >= 0 else a.steps
            report, full = lapt_finetune(model, corpus.train_ids, steps, cfg.optimizer, cfg.training, derive_seed(cfg.seed, "lapt", language))
            report.write_jsonl(self.reports_dir / f"train-lapt-{language}.jsonl")
            self.save_model(full, f"lapt-{language}", self.provenance(model=mid, corpus=self.corpus_id()))
        return plan_path

    def routing(self) -> Routing:
        r = self.cfg.evaluation.routing
        if r == "soft":
            return Routing.soft_topk()
        if r.startswith("hard_expert:"):
            return Routing.hard_expert(int(r.split(":", 1)[1]))
        raise ValueError(f"unknown evaluation routing {r!r}")

    def eval(self, model_name: str = "dmoe", languages: Sequence[str] | None = None) -> tuple[Path, Path]:
        cfg = self.cfg
        model, mid = self.load_model(model_name)
        corpora = self.corpora(list(languages) if languages else None)
        if not languages:
            # the new languages are evaluated too so adaptation can be compared
            news = self.new_codes()
            if news:
                extra = self.corpora(news)
                for v in extra.values():
                    v.tier = "new"
                corpora.update(extra)
        report = evaluate(
            model,
            self.eval_streams(corpora),
            model_id=mid,
            routing=self.routing(),
            seq_len=cfg.evaluation.sequence_length or None,
            batch_size=cfg.evaluation.batch_size,
            tiers={c: v.tier for c, v in corpora.items()},
        )
        stem = self.reports_dir / f"eval-{Path(model_name).name}"
        paths = report.write(stem)
        self.log(f"eval {model_name} -> {paths[0]}")
        return paths

    def route_stats(self, model_name: str = "dmoe", groups: Path | None = None) -> list[Path]:
        cfg = self.cfg
        model, mid = self.load_model(model_name)
        corpora = self.corpora()
        stats = router_top1_stats(model, self.eval_streams(corpora), seq_len=cfg.evaluation.sequence_length or None, batch_size=cfg.evaluation.batch_size)
        out = self.reports_dir / "router" / Path(model_name).name
        paths = stats.write_csv(out)
        groups = Path(groups) if groups is not None else self.groups_path
        summary: dict = {"model": mid}
        if groups.exists():
            a = C.GroupAssignment.from_json(groups)
            summary["diagonal_mass"] = {str(k): v for k, v in stats.diagonal_mass(a.group_of).items()}
            summary["groups_sha256"] = file_sha256(groups)
        _write_json(out / "summary.json", summary)
        return paths

    def report(self, baseline: str = "baseline", candidate: str = "dmoe") -> Path:
        b = self.reports_dir / f"eval-{baseline}.json"
        c = self.reports_dir / f"eval-{candidate}.json"
        rb, rc = EvalReport.read(b), EvalReport.read(c)
        common = sorted(set(rb.entries) & set(rc.entries))
        if not common:
            raise ValueError("reports share no languages")
        cmp = compare_models({k: rb.entries[k].char_ppl for k in common}, {k: rc.entries[k].char_ppl for k in common})
        out = self.reports_dir / f"compare-{baseline}-vs-{candidate}.csv"
        cmp.write_csv(out)
        _write_json(
            out.with_suffix(".json"),
            {
                "baseline": file_sha256(b),
                "candidate": file_sha256(c),
                "macro_baseline": cmp.macro_baseline,
                "macro_candidate": cmp.macro_candidate,
                "macro_improvement_pct": cmp.macro_improvement_pct,
            },
        )
        return out
