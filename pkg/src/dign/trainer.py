"""Training loop, evaluation at IoU@0.5, sweeps, and checkpointing.

Every run is a pure function of its config: dataset generation, parameter
initialization, batch order, dropout, and intervention draws all derive
from fixed-seeded generators, so identical configs reproduce metrics and
checkpoints bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nm
from .dgn import dgn_forward
from .errors import ConfigError, DignError, ShapeError, TrainingError
from .graphdata import (GroundingInstance, SceneGraph, SyntheticConfig, BoundingBox,
                        generate_scene, load_dataset)
from .model import (GroundingModel, InstanceForward, PreparedInstance, draw_intervention,
                    grounding_correct, init_model, instance_forward, predicted_proposals,
                    prepare)
from .numerics import FiniteDiffReport, Tensor, backward, finite_diff_report, zero_grads

EVAL_INDEX_OFFSET = 1_000_000
INTERVENTION_MODES = ("both", "structure", "feature", "none")


@dataclass(frozen=True)
class TrainConfig:
    chunks: int = 4
    layers: int = 2
    d_out: int = 64
    head_count: int = 4
    tau: float = 0.2
    delta: float = 0.5
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 6
    seed: int = 0
    dropout: float = 0.5
    dropout_layer0: bool = False
    fusion_dropout: float = 0.1
    eps: float = 1e-12
    intervention: str = "both"
    use_fusion: bool = True
    independence: str = "pearson"
    ffn_factor: int = 2
    train_scenes: int = 500
    eval_scenes: int = 100
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if self.d_out % self.chunks != 0:
            raise ConfigError(f"chunks={self.chunks} must divide d_out={self.d_out}")
        if self.use_fusion and self.d_out % self.head_count != 0:
            raise ConfigError(f"head_count={self.head_count} must divide d_out={self.d_out}")
        if self.tau <= 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("tau, lr must be positive; batch_size >= 1; epochs >= 0")
        if not (0.0 <= self.delta <= 1.0):
            raise ConfigError("delta must lie in [0, 1]")
        if self.intervention not in INTERVENTION_MODES:
            raise ConfigError(f"intervention must be one of {INTERVENTION_MODES}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def d_ff(self) -> int:
        return self.ffn_factor * self.d_out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        syn = d.pop("synthetic", None)
        cfg = TrainConfig(**d) if syn is None else TrainConfig(**d, synthetic=SyntheticConfig(**syn))
        return cfg


def reseed_config(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Shift both the run seed and the dataset seed for sweep replicas."""
    return replace(cfg, seed=seed, synthetic=replace(cfg.synthetic, seed=seed))


# ---------------------------------------------------------------------------
# data


def training_instances(cfg: TrainConfig) -> list[GroundingInstance]:
    if cfg.train_path:
        return load_dataset(cfg.train_path)
    return [generate_scene(cfg.synthetic, i) for i in range(cfg.train_scenes)]


def eval_instances(cfg: TrainConfig) -> list[GroundingInstance]:
    if cfg.eval_path:
        return load_dataset(cfg.eval_path)
    test_syn = replace(cfg.synthetic, bias_strength=0.0)
    return [generate_scene(test_syn, EVAL_INDEX_OFFSET + i) for i in range(cfg.eval_scenes)]


def _feature_dims(instances: list[GroundingInstance]) -> tuple[int, int]:
    d_t = instances[0].phrase_graph.feature_dim
    d_v = instances[0].visual_graph.feature_dim
    for inst in instances:
        if inst.phrase_graph.feature_dim != d_t or inst.visual_graph.feature_dim != d_v:
            raise ConfigError("instances disagree on feature dimensions")
    return d_t, d_v


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params, grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, buffers: dict[str, np.ndarray]) -> None:
    """p <- p - lr * buf with buf <- momentum * buf + (g + wd * p)."""
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        g = g + weight_decay * p.data
        buf = buffers.get(name)
        buf = g.copy() if buf is None else momentum * buf + g
        buffers[name] = buf
        p.data -= lr * buf


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    d_t: int
    d_v: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    step: int
    rng_state: dict

    def to_dict(self) -> dict:
        pack = lambda arrs: {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                             for k, v in arrs.items()}
        return {
            "config": self.config.to_dict(),
            "d_t": self.d_t,
            "d_v": self.d_v,
            "step": self.step,
            "rng_state": self.rng_state,
            "params": pack(self.params),
            "buffers": pack(self.buffers),
        }

    @staticmethod
    def from_dict(d: dict) -> "Checkpoint":
        unpack = lambda packed: {
            k: np.ascontiguousarray(np.array(v["data"], dtype=np.float64).reshape(v["shape"]))
            for k, v in packed.items()
        }
        return Checkpoint(
            config=TrainConfig.from_dict(d["config"]),
            d_t=int(d["d_t"]),
            d_v=int(d["d_v"]),
            params=unpack(d["params"]),
            buffers=unpack(d["buffers"]),
            step=int(d["step"]),
            rng_state=d["rng_state"],
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w") as fh:
        json.dump(ckpt.to_dict(), fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        return Checkpoint.from_dict(json.load(fh))


def _build_model(cfg: TrainConfig, d_t: int, d_v: int, rng: np.random.Generator) -> GroundingModel:
    return init_model(d_t, d_v, cfg.d_out, cfg.chunks, cfg.layers, cfg.head_count,
                      cfg.d_ff, cfg.use_fusion, rng)


def model_from_checkpoint(ckpt: Checkpoint) -> GroundingModel:
    model = _build_model(ckpt.config, ckpt.d_t, ckpt.d_v, np.random.default_rng(0))
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise ConfigError("checkpoint parameter names do not match the configured model")
    for name, tensor in named.items():
        saved = ckpt.params[name]
        if saved.shape != tensor.data.shape:
            raise ConfigError(f"checkpoint shape {saved.shape} != model shape "
                              f"{tensor.data.shape} for {name}")
        tensor.data = saved.copy()
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: GroundingModel
    config: TrainConfig
    d_t: int
    d_v: int
    metrics: list[dict]
    buffers: dict[str, np.ndarray]
    step: int
    rng_state: dict

    def to_checkpoint(self) -> Checkpoint:
        params = {name: t.data.copy() for name, t in self.model.named_parameters()}
        return Checkpoint(self.config, self.d_t, self.d_v, params,
                          {k: v.copy() for k, v in self.buffers.items()},
                          self.step, self.rng_state)


def _forward_kwargs(cfg: TrainConfig) -> dict:
    return dict(tau=cfg.tau, delta=cfg.delta, eps=cfg.eps, dropout=cfg.dropout,
                dropout_layer0=cfg.dropout_layer0, fusion_dropout=cfg.fusion_dropout,
                independence_kind=cfg.independence)


def train(cfg: TrainConfig, out_path=None, metrics_path=None) -> TrainResult:
    """Run the full training loop described by cfg."""
    instances = training_instances(cfg)
    if not instances:
        raise ConfigError("training dataset is empty")
    d_t, d_v = _feature_dims(instances)
    model = _build_model(cfg, d_t, d_v, np.random.default_rng([cfg.seed, 11]))
    prepared = [prepare(inst) for inst in instances]
    usable = [p for p in prepared if p.usable]
    if not usable:
        raise ConfigError("no trainable instances: every instance is unmatchable")

    loop_rng = np.random.default_rng([cfg.seed, 13])
    params = model.named_parameters()
    buffers: dict[str, np.ndarray] = {}
    metrics: list[dict] = []
    fwd_kwargs = _forward_kwargs(cfg)
    step = 0

    for epoch in range(cfg.epochs):
        order = loop_rng.permutation(len(usable))
        seen_phrases = 0
        seen_correct = 0
        for start in range(0, len(usable), cfg.batch_size):
            batch = [usable[int(i)] for i in order[start : start + cfg.batch_size]]
            kind, chunk = draw_intervention(cfg.intervention, cfg.delta, cfg.chunks, loop_rng)
            zero_grads(t for _, t in params)
            try:
                results = [
                    instance_forward(model, prep, training=True, rng=loop_rng,
                                     intervention_kind=kind, intervention_chunk=chunk,
                                     **fwd_kwargs)
                    for prep in batch
                ]
                total = results[0].breakdown.total
                for r in results[1:]:
                    total = total + r.breakdown.total
                total = total * (1.0 / len(batch))
            except DignError as exc:
                raise TrainingError(f"non-finite values at step {step}: {exc}") from exc
            if not np.isfinite(total.data).all():
                raise TrainingError(f"non-finite loss at step {step}")
            backward(total)
            grads = {name: t.grad for name, t in params if t.grad is not None}
            sgd_step(params, grads, cfg.lr, cfg.momentum, cfg.weight_decay, buffers)

            for r, prep in zip(results, batch):
                preds = predicted_proposals(r.clean_scores)
                seen_correct += int((preds == prep.positives).sum())
                seen_phrases += prep.instance.n
            scale = 1.0 / len(batch)
            metrics.append({
                "step": step,
                "epoch": epoch,
                "l_ind_T": sum(r.breakdown.ind_text.item() for r in results) * scale,
                "l_ind_V": sum(r.breakdown.ind_visual.item() for r in results) * scale,
                "l_ground": sum(r.breakdown.ground.item() for r in results) * scale,
                "total": total.item(),
                "acc": seen_correct / max(1, seen_phrases),
            })
            step += 1
        if out_path is not None:
            result = TrainResult(model, cfg, d_t, d_v, metrics, buffers, step,
                                 loop_rng.bit_generator.state)
            save_checkpoint(result.to_checkpoint(), out_path)

    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row))
                fh.write("\n")
    result = TrainResult(model, cfg, d_t, d_v, metrics, buffers, step,
                         loop_rng.bit_generator.state)
    if out_path is not None:
        save_checkpoint(result.to_checkpoint(), out_path)
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    accuracy: float
    correct: list[list[bool]]
    unmatchable_instances: int
    losses: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "unmatchable_instances": self.unmatchable_instances,
            "losses": self.losses,
        }


def evaluate_prepared(model: GroundingModel, prepared: list[PreparedInstance],
                      cfg: TrainConfig) -> EvalReport:
    """Deterministic evaluation: no dropout, no interventions."""
    fwd_kwargs = _forward_kwargs(cfg)
    correct: list[list[bool]] = []
    totals = {"l_ind_T": 0.0, "l_ind_V": 0.0, "l_ground": 0.0, "total": 0.0}
    unmatchable = 0
    n_correct = 0
    n_phrases = 0
    for prep in prepared:
        fwd = instance_forward(model, prep, training=False, rng=None,
                               intervention_kind=None, intervention_chunk=None,
                               **fwd_kwargs)
        preds = predicted_proposals(fwd.clean_scores)
        flags = grounding_correct(prep, preds)
        correct.append(flags)
        n_correct += sum(flags)
        n_phrases += len(flags)
        if (prep.reachable < 0.5).any():
            unmatchable += 1
        for key, value in fwd.breakdown.as_floats().items():
            totals[key] += value
    losses = {k: v / max(1, len(prepared)) for k, v in totals.items()}
    return EvalReport(n_correct / max(1, n_phrases), correct, unmatchable, losses)


def evaluate(ckpt_or_model, instances: list[GroundingInstance],
             cfg: Optional[TrainConfig] = None) -> EvalReport:
    if isinstance(ckpt_or_model, Checkpoint):
        model = model_from_checkpoint(ckpt_or_model)
        cfg = ckpt_or_model.config if cfg is None else cfg
    else:
        model = ckpt_or_model
        if cfg is None:
            raise ConfigError("evaluate needs a config when given a bare model")
    return evaluate_prepared(model, [prepare(i) for i in instances], cfg)


# ---------------------------------------------------------------------------
# gradient certification


GRADCHECK_DIMS = dict(n=3, m=5, d_t=8, d_v=8, d_out=8, chunks=2, layers=2, heads=2)


def _gradcheck_instance(rng: np.random.Generator) -> GroundingInstance:
    n, m = GRADCHECK_DIMS["n"], GRADCHECK_DIMS["m"]
    d_t, d_v = GRADCHECK_DIMS["d_t"], GRADCHECK_DIMS["d_v"]
    phr_edges = [(0, 1, None), (1, 2, None)]
    vis_edges = [(0, 1, None), (1, 2, None), (2, 3, None), (3, 4, None), (0, 3, None)]
    phrase = SceneGraph(n, 0.8 * rng.standard_normal((n, d_t)), phr_edges)
    visual = SceneGraph(m, 0.8 * rng.standard_normal((m, d_v)), vis_edges)
    boxes = [BoundingBox(0.2 * j, 0.1, 0.2 * j + 0.15, 0.4) for j in range(m)]
    gt = [boxes[0], boxes[2], boxes[4]]
    return GroundingInstance(phrase, visual, boxes, gt, [0, 2, 4])


@dataclass
class GradcheckReport:
    skipped: bool
    message: str
    max_rel_error: float
    per_tensor: dict[str, float]
    checked: int
    excluded: int

    @property
    def passed(self) -> bool:
        return (not self.skipped) and self.max_rel_error < 1e-4


def gradcheck(dropout_on: bool = False, h: float = 1e-5, seed: int = 2024) -> GradcheckReport:
    """Finite-difference certification of the full objective's gradients."""
    if dropout_on:
        return GradcheckReport(True, "skipped: dropout is stochastic, gradcheck "
                                     "requires the deterministic evaluation path",
                               0.0, {}, 0, 0)
    dims = GRADCHECK_DIMS
    inst = _gradcheck_instance(np.random.default_rng([seed, 1]))
    prep = prepare(inst)
    model = init_model(dims["d_t"], dims["d_v"], dims["d_out"], dims["chunks"],
                       dims["layers"], dims["heads"], 2 * dims["d_out"], True,
                       np.random.default_rng([seed, 2]))
    # push every coordinate (zero-initialized biases included) outside the
    # |p| < 10h exclusion window so the whole tensor actually gets checked
    nudge = np.random.default_rng([seed, 5])
    for _, tensor in model.named_parameters():
        offset = nudge.uniform(0.05, 0.2, size=tensor.data.shape)
        tensor.data += np.where(nudge.random(tensor.data.shape) < 0.5, offset, -offset)
    kind, chunk = draw_intervention("both", 0.5, dims["chunks"],
                                    np.random.default_rng([seed, 3]))

    def objective() -> Tensor:
        rng = np.random.default_rng([seed, 4])
        fwd = instance_forward(model, prep, training=False, rng=rng,
                               tau=0.2, delta=0.5, eps=1e-12, dropout=0.0,
                               intervention_kind=kind, intervention_chunk=chunk)
        return fwd.breakdown.total

    report: FiniteDiffReport = finite_diff_report(objective, model.named_parameters(), h=h)
    msg = (f"max relative error {report.max_rel_error:.3e} over {report.checked} "
           f"coordinates ({report.excluded} kink-window exclusions)")
    return GradcheckReport(False, msg, report.max_rel_error, report.per_param,
                           report.checked, report.excluded)


# ---------------------------------------------------------------------------
# sweeps


ABLATION_VARIANTS = ("full", "k1", "nofuse", "cmt", "struct", "feat")


def variant_config(cfg: TrainConfig, name: str) -> TrainConfig:
    if name == "full":
        return replace(cfg, intervention="both", use_fusion=True)
    if name == "k1":
        return replace(cfg, intervention="both", use_fusion=True, chunks=1)
    if name == "nofuse":
        return replace(cfg, intervention="none", use_fusion=False)
    if name == "cmt":
        return replace(cfg, intervention="none", use_fusion=True)
    if name == "struct":
        return replace(cfg, intervention="structure", use_fusion=True)
    if name == "feat":
        return replace(cfg, intervention="feature", use_fusion=True)
    raise ConfigError(f"unknown ablation variant {name!r}; known: {ABLATION_VARIANTS}")


def _train_and_score(cfg: TrainConfig) -> float:
    result = train(cfg)
    report = evaluate_prepared(result.model, [prepare(i) for i in eval_instances(cfg)],
                               cfg)
    return report.accuracy


def ablate(cfg: TrainConfig, variants: list[str], n_seeds: int = 5) -> dict:
    """Train/evaluate each variant on the same seed set; report medians."""
    if not variants:
        raise ConfigError("ablate needs at least one variant")
    seeds = [cfg.seed + i for i in range(n_seeds)]
    rows = []
    for name in variants:
        vcfg = variant_config(cfg, name)
        accs = [_train_and_score(reseed_config(vcfg, s)) for s in seeds]
        rows.append({
            "variant": name,
            "seeds": seeds,
            "accuracies": accs,
            "median": statistics.median(accs),
        })
    return {"rows": rows, "base_config": cfg.to_dict()}


def k_sweep(cfg: TrainConfig, k_values: list[int], n_seeds: int = 5) -> dict:
    """Accuracy as a function of the chunk count."""
    for k in k_values:
        if cfg.d_out % k != 0:
            raise ConfigError(f"chunk count {k} does not divide d_out={cfg.d_out}")
    seeds = [cfg.seed + i for i in range(n_seeds)]
    rows = []
    for k in k_values:
        kcfg = replace(cfg, chunks=k, intervention="both", use_fusion=True)
        accs = [_train_and_score(reseed_config(kcfg, s)) for s in seeds]
        rows.append({
            "chunks": k,
            "seeds": seeds,
            "accuracies": accs,
            "median": statistics.median(accs),
        })
    return {"rows": rows, "base_config": cfg.to_dict()}


def format_table(result: dict, key: str) -> str:
    lines = [f"{key:>8}  median  accuracies"]
    for row in result["rows"]:
        accs = " ".join(f"{a:.3f}" for a in row["accuracies"])
        lines.append(f"{str(row[key]):>8}  {row['median']:.4f}  {accs}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# routing attribution export


def explain(model: GroundingModel, instance: GroundingInstance,
            eps: float = 1e-12) -> dict:
    """Routing weights per layer plus an argmax motif for every stored edge."""
    prep = prepare(instance)

    def side(graph: SceneGraph, features, params) -> dict:
        fwd = dgn_forward(graph, features, params, training=False, eps=eps)
        layers = []
        for weights in fwd.routing:
            layers.append({
                "relations": [[int(s), int(r)] for s, r in
                              zip(fwd.structure.src, fwd.structure.recv)],
                "weights": weights.data.tolist(),
            })
        edge_motifs = []
        if fwd.routing:
            mean_w = np.mean([w.data for w in fwd.routing], axis=0)
            for (s, t, lbl) in graph.edges:
                rel = np.nonzero((fwd.structure.src == s) & (fwd.structure.recv == t))[0]
                w = mean_w[int(rel[0])]
                edge_motifs.append({
                    "src": int(s),
                    "tgt": int(t),
                    "label": None if lbl is None else int(lbl),
                    "motif": int(np.argmax(w)),
                    "weights": w.tolist(),
                })
        return {"layers": layers, "edge_motifs": edge_motifs}

    return {
        "chunks": model.chunks,
        "phrase": side(instance.phrase_graph, prep.phrase_features, model.phrase_dgn),
        "visual": side(instance.visual_graph, prep.visual_features, model.visual_dgn),
    }
