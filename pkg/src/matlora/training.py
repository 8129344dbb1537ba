"""Optimization loops: backbone pretraining, joint adapter training, the
static baselines, the distillation pathway, and evaluation.

All loops are deterministic given (sequence, config): initialization draws
come from fixed PCG32 streams of the config seed, batches are full-batch (or
contiguous slices) in domain order, and the optimizers are plain
dict-of-arrays implementations with no hidden state.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from matlora.data import Domain, DomainSequence
from matlora.errors import ArgumentError, TrainingError
from matlora.linalg import pinv
from matlora.model import (
    AdapterModel,
    LoraPair,
    MarkovCore,
    MultiLoraModel,
    SharedBasisAdapter,
    adapted_model,
    bare_model,
    build_shared_bases,
    clone_model,
    collect_params,
    core_backward,
    core_eval_cached,
    core_param_arrays,
    core_sequence_from_pairs,
    forward,
    init_backbone,
    init_core,
    init_lora_pair,
    init_shared_adapter,
    loss_and_grads,
    predict,
)
from matlora.rng import STREAM_ADAPTER, STREAM_BACKBONE, Pcg32

CORE_VARIANTS = ("lindyn", "markov", "nonlin")
BASELINES = ("offline", "last_domain", "inc_finetune", "multi_lora")


@dataclass
class TrainConfig:
    """Configuration shared by every training strategy.

    One epoch is one optimizer step on the full gradient of the strategy's
    objective (for joint training, the uniform mean over training domains),
    so every method takes exactly `epochs` steps.
    """

    learning_rate: float = 1e-3
    epochs: int = 600
    batch_size: int = 0  # 0 means full batch; >0 only chunks the passes
    seed: int = 0
    optimizer: str = "adam"
    core_variant: str = "lindyn"
    r: int = 8
    r_prime: int = 4
    embed_dim: int = 32
    num_hidden: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 400
    pretrain_lr: float = 5e-3
    pretrain_on: str = "first_domain"  # or "all_train"
    warm_start_multi: bool = True
    markov_time_input: bool = False
    fit_epochs: int = 2000
    fit_lr: float = 1e-2
    fine_tune_epochs: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ArgumentError("learning_rate must be nonnegative")
        if self.r_prime > self.r:
            raise ArgumentError("r_prime must not exceed r")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.core_variant not in CORE_VARIANTS:
            raise ArgumentError(f"unknown core variant {self.core_variant!r}")
        if self.pretrain_on not in ("first_domain", "all_train"):
            raise ArgumentError(f"unknown pretrain_on {self.pretrain_on!r}")


@dataclass
class TrainReport:
    method: str
    core_variant: str | None
    epochs: int
    # per_epoch_loss[e][i] is the loss on the i-th trained domain in epoch e.
    per_epoch_loss: list
    trained_domains: list
    final_train_accuracy: dict
    param_counts: dict
    config: dict
    wall_clock_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        # Wall clock is nondeterministic and deliberately left out of the
        # serialized form so reruns produce byte-identical reports.
        d = asdict(self)
        d.pop("wall_clock_seconds")
        d["final_train_accuracy"] = {str(k): v for k, v in d["final_train_accuracy"].items()}
        return d


# --- optimizers ---------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, lr: float | None = None):
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "sgd":
        return Sgd(lr)
    return Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# --- shared loop ----------------------------------------------------------------


def _batches(domain: Domain, batch_size: int):
    n = len(domain.inputs)
    if batch_size <= 0 or batch_size >= n:
        yield domain.inputs, domain.labels
        return
    for start in range(0, n, batch_size):
        yield domain.inputs[start : start + batch_size], domain.labels[start : start + batch_size]


def _domain_loss_grads(model, domain: Domain, scopes, batch_size: int):
    """Full-gradient of one domain's mean loss, chunked if batch_size > 0."""
    total_loss = 0.0
    acc: dict | None = None
    count = 0
    for x, y in _batches(domain, batch_size):
        loss, grads = loss_and_grads(model, domain.timestamp, x, y, scopes)
        weight = len(x)
        total_loss += loss * weight
        count += weight
        if acc is None:
            acc = {k: g * weight for k, g in grads.items()}
        else:
            for k in acc:
                acc[k] += grads[k] * weight
    for k in acc:
        acc[k] /= count
    return total_loss / count, acc


def _optimize(
    model: AdapterModel,
    domains: list,
    cfg: TrainConfig,
    scopes,
    epochs: int | None = None,
    lr: float | None = None,
    param_keys=None,
    opt=None,
) -> list:
    """One optimizer step per epoch on the mean gradient over `domains`.

    `param_keys`, when given, restricts the update to a subset of the
    collected parameters (used by the staged schedule); gradients are still
    taken from the same joint objective.
    """
    params = collect_params(model, scopes)
    if param_keys is not None:
        params = {k: v for k, v in params.items() if k in param_keys}
    opt = opt or make_optimizer(cfg, lr)
    epochs = cfg.epochs if epochs is None else epochs
    n = len(domains)
    history = []
    for epoch in range(epochs):
        row = []
        agg: dict | None = None
        for d in domains:
            loss, grads = _domain_loss_grads(model, d, scopes, cfg.batch_size)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}, domain t={d.timestamp}")
            row.append(loss)
            if agg is None:
                agg = {k: grads[k] / n for k in params}
            else:
                for k in agg:
                    agg[k] += grads[k] / n
        opt.step(params, agg)
        history.append(row)
    return history


def _pool_domains(domains: list) -> Domain:
    pooled_x = np.vstack([d.inputs for d in domains])
    pooled_y = np.concatenate([d.labels for d in domains])
    return Domain(domains[0].timestamp, pooled_x, pooled_y)


def _train_accuracy(model, seq: DomainSequence) -> dict:
    return evaluate(model, seq, seq.train_indices)


def _param_report(cfg: TrainConfig, seq: DomainSequence, model) -> dict:
    from matlora.analysis import param_counts  # local import avoids a module cycle

    d = cfg.embed_dim
    pc = param_counts(d, d, cfg.r, cfg.r_prime, seq.train_count, cfg.core_variant)
    trainable = collect_params(
        model.models[-1] if isinstance(model, MultiLoraModel) else model,
        ("adapters", "head"),
    )
    return {
        "per_adapted_matrix": pc.to_dict(),
        "trainable_total": int(sum(p.size for p in trainable.values())),
    }


# --- pretraining -----------------------------------------------------------------


def pretrain_backbone(seq: DomainSequence, cfg: TrainConfig):
    """Train the full backbone on the anchor data, then freeze it.

    The anchor is domain 0 by default (leaves the temporal structure for the
    adapters to express); `pretrain_on="all_train"` pools every training
    domain instead.
    """
    rng = Pcg32(cfg.seed, STREAM_BACKBONE)
    backbone = init_backbone(
        rng,
        input_dim=seq.domains[0].inputs.shape[1],
        embed_dim=cfg.embed_dim,
        num_hidden=cfg.num_hidden,
        num_classes=seq.num_classes,
    )
    model = bare_model(backbone)
    if cfg.pretrain_on == "first_domain":
        data = [seq.domains[0]]
    else:
        data = [_pool_domains([seq.domains[i] for i in seq.train_indices])]
    _optimize(model, data, cfg, ("backbone", "head"), epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr)
    backbone.freeze()
    return backbone


# --- method training ---------------------------------------------------------------


def train_matlora(seq: DomainSequence, cfg: TrainConfig, backbone=None):
    """Jointly train shared bases, temporal core, and head on all training domains."""
    if seq.train_count < 2:
        raise ArgumentError("joint training needs at least 2 training domains")
    start = time.perf_counter()
    if backbone is None:
        backbone = pretrain_backbone(seq, cfg)
    rng = Pcg32(cfg.seed, STREAM_ADAPTER)
    d = backbone.embed_dim
    adapters = [
        init_shared_adapter(
            rng, d, d, cfg.r_prime, cfg.core_variant, seq.train_count, layer,
            time_input=cfg.markov_time_input,
        )
        for layer in range(len(backbone.hidden_w))
    ]
    model = adapted_model(backbone, adapters)
    model.meta = {"method": "matlora", "core_variant": cfg.core_variant}
    train_domains = [seq.domains[i] for i in seq.train_indices]
    scopes = ("adapters", "head")
    if cfg.core_variant == "nonlin":
        # Staged schedule: the timestamp-MLP core extrapolates best when it
        # regresses a residual around settled statics, so bases and head warm
        # up first (core frozen at identity), then everything trains jointly,
        # then the core alone is polished. Step budget is unchanged.
        all_keys = set(collect_params(model, scopes))
        static_keys = {k for k in all_keys if ".core." not in k}
        core_keys = all_keys - static_keys
        warm = int(cfg.epochs * 0.3)
        polish = int(cfg.epochs * 0.3)
        joint = cfg.epochs - warm - polish
        history = _optimize(model, train_domains, cfg, scopes, epochs=warm, param_keys=static_keys)
        history += _optimize(model, train_domains, cfg, scopes, epochs=joint)
        history += _optimize(model, train_domains, cfg, scopes, epochs=polish, param_keys=core_keys)
    else:
        history = _optimize(model, train_domains, cfg, scopes)
    report = TrainReport(
        method="matlora",
        core_variant=cfg.core_variant,
        epochs=cfg.epochs,
        per_epoch_loss=history,
        trained_domains=seq.train_indices,
        final_train_accuracy=_train_accuracy(model, seq),
        param_counts=_param_report(cfg, seq, model),
        config=asdict(cfg),
        wall_clock_seconds=time.perf_counter() - start,
    )
    return model, report


def _fresh_pair_model(backbone, cfg: TrainConfig) -> AdapterModel:
    rng = Pcg32(cfg.seed, STREAM_ADAPTER)
    d = backbone.embed_dim
    adapters = [
        init_lora_pair(rng, d, d, cfg.r, layer) for layer in range(len(backbone.hidden_w))
    ]
    return adapted_model(backbone, adapters)


def train_baseline(seq: DomainSequence, cfg: TrainConfig, strategy: str, backbone=None):
    """offline / last_domain / inc_finetune / multi_lora, all time-invariant."""
    if strategy not in BASELINES:
        raise ArgumentError(f"unknown strategy {strategy!r}; choose from {BASELINES}")
    start = time.perf_counter()
    if backbone is None:
        backbone = pretrain_backbone(seq, cfg)
    train_domains = [seq.domains[i] for i in seq.train_indices]

    if strategy == "offline":
        model = _fresh_pair_model(backbone, cfg)
        model.meta = {"method": "offline"}
        history = _optimize(model, [_pool_domains(train_domains)], cfg, ("adapters", "head"))
        trained = seq.train_indices
    elif strategy == "last_domain":
        model = _fresh_pair_model(backbone, cfg)
        model.meta = {"method": "last_domain"}
        history = _optimize(model, [train_domains[-1]], cfg, ("adapters", "head"))
        trained = [seq.train_count - 1]
    elif strategy == "inc_finetune":
        model = _fresh_pair_model(backbone, cfg)
        model.meta = {"method": "inc_finetune"}
        history = []
        for d in train_domains:
            history.extend(_optimize(model, [d], cfg, ("adapters", "head")))
        trained = seq.train_indices
    else:  # multi_lora
        models = []
        history = []
        current = None
        for d in train_domains:
            if current is None or not cfg.warm_start_multi:
                current = _fresh_pair_model(backbone, cfg)
            else:
                current = clone_model(current)
            history.extend(_optimize(current, [d], cfg, ("adapters", "head")))
            models.append(current)
        model = MultiLoraModel(backbone, models, seq.train_count)
        model.meta = {"method": "multi_lora", "warm_start": cfg.warm_start_multi}
        trained = seq.train_indices

    report = TrainReport(
        method=strategy,
        core_variant=None,
        epochs=cfg.epochs,
        per_epoch_loss=history,
        trained_domains=trained,
        final_train_accuracy=_train_accuracy(model, seq),
        param_counts=_param_report(cfg, seq, model),
        config=asdict(cfg),
        wall_clock_seconds=time.perf_counter() - start,
    )
    return model, report


# --- distillation -------------------------------------------------------------------


def _fit_core(core, timestamps, targets, cfg: TrainConfig) -> float:
    """Least-squares fit of core(t) to target matrices via Adam on vec residuals.

    Adam shapes the nonlinear parameters (step size holds for 60% of the
    budget then decays geometrically), after which the linear readout of the
    markov/nonlin cores is solved exactly by minimal-norm least squares on
    the final hidden features.
    """
    params = core_param_arrays(core)
    opt = Adam(cfg.fit_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    n = len(timestamps)
    loss = 0.0
    hold = int(cfg.fit_epochs * 0.6)
    for epoch in range(cfg.fit_epochs):
        if epoch >= hold:
            frac = (epoch - hold) / max(cfg.fit_epochs - hold - 1, 1)
            opt.lr = cfg.fit_lr * (1e-3) ** frac
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        loss = 0.0
        for t, target in zip(timestamps, targets):
            f, cache = core_eval_cached(core, t)
            diff = f - target
            loss += float(np.sum(diff * diff)) / n
            for name, g in core_backward(core, cache, 2.0 * diff / n).items():
                grads[name] += g
        opt.step(params, grads)
    _solve_core_readout(core, timestamps, targets)
    loss = 0.0
    for t, target in zip(timestamps, targets):
        diff = core_eval_cached(core, t)[0] - target
        loss += float(np.sum(diff * diff)) / n
    return loss


def _solve_core_readout(core, timestamps, targets) -> None:
    """Exact least-squares refit of the core's linear output layer.

    The markov/nonlin cores end with an affine map of their hidden features;
    given the fitted features this is a tiny linear system, and the
    minimal-norm solution removes the slow tail of first-order fitting.
    No-op for the linear-flow core.
    """
    feats = []
    for t in timestamps:
        _, cache = core_eval_cached(core, t)
        if cache[0] == "markov":
            feats.append(cache[2][-1])
        elif cache[0] == "nonlin":
            feats.append(cache[3])
        else:
            return
    phi = np.column_stack([np.vstack(feats), np.ones(len(feats))])
    y = np.vstack([tgt.reshape(1, -1) for tgt in targets])
    w = pinv(phi) @ y
    if isinstance(core, MarkovCore):
        core.out_w[:] = w[:-1].T
        core.out_b[:] = w[-1]
    else:
        core.w3[:] = w[:-1].T
        core.b3[:] = w[-1]


def distill_to_shared(pairs, seq: DomainSequence, cfg: TrainConfig, backbone=None, head=None):
    """Shared bases + fitted core from per-domain LoRA pairs.

    `pairs` is either the MultiLoraModel returned by train_baseline or a list
    (one entry per training domain) of per-layer LoraPair lists. Bases come
    from stacked SVD, the core-matrix sequence from least-squares projection,
    and the chosen core variant is then regressed onto that sequence. With
    fine_tune_epochs == 0 the construction is purely algebraic.
    """
    if isinstance(pairs, MultiLoraModel):
        backbone = pairs.backbone
        head = (pairs.models[-1].head_w, pairs.models[-1].head_b)
        pair_sets = [m.adapters for m in pairs.models]
    else:
        pair_sets = pairs
        if backbone is None:
            raise ArgumentError("distilling from raw pairs requires a backbone")
        if head is None:
            head = (backbone.head_w, backbone.head_b)
    if not pair_sets:
        raise ArgumentError("need at least one domain's pairs")
    timestamps = [seq.domains[i].timestamp for i in range(len(pair_sets))]
    num_layers = len(pair_sets[0])
    rng = Pcg32(cfg.seed, STREAM_ADAPTER)
    adapters = []
    info = {"reconstruction_residuals": [], "fit_loss": [], "energy_captured": []}
    for layer in range(num_layers):
        layer_pairs = [ps[layer] for ps in pair_sets]
        col, row, energy = build_shared_bases(layer_pairs, cfg.r_prime)
        targets, residuals = core_sequence_from_pairs(layer_pairs, col, row)
        core = init_core(
            rng, cfg.core_variant, cfg.r_prime, seq.train_count, cfg.markov_time_input
        )
        if cfg.core_variant == "lindyn" and timestamps[0] == 0.0:
            core.initial[:] = targets[0]  # exact at t=0 before any fitting
        fit_loss = _fit_core(core, timestamps, targets, cfg)
        adapters.append(SharedBasisAdapter(col, row, core, layer_pairs[0].target_layer))
        info["reconstruction_residuals"].append([float(r) for r in residuals])
        info["fit_loss"].append(fit_loss)
        info["energy_captured"].append(list(energy))
    model = AdapterModel(backbone, adapters, head[0].copy(), head[1].copy())
    model.meta = {"method": "distill", "core_variant": cfg.core_variant}
    if cfg.fine_tune_epochs > 0:
        train_domains = [seq.domains[i] for i in seq.train_indices]
        _optimize(model, train_domains, cfg, ("adapters", "head"), epochs=cfg.fine_tune_epochs)
    return model, info


# --- evaluation ----------------------------------------------------------------------


def evaluate(model, seq: DomainSequence, domain_indices=None) -> dict:
    """Argmax accuracy per requested domain, at each domain's own timestamp."""
    if domain_indices is None:
        domain_indices = seq.test_indices
    accs = {}
    for i in domain_indices:
        if not 0 <= i < len(seq.domains):
            raise ArgumentError(f"domain index {i} out of range")
        d = seq.domains[i]
        m = model.model_for_domain(i) if isinstance(model, MultiLoraModel) else model
        preds = predict(m, d.timestamp, d.inputs)
        accs[i] = float(np.mean(preds == d.labels))
    return accs


def mean_test_accuracy(model, seq: DomainSequence) -> float:
    accs = evaluate(model, seq, seq.test_indices)
    return float(np.mean(list(accs.values())))


def export_loss_csv(report: TrainReport, path) -> None:
    """Per-epoch loss trace, columns epoch, domain, loss."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "domain", "loss"])
        for epoch, row in enumerate(report.per_epoch_loss):
            for slot, loss in enumerate(row):
                domain = report.trained_domains[slot] if slot < len(report.trained_domains) else slot
                w.writerow([epoch, domain, repr(loss)])
