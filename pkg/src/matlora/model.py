"""The learnable system: frozen tanh backbone, adapter-injected layers,
temporal cores, and exact reverse-mode gradients for every parameter.

A model is a frozen `Backbone` plus one adapter per adapted hidden layer and
a trainable classifier head. Adapters are either a per-domain `LoraPair`
(time-invariant ΔW = up @ down) or a `SharedBasisAdapter` whose update at
time t is col_basis @ core(t) @ row_basis with the cores below carrying all
temporal variation:

  * LinDynCore   core(t) = expm(t * velocity) @ initial, a linear flow
  * MarkovCore   vec(core(t)) read off an input-free tanh recurrence
  * NonLinCore   vec(core(t)) = small tanh MLP of the normalized timestamp

Gradients are hand-written reverse mode. The linear-flow core is
differentiated through the scaling-and-squaring exponential graph itself
(see linalg.expm_vjp), so its gradients are exact for the computed function.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from matlora.errors import ArgumentError, DimensionError, RankError
from matlora.linalg import (
    expm_graph,
    expm_vjp,
    frobenius_norm,
    numerical_rank,
    pinv,
    svd_thin,
)
from matlora.rng import Pcg32, normal_matrix

NONLIN_HIDDEN = 32
MARKOV_HIDDEN = 16

# Initialization policy, tuned on the rotating-moons task. Principles: the
# core starts at the identity so the update begins as a static low-rank
# adapter; the linear-flow velocity starts as a small random rotation
# generator (skew-symmetric) rather than drifting toward real-eigenvalue
# growth; the recurrence matrix starts orthogonal with a small hidden state
# so its rollout is a near-isometry in the tanh linear regime; the MLP's
# first layer stays in its linear range over the extrapolation window.
BASIS_INIT_STD = {"lindyn": 0.2, "markov": 0.2, "nonlin": 0.1}
LINDYN_VELOCITY_STD = 0.05
MARKOV_H0_STD = 0.1
MARKOV_OUT_STD = 0.03
NONLIN_W1_STD = 0.3
NONLIN_B1_STD = 0.15
NONLIN_OUT_STD = 0.01

# A gradient tape is a dict of parameter-name -> gradient array whose keys and
# shapes mirror collect_params() exactly.
GradientTape = dict


# --- backbone ---------------------------------------------------------------


@dataclass
class Backbone:
    input_w: np.ndarray  # (d, input_dim)
    input_b: np.ndarray  # (d,)
    hidden_w: list  # each (d, d)
    hidden_b: list  # each (d,)
    head_w: np.ndarray  # (classes, d)
    head_b: np.ndarray  # (classes,)

    @property
    def embed_dim(self) -> int:
        return self.input_w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_w.shape[1]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    def arrays(self) -> list:
        return (
            [self.input_w, self.input_b]
            + list(self.hidden_w)
            + list(self.hidden_b)
            + [self.head_w, self.head_b]
        )

    def freeze(self) -> None:
        for a in self.arrays():
            a.flags.writeable = False

    def fingerprint(self) -> bytes:
        """Byte-exact snapshot used to verify the freeze invariant."""
        return b"".join(a.tobytes() for a in self.arrays())


def init_backbone(
    rng: Pcg32,
    input_dim: int = 2,
    embed_dim: int = 32,
    num_hidden: int = 2,
    num_classes: int = 2,
) -> Backbone:
    return Backbone(
        input_w=normal_matrix(rng, embed_dim, input_dim, std=1.0 / np.sqrt(input_dim)),
        input_b=np.zeros(embed_dim),
        hidden_w=[
            normal_matrix(rng, embed_dim, embed_dim, std=1.0 / np.sqrt(embed_dim))
            for _ in range(num_hidden)
        ],
        hidden_b=[np.zeros(embed_dim) for _ in range(num_hidden)],
        head_w=normal_matrix(rng, num_classes, embed_dim, std=1.0 / np.sqrt(embed_dim)),
        head_b=np.zeros(num_classes),
    )


# --- adapters and cores -----------------------------------------------------


@dataclass
class LoraPair:
    up: np.ndarray  # (d, r)
    down: np.ndarray  # (r, k)
    target_layer: int

    @property
    def rank(self) -> int:
        return self.up.shape[1]


@dataclass
class LinDynCore:
    velocity: np.ndarray  # (r', r')
    initial: np.ndarray  # (r', r')


@dataclass
class MarkovCore:
    rec_w: np.ndarray  # (h, h)
    rec_b: np.ndarray  # (h,)
    out_w: np.ndarray  # (r'^2, h)
    out_b: np.ndarray  # (r'^2,)
    h0: np.ndarray  # (h,)
    time_w: np.ndarray | None = None  # (h,), optional timestamp input
    t_scale: float = 1.0


@dataclass
class NonLinCore:
    w1: np.ndarray  # (hidden, 1)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray
    w3: np.ndarray  # (r'^2, hidden)
    b3: np.ndarray
    t_scale: float = 1.0  # timestamps are multiplied by this before the MLP


@dataclass
class SharedBasisAdapter:
    col_basis: np.ndarray  # (d, r')
    row_basis: np.ndarray  # (r', k)
    core: object
    target_layer: int

    @property
    def rank(self) -> int:
        return self.col_basis.shape[1]


def init_lora_pair(rng: Pcg32, d: int, k: int, r: int, target_layer: int) -> LoraPair:
    # Zero up-factor: the update starts exactly at zero, i.e. at the anchor.
    return LoraPair(np.zeros((d, r)), normal_matrix(rng, r, k, std=0.1), target_layer)


def _oscillator_bank(h: int, lo: float = 0.1, hi: float = 0.6) -> np.ndarray:
    """Block-diagonal 2x2 rotations with angles spread over [lo, hi] radians.

    Starts the recurrence as a bank of neutral oscillators: in the tanh
    linear regime the rollout neither decays to a fixed point nor blows up,
    which keeps extrapolated rollouts moving instead of stalling.
    """
    m = np.zeros((h, h))
    blocks = h // 2
    for j in range(blocks):
        theta = lo + (hi - lo) * (j / max(blocks - 1, 1))
        c, s = np.cos(theta), np.sin(theta)
        m[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = [[c, -s], [s, c]]
    if h % 2:
        m[h - 1, h - 1] = 1.0
    return m


def init_core(rng: Pcg32, variant: str, r_prime: int, train_count: int, time_input: bool = False):
    rr = r_prime * r_prime
    t_scale = 1.0 / max(train_count - 1, 1)
    if variant == "lindyn":
        raw = normal_matrix(rng, r_prime, r_prime, std=LINDYN_VELOCITY_STD)
        return LinDynCore(
            velocity=(raw - raw.T) / np.sqrt(2.0),
            initial=np.eye(r_prime),
        )
    if variant == "markov":
        h = MARKOV_HIDDEN
        return MarkovCore(
            rec_w=_oscillator_bank(h),
            rec_b=np.zeros(h),
            out_w=normal_matrix(rng, rr, h, std=MARKOV_OUT_STD),
            out_b=np.eye(r_prime).reshape(-1),
            h0=normal_matrix(rng, 1, h, std=MARKOV_H0_STD)[0],
            time_w=normal_matrix(rng, 1, h, std=0.1)[0] if time_input else None,
            t_scale=t_scale,
        )
    if variant == "nonlin":
        h = NONLIN_HIDDEN
        return NonLinCore(
            w1=normal_matrix(rng, h, 1, std=NONLIN_W1_STD),
            b1=normal_matrix(rng, 1, h, std=NONLIN_B1_STD)[0],
            w2=normal_matrix(rng, h, h, std=1.0 / np.sqrt(h)),
            b2=np.zeros(h),
            w3=normal_matrix(rng, rr, h, std=NONLIN_OUT_STD),
            b3=np.eye(r_prime).reshape(-1),
            t_scale=t_scale,
        )
    raise ArgumentError(f"unknown core variant {variant!r}")


def init_shared_adapter(
    rng: Pcg32,
    d: int,
    k: int,
    r_prime: int,
    variant: str,
    train_count: int,
    target_layer: int,
    time_input: bool = False,
) -> SharedBasisAdapter:
    std = BASIS_INIT_STD[variant]
    return SharedBasisAdapter(
        col_basis=normal_matrix(rng, d, r_prime, std=std),
        row_basis=normal_matrix(rng, r_prime, k, std=std),
        core=init_core(rng, variant, r_prime, train_count, time_input),
        target_layer=target_layer,
    )


def core_variant_name(core) -> str:
    return {LinDynCore: "lindyn", MarkovCore: "markov", NonLinCore: "nonlin"}[type(core)]


# --- core evaluation and gradients -------------------------------------------


def _core_dim(core) -> int:
    if isinstance(core, LinDynCore):
        return core.initial.shape[0]
    if isinstance(core, MarkovCore):
        return int(np.sqrt(core.out_b.size))
    return int(np.sqrt(core.b3.size))


def core_eval_cached(core, t: float):
    """Evaluate the temporal core at timestamp t; returns (F, cache)."""
    if isinstance(core, LinDynCore):
        flow, graph = expm_graph(t * core.velocity)
        return flow @ core.initial, ("lindyn", t, flow, graph)
    if isinstance(core, MarkovCore):
        steps = int(round(t))
        if steps < 0 or abs(t - steps) > 1e-9:
            raise ArgumentError(f"markov core needs a nonnegative integer step index, got {t}")
        hs = [core.h0]
        for s in range(1, steps + 1):
            pre = core.rec_w @ hs[-1] + core.rec_b
            if core.time_w is not None:
                pre = pre + core.time_w * (s * core.t_scale)
            hs.append(np.tanh(pre))
        out = core.out_w @ hs[-1] + core.out_b
        n = _core_dim(core)
        return out.reshape(n, n), ("markov", steps, hs)
    if isinstance(core, NonLinCore):
        tt = np.array([t * core.t_scale])
        h1 = np.tanh(core.w1 @ tt + core.b1)
        h2 = np.tanh(core.w2 @ h1 + core.b2)
        out = core.w3 @ h2 + core.b3
        n = _core_dim(core)
        return out.reshape(n, n), ("nonlin", tt, h1, h2)
    raise ArgumentError(f"unknown core type {type(core).__name__}")


def core_eval(core, t: float) -> np.ndarray:
    return core_eval_cached(core, t)[0]


def core_backward(core, cache, d_core: np.ndarray) -> dict:
    """Gradients of sum(d_core * core(t)) w.r.t. the core's parameters."""
    kind = cache[0]
    if kind == "lindyn":
        _, t, flow, graph = cache
        d_flow = d_core @ core.initial.T
        d_vel = t * expm_vjp(graph, d_flow)
        d_init = flow.T @ d_core
        return {"velocity": d_vel, "initial": d_init}
    if kind == "markov":
        _, steps, hs = cache
        d_vec = d_core.reshape(-1)
        g = {
            "rec_w": np.zeros_like(core.rec_w),
            "rec_b": np.zeros_like(core.rec_b),
            "out_w": np.outer(d_vec, hs[-1]),
            "out_b": d_vec.copy(),
            "h0": np.zeros_like(core.h0),
        }
        if core.time_w is not None:
            g["time_w"] = np.zeros_like(core.time_w)
        dh = core.out_w.T @ d_vec
        for s in range(steps, 0, -1):
            d_pre = dh * (1.0 - hs[s] ** 2)
            g["rec_w"] += np.outer(d_pre, hs[s - 1])
            g["rec_b"] += d_pre
            if core.time_w is not None:
                g["time_w"] += d_pre * (s * core.t_scale)
            dh = core.rec_w.T @ d_pre
        g["h0"] += dh
        return g
    if kind == "nonlin":
        _, tt, h1, h2 = cache
        d_vec = d_core.reshape(-1)
        g = {"w3": np.outer(d_vec, h2), "b3": d_vec.copy()}
        dh2 = core.w3.T @ d_vec
        d_pre2 = dh2 * (1.0 - h2**2)
        g["w2"] = np.outer(d_pre2, h1)
        g["b2"] = d_pre2
        dh1 = core.w2.T @ d_pre2
        d_pre1 = dh1 * (1.0 - h1**2)
        g["w1"] = np.outer(d_pre1, tt)
        g["b1"] = d_pre1
        return g
    raise ArgumentError(f"unknown core cache {kind!r}")


def core_param_arrays(core) -> dict:
    if isinstance(core, LinDynCore):
        return {"velocity": core.velocity, "initial": core.initial}
    if isinstance(core, MarkovCore):
        g = {
            "rec_w": core.rec_w,
            "rec_b": core.rec_b,
            "out_w": core.out_w,
            "out_b": core.out_b,
            "h0": core.h0,
        }
        if core.time_w is not None:
            g["time_w"] = core.time_w
        return g
    if isinstance(core, NonLinCore):
        return {
            "w1": core.w1,
            "b1": core.b1,
            "w2": core.w2,
            "b2": core.b2,
            "w3": core.w3,
            "b3": core.b3,
        }
    raise ArgumentError(f"unknown core type {type(core).__name__}")


# --- delta composition --------------------------------------------------------


def compose_delta(adapter, t: float) -> np.ndarray:
    """The additive low-rank update this adapter contributes at timestamp t."""
    if isinstance(adapter, LoraPair):
        return adapter.up @ adapter.down
    if isinstance(adapter, SharedBasisAdapter):
        if adapter.col_basis.shape[1] != adapter.row_basis.shape[0]:
            raise DimensionError("adapter basis shapes are inconsistent")
        return adapter.col_basis @ core_eval(adapter.core, t) @ adapter.row_basis
    raise ArgumentError(f"unknown adapter type {type(adapter).__name__}")


# --- the model ----------------------------------------------------------------


@dataclass
class AdapterModel:
    backbone: Backbone
    adapters: list
    head_w: np.ndarray
    head_b: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        layers = [a.target_layer for a in self.adapters]
        if len(set(layers)) != len(layers):
            raise ArgumentError("adapters must target distinct layers")
        for a in self.adapters:
            if not 0 <= a.target_layer < len(self.backbone.hidden_w):
                raise ArgumentError(f"adapter targets missing layer {a.target_layer}")


@dataclass
class MultiLoraModel:
    """One independently trained pair-adapter model per training domain.

    Queries at or beyond the last training domain fall back to the last
    model; extrapolation is "reuse the most recent adapter".
    """

    backbone: Backbone
    models: list
    train_count: int
    meta: dict = field(default_factory=dict)

    def model_for_domain(self, index: int) -> "AdapterModel":
        return self.models[min(index, len(self.models) - 1)]


def bare_model(backbone: Backbone) -> AdapterModel:
    """Adapter-free model whose head aliases the backbone head (pretraining)."""
    return AdapterModel(backbone, [], backbone.head_w, backbone.head_b)


def adapted_model(backbone: Backbone, adapters: list) -> AdapterModel:
    return AdapterModel(backbone, adapters, backbone.head_w.copy(), backbone.head_b.copy())


def _adapter_map(model: AdapterModel) -> dict:
    return {a.target_layer: a for a in model.adapters}


def forward_cached(model: AdapterModel, t: float, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.backbone.input_dim:
        raise DimensionError(
            f"batch must be (n, {model.backbone.input_dim}), got {x.shape}"
        )
    bb = model.backbone
    amap = _adapter_map(model)
    h = x @ bb.input_w.T + bb.input_b
    hs = [h]
    effs = []
    core_caches = {}
    for layer in range(len(bb.hidden_w)):
        w_eff = bb.hidden_w[layer]
        adapter = amap.get(layer)
        if adapter is not None:
            if isinstance(adapter, SharedBasisAdapter):
                f, cache = core_eval_cached(adapter.core, t)
                core_caches[layer] = (f, cache)
                w_eff = w_eff + adapter.col_basis @ f @ adapter.row_basis
            else:
                w_eff = w_eff + adapter.up @ adapter.down
        effs.append(w_eff)
        h = np.tanh(h @ w_eff.T + bb.hidden_b[layer])
        hs.append(h)
    logits = h @ model.head_w.T + model.head_b
    return logits, (x, hs, effs, core_caches)


def forward(model: AdapterModel, t: float, x: np.ndarray) -> np.ndarray:
    return forward_cached(model, t, x)[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and d loss / d logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def predict(model: AdapterModel, t: float, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, t, x), axis=1)


def class_probabilities(model: AdapterModel, t: float, x: np.ndarray) -> np.ndarray:
    logits = forward(model, t, x)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --- parameters and gradients ---------------------------------------------------

HEAD_SCOPE = "head"
ADAPTER_SCOPE = "adapters"
BACKBONE_SCOPE = "backbone"


def collect_params(model: AdapterModel, scopes) -> dict:
    """Name -> live array for every trainable parameter in the given scopes."""
    params: dict = {}
    if BACKBONE_SCOPE in scopes:
        bb = model.backbone
        params["backbone.input_w"] = bb.input_w
        params["backbone.input_b"] = bb.input_b
        for i, (w, b) in enumerate(zip(bb.hidden_w, bb.hidden_b)):
            params[f"backbone.hidden_w{i}"] = w
            params[f"backbone.hidden_b{i}"] = b
    if ADAPTER_SCOPE in scopes:
        for i, a in enumerate(model.adapters):
            if isinstance(a, LoraPair):
                params[f"adapters.{i}.up"] = a.up
                params[f"adapters.{i}.down"] = a.down
            else:
                params[f"adapters.{i}.col_basis"] = a.col_basis
                params[f"adapters.{i}.row_basis"] = a.row_basis
                for name, arr in core_param_arrays(a.core).items():
                    params[f"adapters.{i}.core.{name}"] = arr
    if HEAD_SCOPE in scopes:
        params["head_w"] = model.head_w
        params["head_b"] = model.head_b
    return params


def loss_and_grads(
    model: AdapterModel,
    t: float,
    x: np.ndarray,
    labels: np.ndarray,
    scopes=(ADAPTER_SCOPE, HEAD_SCOPE),
) -> tuple[float, GradientTape]:
    """Cross-entropy at timestamp t plus exact gradients for `scopes`.

    The tape's keys and shapes mirror collect_params(model, scopes).
    """
    labels = np.asarray(labels, dtype=np.int64)
    logits, (x, hs, effs, core_caches) = forward_cached(model, t, x)
    loss, d_logits = softmax_cross_entropy(logits, labels)
    grads: GradientTape = {}
    if HEAD_SCOPE in scopes:
        grads["head_w"] = d_logits.T @ hs[-1]
        grads["head_b"] = d_logits.sum(axis=0)
    amap = _adapter_map(model)
    index_of = {a.target_layer: i for i, a in enumerate(model.adapters)}
    dh = d_logits @ model.head_w
    for layer in range(len(model.backbone.hidden_w) - 1, -1, -1):
        d_pre = dh * (1.0 - hs[layer + 1] ** 2)
        d_weff = d_pre.T @ hs[layer]
        dh = d_pre @ effs[layer]
        if BACKBONE_SCOPE in scopes:
            grads[f"backbone.hidden_w{layer}"] = d_weff
            grads[f"backbone.hidden_b{layer}"] = d_pre.sum(axis=0)
        adapter = amap.get(layer)
        if adapter is not None and ADAPTER_SCOPE in scopes:
            i = index_of[layer]
            if isinstance(adapter, LoraPair):
                grads[f"adapters.{i}.up"] = d_weff @ adapter.down.T
                grads[f"adapters.{i}.down"] = adapter.up.T @ d_weff
            else:
                f, cache = core_caches[layer]
                grads[f"adapters.{i}.col_basis"] = d_weff @ (f @ adapter.row_basis).T
                grads[f"adapters.{i}.row_basis"] = (adapter.col_basis @ f).T @ d_weff
                d_core = adapter.col_basis.T @ d_weff @ adapter.row_basis.T
                for name, g in core_backward(adapter.core, cache, d_core).items():
                    grads[f"adapters.{i}.core.{name}"] = g
    if BACKBONE_SCOPE in scopes:
        grads["backbone.input_w"] = dh.T @ x
        grads["backbone.input_b"] = dh.sum(axis=0)
    return loss, grads


# --- shared-basis construction ----------------------------------------------


def build_shared_bases(pairs: list, r_prime: int):
    """Shared column/row bases from a list of per-domain LoRA pairs.

    Stacks the up-factors horizontally and the down-factors vertically and
    keeps the top r' singular directions of each stack. Returns
    (col_basis (d, r'), row_basis (r', k), energy_captured) where energy is
    the retained fraction of squared singular mass per stack.
    """
    if not pairs:
        raise ArgumentError("need at least one pair")
    r_total = sum(p.up.shape[1] for p in pairs)
    if r_prime > r_total:
        raise ArgumentError(f"r_prime={r_prime} exceeds stacked rank budget {r_total}")
    stack_b = np.hstack([p.up for p in pairs])
    stack_a = np.vstack([p.down for p in pairs])
    for name, stack in (("column", stack_b), ("row", stack_a)):
        if numerical_rank(stack) < r_prime:
            raise RankError(
                f"{name} stack has numerical rank {numerical_rank(stack)} < r_prime={r_prime}"
            )
    ub, sb, _ = svd_thin(stack_b)
    _, sa, va = svd_thin(stack_a)
    col_basis = ub[:, :r_prime]
    row_basis = va[:, :r_prime].T
    energy = (
        float(np.sum(sb[:r_prime] ** 2) / np.sum(sb**2)),
        float(np.sum(sa[:r_prime] ** 2) / np.sum(sa**2)),
    )
    return col_basis, row_basis, energy


def project_onto_bases(col_basis: np.ndarray, row_basis: np.ndarray, pair: LoraPair):
    """Least-squares coefficients of one pair in the shared bases.

    Returns (c, d, residuals): pair.up ≈ col_basis @ c, pair.down ≈ d @
    row_basis, with the Frobenius residual of each fit.
    """
    r_prime = col_basis.shape[1]
    if numerical_rank(col_basis) < r_prime or numerical_rank(row_basis) < r_prime:
        raise RankError("shared bases are rank-deficient")
    c = pinv(col_basis) @ pair.up
    d = pair.down @ pinv(row_basis)
    res_b = frobenius_norm(col_basis @ c - pair.up)
    res_a = frobenius_norm(d @ row_basis - pair.down)
    return c, d, (res_b, res_a)


def core_sequence_from_pairs(pairs: list, col_basis: np.ndarray, row_basis: np.ndarray):
    """Per-domain core matrices c_t @ d_t plus reconstruction residuals."""
    cores = []
    residuals = []
    for pair in pairs:
        c, d, _ = project_onto_bases(col_basis, row_basis, pair)
        f = c @ d
        cores.append(f)
        residuals.append(
            frobenius_norm(col_basis @ f @ row_basis - pair.up @ pair.down)
        )
    return cores, residuals


def clone_model(model: AdapterModel) -> AdapterModel:
    """Deep copy sharing the (frozen) backbone object."""
    return AdapterModel(
        model.backbone,
        copy.deepcopy(model.adapters),
        model.head_w.copy(),
        model.head_b.copy(),
        dict(model.meta),
    )
