"""Linear self-attention model: forward pass, hand-derived gradients, training.

A layer maps a token matrix E ((d+1) x (n+1)) to

    E + W_o W_v E ((W_k E)^T W_q E / sqrt(d))

and layers are stacked by feeding each output into the next.  The
pre-training objective is the mean squared error of the entry at
[d+1, n+1] (the masked query label) against the true label.

Backpropagation is written out by hand for this fixed computation graph
instead of going through an autodiff engine: the graph is tiny, and an
explicit derivation keeps the floating-point operation count auditable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BudgetError, ConfigError, DimensionError
from .taskgen import GenConfig, sample_batch

__all__ = [
    "LsaLayer",
    "LsaParams",
    "TrainConfig",
    "TrainReport",
    "AdamState",
    "init_params",
    "lsa_forward",
    "predict_labels",
    "pretrain_loss",
    "grad_pretrain_loss",
    "init_adam_state",
    "adam_step",
    "train",
    "count_flops_per_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1
_MATRIX_ORDER = ("w_k", "w_q", "w_v", "w_o")


@dataclass(frozen=True)
class LsaLayer:
    """Key/query/value/output weight matrices of one layer, each (d+1) x (d+1)."""

    w_k: np.ndarray
    w_q: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def matrices(self) -> tuple[np.ndarray, ...]:
        return (self.w_k, self.w_q, self.w_v, self.w_o)


@dataclass(frozen=True)
class LsaParams:
    """Stack of layers applied in order."""

    layers: tuple[LsaLayer, ...]

    @property
    def d(self) -> int:
        return self.layers[0].w_k.shape[0] - 1

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_params(self) -> int:
        """Total scalar parameter count, 4 * L * (d+1)^2."""
        return 4 * self.n_layers * (self.d + 1) ** 2


def _map_params(fn, *trees: LsaParams) -> LsaParams:
    """Apply fn elementwise over corresponding weight matrices."""
    layers = []
    for group in zip(*(t.layers for t in trees)):
        mats = [fn(*ms) for ms in zip(*(layer.matrices() for layer in group))]
        layers.append(LsaLayer(*mats))
    return LsaParams(layers=tuple(layers))


def init_params(d: int, n_layers: int, init_scale: float, rng: np.random.Generator) -> LsaParams:
    """Gaussian init, i.i.d. entries with standard deviation init_scale."""
    if d < 1 or n_layers < 1:
        raise ConfigError(f"d and n_layers must be >= 1, got d={d}, n_layers={n_layers}")
    m = d + 1
    layers = tuple(
        LsaLayer(*(init_scale * rng.standard_normal((m, m)) for _ in _MATRIX_ORDER))
        for _ in range(n_layers)
    )
    return LsaParams(layers=layers)


def _check_tokens(params: LsaParams, E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    if E.ndim < 2 or E.shape[-2] != params.d + 1:
        raise DimensionError(
            f"token matrix must have {params.d + 1} rows, got shape {E.shape}"
        )
    return E


def _T(M: np.ndarray) -> np.ndarray:
    return np.swapaxes(M, -1, -2)


def _forward_cached(params: LsaParams, E: np.ndarray):
    """Forward pass keeping per-layer intermediates for backprop."""
    s = 1.0 / math.sqrt(params.d)
    X = E
    caches = []
    for layer in params.layers:
        K = layer.w_k @ X
        Q = layer.w_q @ X
        A = s * (_T(K) @ Q)
        V = layer.w_v @ X
        U = V @ A
        caches.append((X, K, Q, A, V, U))
        X = X + layer.w_o @ U
    return X, caches


def _forward_fast(params: LsaParams, E: np.ndarray) -> np.ndarray:
    """Cache-free forward; 1/sqrt(d) is folded into the key product."""
    s = 1.0 / math.sqrt(params.d)
    X = E
    for layer in params.layers:
        A = _T((s * layer.w_k) @ X) @ (layer.w_q @ X)
        X = X + layer.w_o @ ((layer.w_v @ X) @ A)
    return X


def lsa_forward(params: LsaParams, E: np.ndarray) -> np.ndarray:
    """Apply all layers to a token matrix (or a stack of them).

    E may carry leading batch axes; the last two axes must be
    (d+1, n+1).  Output shape equals input shape.
    """
    return _forward_fast(params, _check_tokens(params, E))


def predict_labels(params: LsaParams, E: np.ndarray) -> np.ndarray:
    """Label row (row d+1) of the forward output.

    Entries 1..n are the model's predictions for the context labels and
    entry n+1 is the query prediction.
    """
    return lsa_forward(params, E)[..., -1, :]


def _stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    tokens = np.stack([np.asarray(E, dtype=float) for E, _ in batch])
    targets = np.array([t for _, t in batch], dtype=float)
    return tokens, targets


def pretrain_loss(params: LsaParams, batch) -> float:
    """Mean squared error of the query prediction over a batch.

    `batch` is a sequence of (token matrix, target) pairs as produced by
    `taskgen.sample_batch`.
    """
    tokens, targets = _stack_batch(batch)
    preds = predict_labels(params, _check_tokens(params, tokens))[:, -1]
    return float(np.mean((preds - targets) ** 2))


def _loss_and_grad(params: LsaParams, tokens: np.ndarray, targets: np.ndarray):
    """Loss plus exact analytic gradients, batched over the leading axis."""
    s = 1.0 / math.sqrt(params.d)
    out, caches = _forward_cached(params, tokens)
    resid = out[:, -1, -1] - targets
    loss = float(np.mean(resid**2))

    B = tokens.shape[0]
    G = np.zeros_like(out)
    G[:, -1, -1] = 2.0 * resid / B

    grad_layers = []
    for layer, (X, K, Q, A, V, U) in zip(reversed(params.layers), reversed(caches)):
        dWo = (G @ _T(U)).sum(axis=0)
        Gu = _T(layer.w_o) @ G
        dV = Gu @ _T(A)
        dA = _T(V) @ Gu
        dWv = (dV @ _T(X)).sum(axis=0)
        dK = s * (Q @ _T(dA))
        dQ = s * (K @ dA)
        dWk = (dK @ _T(X)).sum(axis=0)
        dWq = (dQ @ _T(X)).sum(axis=0)
        G = G + _T(layer.w_v) @ dV + _T(layer.w_k) @ dK + _T(layer.w_q) @ dQ
        grad_layers.append(LsaLayer(w_k=dWk, w_q=dWq, w_v=dWv, w_o=dWo))
    grads = LsaParams(layers=tuple(reversed(grad_layers)))
    return loss, grads


def grad_pretrain_loss(params: LsaParams, batch) -> LsaParams:
    """Gradient of `pretrain_loss` with respect to every weight matrix.

    Returned in an LsaParams-shaped container, matrix for matrix.
    """
    tokens, targets = _stack_batch(batch)
    _, grads = _loss_and_grad(params, _check_tokens(params, tokens), targets)
    return grads


@dataclass(frozen=True)
class TrainConfig:
    """Pre-training hyperparameters.

    flop_budget, when set, caps cumulative training FLOPs: the loop
    stops before any step that would exceed it.  init_scale defaults to
    0.02 / sqrt(d+1) when left as None.
    """

    gen: GenConfig
    steps: int = 10_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    flop_budget: int | None = None
    init_scale: float | None = None
    n_layers: int = 2

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.flop_budget is not None and not self.flop_budget > 0:
            raise ConfigError(f"flop_budget must be positive, got {self.flop_budget}")
        if not (0.0 <= self.adam_beta1 < 1.0) or not (0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("adam betas must lie in [0, 1)")

    def resolved_init_scale(self) -> float:
        if self.init_scale is not None:
            return self.init_scale
        return 0.02 / math.sqrt(self.gen.d + 1)


@dataclass(frozen=True)
class TrainReport:
    """Outcome of a training run.

    D counts training targets consumed (steps_executed * batch_size);
    N is the model parameter count.
    """

    final_params: LsaParams
    loss_curve: list[tuple[int, float]]
    flops_total: int
    N: int
    D: int
    steps_executed: int


@dataclass(frozen=True)
class AdamState:
    t: int
    m: LsaParams
    v: LsaParams


def init_adam_state(params: LsaParams) -> AdamState:
    zeros = _map_params(np.zeros_like, params)
    return AdamState(t=0, m=zeros, v=_map_params(np.zeros_like, params))


def adam_step(
    params: LsaParams,
    grads: LsaParams,
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[LsaParams, AdamState]:
    """One bias-corrected Adam update; purely functional and deterministic."""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = _map_params(lambda m_, g: b1 * m_ + (1.0 - b1) * g, state.m, grads)
    v = _map_params(lambda v_, g: b2 * v_ + (1.0 - b2) * g * g, state.v, grads)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def update(p, m_, v_):
        return p - cfg.learning_rate * (m_ / c1) / (np.sqrt(v_ / c2) + cfg.adam_eps)

    new_params = _map_params(update, params, m, v)
    return new_params, AdamState(t=t, m=m, v=v)


def count_flops_per_step(d: int, n: int, n_layers: int, batch_size: int) -> int:
    """Exact floating-point operations of one training step.

    Convention: a matmul of an (m x k) by a (k x p) matrix costs 2*m*k*p
    FLOPs; the backward pass costs twice the forward pass; the optimizer
    costs 10 FLOPs per parameter per step.

    With m = d+1 and p = n+1, one layer's forward pass on one sequence
    costs

        4 * 2*m*m*p    (W_k E, W_q E, W_v E, W_o U)
      + 2 * 2*m*p*p    (K^T Q and V A)
      + p*p            (scaling by 1/sqrt(d))
      + m*p            (residual add)

    so a step costs  batch_size * 3 * L * (8*m^2*p + 4*m*p^2 + p^2 + m*p)
    plus 10 * 4*L*m^2 for the optimizer.  Only the first term scales
    with the batch.
    """
    if d < 1 or n < 1 or n_layers < 1 or batch_size < 1:
        raise ValueError(
            "d, n, n_layers and batch_size must all be >= 1, got "
            f"d={d}, n={n}, n_layers={n_layers}, batch_size={batch_size}"
        )
    m = d + 1
    p = n + 1
    fwd_layer = 8 * m * m * p + 4 * m * p * p + p * p + m * p
    data = batch_size * 3 * n_layers * fwd_layer
    optimizer = 10 * 4 * n_layers * m * m
    return data + optimizer


def train(cfg: TrainConfig, seed: int) -> TrainReport:
    """Run the sample -> gradient -> Adam loop.

    Two child streams are derived from `seed`: one for the parameter
    init, one for batch sampling, so runs are bit-reproducible.
    """
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    init_rng = np.random.Generator(np.random.Philox(init_ss))
    data_rng = np.random.Generator(np.random.Philox(data_ss))

    d, n = cfg.gen.d, cfg.gen.n
    params = init_params(d, cfg.n_layers, cfg.resolved_init_scale(), init_rng)
    state = init_adam_state(params)
    flops_per_step = count_flops_per_step(d, n, cfg.n_layers, cfg.batch_size)

    if cfg.flop_budget is not None and flops_per_step > cfg.flop_budget:
        raise BudgetError(
            f"flop_budget {cfg.flop_budget} is below the cost of one step "
            f"({flops_per_step})"
        )

    loss_curve: list[tuple[int, float]] = []
    flops_total = 0
    steps_executed = 0
    for step in range(1, cfg.steps + 1):
        if cfg.flop_budget is not None and flops_total + flops_per_step > cfg.flop_budget:
            break
        batch = sample_batch(cfg.gen, cfg.batch_size, data_rng)
        tokens, targets = _stack_batch(batch)
        loss, grads = _loss_and_grad(params, tokens, targets)
        params, state = adam_step(params, grads, state, cfg)
        flops_total += flops_per_step
        steps_executed = step
        loss_curve.append((step, loss))

    return TrainReport(
        final_params=params,
        loss_curve=loss_curve,
        flops_total=flops_total,
        N=params.n_params,
        D=steps_executed * cfg.batch_size,
        steps_executed=steps_executed,
    )


def save_checkpoint(path, params: LsaParams, *, seed: int, cfg: TrainConfig) -> None:
    """Write a checkpoint: one JSON header line, then raw float64 arrays.

    Matrices follow layer order, K, Q, V, O within each layer,
    little-endian, C order.
    """
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "d": params.d,
        "n_trained": cfg.gen.n,
        "n_layers": params.n_layers,
        "init_seed": seed,
        "train_config": asdict(cfg),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for layer in params.layers:
            for mat in layer.matrices():
                fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_checkpoint(path, expected_d: int | None = None) -> tuple[LsaParams, dict]:
    """Read a checkpoint, validating the header against the payload."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format_version {header.get('format_version')!r}"
        )
    d = header["d"]
    n_layers = header["n_layers"]
    if expected_d is not None and d != expected_d:
        raise DimensionError(f"checkpoint has d={d}, expected d={expected_d}")
    m = d + 1
    per_matrix = m * m * 8
    expected_bytes = n_layers * 4 * per_matrix
    if len(payload) != expected_bytes:
        raise ConfigError(
            f"checkpoint payload has {len(payload)} bytes, expected {expected_bytes}"
        )
    layers = []
    offset = 0
    for _ in range(n_layers):
        mats = []
        for _ in _MATRIX_ORDER:
            arr = np.frombuffer(payload, dtype="<f8", count=m * m, offset=offset)
            mats.append(arr.reshape(m, m).copy())
            offset += per_matrix
        layers.append(LsaLayer(*mats))
    return LsaParams(layers=tuple(layers)), header
