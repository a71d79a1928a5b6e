"""Adaptive-depth MLP regressor trained by hedge backpropagation.

Every hidden layer carries a scalar head; the prediction is the
expert-weighted sum of the per-layer head outputs.  Expert weights follow a
multiplicative-weights (hedge) update on bounded per-layer losses, while the
hidden weights and heads follow gradient descent on smooth squared per-layer
losses, each scaled by its layer's expert weight.  A hedge-only harness
measures average regret against the best fixed expert weighting.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-8
NORM_CLIP = 10.0  # bound on standardized inputs; tames the cold start


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    acc_gt: float

    def __post_init__(self):
        if not 0.0 <= self.acc_gt <= 1.0:
            raise ValueError(f"ground-truth accuracy {self.acc_gt} outside [0, 1]")


@dataclass
class TraceStep:
    alpha: np.ndarray  # weights played at this step (before the update)
    losses: np.ndarray
    played_loss: float


@dataclass
class AdaptiveMLP:
    layers: int
    width: int
    input_dim: int
    phi: list[np.ndarray]  # phi[l]: (width, fan_in + 1), bias column last
    heads: list[np.ndarray]  # heads[l]: (width + 1,), bias slot last
    alpha: np.ndarray
    beta: float = 0.99
    eta: float = 0.01
    smoothing: float = 0.0
    hedge_enabled: bool = True
    normalize_inputs: bool = True
    norm_count: int = 0
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    norm_m2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    trace: list[TraceStep] = field(default_factory=list)
    skipped_updates: int = 0


def init(
    layers: int,
    width: int,
    input_dim: int,
    seed: int = 0,
    beta: float = 0.99,
    eta: float = 0.01,
    smoothing: float = 0.0,
    normalize_inputs: bool = True,
) -> AdaptiveMLP:
    """Fresh predictor: uniform expert weights, symmetric 1/sqrt(fan-in)
    hidden weights, zero heads."""
    if layers < 1:
        raise ValueError("need at least one layer")
    if not 0.0 < beta < 1.0:
        raise ValueError("discount must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    phi = []
    fan_in = input_dim
    for _ in range(layers):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(width, fan_in + 1))
        w[:, -1] = 0.0
        phi.append(w)
        fan_in = width
    heads = [np.zeros(width + 1) for _ in range(layers)]
    return AdaptiveMLP(
        layers=layers,
        width=width,
        input_dim=input_dim,
        phi=phi,
        heads=heads,
        alpha=np.full(layers, 1.0 / layers),
        beta=beta,
        eta=eta,
        smoothing=smoothing,
        normalize_inputs=normalize_inputs,
        norm_mean=np.zeros(input_dim),
        norm_m2=np.zeros(input_dim),
    )


def init_fixed_depth(
    layers: int, width: int, input_dim: int, seed: int = 0, eta: float = 0.01,
    normalize_inputs: bool = True,
) -> AdaptiveMLP:
    """Plain fixed-depth MLP baseline: prediction comes from the top head
    only and expert weights never move."""
    m = init(layers, width, input_dim, seed=seed, eta=eta, normalize_inputs=normalize_inputs)
    m.alpha = np.zeros(layers)
    m.alpha[-1] = 1.0
    m.hedge_enabled = False
    return m


def _normalize(m: AdaptiveMLP, x: np.ndarray) -> np.ndarray:
    if not m.normalize_inputs:
        return x
    if m.norm_count == 0:
        return np.clip(x, -NORM_CLIP, NORM_CLIP)
    var = m.norm_m2 / m.norm_count
    scale = np.sqrt(var)
    scale[scale == 0.0] = 1.0
    return np.clip((x - m.norm_mean) / scale, -NORM_CLIP, NORM_CLIP)


def _update_norm(m: AdaptiveMLP, x: np.ndarray) -> None:
    if not m.normalize_inputs:
        return
    m.norm_count += 1
    delta = x - m.norm_mean
    m.norm_mean = m.norm_mean + delta / m.norm_count
    m.norm_m2 = m.norm_m2 + delta * (x - m.norm_mean)


def _forward(m: AdaptiveMLP, x: np.ndarray):
    """Returns pre-activations, hidden activations, and per-layer head
    outputs for a batch ``x`` of shape (rows, input_dim).

    Overflow is tolerated here; non-finite values surface as skipped
    gradient steps rather than warnings."""
    with np.errstate(over="ignore", invalid="ignore"):
        h = _normalize(m, x)
        zs, hs = [], [h]
        f = np.empty((x.shape[0], m.layers))
        for l in range(m.layers):
            bias = np.ones((h.shape[0], 1))
            z = np.concatenate([h, bias], axis=1) @ m.phi[l].T
            h = np.maximum(z, 0.0)
            zs.append(z)
            hs.append(h)
            f[:, l] = h @ m.heads[l][:-1] + m.heads[l][-1]
    return zs, hs, f


def predict(m: AdaptiveMLP, x: np.ndarray) -> tuple[np.ndarray | float, np.ndarray]:
    """Expert-weighted prediction plus the raw per-layer head outputs.

    Accepts one feature vector (returns scalars) or a (rows, dim) batch.
    The returned value is the raw weighted sum; clip to [0, 1] before using
    it as a bounded loss argument.
    """
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != m.input_dim:
        raise ValueError(f"expected {m.input_dim} features, got {arr.shape[1]}")
    _, _, f = _forward(m, arr)
    acc_hat = f @ m.alpha
    if single:
        return float(acc_hat[0]), f[0]
    return acc_hat, f


def hedge_update(m: AdaptiveMLP, losses: np.ndarray) -> np.ndarray:
    """Multiplicative reweighting of the expert weights on bounded losses."""
    losses = np.asarray(losses, dtype=float)
    if losses.shape != (m.layers,):
        raise ValueError(f"need {m.layers} per-layer losses")
    if np.any(losses < 0.0) or np.any(losses > 1.0):
        raise ValueError("hedge losses must lie in [0, 1]")
    alpha = m.alpha * np.power(m.beta, losses)
    alpha = alpha / alpha.sum()
    if m.smoothing > 0.0:
        alpha = np.maximum(alpha, m.smoothing / m.layers)
        alpha = alpha / alpha.sum()
    m.alpha = alpha
    return alpha


def sgd_update(m: AdaptiveMLP, s: Sample) -> bool:
    """One gradient step on the expert-weighted squared per-layer losses.

    Heads move by their own layer's scaled gradient; hidden weights of layer
    l accumulate the gradients of every head at depth >= l.  A non-finite
    gradient aborts the step, leaving the weights untouched.
    """
    x = np.asarray(s.features, dtype=float)[None, :]
    if x.shape[1] != m.input_dim:
        raise ValueError(f"expected {m.input_dim} features, got {x.shape[1]}")
    zs, hs, f = _forward(m, x)
    with np.errstate(over="ignore", invalid="ignore"):
        dloss = 2.0 * (f[0] - s.acc_gt)  # d/df of squared error, per layer

        grad_heads = []
        for l in range(m.layers):
            gh = np.append(hs[l + 1][0], 1.0) * (m.alpha[l] * dloss[l])
            grad_heads.append(gh)

        grad_phi = [np.zeros_like(p) for p in m.phi]
        g = np.zeros(m.width)  # d(weighted loss of heads >= l) / d h_l
        for l in range(m.layers - 1, -1, -1):
            g = g + m.alpha[l] * dloss[l] * m.heads[l][:-1]
            local = g * (zs[l][0] > 0.0)
            grad_phi[l] = np.outer(local, np.append(hs[l][0], 1.0))
            g = m.phi[l][:, :-1].T @ local

    finite = all(np.isfinite(gp).all() for gp in grad_phi) and all(
        np.isfinite(gh).all() for gh in grad_heads
    )
    if not finite:
        m.skipped_updates += 1
        return False
    for l in range(m.layers):
        m.heads[l] = m.heads[l] - m.eta * grad_heads[l]
        m.phi[l] = m.phi[l] - m.eta * grad_phi[l]
    return True


@dataclass(frozen=True)
class ObserveResult:
    prediction: float  # raw weighted sum
    clipped: float
    per_layer: np.ndarray
    hedge_losses: np.ndarray
    sgd_applied: bool


def observe(m: AdaptiveMLP, s: Sample) -> ObserveResult:
    """Predict, reweight experts on absolute errors, take a gradient step,
    and record the step in the trace, in that order."""
    prediction, f = predict(m, s.features)
    clipped_layers = np.clip(f, 0.0, 1.0)
    losses = np.abs(clipped_layers - s.acc_gt)
    alpha_played = m.alpha.copy()
    if m.hedge_enabled:
        hedge_update(m, losses)
    applied = sgd_update(m, s)
    _update_norm(m, np.asarray(s.features, dtype=float))
    m.trace.append(
        TraceStep(alpha=alpha_played, losses=losses, played_loss=float(alpha_played @ losses))
    )
    return ObserveResult(
        prediction=prediction,
        clipped=float(np.clip(prediction, 0.0, 1.0)),
        per_layer=f,
        hedge_losses=losses,
        sgd_applied=applied,
    )


# ---------------------------------------------------------------------------
# serialization: versioned binary blob

_MAGIC = b"ZSPR"
_VERSION = 2


def save(m: AdaptiveMLP, path) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(
        struct.pack(
            "<IIIIIIQ",
            _VERSION,
            m.layers,
            m.width,
            m.input_dim,
            1 if m.hedge_enabled else 0,
            1 if m.normalize_inputs else 0,
            m.norm_count,
        )
    )
    buf.write(struct.pack("<ddd", m.beta, m.eta, m.smoothing))
    for arr in (m.alpha, m.norm_mean, m.norm_m2, *m.phi, *m.heads):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path) -> AdaptiveMLP:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a predictor state file")
    version, layers, width, input_dim, hedge, norm, count = struct.unpack_from("<IIIIIIQ", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported predictor state version {version}")
    offset = 4 + struct.calcsize("<IIIIIIQ")
    beta, eta, smoothing = struct.unpack_from("<ddd", raw, offset)
    offset += struct.calcsize("<ddd")

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
        return arr

    alpha = take((layers,))
    mean = take((input_dim,))
    m2 = take((input_dim,))
    phi = [take((width, (input_dim if l == 0 else width) + 1)) for l in range(layers)]
    heads = [take((width + 1,)) for _ in range(layers)]
    return AdaptiveMLP(
        layers=layers, width=width, input_dim=input_dim, phi=phi, heads=heads,
        alpha=alpha, beta=beta, eta=eta, smoothing=smoothing,
        hedge_enabled=bool(hedge), normalize_inputs=bool(norm),
        norm_count=count, norm_mean=mean, norm_m2=m2,
    )


# ---------------------------------------------------------------------------
# hedge-only regret harness

LossSource = Callable[[int], np.ndarray]


def constant_losses(vector: Sequence[float]) -> LossSource:
    arr = np.asarray(vector, dtype=float)

    def source(_t: int) -> np.ndarray:
        return arr

    return source


def alternating_losses(layers: int) -> LossSource:
    """Adversarial alternation: expert 1 loses on odd steps, expert 2 on even."""
    if layers < 2:
        raise ValueError("alternating losses need at least two experts")

    def source(t: int) -> np.ndarray:
        losses = np.zeros(layers)
        losses[(t - 1) % 2] = 1.0
        return losses

    return source


@dataclass(frozen=True)
class RegretOutcome:
    horizon: int
    constant: float
    beta: float
    played_avg: float
    best_fixed_avg: float
    gap: float
    alphas: np.ndarray  # (T, L), the weights played at each step
    losses: np.ndarray  # (T, L)
    played: np.ndarray  # (T,)


def regret_experiment(layers: int, horizon: int, constant: float, source: LossSource) -> RegretOutcome:
    """Run hedge alone with the horizon-tuned discount and measure the
    average-regret gap to the best fixed weighting.

    The best fixed weighting of a linear objective sits on a simplex corner,
    so it equals the single best expert and is computed exactly.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    beta = np.sqrt(horizon) / (np.sqrt(horizon) + constant)
    alpha = np.full(layers, 1.0 / layers)
    alphas = np.empty((horizon, layers))
    losses = np.empty((horizon, layers))
    played = np.empty(horizon)
    totals = np.zeros(layers)
    for t in range(1, horizon + 1):
        l_t = np.asarray(source(t), dtype=float)
        if l_t.shape != (layers,) or np.any(l_t < 0.0) or np.any(l_t > 1.0):
            raise ValueError(f"loss vector at t={t} must lie in [0,1]^{layers}")
        alphas[t - 1] = alpha
        losses[t - 1] = l_t
        played[t - 1] = alpha @ l_t
        totals += l_t
        alpha = alpha * np.power(beta, l_t)
        alpha = alpha / alpha.sum()
    played_avg = float(played.mean())
    best_fixed = float(totals.min() / horizon)
    return RegretOutcome(
        horizon=horizon,
        constant=constant,
        beta=float(beta),
        played_avg=played_avg,
        best_fixed_avg=best_fixed,
        gap=played_avg - best_fixed,
        alphas=alphas,
        losses=losses,
        played=played,
    )


def regret_trace_rows(outcome: RegretOutcome) -> list[list]:
    """Rows for the trace CSV: t, alpha_1..L, loss_1..L, played_loss."""
    rows = []
    for t in range(outcome.horizon):
        rows.append(
            [t + 1, *outcome.alphas[t].tolist(), *outcome.losses[t].tolist(), outcome.played[t]]
        )
    return rows
