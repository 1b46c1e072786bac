"""Feed-forward surrogate mapping objective vectors to electrode coordinates.

Two tanh hidden layers and a linear output; sizes from the closed-form
two-hidden-layer criteria of Huang.  Inputs are normalized per feature
(condition numbers in log10) and outputs per coordinate, both min-max onto
[-1, 1] from the training data.  Training minimizes mean squared output
error plus an L2 penalty on the weights, by full-batch conjugate-gradient
descent with Fletcher-Reeves updates and a backtracking line search.

Querying the trained network at the ideal objective (condition number 1,
zero misfit) and projecting the raw coordinates back onto the electrode
constraint set yields the optimized layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import TrainingSet
from .geometry import (
    ElectrodeLayout,
    PlacementError,
    PolygonDomain,
    _check_side_feasible,
    _layout_from_positions,
)

__all__ = [
    "TrainingError",
    "NetworkArchitecture",
    "TrainConfig",
    "TrainedNetwork",
    "huang_layer_sizes",
    "train",
    "predict",
    "optimize_layout",
    "loss_and_gradient",
    "network_to_json",
    "network_from_json",
]

TARGET_OBJECTIVE = np.array([1.0, 0.0])  # ideal condition number and misfit


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values."""


def huang_layer_sizes(k: int, n_layouts: int) -> tuple[int, int]:
    """Closed-form hidden-layer sizes from electrode count and layout samples.

    L1 = floor(sqrt((k+2) N) + 2 sqrt(N / (k+2))), L2 = floor(k sqrt(N / (k+2))).
    """
    if k < 1 or n_layouts < 1:
        raise ValueError("k and n_layouts must be positive")
    root = math.sqrt(n_layouts / (k + 2))
    l1 = math.floor(math.sqrt((k + 2) * n_layouts) + 2.0 * root)
    l2 = math.floor(k * root)
    return l1, l2


@dataclass(frozen=True)
class NetworkArchitecture:
    hidden1: int
    hidden2: int
    output_dim: int
    input_dim: int = 2

    def __post_init__(self):
        if min(self.hidden1, self.hidden2, self.output_dim) < 1:
            raise ValueError("layer sizes must be positive")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.01          # L2 weight penalty
    tol: float = 1e-7            # stop when loss or gradient norm drops below
    max_epochs: int = 2000
    val_patience: int = 100      # epochs without validation improvement
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.tol <= 0:
            raise ValueError("alpha must be >= 0 and tol > 0")


@dataclass(eq=False)
class _Affine:
    """Per-component min-max map onto [-1, 1] and its inverse."""

    lo: np.ndarray
    span: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "_Affine":
        lo = data.min(axis=0)
        span = np.maximum(data.max(axis=0) - lo, 1e-12)
        return cls(lo=lo, span=span)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (x - self.lo) / self.span - 1.0

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return self.lo + 0.5 * (y + 1.0) * self.span


def _features(theta: np.ndarray) -> np.ndarray:
    """(N, 2) raw objective columns -> (log10 kappa, beta) feature rows."""
    t = np.atleast_2d(theta)
    return np.column_stack([np.log10(t[:, 0]), t[:, 1]])


@dataclass(eq=False)
class TrainedNetwork:
    arch: NetworkArchitecture
    weights: list[np.ndarray]     # [W1, W2, W3], W: (fan_in, fan_out)
    biases: list[np.ndarray]
    input_norm: _Affine
    output_norm: _Affine
    record: dict = field(default_factory=dict)

    def forward_normalized(self, xn: np.ndarray) -> np.ndarray:
        h = np.tanh(xn @ self.weights[0] + self.biases[0])
        h = np.tanh(h @ self.weights[1] + self.biases[1])
        return h @ self.weights[2] + self.biases[2]


def predict(net: TrainedNetwork, theta) -> np.ndarray:
    """Raw stacked coordinate vector(s) for objective value(s) theta.

    Accepts one (kappa, beta) pair or an (N, 2) batch; returns (2k,) or (N, 2k).
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    xn = net.input_norm.forward(_features(np.atleast_2d(theta)))
    out = net.output_norm.inverse(net.forward_normalized(xn))
    return out[0] if single else out


def _init_params(arch: NetworkArchitecture, rng) -> tuple[list, list]:
    sizes = [arch.input_dim, arch.hidden1, arch.hidden2, arch.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _pack(weights, biases) -> np.ndarray:
    return np.concatenate([a.ravel() for a in weights + biases])


def _unpack(vec, arch) -> tuple[list, list]:
    sizes = [arch.input_dim, arch.hidden1, arch.hidden2, arch.output_dim]
    weights, biases, at = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(vec[at : at + fan_in * fan_out].reshape(fan_in, fan_out))
        at += fan_in * fan_out
    for fan_out in sizes[1:]:
        biases.append(vec[at : at + fan_out])
        at += fan_out
    return weights, biases


def loss_and_gradient(
    params: np.ndarray, X: np.ndarray, Y: np.ndarray, arch: NetworkArchitecture, alpha: float
) -> tuple[float, np.ndarray]:
    """Loss (mean over samples of summed squared output error, plus
    alpha * squared weight norm; biases unpenalized) and its exact gradient."""
    W, b = _unpack(params, arch)
    n = len(X)
    a1 = np.tanh(X @ W[0] + b[0])
    a2 = np.tanh(a1 @ W[1] + b[1])
    out = a2 @ W[2] + b[2]
    r = out - Y
    loss = float((r * r).sum() / n + alpha * sum(float((w * w).sum()) for w in W))

    d3 = 2.0 * r / n
    gW3 = a2.T @ d3 + 2.0 * alpha * W[2]
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ W[2].T) * (1.0 - a2 * a2)
    gW2 = a1.T @ d2 + 2.0 * alpha * W[1]
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ W[1].T) * (1.0 - a1 * a1)
    gW1 = X.T @ d1 + 2.0 * alpha * W[0]
    gb1 = d1.sum(axis=0)
    return loss, _pack([gW1, gW2, gW3], [gb1, gb2, gb3])


def train(
    dataset: TrainingSet, arch: NetworkArchitecture, cfg: TrainConfig
) -> TrainedNetwork:
    """Fit the surrogate by Fletcher-Reeves conjugate gradient descent.

    The columns are split into random thirds (train / validation / test);
    infinite-objective sentinel columns are dropped first.  Stops on loss or
    gradient norm below cfg.tol, on max_epochs, or when validation loss has
    not improved for cfg.val_patience epochs; the stop reason is recorded.
    """
    mask = dataset.finite_mask
    theta = dataset.Theta_bar[:, mask].T    # (N, 2)
    coords = dataset.E_bar[:, mask].T       # (N, 2k)
    n = len(theta)
    if n < 3:
        raise TrainingError("need at least 3 finite training columns")
    if coords.shape[1] != arch.output_dim:
        raise TrainingError(
            f"dataset has {coords.shape[1]} output coordinates, architecture wants {arch.output_dim}"
        )

    rng = np.random.default_rng(np.random.SeedSequence((0x4E, cfg.seed)))
    order = rng.permutation(n)
    third = n // 3
    idx_val = order[:third]
    idx_test = order[third : 2 * third]
    idx_train = order[2 * third :]

    input_norm = _Affine.fit(_features(theta[idx_train]))
    output_norm = _Affine.fit(coords[idx_train])
    Xtr = input_norm.forward(_features(theta[idx_train]))
    Ytr = output_norm.forward(coords[idx_train])
    Xval = input_norm.forward(_features(theta[idx_val]))
    Yval = output_norm.forward(coords[idx_val])

    W, b = _init_params(arch, rng)
    params = _pack(W, b)
    n_params = len(params)

    def val_loss(p):
        Wv, bv = _unpack(p, arch)
        a = np.tanh(Xval @ Wv[0] + bv[0])
        a = np.tanh(a @ Wv[1] + bv[1])
        r = a @ Wv[2] + bv[2] - Yval
        return float((r * r).sum() / max(len(Xval), 1))

    loss, grad = loss_and_gradient(params, Xtr, Ytr, arch, cfg.alpha)
    direction = -grad
    step = 1.0
    loss_curve, grad_curve, val_curve = [loss], [float(np.linalg.norm(grad))], []
    best_val, best_params, since_best = np.inf, params.copy(), 0
    stop_reason = "max_epochs"

    for epoch in range(cfg.max_epochs):
        gnorm = float(np.linalg.norm(grad))
        if loss < cfg.tol:
            stop_reason = "loss_below_tol"
            break
        if gnorm < cfg.tol:
            stop_reason = "gradient_below_tol"
            break

        if epoch % n_params == 0 or float(grad @ direction) >= 0.0:
            direction = -grad  # periodic / non-descent restart

        # backtracking line search with one growth attempt, strict decrease
        slope = float(grad @ direction)
        accepted = False
        trial = step * 2.0
        for _ in range(40):
            cand = params + trial * direction
            new_loss, new_grad = loss_and_gradient(cand, Xtr, Ytr, arch, cfg.alpha)
            if np.isfinite(new_loss) and new_loss <= loss + 1e-4 * trial * slope:
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            if np.array_equal(direction, -grad):
                stop_reason = "line_search_stalled"
                break
            direction = -grad
            continue

        step = trial
        params = cand
        beta_fr = float((new_grad @ new_grad) / (grad @ grad))
        direction = -new_grad + beta_fr * direction
        loss, grad = new_loss, new_grad
        loss_curve.append(loss)
        grad_curve.append(float(np.linalg.norm(grad)))

        if len(Xval):
            v = val_loss(params)
            val_curve.append(v)
            if v < best_val - 1e-15:
                best_val, best_params, since_best = v, params.copy(), 0
            else:
                since_best += 1
                if since_best >= cfg.val_patience:
                    stop_reason = "validation_patience"
                    break

    if not np.isfinite(loss):
        raise TrainingError("training loss became non-finite")
    final = best_params if (len(Xval) and best_val < np.inf and stop_reason == "validation_patience") else params
    Wf, bf = _unpack(final, arch)

    # held-out test loss on the final parameters
    Xte = input_norm.forward(_features(theta[idx_test])) if len(idx_test) else None
    test_loss = None
    if Xte is not None and len(Xte):
        Yte = output_norm.forward(coords[idx_test])
        a = np.tanh(Xte @ Wf[0] + bf[0])
        a = np.tanh(a @ Wf[1] + bf[1])
        r = a @ Wf[2] + bf[2] - Yte
        test_loss = float((r * r).sum() / len(Xte))

    record = {
        "loss_curve": loss_curve,
        "gradient_curve": grad_curve,
        "validation_curve": val_curve,
        "epochs": len(loss_curve) - 1,
        "stop_reason": stop_reason,
        "test_loss": test_loss,
        "n_train": int(len(idx_train)),
        "n_val": int(len(idx_val)),
        "n_test": int(len(idx_test)),
        "alpha": cfg.alpha,
        "seed": cfg.seed,
    }
    return TrainedNetwork(
        arch=arch,
        weights=Wf,
        biases=bf,
        input_norm=input_norm,
        output_norm=output_norm,
        record=record,
    )


def _isotonic(values: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto nondecreasing sequences."""
    level = list(values.astype(float))
    weight = [1.0] * len(level)
    out = []
    for v, w in zip(level, weight):
        out.append([v, w])
        while len(out) > 1 and out[-2][0] > out[-1][0]:
            v2, w2 = out.pop()
            v1, w1 = out.pop()
            out.append([(v1 * w1 + v2 * w2) / (w1 + w2), w1 + w2])
    res = []
    for v, w in out:
        res.extend([v] * int(w))
    return np.asarray(res)


def project_side_positions(
    targets: np.ndarray, length: float, width: float, min_gap: float
) -> np.ndarray:
    """Project target midpoint arclengths onto the ordered feasible set.

    Feasible positions satisfy width/2 <= t_1, t_{i+1} - t_i >= width +
    min_gap and t_m <= length - width/2.  Already-feasible targets are
    returned untouched.
    """
    m = len(targets)
    if m == 0:
        return targets
    _check_side_feasible(length, m, width, min_gap, side=-1)
    pitch = width + min_gap
    s = _isotonic(targets - pitch * np.arange(m)) + pitch * np.arange(m)
    lo = width / 2.0 + pitch * np.arange(m)
    hi = length - width / 2.0 - pitch * (m - 1 - np.arange(m))
    for i in range(m):
        s[i] = max(s[i], lo[i]) if i == 0 else max(s[i], lo[i], s[i - 1] + pitch)
    for i in range(m - 1, -1, -1):
        s[i] = min(s[i], hi[i]) if i == m - 1 else min(s[i], hi[i], s[i + 1] - pitch)
    if s[0] < width / 2.0 - 1e-9:
        raise PlacementError("projection infeasible")
    return s


def optimize_layout(
    net: TrainedNetwork,
    domain: PolygonDomain,
    per_side,
    width: float,
    min_gap: float,
    theta=TARGET_OBJECTIVE,
) -> ElectrodeLayout:
    """Query the network at the target objective and project onto constraints.

    The ideal objective lies outside the trained range, so its normalized
    features are clamped to the training envelope before the forward pass;
    an unclamped query would drive the tanh layers deep into saturation and
    amplify fitting noise into large spurious electrode shifts.  Each
    predicted midpoint is then projected onto its assigned side (the side
    order matches the training layouts), clamped inside the side, and the
    per-side midpoints are jointly projected to respect ordering and the
    minimum gap.
    """
    feats = _features(np.atleast_2d(np.asarray(theta, dtype=float)))
    xn = np.clip(net.input_norm.forward(feats), -1.0, 1.0)
    raw = net.output_norm.inverse(net.forward_normalized(xn))[0]
    k = len(raw) // 2
    xy = np.column_stack([raw[:k], raw[k:]])
    positions = []
    e = 0
    for i, m in enumerate(per_side):
        a, bp = domain.side(i)
        length = domain.side_length(i)
        u = (bp - a) / length
        ts = np.array([float(np.dot(xy[e + j] - a, u)) for j in range(m)])
        ts = np.clip(ts, width / 2.0, length - width / 2.0)
        positions.append(list(project_side_positions(ts, length, width, min_gap)))
        e += m
    return _layout_from_positions(domain, per_side, width, positions)


# ----------------------------------------------------------------------
# JSON serialization
# ----------------------------------------------------------------------


def network_to_json(net: TrainedNetwork, config_hash: str = "") -> str:
    payload = {
        "config_hash": config_hash,
        "architecture": {
            "input_dim": net.arch.input_dim,
            "hidden1": net.arch.hidden1,
            "hidden2": net.arch.hidden2,
            "output_dim": net.arch.output_dim,
        },
        "input_norm": {"lo": net.input_norm.lo.tolist(), "span": net.input_norm.span.tolist()},
        "output_norm": {"lo": net.output_norm.lo.tolist(), "span": net.output_norm.span.tolist()},
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "record": net.record,
    }
    return json.dumps(payload, sort_keys=True, indent=1)


def network_from_json(text: str) -> TrainedNetwork:
    d = json.loads(text)
    arch = NetworkArchitecture(**d["architecture"])
    return TrainedNetwork(
        arch=arch,
        weights=[np.asarray(w) for w in d["weights"]],
        biases=[np.asarray(b) for b in d["biases"]],
        input_norm=_Affine(
            lo=np.asarray(d["input_norm"]["lo"]), span=np.asarray(d["input_norm"]["span"])
        ),
        output_norm=_Affine(
            lo=np.asarray(d["output_norm"]["lo"]), span=np.asarray(d["output_norm"]["span"])
        ),
        record=d.get("record", {}),
    )
