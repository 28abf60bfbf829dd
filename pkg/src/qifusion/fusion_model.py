"""Multi-task fusion network and linear baseline for subjective-score prediction.

The network maps twelve min-max-normalized objective measures through six
dense layers (GELU after the first five, sigmoid after the last) to
normalized quality/intelligibility scores; an augmented variant takes the
subjective quality rating as a thirteenth input and predicts
intelligibility alone. Forward, backward and the Adam training loop are
implemented directly in numpy so gradients are auditable against finite
differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .external_scores import MEASURE_NAMES
from .stats import (
    Normalizer,
    denormalize_target,
    fit_normalizer,
    normalize_target,
)

DEFAULT_HIDDEN_WIDTHS = (128, 64, 64, 32, 16)
STANDARD_HEADS = ("quality", "intelligibility")
CHECKPOINT_FORMAT_VERSION = 1

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx GELU = Phi(x) + x * phi(x), with the exact Gaussian CDF/PDF."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    head_weights: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        hw = tuple(float(w) for w in self.head_weights)
        if any(w < 0 for w in hw) or sum(hw) <= 0:
            raise ValueError("head weights must be nonnegative with positive sum")
        self.head_weights = hw

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "head_weights": list(self.head_weights),
        }


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,val_loss\n")
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                f.write(f"{i},{tr!r},{va!r}\n")


@dataclass
class FusionModel:
    input_dim: int
    widths: tuple[int, ...]  # hidden widths plus the head count
    weights: list[np.ndarray]  # per layer, shape [out, in]
    biases: list[np.ndarray]
    heads: tuple[str, ...]
    seed: int
    normalizer: Normalizer | None = None

    @property
    def n_heads(self) -> int:
        return len(self.heads)


def init_model(
    seed: int,
    input_dim: int = 12,
    widths=None,
    heads: tuple[str, ...] = STANDARD_HEADS,
) -> FusionModel:
    """Deterministically initialize the six-layer network.

    Weights are zero-mean normal with variance 2/fan_in (suits GELU),
    biases zero.
    """
    if widths is None:
        widths = DEFAULT_HIDDEN_WIDTHS + (len(heads),)
    widths = tuple(int(w) for w in widths)
    if any(w <= 0 for w in widths):
        raise ValueError("widths must be positive")
    if widths[-1] != len(heads):
        raise ValueError("final width must equal the number of heads")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    fan_in = input_dim
    for w in widths:
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(w, fan_in)))
        biases.append(np.zeros(w))
        fan_in = w
    return FusionModel(
        input_dim=input_dim,
        widths=widths,
        weights=weights,
        biases=biases,
        heads=tuple(heads),
        seed=seed,
    )


def _forward_cached(model: FusionModel, x: np.ndarray):
    """Forward pass keeping pre-activations for backprop."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"inputs must be [n x {model.input_dim}]")
    pre = []
    act = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = sigmoid(z) if i == last else gelu(z)
        act.append(h)
    return pre, act


def forward(model: FusionModel, x) -> np.ndarray:
    """Network output in (0, 1) for already-normalized inputs [n x input_dim]."""
    x = np.asarray(x, dtype=np.float64)
    return _forward_cached(model, x)[1][-1]


def loss_and_gradient(model: FusionModel, x, targets, head_weights=None):
    """Weighted per-head MSE and its gradients w.r.t. every parameter.

    Targets are expected in [0, 1]. Returns (loss, grad_weights, grad_biases)
    with gradient arrays shaped like the corresponding parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (x.shape[0], model.n_heads):
        raise ValueError(f"targets must be [n x {model.n_heads}]")
    if head_weights is None:
        head_weights = np.full(model.n_heads, 1.0 / model.n_heads)
    hw = np.asarray(head_weights, dtype=np.float64)
    pre, act = _forward_cached(model, x)
    y = act[-1]
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite values in forward pass")
    n = x.shape[0]
    diff = y - t
    loss = float(np.sum(hw * np.mean(diff * diff, axis=0)))
    # d loss / d y, then back through sigmoid
    dy = 2.0 * diff * hw / n
    dz = dy * y * (1.0 - y)
    grad_w = [np.empty(0)] * len(model.weights)
    grad_b = [np.empty(0)] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = dz.T @ act[i]
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ model.weights[i]
            dz = dh * gelu_grad(pre[i - 1])
    return loss, grad_w, grad_b


def _validation_loss(model: FusionModel, x, t, hw) -> float:
    y = forward(model, x)
    return float(np.sum(np.asarray(hw) * np.mean((y - t) ** 2, axis=0)))


def train(
    model: FusionModel,
    train_x,
    train_y,
    val_x,
    val_y,
    config: TrainConfig,
    feature_names=None,
):
    """Train with mini-batch Adam and early stopping; returns (model, history).

    ``train_x``/``val_x`` are raw feature matrices and ``train_y``/``val_y``
    raw subjective targets, one column per head. The feature normalizer is
    fitted on the training rows only and stored on the model; targets are
    normalized by the fixed theoretical ranges. Early stopping restores the
    parameters of the best validation epoch.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    if train_x.size == 0 or val_x.size == 0:
        raise ValueError("empty training or validation set")
    if feature_names is None:
        if train_x.shape[1] == len(MEASURE_NAMES):
            feature_names = MEASURE_NAMES
        else:
            feature_names = tuple(f"feature_{i}" for i in range(train_x.shape[1]))
    fixed = {"subj_quality": (1.0, 5.0)} if "subj_quality" in feature_names else None
    normalizer = fit_normalizer(train_x, feature_names, fixed_ranges=fixed)
    xn = normalizer.apply(train_x)
    vn = normalizer.apply(val_x)
    tn = np.column_stack(
        [normalize_target(np.asarray(train_y)[:, i], h) for i, h in enumerate(model.heads)]
    )
    vt = np.column_stack(
        [normalize_target(np.asarray(val_y)[:, i], h) for i, h in enumerate(model.heads)]
    )
    hw = np.asarray(config.head_weights[: model.n_heads], dtype=np.float64)
    if hw.size != model.n_heads:
        raise ValueError("head_weights length does not match model heads")

    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    work = replace(model, weights=weights, biases=biases, normalizer=normalizer)
    params = weights + biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_val = np.inf
    best_params = ([w.copy() for w in weights], [b.copy() for b in biases])
    best_epoch = 0
    stall = 0
    n = xn.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, gw, gb = loss_and_gradient(work, xn[idx], tn[idx], hw)
            epoch_loss += loss * idx.size
            step += 1
            grads = gw + gb
            for p, g, m, v in zip(params, grads, m_state, v_state):
                m *= beta1
                m += (1.0 - beta1) * g
                v *= beta2
                v += (1.0 - beta2) * g * g
                m_hat = m / (1.0 - beta1**step)
                v_hat = v / (1.0 - beta2**step)
                p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        val_loss = _validation_loss(work, vn, vt, hw)
        history.train_loss.append(epoch_loss / n)
        history.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = ([w.copy() for w in weights], [b.copy() for b in biases])
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    history.best_epoch = best_epoch
    final = replace(
        work, weights=best_params[0], biases=best_params[1], normalizer=normalizer
    )
    return final, history


def predict(model: FusionModel, raw_x) -> np.ndarray:
    """Denormalized per-head predictions for raw measure rows."""
    if model.normalizer is None:
        raise ValueError("model has no normalizer snapshot; train or load first")
    xn = model.normalizer.apply(np.asarray(raw_x, dtype=np.float64))
    y = forward(model, xn)
    return np.column_stack(
        [denormalize_target(y[:, i], h) for i, h in enumerate(model.heads)]
    )


def train_augmented(
    train_x,
    train_quality,
    train_intel,
    val_x,
    val_quality,
    val_intel,
    config: TrainConfig,
    model_seed: int,
    widths=None,
):
    """Quality-augmented intelligibility predictor.

    Appends the subjective quality score (normalized by its fixed [1, 5]
    range) as a thirteenth input and trains a single intelligibility head.
    """
    tx = np.column_stack([train_x, np.asarray(train_quality, dtype=np.float64)])
    vx = np.column_stack([val_x, np.asarray(val_quality, dtype=np.float64)])
    names = tuple(MEASURE_NAMES) + ("subj_quality",)
    model = init_model(
        model_seed, input_dim=tx.shape[1], widths=widths, heads=("intelligibility",)
    )
    cfg = replace(config, head_weights=(1.0,))
    return train(
        model,
        tx,
        np.asarray(train_intel)[:, None],
        vx,
        np.asarray(val_intel)[:, None],
        cfg,
        feature_names=names,
    )


# --- Linear baseline --------------------------------------------------------


def fit_linear_baseline(x, y, ridge: float = 1e-8):
    """Ordinary least squares via normal equations, one target at a time.

    ``ridge`` is added to the Gram diagonal for numerical safety. Returns
    (weights, bias). Inputs are expected normalized; requires more rows
    than features.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] <= x.shape[1]:
        raise ValueError("need more rows than features")
    a = np.column_stack([x, np.ones(x.shape[0])])
    gram = a.T @ a + ridge * np.eye(a.shape[1])
    theta = np.linalg.solve(gram, a.T @ y)
    return theta[:-1], float(theta[-1])


@dataclass
class LinearBaseline:
    """Per-head ordinary-least-squares models over normalized features."""

    heads: tuple[str, ...]
    weights: dict[str, np.ndarray]
    biases: dict[str, float]
    normalizer: Normalizer


def train_linear(train_x, train_y, heads=STANDARD_HEADS, feature_names=None) -> LinearBaseline:
    """Fit one linear model per head on raw features/targets."""
    train_x = np.asarray(train_x, dtype=np.float64)
    if feature_names is None:
        feature_names = (
            MEASURE_NAMES
            if train_x.shape[1] == len(MEASURE_NAMES)
            else tuple(f"feature_{i}" for i in range(train_x.shape[1]))
        )
    normalizer = fit_normalizer(train_x, feature_names)
    xn = normalizer.apply(train_x)
    weights = {}
    biases = {}
    for i, head in enumerate(heads):
        yn = normalize_target(np.asarray(train_y)[:, i], head)
        w, b = fit_linear_baseline(xn, yn)
        weights[head] = w
        biases[head] = b
    return LinearBaseline(
        heads=tuple(heads), weights=weights, biases=biases, normalizer=normalizer
    )


def predict_linear(baseline: LinearBaseline, raw_x) -> np.ndarray:
    xn = baseline.normalizer.apply(np.asarray(raw_x, dtype=np.float64))
    cols = []
    for head in baseline.heads:
        yn = xn @ baseline.weights[head] + baseline.biases[head]
        cols.append(denormalize_target(yn, head))
    return np.column_stack(cols)


# --- Checkpoints ------------------------------------------------------------


def save_checkpoint(model, path, train_config: TrainConfig | None = None) -> None:
    """Serialize a fusion model or linear baseline as versioned JSON."""
    if isinstance(model, FusionModel):
        doc = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "fusion",
            "input_dim": model.input_dim,
            "widths": list(model.widths),
            "activations": ["gelu"] * (len(model.widths) - 1) + ["sigmoid"],
            "heads": list(model.heads),
            "weights": [w.reshape(-1).tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
            "seed": model.seed,
            "normalizer": model.normalizer.to_dict() if model.normalizer else None,
            "train_config": train_config.to_dict() if train_config else None,
        }
    elif isinstance(model, LinearBaseline):
        doc = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "linear",
            "heads": list(model.heads),
            "weights": {h: model.weights[h].tolist() for h in model.heads},
            "biases": {h: model.biases[h] for h in model.heads},
            "normalizer": model.normalizer.to_dict(),
            "train_config": train_config.to_dict() if train_config else None,
        }
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    normalizer = Normalizer.from_dict(doc["normalizer"]) if doc.get("normalizer") else None
    if doc["kind"] == "fusion":
        widths = tuple(doc["widths"])
        input_dim = doc["input_dim"]
        weights = []
        biases = []
        fan_in = input_dim
        for w_flat, b, width in zip(doc["weights"], doc["biases"], widths):
            weights.append(np.asarray(w_flat, dtype=np.float64).reshape(width, fan_in))
            biases.append(np.asarray(b, dtype=np.float64))
            fan_in = width
        return FusionModel(
            input_dim=input_dim,
            widths=widths,
            weights=weights,
            biases=biases,
            heads=tuple(doc["heads"]),
            seed=doc["seed"],
            normalizer=normalizer,
        )
    if doc["kind"] == "linear":
        return LinearBaseline(
            heads=tuple(doc["heads"]),
            weights={h: np.asarray(w, dtype=np.float64) for h, w in doc["weights"].items()},
            biases={h: float(b) for h, b in doc["biases"].items()},
            normalizer=normalizer,
        )
    raise ValueError(f"unknown checkpoint kind {doc['kind']!r}")
