"""Confidence-aware context classification.

A small rectifier MLP outputs non-negative evidence per context; adding one
gives the parameters of a Dirichlet over class probabilities. The mean
Bayes risk of the squared error plus an annealed KL term on off-label
evidence trains it; prediction confidence is ``1 - K / sum(alpha)``, which
is zero exactly when the network produces no evidence.

The classifier wears the scikit-learn estimator interface so it can sit in
ordinary pipelines and grid searches.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, polygamma
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_X_y

from .nav import PlannerInput

FEATURE_BINS = 72
GOAL_DISTANCE_CAP = 5.0
DEFAULT_EPSILON_U = 0.8
DEFAULT_WINDOW = 21  # about 2.1 s of control ticks; odd to reduce ties


@dataclass(frozen=True)
class FeatureConfig:
    bins: int = FEATURE_BINS
    goal_cap: float = GOAL_DISTANCE_CAP
    max_speed: float = 2.0  # normalizes |v|

    @property
    def dim(self) -> int:
        return self.bins + 4

    def hash(self) -> str:
        payload = json.dumps(
            {"bins": self.bins, "goal_cap": self.goal_cap, "max_speed": self.max_speed},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


DEFAULT_FEATURES = FeatureConfig()


def feature_domain_box(config: FeatureConfig = DEFAULT_FEATURES) -> tuple[np.ndarray, np.ndarray]:
    """Bounds of every representable feature vector: bins, distance, and
    speed in [0, 1]; the two bearing components in [-1, 1]."""
    lo = np.zeros(config.dim)
    hi = np.ones(config.dim)
    lo[config.bins + 1] = lo[config.bins + 2] = -1.0
    return lo, hi


class FeatureMismatchError(ValueError):
    """Loaded classifier was trained under a different feature config."""


def featurize(x: PlannerInput, config: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Min-pooled scan bins plus goal distance, goal bearing, and speed.

    Bins and distance normalize into [0, 1]; the bearing enters as
    (sin, cos) of the local-goal direction in the robot frame.
    """
    if x.scan is None:
        raise ValueError("planner input carries no scan")
    ranges = np.asarray(x.scan.ranges, dtype=np.float64)
    if ranges.shape[0] < config.bins:
        raise ValueError(f"need at least {config.bins} beams, got {ranges.shape[0]}")
    max_range = x.scan.max_range
    clean = np.where(np.isfinite(ranges) & (ranges > 0), ranges, max_range)
    groups = np.array_split(clean, config.bins)
    bins = np.array([g.min() for g in groups]) / max_range

    pose = x.state.pose
    dx = x.local_goal[0] - pose.x
    dy = x.local_goal[1] - pose.y
    dist = min(math.hypot(dx, dy), config.goal_cap) / config.goal_cap
    bearing = math.atan2(dy, dx) - pose.theta
    speed = min(abs(x.state.vel.v), config.max_speed) / config.max_speed
    return np.concatenate([bins, [dist, math.sin(bearing), math.cos(bearing), speed]])


# --------------------------------------------------------------------------
# Evidential network
# --------------------------------------------------------------------------


@dataclass
class EvidentialNet:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # row-major (fan_in, fan_out)
    biases: list[np.ndarray]
    feature_hash: str = ""

    @property
    def n_contexts(self) -> int:
        return self.layer_sizes[-1]

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Dirichlet parameters alpha = relu(logits) + 1, shape (n, K)."""
        h = np.asarray(X, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        logits = h @ self.weights[-1] + self.biases[-1]
        return np.maximum(logits, 0.0) + 1.0


def init_net(layer_sizes: Sequence[int], seed: int, feature_hash: str = "") -> EvidentialNet:
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    # Start the evidence outputs alive: a rectified evidence head whose
    # logits begin negative can never recover.
    biases[-1][:] = 1.0
    return EvidentialNet(tuple(layer_sizes), weights, biases, feature_hash)


@dataclass(frozen=True)
class ContextPrediction:
    context: int  # 1..N (0 is reserved for the default context)
    confidence: float
    alpha: np.ndarray


def prediction_from_alpha(alpha: np.ndarray) -> ContextPrediction:
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    k = alpha.shape[0]
    context = int(np.argmax(alpha)) + 1  # ties resolve to the lower context id
    confidence = 1.0 - k / float(alpha.sum())
    return ContextPrediction(context=context, confidence=confidence, alpha=alpha)


def edl_predict(net: EvidentialNet, features: np.ndarray) -> ContextPrediction:
    return prediction_from_alpha(net.forward(features)[0])


# --------------------------------------------------------------------------
# Loss and gradients
# --------------------------------------------------------------------------


def edl_loss_alpha(alpha: np.ndarray, labels: np.ndarray, anneal: float) -> tuple[float, np.ndarray]:
    """Mean loss over a batch and its gradient w.r.t. alpha.

    Loss per sample: expected squared error under Dirichlet(alpha) plus
    ``anneal * KL(Dirichlet(masked alpha) || Dirichlet(1))`` where the
    masking pins the true-class alpha to 1 so only misleading evidence is
    pulled down.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    n, k = alpha.shape
    y = np.zeros((n, k))
    y[np.arange(n), labels] = 1.0

    s = alpha.sum(axis=1, keepdims=True)
    m = alpha / s
    err = ((y - m) ** 2).sum(axis=1)
    var = (m * (1 - m) / (s + 1)).sum(axis=1)

    # d(err)/d(alpha_k) and d(var)/d(alpha_k)
    resid = m - y
    derr = 2.0 / s * (resid - (resid * m).sum(axis=1, keepdims=True))
    one_minus_2m = 1.0 - 2.0 * m
    dvar = (
        (one_minus_2m - (one_minus_2m * m).sum(axis=1, keepdims=True)) / (s * (s + 1))
        - (m * (1 - m)).sum(axis=1, keepdims=True) / (s + 1) ** 2
    )

    loss = err + var
    grad = derr + dvar

    if anneal > 0.0:
        alpha_t = y + (1.0 - y) * alpha  # true-class evidence masked out
        st = alpha_t.sum(axis=1, keepdims=True)
        kl = (
            gammaln(st.ravel())
            - gammaln(alpha_t).sum(axis=1)
            - gammaln(float(k))
            + ((alpha_t - 1.0) * (digamma(alpha_t) - digamma(st))).sum(axis=1)
        )
        dkl = (alpha_t - 1.0) * polygamma(1, alpha_t) - (st - k) * polygamma(1, st)
        loss = loss + anneal * kl
        grad = grad + anneal * dkl * (1.0 - y)

    return float(loss.mean()), grad / n


def edl_loss(alpha: np.ndarray, label: int, anneal: float) -> float:
    """Scalar loss for a single sample."""
    value, _ = edl_loss_alpha(np.asarray(alpha, dtype=np.float64)[None, :], np.array([label]), anneal)
    return value


def _forward_trace(net: EvidentialNet, X: np.ndarray):
    acts = [np.asarray(X, dtype=np.float64)]
    pre: list[np.ndarray] = []
    h = acts[0]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    logits = h @ net.weights[-1] + net.biases[-1]
    alpha = np.maximum(logits, 0.0) + 1.0
    return acts, pre, logits, alpha


def _backprop_from_dlogits(net: EvidentialNet, acts, pre, dlogits):
    delta = dlogits
    dWs: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * len(net.biases)  # type: ignore[list-item]
    dWs[-1] = acts[-1].T @ delta
    dbs[-1] = delta.sum(axis=0)
    for layer in range(len(net.weights) - 2, -1, -1):
        delta = (delta @ net.weights[layer + 1].T) * (pre[layer] > 0.0)
        dWs[layer] = acts[layer].T @ delta
        dbs[layer] = delta.sum(axis=0)
    return dWs, dbs


def loss_and_gradients(
    net: EvidentialNet, X: np.ndarray, labels: np.ndarray, anneal: float
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Backprop of the labeled loss through the rectifier stack."""
    acts, pre, logits, alpha = _forward_trace(net, X)
    loss, dalpha = edl_loss_alpha(alpha, labels, anneal)
    dWs, dbs = _backprop_from_dlogits(net, acts, pre, dalpha * (logits > 0.0))
    return loss, dWs, dbs


def vacuity_dalpha(alpha: np.ndarray) -> np.ndarray:
    """Gradient of the off-manifold evidence suppressor.

    KL(Dirichlet(alpha) || Dirichlet(1)) for two or more contexts; that KL
    is identically zero for a single context, so squared evidence stands in.
    """
    k = alpha.shape[1]
    if k == 1:
        return alpha - 1.0
    s = alpha.sum(axis=1, keepdims=True)
    return (alpha - 1.0) * polygamma(1, alpha) - (s - k) * polygamma(1, s)


def evidence_target(n_classes: int, confidence: float) -> float:
    """True-class evidence at which ``1 - K/sum(alpha)`` reaches the given
    confidence, assuming no off-class evidence."""
    return n_classes * confidence / (1.0 - confidence)


def evidence_floor_dlogits(logits: np.ndarray, labels: np.ndarray, floor: float) -> np.ndarray:
    """Hinge pulling each sample's true-class logit up toward a small floor.

    The Bayes-risk gradient vanishes wherever the rectified evidence head
    goes negative, and with several classes the off-label down-pressure
    otherwise sinks every logit until training collapses to uniform
    evidence. The hinge operates in logit space, so it revives dead
    true-class outputs, and it is inert above the floor.
    """
    n = logits.shape[0]
    grad = np.zeros_like(logits)
    rows = np.arange(n)
    true_logits = logits[rows, labels]
    grad[rows, labels] = -2.0 * np.maximum(floor - true_logits, 0.0)
    return grad


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    anneal_fraction: float = 0.5  # anneal ramps 0 -> 1 over this share of epochs
    # Evidence suppression on points sampled off the data manifold; without
    # it a rectifier net extrapolates evidence and the confidence gate never
    # falls back to the default context.
    vacuity_weight: float = 1.0
    vacuity_samples: int = 64
    vacuity_margin: float = 0.05
    # Small true-class logit floor that keeps the rectified evidence head
    # alive during training (see evidence_floor_dlogits).
    revival_floor: float = 3.0
    # After training, the output layer is scaled so this quantile of the
    # training samples reaches this confidence; scaling preserves argmax
    # and leaves zero-evidence inputs untouched.
    calibrate_confidence: float = 0.9
    calibrate_quantile: float = 0.25


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int, loss: float):
        super().__init__(message)
        self.epoch = epoch
        self.loss = loss


def train_evidential_net(
    X: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    config: ClassifierConfig,
    seed: int,
    feature_hash: str = "",
    feature_box: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[EvidentialNet, float]:
    """Adam mini-batch training; deterministic for a fixed seed. Returns the
    net and its final training accuracy.

    ``feature_box`` bounds the vacuity sampling (default: training-data box
    expanded by the configured margin).
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    sizes = (X.shape[1], *config.hidden, n_classes)
    net = init_net(sizes, seed, feature_hash)
    rng = np.random.Generator(np.random.PCG64(seed + 1))

    if feature_box is None:
        lo_box = X.min(axis=0) - config.vacuity_margin
        hi_box = X.max(axis=0) + config.vacuity_margin
    else:
        lo_box, hi_box = (np.asarray(b, dtype=np.float64) for b in feature_box)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m_w = [np.zeros_like(W) for W in net.weights]
    v_w = [np.zeros_like(W) for W in net.weights]
    m_b = [np.zeros_like(b) for b in net.biases]
    v_b = [np.zeros_like(b) for b in net.biases]
    step = 0
    ramp_epochs = max(1, int(config.epochs * config.anneal_fraction))
    for epoch in range(config.epochs):
        anneal = min(1.0, epoch / ramp_epochs)
        lr = config.learning_rate * 0.5 * (1 + math.cos(math.pi * epoch / config.epochs))
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = order[lo : lo + config.batch_size]
            acts, pre, logits, alpha = _forward_trace(net, X[batch])
            loss, dalpha = edl_loss_alpha(alpha, labels[batch], anneal)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at epoch {epoch}", epoch, loss)
            dlogits = dalpha * (logits > 0.0)
            if config.revival_floor > 0:
                dlogits = dlogits + evidence_floor_dlogits(
                    logits, labels[batch], config.revival_floor
                ) / len(batch)
            dWs, dbs = _backprop_from_dlogits(net, acts, pre, dlogits)

            if config.vacuity_weight > 0 and config.vacuity_samples > 0:
                V = lo_box + rng.uniform(0.0, 1.0, (config.vacuity_samples, X.shape[1])) * (hi_box - lo_box)
                acts_v, pre_v, logits_v, alpha_v = _forward_trace(net, V)
                scale = config.vacuity_weight * anneal / config.vacuity_samples
                dWs_v, dbs_v = _backprop_from_dlogits(
                    net, acts_v, pre_v, scale * vacuity_dalpha(alpha_v) * (logits_v > 0.0)
                )
                dWs = [a + b for a, b in zip(dWs, dWs_v)]
                dbs = [a + b for a, b in zip(dbs, dbs_v)]

            step += 1
            for i in range(len(net.weights)):
                for grad, store_m, store_v, target in (
                    (dWs[i], m_w, v_w, net.weights),
                    (dbs[i], m_b, v_b, net.biases),
                ):
                    store_m[i] = beta1 * store_m[i] + (1 - beta1) * grad
                    store_v[i] = beta2 * store_v[i] + (1 - beta2) * grad * grad
                    m_hat = store_m[i] / (1 - beta1**step)
                    v_hat = store_v[i] / (1 - beta2**step)
                    target[i] = target[i] - lr * m_hat / (np.sqrt(v_hat) + eps)
    if config.calibrate_confidence > 0:
        _calibrate_evidence_scale(
            net, X, n_classes, config.calibrate_confidence, config.calibrate_quantile
        )
    predictions = net.forward(X).argmax(axis=1)
    accuracy = float((predictions == labels).mean())
    return net, accuracy


def _calibrate_evidence_scale(
    net: EvidentialNet, X: np.ndarray, n_classes: int, confidence: float, quantile: float
) -> None:
    """Scale the evidence head so the given quantile of training samples
    clears the target confidence. relu(g * z) == g * relu(z) for g > 0, so
    evidence scales exactly: argmax and zero-evidence inputs are unchanged."""
    evidence = net.forward(X).sum(axis=1) - n_classes
    anchor = float(np.quantile(evidence, quantile))
    if anchor <= 1e-9:
        return
    target = evidence_target(n_classes, confidence)
    gain = target / anchor
    if gain > 1.0:
        net.weights[-1] = net.weights[-1] * gain
        net.biases[-1] = net.biases[-1] * gain


class EvidentialContextClassifier(BaseEstimator, ClassifierMixin):
    """Scikit-learn style wrapper: ``fit(X, y)`` trains the evidential net,
    ``predict`` returns labels, ``predict_alpha`` / ``confidence`` expose the
    Dirichlet view."""

    def __init__(
        self,
        hidden=(64, 64),
        epochs=200,
        batch_size=64,
        learning_rate=1e-3,
        anneal_fraction=0.5,
        vacuity_weight=1.0,
        seed=0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.anneal_fraction = anneal_fraction
        self.vacuity_weight = vacuity_weight
        self.seed = seed

    def fit(self, X, y, feature_box=None):
        X, y = check_X_y(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        config = ClassifierConfig(
            hidden=tuple(self.hidden),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            anneal_fraction=self.anneal_fraction,
            vacuity_weight=self.vacuity_weight,
        )
        self.net_, self.training_accuracy_ = train_evidential_net(
            X, encoded, len(self.classes_), config, self.seed, feature_box=feature_box
        )
        return self

    def predict_alpha(self, X):
        X = check_array(X)
        return self.net_.forward(X)

    def predict(self, X):
        alpha = self.predict_alpha(X)
        return self.classes_[alpha.argmax(axis=1)]

    def predict_proba(self, X):
        alpha = self.predict_alpha(X)
        return alpha / alpha.sum(axis=1, keepdims=True)

    def confidence(self, X):
        alpha = self.predict_alpha(X)
        return 1.0 - alpha.shape[1] / alpha.sum(axis=1)


# --------------------------------------------------------------------------
# Gate and mode filter
# --------------------------------------------------------------------------


def confidence_gate(prediction: ContextPrediction, epsilon_u: float = DEFAULT_EPSILON_U) -> int:
    """The predicted context when confident enough, else the default 0."""
    return prediction.context if prediction.confidence >= epsilon_u else 0


def mode_filter(history: Sequence[int]) -> int:
    """Most frequent context in the window; ties prefer the default 0, then
    the smaller id."""
    if not history:
        raise ValueError("mode filter needs at least one gated output")
    counts = Counter(history)
    best_count = max(counts.values())
    candidates = sorted(c for c, n in counts.items() if n == best_count)
    if 0 in candidates:
        return 0
    return candidates[0]


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

NET_FORMAT_VERSION = 1


def net_to_dict(net: EvidentialNet) -> dict:
    return {
        "format": "evidential-net",
        "version": NET_FORMAT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "feature_hash": net.feature_hash,
    }


def net_from_dict(data: dict, expected_feature_hash: str | None = None) -> EvidentialNet:
    if data.get("format") != "evidential-net" or data.get("version") != NET_FORMAT_VERSION:
        raise ValueError("not a recognized classifier blob")
    if expected_feature_hash is not None and data.get("feature_hash") != expected_feature_hash:
        raise FeatureMismatchError(
            f"classifier was trained with feature config {data.get('feature_hash')!r}, "
            f"expected {expected_feature_hash!r}"
        )
    return EvidentialNet(
        layer_sizes=tuple(data["layer_sizes"]),
        weights=[np.array(W, dtype=np.float64) for W in data["weights"]],
        biases=[np.array(b, dtype=np.float64) for b in data["biases"]],
        feature_hash=data.get("feature_hash", ""),
    )
