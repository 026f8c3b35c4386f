"""Evidential classifier: Dirichlet losses, gradients and training.

The classifier maps a feature vector to non-negative per-class evidence
through ``affine -> tanh -> affine -> evidence activation``. It is trained on
single observations with the expected log-likelihood under the Dirichlet
plus an annealed KL term that shrinks evidence on the wrong classes toward
the uniform Dirichlet.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import numerics as nx
from .opinion import beliefs_from_evidence, rank_classes

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_alpha(alpha):
    a = np.asarray(alpha, dtype=float)
    if a.ndim != 1 or a.size < 2:
        raise ValueError(f"alpha must be a 1-D vector with K >= 2, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 1.0):
        raise ValueError("alpha must be finite and >= 1")
    return a


def _check_onehot(y, k):
    y = np.asarray(y, dtype=float)
    if y.shape != (k,) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"label must be a one-hot vector of length {k}")
    return y


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def edl_loss(alpha, y) -> float:
    """sum_i y_i (log S - log alpha_i) for a one-hot ``y``."""
    a = _check_alpha(alpha)
    y = _check_onehot(y, a.size)
    return float(y @ (math.log(a.sum()) - np.log(a)))


def kl_regularizer(alpha, y) -> float:
    """KL(Dir(alpha_tilde) || Dir(1, ..., 1)), true-class alpha replaced by 1."""
    a = _check_alpha(alpha)
    y = _check_onehot(y, a.size)
    return float(_kl_uniform(y + (1.0 - y) * a))


def total_loss(alpha, y, lambda_kl: float) -> float:
    if not 0.0 <= lambda_kl <= 1.0:
        raise ValueError(f"lambda_kl must lie in [0, 1], got {lambda_kl}")
    base = edl_loss(alpha, y)
    if lambda_kl == 0.0:
        return base
    return base + lambda_kl * kl_regularizer(alpha, y)


def anneal_lambda(epoch: int, horizon: int) -> float:
    if epoch < 0 or horizon < 1:
        raise ValueError("need epoch >= 0 and horizon >= 1")
    return min(1.0, epoch / horizon)


def _kl_uniform(at):
    """Batched KL from Dir(at) to the uniform Dirichlet; ``at`` is (..., K)."""
    k = at.shape[-1]
    s = at.sum(axis=-1)
    return (
        nx.lgamma(s)
        - math.lgamma(k)
        - nx.lgamma(at).sum(axis=-1)
        + ((at - 1.0) * (nx.digamma(at) - np.asarray(nx.digamma(s))[..., None])).sum(axis=-1)
    )


def loss_terms(alpha, labels, lambda_kl):
    """Per-sample total loss and its gradient w.r.t. alpha.

    ``alpha`` is (N, K), ``labels`` integer (N,). Returns (loss (N,), dL/dalpha (N, K)).
    """
    a = np.asarray(alpha, dtype=float)
    y = one_hot(labels, a.shape[1])
    s = a.sum(axis=1)
    a_true = (a * y).sum(axis=1)
    loss = np.log(s) - np.log(a_true)
    grad = 1.0 / s[:, None] - y / a_true[:, None]
    if lambda_kl > 0:
        at = y + (1.0 - y) * a
        st = at.sum(axis=1)
        loss = loss + lambda_kl * _kl_uniform(at)
        k = a.shape[1]
        dkl = (at - 1.0) * nx.trigamma(at) - ((st - k) * nx.trigamma(st))[:, None]
        grad = grad + lambda_kl * dkl * (1.0 - y)
    return loss, grad


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.9
    clip_norm: float = 5.0
    anneal_epochs: int = 10
    hidden: int = 64
    activation: str = "exp"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")
        if self.anneal_epochs < 1:
            raise ValueError("anneal_epochs must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    lambda_kl: float
    train_acc: float
    val_acc: float = float("nan")
    mean_u_id: float = float("nan")
    mean_u_ood: float = float("nan")


METRIC_FIELDS = ["epoch", "loss", "lambda_kl", "train_acc", "val_acc", "mean_u_id", "mean_u_ood"]


class EvidentialClassifier(ClassifierMixin, BaseEstimator):
    """Two-layer evidential classifier with a Dirichlet output.

    Parameters
    ----------
    n_classes : int or None
        Size of the label frame. If None it is inferred from ``y`` at fit
        time; labels must then be ``0..K-1``.
    hidden : int
        Width of the tanh hidden layer.
    activation : {"exp", "softplus", "relu", "sigmoid"}
        Non-negative map from logits to evidence.
    epochs, batch_size, lr, momentum, clip_norm, anneal_epochs
        Gradient descent with momentum, global-norm clipping, and a linear
        KL ramp reaching full weight after ``anneal_epochs`` epochs.
    random_state : int
        Seed for initialisation and per-epoch shuffling.
    """

    def __init__(self, n_classes=None, hidden=64, activation="exp", epochs=30, batch_size=64,
                 lr=1e-2, momentum=0.9, clip_norm=5.0, anneal_epochs=10, random_state=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.anneal_epochs = anneal_epochs
        self.random_state = random_state

    # -- construction -------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: TrainConfig, n_classes=None):
        return cls(n_classes=n_classes, hidden=cfg.hidden, activation=cfg.activation,
                   epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                   momentum=cfg.momentum, clip_norm=cfg.clip_norm,
                   anneal_epochs=cfg.anneal_epochs, random_state=cfg.seed)

    def init_params(self, n_features, n_classes):
        """Fresh parameters; exposed so gradients can be checked before fitting."""
        rng = np.random.default_rng(self.random_state)
        s1 = math.sqrt(6.0 / (n_features + self.hidden))
        s2 = math.sqrt(6.0 / (self.hidden + n_classes))
        self.params_ = {
            "W1": rng.uniform(-s1, s1, size=(self.hidden, n_features)),
            "b1": np.zeros(self.hidden),
            "W2": rng.uniform(-s2, s2, size=(n_classes, self.hidden)),
            "b2": np.zeros(n_classes),
        }
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = n_features
        return self

    # -- forward / backward -------------------------------------------------

    def _forward(self, X):
        p = self.params_
        z1 = nx.affine_forward(X, p["W1"], p["b1"])
        h = nx.activation_forward(z1, "tanh")
        z2 = nx.affine_forward(h, p["W2"], p["b2"])
        e = nx.activation_forward(z2, self.activation)
        return e, (X, z1, h, z2, e)

    def loss_and_grad(self, X, labels, lambda_kl):
        """Mean total loss over the batch and its parameter gradients."""
        e, (X, z1, h, z2, _) = self._forward(X)
        loss, dalpha = loss_terms(e + 1.0, labels, lambda_kl)
        n = X.shape[0]
        p = self.params_
        dz2 = nx.activation_backward(dalpha / n, z2, e, self.activation)
        dh, dW2, db2 = nx.affine_backward(dz2, h, p["W2"])
        dz1 = nx.activation_backward(dh, z1, h, "tanh")
        _, dW1, db1 = nx.affine_backward(dz1, X, p["W1"])
        return float(loss.mean()), {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}

    def loss(self, X, labels, lambda_kl):
        e, _ = self._forward(X)
        return float(loss_terms(e + 1.0, labels, lambda_kl)[0].mean())

    # -- sklearn surface ----------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None, X_ood=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("labels must be integers")
            y = y.astype(int)
        k = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        if k < 2:
            raise ValueError("need at least 2 classes")
        self.init_params(X.shape[1], k)
        self.history_ = []
        self.status_ = "ok"
        velocity: dict = {}
        n = X.shape[0]
        for epoch in range(self.epochs):
            lam = anneal_lambda(epoch, self.anneal_epochs)
            order = np.random.default_rng([self.random_state, epoch]).permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self.loss_and_grad(X[idx], y[idx], lam)
                if not math.isfinite(loss):
                    self.status_ = "diverged"
                    log.warning("non-finite loss at epoch %d (seed %s)", epoch, self.random_state)
                    return self
                nx.clip_grad_norm(grads, self.clip_norm)
                nx.momentum_step(self.params_, grads, velocity, self.lr, self.momentum)
                losses.append(loss * len(idx))
            m = EpochMetrics(epoch, math.fsum(losses) / n, lam, self.score(X, y))
            if X_val is not None:
                m.val_acc = self.score(X_val, y_val)
                m.mean_u_id = float(self.predict_uncertainty(X_val).mean())
            if X_ood is not None:
                m.mean_u_ood = float(self.predict_uncertainty(X_ood).mean())
            self.history_.append(m)
            log.debug("epoch %d %s", epoch, m)
        return self

    def predict_evidence(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return nx.row_blocks(lambda xb: self._forward(xb)[0], X)

    def predict_opinion(self, X):
        """Beliefs (N, K) and uncertainty (N,)."""
        return beliefs_from_evidence(self.predict_evidence(X))

    def predict_uncertainty(self, X):
        return self.predict_opinion(X)[1]

    def predict_proba(self, X):
        """Expected class probabilities alpha / S."""
        a = self.predict_evidence(X) + 1.0
        return a / a.sum(axis=1, keepdims=True)

    def predict(self, X):
        b, _ = self.predict_opinion(X)
        return self.classes_[rank_classes(b)[:, 0]]

    # -- persistence --------------------------------------------------------

    def save(self, path, meta=None):
        check_is_fitted(self, "params_")
        info = {"kind": "evidential_classifier", "estimator_params": self.get_params()}
        info.update(meta or {})
        nx.save_arrays(path, self.params_, info)

    @classmethod
    def load(cls, path):
        arrays, meta = nx.load_arrays(path)
        if meta.get("kind") != "evidential_classifier":
            raise ValueError(f"{path} is not an evidential classifier checkpoint")
        clf = cls(**meta["estimator_params"])
        clf.params_ = arrays
        k, d = arrays["W2"].shape[0], arrays["W1"].shape[1]
        clf.classes_ = np.arange(k)
        clf.n_features_in_ = d
        return clf


@dataclass
class TrainResult:
    model: EvidentialClassifier
    history: list = field(default_factory=list)
    status: str = "ok"

    @property
    def ok(self):
        return self.status == "ok"


def train_recognizer(X, y, config: TrainConfig, n_classes=None, X_val=None, y_val=None, X_ood=None):
    """Fit an :class:`EvidentialClassifier` on single observations."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set is empty")
    clf = EvidentialClassifier.from_config(config, n_classes=n_classes)
    clf.fit(X, y, X_val=X_val, y_val=y_val, X_ood=X_ood)
    return TrainResult(clf, list(clf.history_), clf.status_)


def write_metrics_csv(path, history):
    from .records import write_table

    write_table(path, "recognizer-metrics", [asdict(m) for m in history])


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

def make_prototype_task(n, n_classes=8, n_features=16, noise=0.25, seed=0, prototype_seed=0):
    """Gaussian clusters around orthonormal class prototypes.

    Returns ``(X, y, prototypes)``; prototypes come from the same generator
    as the world sensor so the two share a feature geometry.
    """
    from .world import make_prototypes

    protos = make_prototypes(n_classes, n_features, prototype_seed)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n)
    X = protos[y] + noise * rng.standard_normal((n, n_features))
    return X, y, protos


def make_noise_inputs(n, n_features=16, scale=1.0, seed=0):
    """Pure-noise inputs: what the sensor emits when the target is absent."""
    return scale * np.random.default_rng(seed).standard_normal((n, n_features))
