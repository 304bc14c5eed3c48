"""Per-class diagonal Gaussian-mixture memories of feature vectors.

Old classes are never stored as data: at the end of a task each class is
summarised by a K-component diagonal GMM, and later tasks replay pseudo
features drawn from it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateFeaturesWarning, TooFewSamples

EPS_COV = 1e-6
SPACES = ("pretrained", "adapted")
REAL, PSEUDO = 0, 1


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.maximum(norm, 1e-12)


@dataclass(frozen=True, eq=False)
class ClassGaussianMixture:
    class_id: int
    space_tag: str
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, d)
    variances: np.ndarray    # (K, d) diagonal covariances
    log_likelihood: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.space_tag not in SPACES:
            raise ValueError(f"space_tag must be one of {SPACES}, got {self.space_tag!r}")
        for name in ("weights", "means", "variances"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.means.ndim != 2 or self.variances.shape != self.means.shape:
            raise ValueError("means and variances must both be (K, d)")
        if self.weights.shape != (self.means.shape[0],):
            raise ValueError("one weight per component is required")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(self.variances < EPS_COV * (1 - 1e-12)):
            raise ValueError(f"variances must be >= {EPS_COV}")
        ll = np.asarray(self.log_likelihood, dtype=np.float64)
        if ll.size > 1 and np.any(np.diff(ll) < -1e-9 * np.abs(ll[:-1])):
            raise AssertionError("EM log-likelihood decreased between iterations")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, x) -> np.ndarray:
        return _log_mixture_density(np.atleast_2d(np.asarray(x, np.float64)), self.weights,
                                    self.means, self.variances)

    def to_dict(self) -> dict:
        return {
            "class_id": int(self.class_id),
            "space_tag": self.space_tag,
            "K": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ClassGaussianMixture:
        gmm = cls(int(doc["class_id"]), doc["space_tag"], doc["weights"], doc["means"],
                  doc["covariances"])
        if gmm.n_components != int(doc["K"]):
            raise ValueError("K does not match the stored components")
        return gmm

    def __eq__(self, other):
        if not isinstance(other, ClassGaussianMixture):
            return NotImplemented
        return (self.class_id == other.class_id and self.space_tag == other.space_tag
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.variances, other.variances))


@dataclass(frozen=True, eq=False)
class FeatureBatch:
    features: np.ndarray   # (n, d)
    labels: np.ndarray     # (n,)
    origin: np.ndarray     # (n,) REAL or PSEUDO
    space_tag: str = "adapted"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError("features must be a non-empty (n, d) matrix")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.int8))
        if self.labels.shape != (len(f),) or self.origin.shape != (len(f),):
            raise ValueError("labels and origin need one entry per row")
        if self.space_tag == "adapted":
            norms = np.linalg.norm(f, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("adapted-space rows must be unit norm")

    def __len__(self):
        return len(self.features)

    @classmethod
    def concat(cls, batches) -> FeatureBatch:
        batches = list(batches)
        return cls(np.concatenate([b.features for b in batches]),
                   np.concatenate([b.labels for b in batches]),
                   np.concatenate([b.origin for b in batches]),
                   batches[0].space_tag)


def _log_gauss_diag(x, means, variances):
    """(n, K) log N(x | mean_k, diag(var_k))."""
    d = x.shape[1]
    quad = np.stack([(((x - m) ** 2) / v).sum(axis=1) for m, v in zip(means, variances)], axis=1)
    log_det = np.sum(np.log(variances), axis=1)
    return -0.5 * (d * np.log(2 * np.pi) + log_det + quad)


def _log_mixture_density(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    joint = _log_gauss_diag(x, means, variances) + log_w
    top = joint.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(joint - top).sum(axis=1, keepdims=True)))[:, 0]


def kmeans_plusplus(x, k, rng) -> np.ndarray:
    """Indices of k seed rows chosen by D^2 sampling."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((x - x[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a centre
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(chosen)


def fit_class_gmm(features, K: int = 1, seed: int = 0, *, class_id: int = -1,
                  space_tag: str = "pretrained", max_iter: int = 200, tol: float = 1e-8,
                  eps_cov: float = EPS_COV) -> ClassGaussianMixture:
    """Fit a diagonal-covariance GMM by EM from a k-means++ start.

    Variances are floored at ``eps_cov`` inside every M-step, which keeps
    each step a constrained maximiser, so the recorded per-iteration data
    log-likelihood (``gmm.log_likelihood``) never decreases.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an (n, d) matrix")
    n, d = x.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise TooFewSamples(f"{n} samples cannot support {K} components")
    if space_tag == "adapted":
        x = l2_normalize(x)
    if np.all(x.var(axis=0) == 0):
        warnings.warn("features have zero variance in every dimension; variances floored",
                      DegenerateFeaturesWarning, stacklevel=2)

    if K == 1:
        mean = x.mean(axis=0, keepdims=True)
        var = np.maximum(x.var(axis=0, keepdims=True), eps_cov)
        ll = float(_log_mixture_density(x, np.ones(1), mean, var).sum())
        return ClassGaussianMixture(class_id, space_tag, np.ones(1), mean, var, (ll,))

    rng = np.random.default_rng(seed)
    means = x[kmeans_plusplus(x, K, rng)].copy()
    # hard assignment to the seeds sets weights and means; shared global variance
    assign = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    weights, means, _ = _m_step(x, np.eye(K)[assign], means, np.ones((K, d)), eps_cov)
    variances = np.tile(np.maximum(x.var(axis=0), eps_cov), (K, 1))

    history: list[float] = []
    for _ in range(max_iter):
        joint = _log_gauss_diag(x, means, variances)
        with np.errstate(divide="ignore"):
            joint = joint + np.log(weights)
        top = joint.max(axis=1, keepdims=True)
        log_norm = top + np.log(np.exp(joint - top).sum(axis=1, keepdims=True))
        history.append(float(log_norm.sum()))
        if len(history) > 1 and history[-1] - history[-2] <= tol * abs(history[-2]):
            break
        weights, means, variances = _m_step(x, np.exp(joint - log_norm), means, variances, eps_cov)
    else:
        history.append(float(_log_mixture_density(x, weights, means, variances).sum()))

    return ClassGaussianMixture(class_id, space_tag, weights / weights.sum(), means, variances,
                                tuple(history))


def _m_step(x, resp, prev_means, prev_vars, eps_cov):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    means = prev_means.copy()
    variances = prev_vars.copy()
    live = nk > 1e-12
    # components with no responsibility keep their parameters at zero weight
    means[live] = (resp[:, live].T @ x) / nk[live, None]
    sq = resp[:, live].T @ (x ** 2) / nk[live, None]
    variances[live] = np.maximum(sq - means[live] ** 2, eps_cov)
    return weights, means, variances


def sample_pseudo_features(gmm: ClassGaussianMixture, n: int, seed) -> FeatureBatch:
    """Draw ``n`` i.i.d. mixture samples; adapted-space draws are renormalised."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = gmm.means[comp] + np.sqrt(gmm.variances[comp]) * rng.standard_normal((n, gmm.dim))
    if gmm.space_tag == "adapted":
        z = l2_normalize(z)
    return FeatureBatch(z, np.full(n, gmm.class_id), np.full(n, PSEUDO), gmm.space_tag)


def class_prototypes(gmm: ClassGaussianMixture) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(gmm.means[i], gmm.variances[i]) for i in range(gmm.n_components)]


class MemoryStore:
    """Per-class GMMs for one feature space, keyed by class id."""

    def __init__(self, space_tag: str, gmms=None):
        self.space_tag = space_tag
        self._gmms: dict[int, ClassGaussianMixture] = {}
        for g in gmms or ():
            self.add(g)

    def add(self, gmm: ClassGaussianMixture):
        if gmm.space_tag != self.space_tag:
            raise ValueError(f"{gmm.space_tag} memory added to {self.space_tag} store")
        self._gmms[int(gmm.class_id)] = gmm

    def __getitem__(self, class_id) -> ClassGaussianMixture:
        return self._gmms[int(class_id)]

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self._gmms

    def __len__(self):
        return len(self._gmms)

    def class_ids(self) -> list[int]:
        return sorted(self._gmms)

    def values(self):
        return [self._gmms[c] for c in self.class_ids()]

    def subset(self, class_ids) -> MemoryStore:
        return MemoryStore(self.space_tag, [self._gmms[int(c)] for c in class_ids])


def save_memories(path, stores: dict[str, MemoryStore], task_id: int) -> None:
    """``{"task": t, "spaces": {tag: [gmm, ...]}}`` as JSON."""
    doc = {"task": int(task_id),
           "spaces": {tag: [g.to_dict() for g in store.values()] for tag, store in stores.items()}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_memories(path) -> dict[str, MemoryStore]:
    doc = json.loads(Path(path).read_text())
    return {tag: MemoryStore(tag, [ClassGaussianMixture.from_dict(g) for g in rows])
            for tag, rows in doc["spaces"].items()}
