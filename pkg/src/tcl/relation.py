"""Class-relation matrices from Wasserstein distances in the pretrained space.

``M[i, j]`` is the mixture-Wasserstein distance between the pretrained-space
memories of classes ``i`` and ``j``; ``Gamma = exp(-M / delta)`` turns it into
a similarity used to weight the contrastive denominators and the
inference-time energies.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, DuplicateClassInMatrix, NonpositiveTemperature, SpaceMismatch
from .memory import ClassGaussianMixture


def gaussian_w2(mu1, var1, mu2, var2) -> float:
    """Closed-form W2 between two diagonal Gaussians (variances, not std)."""
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    var1, var2 = np.asarray(var1, np.float64), np.asarray(var2, np.float64)
    if not (mu1.shape == mu2.shape == var1.shape == var2.shape):
        raise DimensionMismatch(f"shapes {mu1.shape}, {var1.shape} vs {mu2.shape}, {var2.shape}")
    sq = np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(var1) - np.sqrt(var2)) ** 2)
    return float(np.sqrt(sq))


def _tree_duals(basis, cost, m, n):
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nxt in adj[node]:
            if np.isnan(pot[nxt]):
                # u_i + v_j = c_ij on basic cells
                i, j = (node, nxt - m) if node < m else (nxt, node - m)
                pot[nxt] = cost[i, j] - pot[node]
                queue.append(nxt)
    return pot[:m], pot[m:]


def _tree_path(basis, m, n, start, goal):
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nxt in adj[node]:
            if nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def solve_transport(a, b, cost, max_iter: int = 10_000):
    """Exact discrete optimal transport by the transportation simplex.

    North-west-corner start, u-v duals on the basis tree, Bland's rule for
    entering and leaving cells (no cycling under degeneracy). Returns
    ``(plan, total_cost)``.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    cost = np.asarray(cost, np.float64)
    m, n = len(a), len(b)
    if cost.shape != (m, n):
        raise DimensionMismatch(f"cost is {cost.shape}, marginals are {m} and {n}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be nonnegative")
    a = a / a.sum()
    b = b / b.sum()

    plan = np.zeros((m, n))
    basis = []
    ra, rb = a.copy(), b.copy()
    i = j = 0
    while True:
        x = min(ra[i], rb[j])
        plan[i, j] = x
        basis.append((i, j))
        ra[i] -= x
        rb[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or ra[i] <= rb[j]:
            i += 1
        else:
            j += 1

    tol = 1e-12 * max(1.0, float(np.abs(cost).max(initial=0.0)))
    for _ in range(max_iter):
        u, v = _tree_duals(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        in_basis = np.zeros((m, n), bool)
        for cell in basis:
            in_basis[cell] = True
        negative = np.argwhere((reduced < -tol) & ~in_basis)
        if len(negative) == 0:
            break
        p, q = map(int, negative[0])
        # cycle: (p,q)+, then alternate along the tree path col q -> row p
        nodes = _tree_path(basis, m, n, m + q, p)
        cells = [(p, q)]
        for s, t in zip(nodes[:-1], nodes[1:]):
            cells.append((t, s - m) if s >= m else (s, t - m))
        minus = cells[1::2]
        theta = min(plan[c] for c in minus)
        leaving = min(c for c in minus if plan[c] == theta)
        for k, c in enumerate(cells):
            plan[c] += theta if k % 2 == 0 else -theta
        plan[leaving] = 0.0
        basis[basis.index(leaving)] = (p, q)
    else:
        raise RuntimeError("transportation simplex did not converge")

    plan = np.maximum(plan, 0.0)
    return plan, float(np.sum(plan * cost))


def component_costs(gmm_a: ClassGaussianMixture, gmm_b: ClassGaussianMixture) -> np.ndarray:
    """Squared Gaussian W2 between every pair of components."""
    return np.array([[gaussian_w2(ma, va, mb, vb) ** 2
                      for mb, vb in zip(gmm_b.means, gmm_b.variances)]
                     for ma, va in zip(gmm_a.means, gmm_a.variances)])


def mixture_w2(gmm_a: ClassGaussianMixture, gmm_b: ClassGaussianMixture,
               space: str | None = "pretrained") -> float:
    """Mixture-Wasserstein distance: OT over components with W2^2 ground cost."""
    if gmm_a.dim != gmm_b.dim:
        raise DimensionMismatch(f"{gmm_a.dim} vs {gmm_b.dim}")
    if gmm_a.space_tag != gmm_b.space_tag or (space is not None and gmm_a.space_tag != space):
        raise SpaceMismatch(f"{gmm_a.space_tag} vs {gmm_b.space_tag}")
    _, total = solve_transport(gmm_a.weights, gmm_b.weights, component_costs(gmm_a, gmm_b))
    return float(np.sqrt(max(total, 0.0)))


def weight_matrix(M, delta: float) -> np.ndarray:
    if not delta > 0:
        raise NonpositiveTemperature(f"delta must be positive, got {delta}")
    return np.exp(-np.asarray(M, np.float64) / delta)


def median_temperature(M) -> float:
    """Median of the off-diagonal entries; 1.0 when there are none (or all zero)."""
    M = np.asarray(M)
    if M.shape[0] < 2:
        return 1.0
    off = M[np.triu_indices(M.shape[0], k=1)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


@dataclass(frozen=True, eq=False)
class RelationMatrices:
    """Immutable snapshot of M and Gamma over classes in registry order."""

    class_ids: tuple[int, ...] = ()
    M: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    delta_override: float | None = None
    gmms: tuple[ClassGaussianMixture, ...] = ()

    def __post_init__(self):
        M = np.array(self.M, dtype=np.float64).reshape(len(self.class_ids), len(self.class_ids))
        M.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.delta_override is not None and not self.delta_override > 0:
            raise NonpositiveTemperature(f"delta must be positive, got {self.delta_override}")

    @property
    def size(self) -> int:
        return len(self.class_ids)

    @property
    def delta(self) -> float:
        return self.delta_override if self.delta_override is not None else median_temperature(self.M)

    @property
    def gamma(self) -> np.ndarray:
        return weight_matrix(self.M, self.delta)

    def index(self, class_id) -> int:
        return self.class_ids.index(int(class_id))

    def gamma_for(self, class_ids) -> np.ndarray:
        """Gamma restricted/reordered to ``class_ids`` (rows and columns)."""
        idx = [self.index(c) for c in class_ids]
        return self.gamma[np.ix_(idx, idx)]

    def with_delta(self, delta: float | None) -> RelationMatrices:
        return RelationMatrices(self.class_ids, self.M, delta, self.gmms)

    def to_dict(self) -> dict:
        return {"class_order": list(self.class_ids), "delta": self.delta,
                "delta_override": self.delta_override,
                "M": self.M.ravel().tolist(), "Gamma": self.gamma.ravel().tolist()}

    @classmethod
    def from_dict(cls, doc: dict, gmms=()) -> RelationMatrices:
        return cls(tuple(doc["class_order"]), np.array(doc["M"], np.float64), doc.get("delta_override"),
                   tuple(gmms))


def expand_matrix(R: RelationMatrices, new_gmms) -> RelationMatrices:
    """Append classes to ``R``; existing entries of M are left untouched."""
    new_gmms = list(new_gmms)
    ids = list(R.class_ids)
    for g in new_gmms:
        if int(g.class_id) in ids:
            raise DuplicateClassInMatrix(f"class {g.class_id} is already in the matrix")
        if g.space_tag != "pretrained":
            raise SpaceMismatch(f"relation matrices need pretrained-space memories, got {g.space_tag}")
        ids.append(int(g.class_id))
    if len(R.gmms) != R.size:
        raise ValueError("R does not carry the memories of its classes; rebuild it with gmms=")
    gmms = list(R.gmms) + new_gmms
    m_old, m = R.size, len(gmms)
    M = np.zeros((m, m))
    M[:m_old, :m_old] = R.M
    for j in range(m_old, m):
        for i in range(j):
            # always (earlier, later) so incremental and one-shot builds agree bitwise
            M[i, j] = M[j, i] = mixture_w2(gmms[i], gmms[j])
    return RelationMatrices(tuple(ids), M, R.delta_override, tuple(gmms))


def save_relation(R: RelationMatrices, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(R.to_dict()))


def load_relation(path, gmms=()) -> RelationMatrices:
    return RelationMatrices.from_dict(json.loads(Path(path).read_text()), gmms)
