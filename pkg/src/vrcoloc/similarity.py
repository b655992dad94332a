"""Similarity between relationship embeddings.

The relation network scores a pair of embeddings as ``w . K + b`` with the
gated combination::

    K = tanh(W1 [f_i; f_j] + b1) * sigmoid(W2 [f_i; f_j] + b2) + (f_i + f_j) / 2

The pairwise labeling cost is the negated score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._pykernels import sigmoid
from .errors import ValidationError

__all__ = [
    "RelationNetParams", "init_relation_net", "gated_combine", "relation_score",
    "relation_forward", "relation_backward", "cosine_score", "pairwise_cost",
    "RelationScorer", "CosineScorer", "make_scorer", "grad_check",
    "embedder_grad_check",
]

_NAMES = ("rel.W1", "rel.W2", "rel.b1", "rel.b2", "rel.w", "rel.b")


@dataclass
class RelationNetParams:
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    w: np.ndarray
    b: float

    @property
    def d_r(self):
        return self.w.shape[0]

    def tensors(self):
        return {"rel.W1": self.W1, "rel.W2": self.W2, "rel.b1": self.b1,
                "rel.b2": self.b2, "rel.w": self.w, "rel.b": np.asarray(self.b, dtype=np.float64)}

    @classmethod
    def from_tensors(cls, t):
        p = cls(*(np.asarray(t[n], dtype=np.float64) for n in _NAMES[:5]),
                float(np.asarray(t["rel.b"]).reshape(())))
        p.validate()
        return p

    def validate(self):
        d = self.d_r
        if self.w.shape != (d,) or self.b1.shape != (d,) or self.b2.shape != (d,):
            raise ValidationError("relation-net vectors must have d_r entries")
        if self.W1.shape != (d, 2 * d) or self.W2.shape != (d, 2 * d):
            raise ValidationError(f"relation-net matrices must be {d} x {2 * d}")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"{name} has non-finite entries")


def init_relation_net(d_r, seed=0):
    """Uniform fan-in init; all biases zero."""
    rng = np.random.default_rng([seed, 0x2E1])
    lim = 1.0 / np.sqrt(2 * d_r)
    lim_w = 1.0 / np.sqrt(d_r)
    return RelationNetParams(
        rng.uniform(-lim, lim, size=(d_r, 2 * d_r)),
        rng.uniform(-lim, lim, size=(d_r, 2 * d_r)),
        np.zeros(d_r), np.zeros(d_r),
        rng.uniform(-lim_w, lim_w, size=d_r), 0.0)


def _check_dims(params, f_i, f_j):
    if f_i.shape[-1] != params.d_r or f_j.shape[-1] != params.d_r:
        raise ValidationError(
            f"embedding dims {f_i.shape[-1]}/{f_j.shape[-1]} do not match d_r={params.d_r}")


def relation_forward(params: RelationNetParams, f_i, f_j):
    """Batched forward pass. Returns ``(R, cache)``; inputs may be 1-d or 2-d."""
    f_i = np.atleast_2d(np.asarray(f_i, dtype=np.float64))
    f_j = np.atleast_2d(np.asarray(f_j, dtype=np.float64))
    _check_dims(params, f_i, f_j)
    x = np.concatenate([f_i, f_j], axis=1)
    t = np.tanh(x @ params.W1.T + params.b1)
    s = sigmoid(x @ params.W2.T + params.b2)
    K = t * s + 0.5 * (f_i + f_j)
    R = K @ params.w + params.b
    return R, (x, t, s, K)


def gated_combine(params: RelationNetParams, f_i, f_j):
    K = relation_forward(params, f_i, f_j)[1][3]
    return K[0] if np.ndim(f_i) == 1 else K


def relation_score(params: RelationNetParams, f_i, f_j):
    R = relation_forward(params, f_i, f_j)[0]
    return float(R[0]) if np.ndim(f_i) == 1 else R


def relation_backward(params: RelationNetParams, f_i, f_j, upstream):
    """Gradients of ``sum(upstream * R)`` w.r.t. every parameter and both inputs.

    Returns a dict keyed by the tensor names of :meth:`RelationNetParams.tensors`
    plus ``"f_i"`` and ``"f_j"``.
    """
    single = np.ndim(f_i) == 1
    _, (x, t, s, K) = relation_forward(params, f_i, f_j)
    g = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if g.size == 1 and K.shape[0] != 1:
        g = np.full(K.shape[0], g[0])
    d = params.d_r
    dK = g[:, None] * params.w[None, :]
    da1 = dK * s * (1.0 - t * t)
    da2 = dK * t * s * (1.0 - s)
    dx = da1 @ params.W1 + da2 @ params.W2
    grads = {
        "rel.W1": da1.T @ x,
        "rel.W2": da2.T @ x,
        "rel.b1": da1.sum(axis=0),
        "rel.b2": da2.sum(axis=0),
        "rel.w": K.T @ g,
        "rel.b": np.asarray(g.sum()),
        "f_i": dx[:, :d] + 0.5 * dK,
        "f_j": dx[:, d:] + 0.5 * dK,
    }
    if single:
        grads["f_i"] = grads["f_i"][0]
        grads["f_j"] = grads["f_j"][0]
    return grads


def _unit_rows(F):
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    norms = np.linalg.norm(F, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    U = F / safe[:, None]
    U[norms < 1e-12] = 0.0
    return U


def cosine_score(f_i, f_j):
    """Cosine similarity; 0 when either vector has norm below 1e-12."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    ni, nj = np.linalg.norm(f_i), np.linalg.norm(f_j)
    if ni < 1e-12 or nj < 1e-12:
        return 0.0
    return float(np.clip(f_i @ f_j / (ni * nj), -1.0, 1.0))


class RelationScorer:
    """Relation-network similarity, optionally symmetrized.

    With ``symmetric=True`` the score is ``(R(f_i, f_j) + R(f_j, f_i)) / 2``.
    Scoring goes through per-image projections (:meth:`prepare`), so any
    entry of a score block is bit-identical however the block is sliced.
    """

    def __init__(self, params: RelationNetParams, symmetric=True, backend=None):
        self.params = params
        self.symmetric = symmetric
        self.backend = backend
        d = params.d_r
        self._W1a, self._W1b = params.W1[:, :d], params.W1[:, d:]
        self._W2a, self._W2b = params.W2[:, :d], params.W2[:, d:]

    @property
    def name(self):
        return "relnet-sym" if self.symmetric else "relnet-raw"

    def score(self, f_i, f_j):
        r = relation_score(self.params, f_i, f_j)
        if self.symmetric:
            r = 0.5 * (r + relation_score(self.params, f_j, f_i))
        return r

    def prepare(self, F):
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        if F.shape[1] != self.params.d_r:
            raise ValidationError(f"embedding dim {F.shape[1]} != d_r={self.params.d_r}")
        p = self.params
        return (np.ascontiguousarray(F @ self._W1a.T + p.b1),
                np.ascontiguousarray(F @ self._W2a.T + p.b2),
                np.ascontiguousarray(F @ self._W1b.T),
                np.ascontiguousarray(F @ self._W2b.T),
                0.5 * (F @ p.w))

    def _raw(self, pu, ru, pv, rv):
        G = kernels.gated_sums(pu[0][ru], pv[2][rv], pu[1][ru], pv[3][rv],
                               self.params.w, backend=self.backend)
        return G + pu[4][ru][:, None] + pv[4][rv][None, :] + self.params.b

    def block(self, pu, ru, pv, rv):
        """Scores between rows ``ru`` of prepared ``pu`` and rows ``rv`` of ``pv``."""
        M = self._raw(pu, ru, pv, rv)
        if self.symmetric:
            M = 0.5 * (M + self._raw(pv, rv, pu, ru).T)
        return M

    def matrix(self, A, B):
        """Scores between every row of ``A`` and every row of ``B``."""
        full = slice(None)
        return self.block(self.prepare(A), full, self.prepare(B), full)


# Rows per chunk for the elementwise cosine products.
_COS_CHUNK = 1 << 18


class CosineScorer:
    name = "cosine"
    symmetric = True

    def score(self, f_i, f_j):
        return cosine_score(f_i, f_j)

    def prepare(self, F):
        return _unit_rows(F)

    def block(self, pu, ru, pv, rv):
        U, V = pu[ru], pv[rv]
        out = np.empty((U.shape[0], V.shape[0]))
        step = max(1, _COS_CHUNK // max(1, V.size))
        for a in range(0, U.shape[0], step):
            # elementwise product + sum keeps each entry independent of the block shape
            out[a:a + step] = (U[a:a + step, None, :] * V[None, :, :]).sum(axis=2)
        return np.clip(out, -1.0, 1.0)

    def matrix(self, A, B):
        full = slice(None)
        return self.block(self.prepare(A), full, self.prepare(B), full)


class ConstantScorer:
    """Scores every pair with the same value (test and tie-break fixture)."""
    symmetric = True

    def __init__(self, value=0.0):
        self.value = float(value)
        self.name = f"constant({self.value})"

    def score(self, f_i, f_j):
        return self.value

    def prepare(self, F):
        return np.atleast_2d(F)

    def block(self, pu, ru, pv, rv):
        return np.full((pu[ru].shape[0], pv[rv].shape[0]), self.value)

    def matrix(self, A, B):
        return np.full((np.atleast_2d(A).shape[0], np.atleast_2d(B).shape[0]), self.value)


def make_scorer(kind, params: RelationNetParams | None = None, backend=None):
    if kind == "relnet-sym":
        return RelationScorer(params, symmetric=True, backend=backend)
    if kind == "relnet-raw":
        return RelationScorer(params, symmetric=False, backend=backend)
    if kind == "cosine":
        return CosineScorer()
    raise ValueError(f"unknown scorer {kind!r}")


def pairwise_cost(scorer, f_i, f_j):
    return -scorer.score(f_i, f_j)


# --- gradient checking -------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-6, scale_floor=1e-3):
    """Max elementwise ``|a - n| / max(|a|, |n|, tau)``.

    ``tau = max(floor, scale_floor * max|a|)``: entries far below the group's
    scale sit under the central-difference round-off (~1e-10 absolute) and
    are compared against that scale instead of their own magnitude.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    tau = max(floor, scale_floor * float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), tau)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(fn, x, h=1e-5):
    """Central differences of scalar ``fn`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn()
        flat[k] = orig - h
        down = fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return g


def grad_check(seed, d_r=8, n_pairs=3, h=1e-5, backward=None):
    """Compare :func:`relation_backward` with central differences.

    Returns ``{group: max relative error}`` for every relation-net tensor and
    both inputs. ``backward`` substitutes another gradient routine.
    """
    backward = backward or relation_backward
    rng = np.random.default_rng([seed, d_r, 0x6C])
    scale = 1.0 / np.sqrt(2 * d_r)
    params = RelationNetParams(
        rng.normal(0, scale, (d_r, 2 * d_r)), rng.normal(0, scale, (d_r, 2 * d_r)),
        rng.normal(0, 0.5, d_r), rng.normal(0, 0.5, d_r),
        rng.normal(0, 1.0, d_r), float(rng.normal()))
    f_i = rng.normal(0, 1.0, (n_pairs, d_r))
    f_j = rng.normal(0, 1.0, (n_pairs, d_r))
    up = rng.normal(0, 1.0, n_pairs)
    analytic = backward(params, f_i, f_j, up)

    tensors = {k: np.array(v, dtype=np.float64) for k, v in params.tensors().items()}

    live = RelationNetParams.from_tensors(tensors)  # shares the array tensors

    def objective():
        live.b = float(tensors["rel.b"])
        return float(relation_forward(live, f_i, f_j)[0] @ up)

    report = {}
    for name in _NAMES:
        report[name] = relative_error(analytic[name], numeric_gradient(objective, tensors[name], h))
    p0 = RelationNetParams.from_tensors(tensors)
    for name, arr in (("f_i", f_i), ("f_j", f_j)):
        report[name] = relative_error(
            analytic[name],
            numeric_gradient(lambda: float(relation_forward(p0, f_i, f_j)[0] @ up), arr, h))
    return report


def embedder_grad_check(seed, d_r=8, d_x=6, n_classes=4, n=5, shared=False, h=1e-5):
    """Finite-difference check of the pretraining cross-entropy gradients."""
    from .embedder import EmbedderParams, pretrain_loss_and_grads

    rng = np.random.default_rng([seed, d_r, 0xE6])
    W_s = rng.normal(0, 0.5, (d_r, d_x))
    params = EmbedderParams(W_s, W_s if shared else rng.normal(0, 0.5, (d_r, d_x)),
                            rng.normal(0, 0.5, (n_classes, d_r)), rng.normal(0, 0.1, n_classes),
                            shared)
    X_s = rng.normal(0, 1.0, (n, d_x))
    X_o = rng.normal(0, 1.0, (n, d_x))
    labels = rng.integers(0, n_classes, n)
    _, analytic = pretrain_loss_and_grads(params, X_s, X_o, labels)
    tensors = {k: np.array(v) for k, v in params.tensors().items()}

    def objective():
        return pretrain_loss_and_grads(EmbedderParams.from_tensors(tensors, shared),
                                       X_s, X_o, labels)[0]

    return {name: relative_error(analytic[name], numeric_gradient(objective, tensors[name], h))
            for name in tensors}
