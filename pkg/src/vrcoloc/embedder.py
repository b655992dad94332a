"""Relationship embeddings for ordered region pairs.

A region's raw feature is ``[x1, y1, x2, y2, appearance..., class_scores...]``.
The translation embedder maps a (subject, object) pair to
``W_o @ x_o - W_s @ x_s``; the concatenation baseline returns ``[x_s; x_o]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import DatasetManifest, ImageRecord, Region, label_index_arrays
from .errors import SupervisionLeakError, ValidationError
from .optim import Adam

__all__ = [
    "assemble_feature", "split_feature", "image_features", "EmbedderParams",
    "init_embedder", "embed_translation", "embed_concat", "Embedder",
    "pretrain_loss_and_grads", "pretrain_step", "predicate_classes",
    "PretrainConfig", "pretrain",
]


def assemble_feature(region: Region, d_a=None, d_c=None):
    if d_a is not None and region.appearance.size != d_a:
        raise ValidationError(f"appearance has {region.appearance.size} dims, expected {d_a}")
    if d_c is not None and region.class_scores.size != d_c:
        raise ValidationError(f"class scores have {region.class_scores.size} dims, expected {d_c}")
    return np.concatenate([region.box.as_tuple(), region.appearance, region.class_scores])


def split_feature(x, d_a, d_c):
    """Inverse of :func:`assemble_feature`: ``(box, appearance, class_scores)``."""
    x = np.asarray(x)
    if x.size != 4 + d_a + d_c:
        raise ValidationError(f"feature has {x.size} dims, expected {4 + d_a + d_c}")
    return x[:4], x[4:4 + d_a], x[4 + d_a:]


def image_features(image: ImageRecord, d_a=None, d_c=None):
    """Stack the raw features of every region of ``image`` (``p x d_x``)."""
    return np.stack([assemble_feature(r, d_a, d_c) for r in image.regions])


@dataclass
class EmbedderParams:
    W_s: np.ndarray
    W_o: np.ndarray
    W_p: np.ndarray
    c_p: np.ndarray
    shared: bool = False

    @property
    def d_r(self):
        return self.W_s.shape[0]

    @property
    def d_x(self):
        return self.W_s.shape[1]

    def tensors(self):
        out = {"embed.W_s": self.W_s, "embed.W_p": self.W_p, "embed.c_p": self.c_p}
        if not self.shared:
            out["embed.W_o"] = self.W_o
        return out

    @classmethod
    def from_tensors(cls, tensors, shared):
        W_s = np.asarray(tensors["embed.W_s"], dtype=np.float64)
        W_o = W_s if shared else np.asarray(tensors["embed.W_o"], dtype=np.float64)
        params = cls(W_s, W_o, np.asarray(tensors["embed.W_p"], dtype=np.float64),
                     np.asarray(tensors["embed.c_p"], dtype=np.float64), shared)
        params.validate()
        return params

    def validate(self):
        if self.W_s.shape != self.W_o.shape or self.W_s.ndim != 2 or self.d_r < 1:
            raise ValidationError("projection matrices must share shape d_r x d_x")
        if self.W_p.ndim != 2 or self.W_p.shape[1] != self.d_r:
            raise ValidationError("classifier head must be C_train x d_r")
        if self.c_p.shape != (self.W_p.shape[0],):
            raise ValidationError("classifier bias must have C_train entries")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise ValidationError(f"{name} has non-finite entries")


def init_embedder(d_x, d_r=64, n_classes=1, shared=False, seed=0):
    """Uniform fan-in init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``; zero bias."""
    rng = np.random.default_rng([seed, 0xE3B])
    lim = 1.0 / np.sqrt(d_x)
    W_s = rng.uniform(-lim, lim, size=(d_r, d_x))
    W_o = W_s if shared else rng.uniform(-lim, lim, size=(d_r, d_x))
    lim_p = 1.0 / np.sqrt(d_r)
    W_p = rng.uniform(-lim_p, lim_p, size=(n_classes, d_r))
    return EmbedderParams(W_s, W_o, W_p, np.zeros(n_classes), shared)


def embed_translation(params: EmbedderParams, x_s, x_o):
    """``W_o x_o - W_s x_s``; rows of 2-d inputs are embedded independently."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    if x_s.shape[-1] != params.d_x or x_o.shape[-1] != params.d_x:
        raise ValidationError(
            f"feature dims {x_s.shape[-1]}/{x_o.shape[-1]} do not match d_x={params.d_x}")
    return x_o @ params.W_o.T - x_s @ params.W_s.T


def embed_concat(x_s, x_o):
    x_s = np.asarray(x_s, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    if x_s.shape != x_o.shape:
        raise ValidationError("subject and object features differ in shape")
    return np.concatenate([x_s, x_o], axis=-1)


class Embedder:
    """Maps an image's ordered region pairs to relationship embeddings.

    ``mode`` is ``"translation"`` (needs ``params``) or ``"concat"``.
    """

    def __init__(self, mode="translation", params: EmbedderParams | None = None, d_x=None):
        if mode not in ("translation", "concat"):
            raise ValueError(f"unknown embedding mode {mode!r}")
        if mode == "translation" and params is None:
            raise ValueError("translation embedding needs parameters")
        self.mode = mode
        self.params = params
        self.d_x = params.d_x if params is not None else d_x

    @property
    def dim(self):
        return self.params.d_r if self.mode == "translation" else 2 * self.d_x

    def embed(self, x_s, x_o):
        if self.mode == "translation":
            return embed_translation(self.params, x_s, x_o)
        return embed_concat(x_s, x_o)

    def embed_indices(self, X, s_idx, o_idx):
        """Embed pairs ``(X[s_idx], X[o_idx])`` of one image's feature matrix."""
        if self.mode == "translation":
            return (X @ self.params.W_o.T)[o_idx] - (X @ self.params.W_s.T)[s_idx]
        return np.concatenate([X[s_idx], X[o_idx]], axis=1)

    def embed_labels(self, image: ImageRecord):
        """Embeddings of every label of ``image`` in label-set order."""
        s_idx, o_idx = label_index_arrays(image.num_regions)
        return self.embed_indices(image_features(image), s_idx, o_idx)


# --- predicate-classification pretraining -----------------------------------

def predicate_classes(predicate_ids, train_predicates):
    """Map predicate ids to classifier rows; any non-train id is a leak."""
    lookup = {pid: k for k, pid in enumerate(train_predicates)}
    out = []
    for pid in predicate_ids:
        if pid not in lookup:
            raise SupervisionLeakError(f"predicate {pid} is not a training predicate")
        out.append(lookup[pid])
    return np.asarray(out, dtype=np.int64)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def pretrain_loss_and_grads(params: EmbedderParams, X_s, X_o, labels):
    """Mean softmax cross-entropy of ``W_p f + c_p`` and its gradients."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = params.W_p.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise SupervisionLeakError(
            f"class index outside the {n_classes} training predicates")
    n = labels.size
    f = embed_translation(params, X_s, X_o)
    z = f @ params.W_p.T + params.c_p
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), labels].mean()

    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    df = dz @ params.W_p
    dW_o = df.T @ X_o
    dW_s = -df.T @ X_s
    grads = {"embed.W_p": dz.T @ f, "embed.c_p": dz.sum(axis=0)}
    if params.shared:
        grads["embed.W_s"] = dW_s + dW_o
    else:
        grads["embed.W_s"] = dW_s
        grads["embed.W_o"] = dW_o
    return float(loss), grads


def pretrain_step(params: EmbedderParams, optimizer: Adam, X_s, X_o, labels):
    """One optimizer update; returns ``(mean batch loss, new params)``."""
    loss, grads = pretrain_loss_and_grads(params, X_s, X_o, labels)
    new = optimizer.step(params.tensors(), grads)
    return loss, EmbedderParams.from_tensors(new, params.shared)


@dataclass
class PretrainConfig:
    d_r: int = 64
    shared: bool = False
    steps: int = 300
    lr: float = 1e-2
    batch_size: int | None = 256
    seed: int = 0


def training_annotations(manifest: DatasetManifest):
    """Matched train-predicate annotations as ``(X_s, X_o, predicate_ids)``."""
    train = set(manifest.train_predicates)
    xs, xo, pids = [], [], []
    for im in manifest.images:
        anns = [a for a in im.annotations if a.matched and a.predicate_id in train]
        if not anns:
            continue
        X = image_features(im, manifest.d_a, manifest.d_c)
        for a in anns:
            xs.append(X[a.subject_region])
            xo.append(X[a.object_region])
            pids.append(a.predicate_id)
    if not pids:
        raise ValidationError("manifest has no matched training annotations")
    return np.stack(xs), np.stack(xo), pids


def pretrain(manifest: DatasetManifest, config: PretrainConfig, log=None):
    """Train the translation embedder as a predicate classifier.

    Returns ``(params, optimizer, loss_history)``.
    """
    X_s, X_o, pids = training_annotations(manifest)
    labels = predicate_classes(pids, manifest.train_predicates)
    params = init_embedder(manifest.d_x, config.d_r, len(manifest.train_predicates),
                           config.shared, config.seed)
    opt = Adam(lr=config.lr)
    history = []
    n = labels.size
    for step in range(config.steps):
        if config.batch_size is None or config.batch_size >= n:
            idx = np.arange(n)
        else:
            rng = np.random.default_rng([config.seed, 0xBA7C, step])
            idx = np.sort(rng.choice(n, size=config.batch_size, replace=False))
        loss, params = pretrain_step(params, opt, X_s[idx], X_o[idx], labels[idx])
        history.append(loss)
        if log is not None:
            log(step, loss)
    return params, opt, history
