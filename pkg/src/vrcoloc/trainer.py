"""Episodic training of the relation network.

Every training bag is one episode. Its candidate relationships are the
ground-truth-matched region pairs of each image; every cross-image ordered
pair of candidates becomes a training pair, positive when both carry the
bag's common predicate. One optimizer step is taken per episode on the mean
logistic loss.

Two additions make the learned similarity hold up at inference time. Each
image can contribute a few unannotated region pairs as extra candidates, so
the network also sees the random-looking proposals it must reject when
searching freely. Each episode can also rotate the appearance block of the
features by a random orthogonal matrix, so the network learns to compare
relationships rather than memorize the training predicates' directions.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import records
from .datamodel import Bag, DatasetManifest, label_index_arrays
from .embedder import Embedder, EmbedderParams, image_features, init_embedder
from .errors import (EpisodeSkip, NonFiniteLossError, ParseError,
                     SupervisionLeakError, ValidationError)
from .optim import Adam
from .similarity import (RelationNetParams, init_relation_net, relation_backward,
                         relation_forward)

CHECKPOINT_SCHEMA = "vrcoloc.checkpoint"
CHECKPOINT_VERSION = 1

__all__ = [
    "EpisodePair", "Episode", "TrainConfig", "Checkpoint", "build_episode",
    "logistic_loss", "logistic_grad", "train", "save_checkpoint",
    "load_checkpoint", "initial_checkpoint",
]


@dataclass(frozen=True)
class EpisodePair:
    image_i: int
    cand_i: int
    image_j: int
    cand_j: int
    y: int


@dataclass
class Episode:
    """Candidate features and the sampled pairs of one bag."""
    X_s: np.ndarray      # subject features of all candidates
    X_o: np.ndarray      # object features of all candidates
    image_of: np.ndarray
    predicate_of: np.ndarray
    pairs: list

    @property
    def first(self):
        return np.array([p.cand_i for p in self.pairs], dtype=np.int64)

    @property
    def second(self):
        return np.array([p.cand_j for p in self.pairs], dtype=np.int64)

    @property
    def labels(self):
        return np.array([p.y for p in self.pairs], dtype=np.float64)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    episodes: int = 1000
    neg_ratio: float = 3.0
    seed: int = 0
    freeze_embedder: bool = True
    distractors: int = 8
    rotate: bool = True

    def validate(self):
        if self.lr < 0:
            raise ValidationError("learning rate must be non-negative")
        if self.neg_ratio < 1:
            raise ValidationError("negative:positive ratio must be at least 1")
        if self.episodes < 0:
            raise ValidationError("episode count must be non-negative")


def logistic_loss(score, y):
    """``log(1 + exp(-y * score))`` without overflow."""
    return np.logaddexp(0.0, -np.asarray(y, dtype=np.float64) * np.asarray(score, dtype=np.float64))


def logistic_grad(score, y):
    """Derivative of :func:`logistic_loss` with respect to ``score``."""
    y = np.asarray(y, dtype=np.float64)
    z = -y * np.asarray(score, dtype=np.float64)
    return -y * 0.5 * (1.0 + np.tanh(0.5 * z))


def build_episode(bag: Bag, manifest: DatasetManifest, neg_ratio=3.0, rng=None,
                  distractors=0):
    """Enumerate and subsample the cross-image candidate pairs of ``bag``.

    Candidates are each image's matched annotations plus, when
    ``distractors > 0``, that many region pairs per image sampled from the
    pairs carrying no annotation; distractors only ever form negatives.
    All positives are kept; negatives are subsampled without replacement to
    at most ``neg_ratio`` per positive. Raises :class:`EpisodeSkip` when an
    image has no matched annotation.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    xs, xo, image_of, pred_of = [], [], [], []
    for u, im in enumerate(manifest.bag_images(bag)):
        anns = [a for a in im.annotations if a.matched]
        if not anns:
            raise EpisodeSkip(f"{im.image_id} has no matched annotation")
        X = image_features(im, manifest.d_a, manifest.d_c)
        for a in anns:
            xs.append(X[a.subject_region])
            xo.append(X[a.object_region])
            image_of.append(u)
            pred_of.append(a.predicate_id)
        if distractors:
            annotated = {(a.subject_region, a.object_region) for a in anns}
            s_idx, o_idx = label_index_arrays(im.num_regions)
            free = [k for k in range(len(s_idx)) if (s_idx[k], o_idx[k]) not in annotated]
            for k in np.sort(rng.choice(free, size=min(distractors, len(free)), replace=False)):
                xs.append(X[s_idx[k]])
                xo.append(X[o_idx[k]])
                image_of.append(u)
                pred_of.append(-1)
    image_of = np.array(image_of)
    pred_of = np.array(pred_of)
    is_common = pred_of == bag.common_predicate_id

    pos, neg = [], []
    n = len(image_of)
    for i in range(n):
        for j in range(n):
            if image_of[i] == image_of[j]:
                continue
            if is_common[i] and is_common[j]:
                pos.append(EpisodePair(int(image_of[i]), i, int(image_of[j]), j, 1))
            else:
                neg.append(EpisodePair(int(image_of[i]), i, int(image_of[j]), j, -1))
    cap = int(np.floor(neg_ratio * len(pos))) if pos else len(neg)
    if len(neg) > cap:
        keep = np.sort(rng.choice(len(neg), size=cap, replace=False))
        neg = [neg[k] for k in keep]
    return Episode(np.stack(xs), np.stack(xo), image_of, pred_of, pos + neg)


@dataclass
class Checkpoint:
    """Everything needed to score, resume, or audit a training run."""
    embed_mode: str
    embedder: EmbedderParams | None
    relation: RelationNetParams
    d_x: int
    seed: int
    step: int = 0
    train_config: dict = field(default_factory=dict)
    optimizer: dict | None = None
    embed_optimizer: dict | None = None
    loss_history: list = field(default_factory=list)
    pretrain_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def make_embedder(self):
        return Embedder(self.embed_mode, self.embedder, d_x=self.d_x)


def initial_checkpoint(d_x, d_r=64, embed_mode="translation", embedder=None, seed=0,
                       n_classes=1, shared=False):
    """Checkpoint holding freshly initialized weights."""
    if embed_mode == "translation" and embedder is None:
        embedder = init_embedder(d_x, d_r, n_classes, shared, seed)
    if embed_mode == "translation":
        rel_dim = embedder.d_r
    else:
        rel_dim = 2 * d_x
    return Checkpoint(embed_mode, embedder, init_relation_net(rel_dim, seed), d_x, seed)


def _episode_order(n_bags, seed, epoch):
    return np.random.default_rng([seed, 0xE9, epoch]).permutation(n_bags)


def _check_no_leak(manifest, bags):
    train = set(manifest.train_predicates)
    for k, bag in enumerate(bags):
        if bag.common_predicate_id not in train:
            raise SupervisionLeakError(
                f"bag {k} uses predicate {bag.common_predicate_id}, not a training predicate")


def random_rotation(d, rng):
    """Haar-distributed orthogonal ``d x d`` matrix."""
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    return Q * np.sign(np.diag(R))


def rotate_appearance(episode: Episode, d_a, rng):
    """Apply one random rotation to the appearance block of every candidate.

    Relative appearance geometry inside the episode is preserved while the
    predicate directions become fresh ones, so the relation network cannot
    memorize the few training directions.
    """
    Q = random_rotation(d_a, rng)
    block = slice(4, 4 + d_a)
    X_s, X_o = episode.X_s.copy(), episode.X_o.copy()
    X_s[:, block] = X_s[:, block] @ Q.T
    X_o[:, block] = X_o[:, block] @ Q.T
    return Episode(X_s, X_o, episode.image_of, episode.predicate_of, episode.pairs)


def _episode_grads(ckpt: Checkpoint, episode: Episode, train_embedder):
    embedder = ckpt.make_embedder()
    F = embedder.embed(episode.X_s, episode.X_o)
    i, j, y = episode.first, episode.second, episode.labels
    R, _ = relation_forward(ckpt.relation, F[i], F[j])
    loss = float(logistic_loss(R, y).mean())
    up = logistic_grad(R, y) / len(y)
    g = relation_backward(ckpt.relation, F[i], F[j], up)
    rel_grads = {k: v for k, v in g.items() if k.startswith("rel.")}
    emb_grads = None
    if train_embedder:
        dF = np.zeros_like(F)
        np.add.at(dF, i, g["f_i"])
        np.add.at(dF, j, g["f_j"])
        p = ckpt.embedder
        dW_o = dF.T @ episode.X_o
        dW_s = -dF.T @ episode.X_s
        emb_grads = {"embed.W_s": dW_s + dW_o} if p.shared else {"embed.W_s": dW_s, "embed.W_o": dW_o}
    return loss, rel_grads, emb_grads


def train(manifest: DatasetManifest, bags, config: TrainConfig, init: Checkpoint,
          log=None):
    """Run ``config.episodes`` episodes starting from ``init``.

    ``init`` may be a fresh checkpoint or a partially trained one; training
    resumes at ``init.step`` and the result matches an uninterrupted run.
    ``log`` receives one dict per episode.
    """
    config.validate()
    _check_no_leak(manifest, bags)
    if not bags:
        raise ValidationError("no training bags")
    train_embedder = not config.freeze_embedder and init.embed_mode == "translation"

    ckpt = Checkpoint(init.embed_mode, init.embedder, init.relation, init.d_x, init.seed,
                      init.step, asdict(config), init.optimizer, init.embed_optimizer,
                      list(init.loss_history), list(init.pretrain_history), dict(init.meta))
    opt = (Adam.from_state(ckpt.optimizer) if ckpt.optimizer
           else Adam(config.lr, config.beta1, config.beta2, config.eps))
    opt.lr, opt.beta1, opt.beta2, opt.eps = config.lr, config.beta1, config.beta2, config.eps
    emb_opt = None
    if train_embedder:
        emb_opt = (Adam.from_state(ckpt.embed_optimizer) if ckpt.embed_optimizer
                   else Adam(config.lr, config.beta1, config.beta2, config.eps))
        emb_opt.lr = config.lr

    n = len(bags)
    stop = ckpt.step + config.episodes
    while ckpt.step < stop:
        step = ckpt.step
        epoch, offset = divmod(step, n)
        bag = bags[int(_episode_order(n, config.seed, epoch)[offset])]
        rng = np.random.default_rng([config.seed, 0x5A, step])
        t0 = time.perf_counter()
        try:
            episode = build_episode(bag, manifest, config.neg_ratio, rng, config.distractors)
        except EpisodeSkip:
            ckpt.loss_history.append(None)
            ckpt.step += 1
            continue
        if config.rotate:
            episode = rotate_appearance(episode, manifest.d_a, rng)
        loss, rel_grads, emb_grads = _episode_grads(ckpt, episode, train_embedder)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"episode {step}: loss {loss} (bag predicate {bag.common_predicate_id}, "
                f"{len(episode.pairs)} pairs)")
        ckpt.relation = RelationNetParams.from_tensors(opt.step(ckpt.relation.tensors(), rel_grads))
        if emb_grads is not None:
            new = emb_opt.step(ckpt.embedder.tensors(), emb_grads)
            ckpt.embedder = EmbedderParams.from_tensors(new, ckpt.embedder.shared)
        ckpt.loss_history.append(loss)
        ckpt.step += 1
        if log is not None:
            log({"episode": step, "loss": loss, "pairs": len(episode.pairs),
                 "wall": time.perf_counter() - t0})
    ckpt.optimizer = opt.state_dict()
    ckpt.embed_optimizer = emb_opt.state_dict() if emb_opt is not None else ckpt.embed_optimizer
    return ckpt


# --- checkpoint files --------------------------------------------------------

def _pack(tensors):
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel()}
            for k, v in tensors.items()}


def _unpack(packed):
    out = {}
    for k, rec in packed.items():
        data = np.asarray(rec["data"], dtype=np.float64)
        shape = tuple(rec["shape"])
        if data.size != int(np.prod(shape)):
            raise ValidationError(f"tensor {k}: {data.size} values for shape {shape}")
        out[k] = data.reshape(shape)
    return out


def _pack_opt(state):
    if state is None:
        return None
    return {**{k: state[k] for k in ("lr", "beta1", "beta2", "eps", "t")},
            "m": _pack(state["m"]), "v": _pack(state["v"])}


def _unpack_opt(state):
    if state is None:
        return None
    return {**{k: state[k] for k in ("lr", "beta1", "beta2", "eps", "t")},
            "m": _unpack(state["m"]), "v": _unpack(state["v"])}


def checkpoint_payload(ckpt: Checkpoint):
    tensors = dict(ckpt.relation.tensors())
    if ckpt.embedder is not None:
        tensors.update(ckpt.embedder.tensors())
    return {
        "embed_mode": ckpt.embed_mode,
        "shared": bool(ckpt.embedder.shared) if ckpt.embedder is not None else False,
        "d_x": ckpt.d_x,
        "d_r": ckpt.relation.d_r,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "rng": {"kind": "counter", "seed": ckpt.seed, "step": ckpt.step},
        "train_config": ckpt.train_config,
        "tensors": _pack(tensors),
        "optimizer": _pack_opt(ckpt.optimizer),
        "embed_optimizer": _pack_opt(ckpt.embed_optimizer),
        "loss_history": ckpt.loss_history,
        "pretrain_history": ckpt.pretrain_history,
        "meta": ckpt.meta,
    }


def save_checkpoint(ckpt: Checkpoint, path):
    return records.write_record(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION, checkpoint_payload(ckpt))


def load_checkpoint(path) -> Checkpoint:
    body = records.read_record(path, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION)
    try:
        tensors = _unpack(body["tensors"])
        relation = RelationNetParams.from_tensors(tensors)
        embedder = None
        if body["embed_mode"] == "translation":
            embedder = EmbedderParams.from_tensors(tensors, bool(body["shared"]))
            if embedder.d_x != body["d_x"]:
                raise ValidationError("embedder width does not match recorded d_x")
        if relation.d_r != body["d_r"]:
            raise ValidationError("relation-net width does not match recorded d_r")
        return Checkpoint(body["embed_mode"], embedder, relation, int(body["d_x"]),
                          int(body["seed"]), int(body["step"]), body["train_config"],
                          _unpack_opt(body["optimizer"]), _unpack_opt(body["embed_optimizer"]),
                          list(body["loss_history"]), list(body["pretrain_history"]),
                          dict(body["meta"]))
    except KeyError as exc:
        raise ParseError(f"{path}: checkpoint missing field {exc}") from exc
