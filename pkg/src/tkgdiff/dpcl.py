"""Dual-domain candidate scoring and its training losses.

A query (s, r, ?, t) gets one score per candidate object from each of two
heads. Both heads share one entity table; the periodic head adds the signed
history value and a ball distance between the query subject and each
candidate, the non-periodic head subtracts the history value and uses the
Euclidean distance. The cross-entropy objective sums the two heads' softmax
probabilities of the ground truth; a supervised contrastive objective pulls
together query codes whose ground truth is / is not already in the history.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numkit as nk
from .corpus import PeriodicIndex
from .errors import ConfigError, DimensionError
from .numkit import Tensor

__all__ = [
    "DpclParams", "QueryBatch", "init_params", "query_code",
    "periodic_scores", "nonperiodic_scores", "ce_loss", "supcon_loss",
]

DISTANCE_KINDS = ("poincare", "euclidean")


@dataclass
class DpclParams:
    """Trainable tensors: entity/relation tables, the two affine score maps,
    and the contrastive query projection."""

    entity_emb: Tensor      # (|E|, d)
    relation_emb: Tensor    # (|R|, d)
    w_per: Tensor           # (d, 2d)
    b_per: Tensor           # (1, d)
    w_nonper: Tensor        # (d, 2d)
    b_nonper: Tensor        # (1, d)
    w_ctr: Tensor           # (d, 2d)
    b_ctr: Tensor           # (1, d)

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def replace(self, **updates) -> "DpclParams":
        fields = self.named()
        fields.update(updates)
        return DpclParams(**fields)


def init_params(n_entities: int, n_relations: int, dim: int,
                rng: np.random.Generator) -> DpclParams:
    """Embeddings start well inside the unit ball; affine maps use a fan-based
    uniform range; biases start at zero."""
    half = 0.5 / np.sqrt(dim)
    bound = np.sqrt(6.0 / (3 * dim))

    def emb(n):
        return Tensor(rng.uniform(-half, half, size=(n, dim)))

    def weight():
        return Tensor(rng.uniform(-bound, bound, size=(dim, 2 * dim)))

    return DpclParams(
        entity_emb=emb(n_entities), relation_emb=emb(n_relations),
        w_per=weight(), b_per=nk.zeros(1, dim),
        w_nonper=weight(), b_nonper=nk.zeros(1, dim),
        w_ctr=weight(), b_ctr=nk.zeros(1, dim),
    )


@dataclass
class QueryBatch:
    """Object-prediction queries with their per-entity signed history values
    and the periodic / non-periodic label of the ground truth."""

    s_ids: np.ndarray       # (B,)
    r_ids: np.ndarray       # (B,)
    t_ids: np.ndarray       # (B,)
    gt_ids: np.ndarray      # (B,)
    z_rows: np.ndarray      # (B, |E|), entries in {+lam, -lam}
    periodic: np.ndarray    # (B,) bool: ground truth already in history

    def __len__(self) -> int:
        return len(self.s_ids)

    @classmethod
    def from_quads(cls, quads: np.ndarray, index: PeriodicIndex) -> "QueryBatch":
        s, r, o, t = (quads[:, i].astype(np.int64) for i in range(4))
        z = np.stack([index.z_row(si, ri, ti) for si, ri, ti in zip(s, r, t)]) \
            if len(quads) else np.zeros((0, index.n_entities))
        periodic = z[np.arange(len(quads)), o] > 0 if len(quads) else np.zeros(0, bool)
        return cls(s_ids=s, r_ids=r, t_ids=t, gt_ids=o, z_rows=z, periodic=periodic)


def query_code(params: DpclParams, batch: QueryBatch, head: str) -> Tensor:
    """tanh(W (s concat r) + b) for the chosen head, shape (B, d); taped."""
    w, b = {
        "periodic": (params.w_per, params.b_per),
        "nonperiodic": (params.w_nonper, params.b_nonper),
        "contrastive": (params.w_ctr, params.b_ctr),
    }[head]
    s_emb = nk.take_rows(params.entity_emb, batch.s_ids)
    r_emb = nk.take_rows(params.relation_emb, batch.r_ids)
    x = nk.concat_cols(s_emb, r_emb)
    return nk.tanh(nk.add(nk.matmul(x, nk.transpose(w)), b))


def _distance_term(params: DpclParams, batch: QueryBatch, kind: str) -> Tensor:
    if kind not in DISTANCE_KINDS:
        raise ConfigError(f"distance kind must be one of {DISTANCE_KINDS}, got '{kind}'")
    s_emb = nk.take_rows(params.entity_emb, batch.s_ids)
    if kind == "poincare":
        return geo.poincare_pairwise(geo.project_to_ball(s_emb),
                                     geo.project_to_ball(params.entity_emb))
    return geo.euclidean_pairwise(s_emb, params.entity_emb)


def periodic_scores(params: DpclParams, batch: QueryBatch,
                    distance: str = "poincare", distance_sign: float = 1.0) -> Tensor:
    """Periodic dependency score per candidate: affine-code match against the
    entity table, plus the signed history row, plus the subject-candidate
    distance; shape (B, |E|); taped."""
    code = query_code(params, batch, "periodic")
    affine = nk.matmul(code, nk.transpose(params.entity_emb))
    scores = nk.add(affine, Tensor(batch.z_rows))
    dist = _distance_term(params, batch, distance)
    return nk.add(scores, nk.mul(nk.constant(distance_sign), dist))


def nonperiodic_scores(params: DpclParams, batch: QueryBatch,
                       distance: str = "euclidean", distance_sign: float = 1.0) -> Tensor:
    """Non-periodic dependency score: like the periodic head but the history
    row enters with opposite sign; shape (B, |E|); taped."""
    code = query_code(params, batch, "nonperiodic")
    affine = nk.matmul(code, nk.transpose(params.entity_emb))
    scores = nk.sub(affine, Tensor(batch.z_rows))
    dist = _distance_term(params, batch, distance)
    return nk.add(scores, nk.mul(nk.constant(distance_sign), dist))


def ce_loss(s_per: Tensor, s_nonper: Tensor, gt_ids) -> Tensor:
    """-log(softmax(S_per)[gt] + softmax(S_nonper)[gt]), averaged over the
    batch. The sum of two probabilities can exceed 1, so the loss can go
    below -log 2; that is the objective as defined."""
    if s_per.shape != s_nonper.shape:
        raise DimensionError(f"score shapes differ: {s_per.shape} vs {s_nonper.shape}")
    p1 = nk.gather_cols(nk.softmax_rows(s_per), gt_ids)
    p2 = nk.gather_cols(nk.softmax_rows(s_nonper), gt_ids)
    per_query = nk.log(nk.add(p1, p2))
    batch = s_per.shape[0]
    return nk.mul(nk.constant(-1.0 / batch), nk.sum_all(per_query))


def supcon_loss(params: DpclParams, batch: QueryBatch, tau: float) -> Tensor:
    """Supervised contrastive loss over unit-normalized query codes.

    Anchors attract batch members with the same periodic label; anchors with
    no same-label partner contribute nothing. Averaged over the batch.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    n = len(batch)
    if n < 2:
        raise ConfigError("supcon_loss needs at least 2 queries in the batch")
    code = query_code(params, batch, "contrastive")
    norms = nk.sqrt(nk.sum_cols(nk.mul(code, code)))
    z = nk.div(code, norms)
    sim = nk.mul(nk.constant(1.0 / tau), nk.matmul(z, nk.transpose(z)))

    off_diag = 1.0 - np.eye(n)
    exp_sim = nk.mul(nk.exp(sim), Tensor(off_diag))
    log_denom = nk.log(nk.sum_cols(exp_sim))            # (B, 1)

    same = (batch.periodic[:, None] == batch.periodic[None, :]) & (off_diag > 0)
    pos_count = same.sum(axis=1)
    weights = np.where(same, 1.0, 0.0)
    nonzero = pos_count > 0
    weights[nonzero] = weights[nonzero] / pos_count[nonzero, None]

    log_prob = nk.sub(sim, log_denom)                   # broadcast over columns
    total = nk.sum_all(nk.mul(log_prob, Tensor(weights)))
    return nk.mul(nk.constant(-1.0 / n), total)
