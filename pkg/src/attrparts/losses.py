"""Loss terms and the stage-1 / stage-2 composite objectives.

Stage 1 trains detection: identity cross-entropy on the global
descriptor, batch-hard triplet on the same descriptor, and the summed
per-group attribute cross-entropy weighted by lambda.  Stage 2 trains
refinement: identity cross-entropy on the local descriptor plus
batch-hard triplet on the final concatenated descriptor; no attribute
term.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_MARGIN = 0.2
DEFAULT_LAMBDA = 0.1


@dataclass
class TripletSet:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def count(self):
        return len(self.anchors)


@dataclass
class LossBreakdown:
    total: Tensor
    id: float
    triplet: float
    attribute: float
    lam: float
    margin: float

    @property
    def total_value(self):
        return self.total.item()


def identity_loss(id_logits, id_indices):
    """Mean cross-entropy of the identity classifier over the batch."""
    return ad.softmax_cross_entropy(id_logits, id_indices)


def attribute_loss(attr_logits, attr_labels):
    """Sum over attribute groups of the mean per-group cross-entropy."""
    total = None
    for i, logits in enumerate(attr_logits):
        term = ad.softmax_cross_entropy(logits, attr_labels[:, i])
        total = term if total is None else ad.add(total, term)
    return total


def pairwise_squared_distances(emb):
    """All-pairs squared L2 distances of an N x D array."""
    sq = (emb * emb).sum(axis=1)
    d = sq[:, None] - 2.0 * (emb @ emb.T) + sq[None, :]
    return np.maximum(d, 0.0)


def mine_triplets(embeddings, identities):
    """Batch-hard mining: per anchor the farthest positive (same id,
    other sample) and nearest negative (different id), by squared L2.

    Anchors lacking a positive or a negative are dropped; ties resolve
    to the lowest index.
    """
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    identities = np.asarray(identities)
    n = len(identities)
    dist = pairwise_squared_distances(emb.astype(np.float64))
    same = identities[:, None] == identities[None, :]
    eye = np.eye(n, dtype=bool)

    anchors, positives, negatives = [], [], []
    for a in range(n):
        pos_mask = same[a] & ~eye[a]
        neg_mask = ~same[a]
        if not pos_mask.any() or not neg_mask.any():
            continue
        pos_d = np.where(pos_mask, dist[a], -np.inf)
        neg_d = np.where(neg_mask, dist[a], np.inf)
        anchors.append(a)
        positives.append(int(np.argmax(pos_d)))
        negatives.append(int(np.argmin(neg_d)))
    return TripletSet(
        np.array(anchors, dtype=np.int64),
        np.array(positives, dtype=np.int64),
        np.array(negatives, dtype=np.int64),
    )


def triplet_loss(embeddings, triplets, margin=DEFAULT_MARGIN):
    """Mean hinge over mined triplets: max(d_pos - d_neg + margin, 0)."""
    if triplets.count == 0:
        return Tensor(np.zeros((), dtype=embeddings.data.dtype))
    a = ad.take_rows(embeddings, triplets.anchors)
    p = ad.take_rows(embeddings, triplets.positives)
    n = ad.take_rows(embeddings, triplets.negatives)
    ap = ad.sub(a, p)
    an = ad.sub(a, n)
    d_pos = ad.sum_rows(ad.mul(ap, ap))
    d_neg = ad.sum_rows(ad.mul(an, an))
    return ad.mean_all(ad.relu(ad.add_const(ad.sub(d_pos, d_neg), margin)))


def stage1_loss(outputs, batch, lam=DEFAULT_LAMBDA, margin=DEFAULT_MARGIN,
                use_triplet=True, triplets=None):
    """id(g) + triplet(g) + lam * attribute; triplet mined on g."""
    l_id = identity_loss(outputs.id_logits, batch.id_indices)
    if use_triplet:
        if triplets is None:
            triplets = mine_triplets(outputs.g, batch.identities)
        l_tri = triplet_loss(outputs.g, triplets, margin)
    else:
        l_tri = Tensor(np.zeros((), dtype=outputs.g.data.dtype))
    l_attr = attribute_loss(outputs.attr_logits, batch.attr_labels)
    total = ad.add(ad.add(l_id, l_tri), ad.scale(l_attr, lam))
    return LossBreakdown(
        total=total,
        id=l_id.item(),
        triplet=l_tri.item(),
        attribute=l_attr.item(),
        lam=lam,
        margin=margin,
    )


def stage2_loss(outputs, batch, margin=DEFAULT_MARGIN, triplets=None):
    """id(local classifier on f_p) + triplet(f); no attribute term."""
    l_id = identity_loss(outputs.local_id_logits, batch.id_indices)
    if triplets is None:
        triplets = mine_triplets(outputs.f, batch.identities)
    l_tri = triplet_loss(outputs.f, triplets, margin)
    total = ad.add(l_id, l_tri)
    return LossBreakdown(
        total=total,
        id=l_id.item(),
        triplet=l_tri.item(),
        attribute=0.0,
        lam=0.0,
        margin=margin,
    )
