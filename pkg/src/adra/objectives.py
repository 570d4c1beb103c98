"""Radial one-class objectives and anomaly scoring.

The radial value h(z) = sqrt(|z|^2 + 1) - 1 is both the training signal and
the anomaly score (higher = more anomalous). Under outlier exposure, nominal
samples minimize h while corpus samples minimize -log(1 - exp(-h)), pulling
nominal embeddings toward the origin and pushing exposure embeddings away.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from adra import autodiff as ad
from adra.errors import ContractError

NOMINAL, CORPUS = 0, 1


@dataclass
class PseudoLabeledBatch:
    """Embeddings plus per-sample origin flags (0 = nominal set, 1 = corpus)."""

    embeddings: ad.Tensor
    origins: np.ndarray

    def __post_init__(self):
        self.origins = np.asarray(self.origins)
        n = self.embeddings.shape[0]
        if n < 1:
            raise ContractError("batch must contain at least one sample")
        if self.origins.shape != (n,):
            raise ContractError(
                f"origins shape {self.origins.shape} vs batch size {n}")
        if not np.isin(self.origins, (NOMINAL, CORPUS)).all():
            raise ContractError("origin flags must be 0 (nominal) or 1 (corpus)")


def radial(z: ad.Tensor) -> ad.Tensor:
    """h(z) = sqrt(|z|^2 + 1) - 1, per row for a matrix, scalar for a vector.

    Smooth everywhere (including z = 0), nonnegative, and bounded above by
    |z|.
    """
    axis = 1 if z.data.ndim == 2 else None
    sq = ad.reduce_sum(ad.mul(z, z), axis=axis)
    return ad.sadd(ad.sqrt(ad.sadd(sq, 1.0)), -1.0)


def hsc_loss(batch: PseudoLabeledBatch) -> ad.Tensor:
    """Mean hypersphere-classifier loss under outlier exposure.

    Nominal term: h. Corpus term: -log(1 - exp(-h)), evaluated through the
    numerically stable expm1 form with h clamped away from zero.
    """
    h = radial(batch.embeddings)
    corpus_mask = batch.origins.astype(batch.embeddings.dtype)
    nominal_term = ad.mul(h, ad.constant(1.0 - corpus_mask))
    corpus_term = ad.mul(ad.smul(ad.log1mexp(h), -1.0), ad.constant(corpus_mask))
    return ad.mean(ad.add(nominal_term, corpus_term))


def one_class_loss(batch: PseudoLabeledBatch) -> ad.Tensor:
    """Mean radial value of an all-nominal batch (the corpus-free objective)."""
    if (batch.origins == CORPUS).any():
        raise ContractError("one_class_loss requires an all-nominal batch")
    return ad.mean(radial(batch.embeddings))


def l2sp_penalty(params, anchor: dict[str, np.ndarray], strength: float) -> ad.Tensor:
    """strength * sum of squared distances to the anchored parameter values."""
    by_id = {p.stable_id: p for p in params}
    missing = set(anchor) - set(by_id)
    if missing:
        raise ContractError(f"anchor ids not among parameters: {sorted(missing)}")
    total = None
    for stable_id in sorted(anchor):
        p = by_id[stable_id]
        ref = anchor[stable_id]
        if ref.shape != p.data.shape:
            raise ContractError(
                f"anchor shape {ref.shape} vs parameter {stable_id} "
                f"shape {p.data.shape}")
        d = ad.sub(p, ad.constant(ref.astype(p.data.dtype)))
        term = ad.reduce_sum(ad.mul(d, d))
        total = term if total is None else ad.add(total, term)
    return ad.smul(total, strength)


def radial_values(z: np.ndarray) -> np.ndarray:
    """Plain-array radial value (scoring path, no tape)."""
    sq = (z.astype(np.float64) ** 2).sum(axis=-1)
    return (np.sqrt(sq + 1.0) - 1.0).astype(np.float32)


def score_batch(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Anomaly scores h(embed(x)) for a batch of images; higher = more anomalous."""
    scores = []
    for start in range(0, len(images), batch_size):
        z = model.embed(ad.constant(images[start:start + batch_size]))
        scores.append(radial_values(z.data))
    return np.concatenate(scores)


def score(x: np.ndarray, model) -> float:
    """Anomaly score of a single image (c, h, w)."""
    return float(score_batch(model, x[None])[0])


def embed_batch(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Embeddings without recording a tape (evaluation path)."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.embed(ad.constant(images[start:start + batch_size])).data)
    return np.concatenate(out)
