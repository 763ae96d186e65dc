"""Losses and the similarity-based classification rule."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _scale_value(logit_scale) -> torch.Tensor | float:
    return logit_scale() if callable(logit_scale) else logit_scale


def _check_labels(labels: torch.Tensor, k: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.max()) >= k or int(labels.min()) < 0):
        raise ValueError(f"labels must lie in [0, {k - 1}], got range [{int(labels.min())}, {int(labels.max())}]")
    return labels


def ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, K), got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    labels = _check_labels(labels, logits.shape[1])
    if len(labels) != len(logits):
        raise ValueError(f"{len(logits)} logit rows but {len(labels)} labels")
    return F.cross_entropy(logits, labels)


def similarity_logits(V: torch.Tensor, T: torch.Tensor, logit_scale=1.0) -> torch.Tensor:
    if V.shape[-1] != T.shape[-1]:
        raise ValueError(f"feature widths differ: V has {V.shape[-1]}, T has {T.shape[-1]}")
    return _scale_value(logit_scale) * (V @ T.T)


def naive_mm_loss(V: torch.Tensor, T: torch.Tensor, labels, logit_scale=1.0) -> torch.Tensor:
    """Cross-entropy over scaled image-to-class-prompt similarities.

    ``V`` is ``(B, c_f)`` image features, ``T`` the ``(K, c_f)`` class-prompt
    features, both row-normalized.
    """
    return ce_loss(similarity_logits(V, T, logit_scale), labels)


def cooplvt_contrastive_terms(V: torch.Tensor, T_batch: torch.Tensor, logit_scale=1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """The two directions of the symmetric contrastive loss with diagonal positives.

    Returns ``(text_term, visual_term)``: the first is the cross-entropy of each
    image against all texts in the batch (rows of the similarity matrix), the
    second of each text against all images (columns).
    """
    if V.shape != T_batch.shape:
        raise ValueError(f"V {tuple(V.shape)} and T_batch {tuple(T_batch.shape)} must pair row for row")
    M = similarity_logits(V, T_batch, logit_scale)
    target = torch.arange(len(M))
    return F.cross_entropy(M, target), F.cross_entropy(M.T, target)


def cooplvt_contrastive_loss(V: torch.Tensor, T_batch: torch.Tensor, logit_scale=1.0) -> torch.Tensor:
    text_term, visual_term = cooplvt_contrastive_terms(V, T_batch, logit_scale)
    return text_term + visual_term


def zero_shot_classify(V, T) -> np.ndarray:
    """Predict the class whose prompt feature has the largest dot product.

    Ties go to the lowest class index.
    """
    V = torch.as_tensor(V)
    T = torch.as_tensor(T)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise ValueError(f"incompatible feature matrices {tuple(V.shape)} and {tuple(T.shape)}")
    scores = (V @ T.T).detach().cpu().numpy()
    return np.argmax(scores, axis=1)
