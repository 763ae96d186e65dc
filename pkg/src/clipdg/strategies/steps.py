"""Single optimization steps and inference rules for each strategy.

Steps mutate parameters in place through the supplied optimizer and return
the scalar loss as a float.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from clipdg.encoders import (
    EncoderBundle,
    encode_image,
    encode_image_intermediate,
    encode_text,
    encode_text_with_injected_embeddings,
    project_image_features,
)
from clipdg.prompts import PromptSet, prompt_tokens_for_label
from clipdg.strategies.layers import ClassifierHead, Conditioner, LogitScale
from clipdg.strategies.losses import ce_loss, cooplvt_contrastive_loss, naive_mm_loss


class FreezeError(RuntimeError):
    """A strategy's freezing contract does not hold for the given modules."""


def make_optimizer(params: Iterable[nn.Parameter], name: str = "adamw", lr: float = 5e-6,
                   weight_decay: float = 0.0) -> torch.optim.Optimizer | None:
    """Optimizer over the trainable subset of ``params`` (None if that subset is empty)."""
    params = [p for p in params if p.requires_grad]
    if not params:
        return None
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def _unpack(batch, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(batch, "images"):
        x, y = batch.images, batch.labels
    else:
        x, y = batch
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    if dtype is not None:
        x = x.to(dtype)
    return x, torch.as_tensor(np.asarray(y), dtype=torch.long)


def _descend(loss: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def _frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


# ---------------------------------------------------------------- ERM / probing

def erm_step(bundle: EncoderBundle, head: ClassifierHead, batch, optimizer) -> float:
    x, y = _unpack(batch, bundle.dtype)
    return _descend(ce_loss(head(encode_image(bundle, x)), y), optimizer)


def linear_probe_step(bundle: EncoderBundle, head: ClassifierHead, batch, optimizer) -> float:
    if not (_frozen(bundle.vision) and _frozen(bundle.projector)):
        raise FreezeError("linear probing requires a frozen backbone (vision encoder and projector)")
    x, y = _unpack(batch, bundle.dtype)
    with torch.no_grad():
        V = encode_image(bundle, x)
    return _descend(ce_loss(head(V), y), optimizer)


# ---------------------------------------------------------------- zero-shot / naive

def class_text_features(bundle: EncoderBundle, prompt_set: PromptSet) -> torch.Tensor:
    """``(K, c_f)`` features of the plain class prompts, without gradient."""
    with torch.no_grad():
        return encode_text(bundle, prompt_set.token_sequences)


def naive_mm_step(bundle: EncoderBundle, class_features: torch.Tensor, logit_scale: LogitScale,
                  batch, optimizer) -> float:
    if not _frozen(bundle.text):
        raise FreezeError("naive multi-modal fine-tuning keeps the text encoder frozen")
    x, y = _unpack(batch, bundle.dtype)
    return _descend(naive_mm_loss(encode_image(bundle, x), class_features, y, logit_scale), optimizer)


# ---------------------------------------------------------------- CoOpLVT

def condition_tokens(G: Conditioner, f_I_feats: torch.Tensor) -> torch.Tensor:
    """``(B, n_p, d_t)`` injected tokens from intermediate image features."""
    return G(f_I_feats)


def conditioned_text_features_train(bundle: EncoderBundle, G: Conditioner, prompt_set: PromptSet,
                                    images=None, labels=None, *, intermediate: torch.Tensor | None = None
                                    ) -> torch.Tensor:
    """Text feature per sample: its ground-truth class prompt with the sample's
    conditioned tokens appended, encoded and row-normalized. ``(B, c_f)``."""
    if intermediate is None:
        intermediate = encode_image_intermediate(bundle, images)
    labels = np.asarray(labels).tolist()
    seqs = [prompt_tokens_for_label(prompt_set, y) for y in labels]
    return encode_text_with_injected_embeddings(bundle, seqs, condition_tokens(G, intermediate))


def cooplvt_loss(bundle: EncoderBundle, G: Conditioner, prompt_set: PromptSet, logit_scale, x, y) -> torch.Tensor:
    f = encode_image_intermediate(bundle, x)
    V = project_image_features(bundle, f)
    T = conditioned_text_features_train(bundle, G, prompt_set, labels=y, intermediate=f)
    return cooplvt_contrastive_loss(V, T, logit_scale)


def cooplvt_train_step(bundle: EncoderBundle, G: Conditioner, prompt_set: PromptSet, batch, optimizer,
                       logit_scale=1.0) -> float:
    if not _frozen(bundle.text):
        raise FreezeError("CoOpLVT keeps the text encoder frozen")
    x, y = _unpack(batch, bundle.dtype)
    return _descend(cooplvt_loss(bundle, G, prompt_set, logit_scale, x, y), optimizer)


def cooplvt_scores(bundle: EncoderBundle, G: Conditioner, prompt_set: PromptSet, images) -> torch.Tensor:
    """``(B, K)`` similarities of each image with every class prompt conditioned on that image."""
    f = encode_image_intermediate(bundle, images)
    V = project_image_features(bundle, f)
    tokens = condition_tokens(G, f)
    b, k = len(V), len(prompt_set.token_sequences)
    seqs = [prompt_set.token_sequences[c] for _ in range(b) for c in range(k)]
    T = encode_text_with_injected_embeddings(bundle, seqs, tokens.repeat_interleave(k, dim=0))
    return (V[:, None, :] * T.reshape(b, k, -1)).sum(-1)


def cooplvt_infer(bundle: EncoderBundle, G: Conditioner, prompt_set: PromptSet, images
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (ties to the lowest index) and the ``(B, K)`` scores."""
    with torch.no_grad():
        scores = cooplvt_scores(bundle, G, prompt_set, images).cpu().numpy()
    return np.argmax(scores, axis=1), scores
