"""Negative-cosine-similarity loss between the two arms' outputs."""
from __future__ import annotations

from enum import Enum

import torch

from cass.errors import ContractError, InvalidInputError

DEFAULT_EPS = 1e-12


class HeadVariant(str, Enum):
    NONE = "none"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite entries")


def normalize_embedding(v: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """L2-normalise along the last dimension, ``v / max(||v||, eps)``.

    Works for a single vector or a ``(B, D)`` batch. Zero rows stay zero.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    _check_finite(v, "embedding")
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    return v / norm.clamp_min(eps)


def cass_loss(r: torch.Tensor, t: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Batch mean of ``2 - 2 * <F(r_i), F(t_i)>`` with ``F`` the L2 normaliser.

    ``r`` and ``t`` are ``(B, D)`` outputs of the two arms for the same
    augmented images. The result lies in ``[0, 4]`` and is differentiable in
    both inputs.
    """
    if r.ndim != 2 or r.shape != t.shape:
        raise ContractError(f"arm outputs must share shape (B, D); got {tuple(r.shape)} and {tuple(t.shape)}")
    if r.shape[0] < 1 or r.shape[1] < 1:
        raise ContractError("empty embedding batch")
    cos = (normalize_embedding(r, eps) * normalize_embedding(t, eps)).sum(dim=-1)
    return (2.0 - 2.0 * cos).mean()


def apply_head(e: torch.Tensor, head: HeadVariant | str = HeadVariant.NONE) -> torch.Tensor:
    head = HeadVariant(head)
    _check_finite(e, "embedding")
    if head is HeadVariant.NONE:
        return e
    if head is HeadVariant.SOFTMAX:
        return torch.softmax(e, dim=-1)
    return torch.sigmoid(e)
