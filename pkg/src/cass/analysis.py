"""Observation-only analysis: CNN feature maps, ViT class-attention maps,
map averaging and the mean-variance robustness statistic over sweeps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from cass.arms import forward
from cass.errors import ContractError


@dataclass
class FeatureMapDump:
    layer_id: str
    tensor: np.ndarray  # (C, H, W)
    checkpoint_id: str = ""
    image_id: str = ""


@dataclass
class AttentionAverage:
    map: np.ndarray
    n_samples: int
    aggregation: str
    raw_mean: np.ndarray


@torch.no_grad()
def extract_feature_maps(model, image: torch.Tensor, layer_ids=("conv1",), checkpoint_id: str = "",
                         image_id: str = "") -> list[FeatureMapDump]:
    """Activations of ``layer_ids`` for one preprocessed ``(3, H, W)`` image."""
    if getattr(model, "family", None) != "cnn":
        raise ContractError("feature-map extraction expects a cnn-family model")
    was_training = model.training
    model.eval()
    try:
        out = forward(model, image[None], feature_layers=tuple(layer_ids))
    finally:
        model.train(was_training)
    return [FeatureMapDump(name, t[0].numpy(), checkpoint_id, image_id) for name, t in out.feature_maps]


def minmax(x: np.ndarray, rtol: float = 1e-6) -> np.ndarray:
    """Scale to [0, 1]. A spread within ``rtol`` of the magnitude (float32
    rounding noise on a constant map) counts as flat and maps to zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= rtol * max(abs(lo), abs(hi)):
        return np.zeros_like(x, dtype=float)
    return (x - lo) / (hi - lo)


def rollout(attentions, residual: float = 0.5) -> torch.Tensor:
    """Attention rollout over layers.

    ``attentions``: per-layer ``(tokens, tokens)`` matrices (heads already
    aggregated). Each layer is mixed with the identity as
    ``residual * I + (1 - residual) * A``, rows renormalised, and the layers
    multiplied from first to last: ``R = A_L' ... A_2' A_1'``.
    """
    result = None
    for a in attentions:
        a = torch.as_tensor(a, dtype=torch.float64)
        mixed = residual * torch.eye(a.shape[-1], dtype=a.dtype) + (1 - residual) * a
        mixed = mixed / mixed.sum(dim=-1, keepdim=True)
        result = mixed if result is None else mixed @ result
    return result


@torch.no_grad()
def attention_map(model, image: torch.Tensor, aggregation: str = "last_layer_cls") -> np.ndarray:
    """Class-token attention over patches, upsampled to image size, scaled to [0, 1].

    ``last_layer_cls`` uses the final block's attention averaged over heads;
    ``rollout`` propagates head-averaged attention through all blocks.
    """
    if getattr(model, "family", None) != "vit":
        raise ContractError("attention maps need a vit-family model")
    was_training = model.training
    model.eval()
    try:
        attn = forward(model, image[None], attention=True).attention
    finally:
        model.train(was_training)
    per_layer = [a[0].mean(dim=0) for a in attn]
    if aggregation == "last_layer_cls":
        cls_row = per_layer[-1][0, 1:]
    elif aggregation == "rollout":
        cls_row = rollout(per_layer)[0, 1:]
    else:
        raise ContractError(f"unknown aggregation {aggregation!r}")
    g = model.grid
    grid = cls_row.reshape(1, 1, g, g).float()
    up = F.interpolate(grid, size=(model.image_size, model.image_size), mode="bilinear", align_corners=False)
    return minmax(up[0, 0].double().numpy())


def average_maps(maps, aggregation: str = "") -> AttentionAverage:
    """Elementwise mean of equally-shaped maps, then min-max renormalised."""
    maps = [np.asarray(m, dtype=float) for m in maps]
    if not maps:
        raise ContractError("no maps to average")
    if any(m.shape != maps[0].shape for m in maps):
        raise ContractError("maps differ in shape")
    raw = np.mean(np.stack(maps), axis=0)
    return AttentionAverage(minmax(raw), len(maps), aggregation, raw)


def robustness_variance(results: dict, ddof: int = 1) -> dict[str, float]:
    """Per-method mean over architectures of the metric variance across sweep values.

    ``results[method][architecture][sweep_value] = metric``. ``ddof=1``
    (sample variance) is the default; ``ddof=0`` gives population variance.
    Lower is more robust.
    """
    gaps = []
    out = {}
    for method, archs in results.items():
        if not archs:
            gaps.append(f"{method}: no architectures")
            continue
        variances = []
        for arch, cells in archs.items():
            vals = [v for v in cells.values() if v is not None]
            if len(vals) != len(cells) or len(vals) < 2:
                gaps.append(f"{method}/{arch}: {sorted(k for k, v in cells.items() if v is None)} "
                            f"(have {len(vals)} values, need >= 2)")
                continue
            variances.append(float(np.var(np.asarray(vals, dtype=float), ddof=ddof)))
        if variances:
            out[method] = float(np.mean(variances))
    if gaps:
        raise ContractError("incomplete result grid: " + "; ".join(gaps))
    return out


def save_map(array: np.ndarray, path, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``array`` to ``<path>.npz`` and a grayscale heatmap ``<path>.png``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    npz = path.with_suffix(".npz")
    np.savez(npz, map=array, **{k: np.asarray(v) for k, v in (meta or {}).items()})
    a = np.asarray(array, dtype=float)
    if a.ndim == 3:
        a = a.mean(axis=0)
    png = path.with_suffix(".png")
    Image.fromarray((minmax(a) * 255).round().astype(np.uint8), mode="L").save(png)
    return npz, png


def save_feature_maps(dumps: list[FeatureMapDump], out_dir) -> list[Path]:
    paths = []
    for d in dumps:
        stem = Path(out_dir) / f"{d.image_id or 'image'}_{d.layer_id.replace('.', '_')}"
        npz, png = save_map(d.tensor, stem, {"layer_id": d.layer_id, "checkpoint_id": d.checkpoint_id})
        paths += [npz, png]
    return paths
