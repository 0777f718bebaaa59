"""Seeded single-view augmentation pipeline.

Stage order is fixed: resize, (jitter | perspective), (jitter | affine),
horizontal flip, vertical flip, optional solarize / Gaussian blur, channel
normalisation. All randomness comes from the ``numpy.random.Generator``
passed in, so ``(image, config, seed)`` determines the output bit for bit.
"""
from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from cass.errors import ContractError, InvalidInputError

EXTRAS = ("solarize", "gaussian_blur")


@dataclass
class AugmentConfig:
    target_size: tuple[int, int] = (384, 384)
    jitter_or_perspective_p: float = 0.3
    perspective_distortion: float = 0.2
    jitter_or_affine_p: float = 0.3
    affine_degrees: float = 10.0
    hflip_p: float = 0.3
    vflip_p: float = 0.3
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    jitter_hue: float = 0.2
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    extra: tuple[str, ...] = ()
    solarize_p: float = 0.2
    solarize_threshold: float = 0.5
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        self.extra = tuple(e for e in EXTRAS if e in set(self.extra))
        for name in ("jitter_or_perspective_p", "jitter_or_affine_p", "hflip_p", "vflip_p", "solarize_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be a probability")
        if min(self.norm_std) <= 0:
            raise ContractError("norm_std entries must be positive")

    @classmethod
    def for_size(cls, size: int, **kw) -> "AugmentConfig":
        return cls(target_size=(size, size), **kw)

    def without_randomness(self) -> "AugmentConfig":
        return AugmentConfig(**{**asdict(self), "jitter_or_perspective_p": 0.0, "jitter_or_affine_p": 0.0,
                                "hflip_p": 0.0, "vflip_p": 0.0, "solarize_p": 0.0, "blur_p": 0.0})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class AugmentCounter:
    """Thread-safe count of augmentation applications in a run."""

    def __init__(self):
        self._lock = threading.Lock()
        self.applications = 0

    def increment(self, n: int = 1) -> None:
        with self._lock:
            self.applications += n


def pipeline_signature(cfg: AugmentConfig) -> list[str]:
    h, w = cfg.target_size
    sig = [
        f"resize({h}x{w},bilinear)",
        f"jitter_or_perspective(p={cfg.jitter_or_perspective_p},distortion={cfg.perspective_distortion})",
        f"jitter_or_affine(p={cfg.jitter_or_affine_p},degrees={cfg.affine_degrees})",
        f"hflip(p={cfg.hflip_p})",
        f"vflip(p={cfg.vflip_p})",
    ]
    if "solarize" in cfg.extra:
        sig.append(f"solarize(p={cfg.solarize_p},threshold={cfg.solarize_threshold})")
    if "gaussian_blur" in cfg.extra:
        sig.append(f"gaussian_blur(p={cfg.blur_p},sigma={list(cfg.blur_sigma)})")
    sig.append(f"normalize(mean={list(cfg.norm_mean)},std={list(cfg.norm_std)})")
    return sig


def to_float_image(image) -> torch.Tensor:
    """Accept a PIL image, HWC/CHW uint8 array or CHW tensor; return CHW float in [0, 1]."""
    if isinstance(image, Image.Image):
        if image.mode != "RGB":
            raise InvalidInputError(f"expected an RGB image, got mode {image.mode!r}")
        image = TF.pil_to_tensor(image)
    elif isinstance(image, np.ndarray):
        arr = image
        if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
            arr = arr.transpose(2, 0, 1)
        image = torch.from_numpy(np.ascontiguousarray(arr))
    if not isinstance(image, torch.Tensor) or image.ndim != 3 or image.shape[0] != 3:
        shape = tuple(getattr(image, "shape", ()))
        raise InvalidInputError(f"expected an RGB image with 3 channels, got shape {shape}")
    if image.dtype == torch.uint8:
        return image.float() / 255.0
    image = image.float()
    if not torch.isfinite(image).all():
        raise InvalidInputError("image contains non-finite values")
    return image


def resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    return TF.resize(img, list(size), interpolation=InterpolationMode.BILINEAR, antialias=True).clamp(0, 1)


def normalize(img: torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.norm_mean).view(3, 1, 1)
    std = torch.tensor(cfg.norm_std).view(3, 1, 1)
    return (img - mean) / std


def denormalize(x: torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.norm_mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.norm_std, dtype=x.dtype).view(3, 1, 1)
    return x * std + mean


def _jitter(img, cfg, rng):
    b = rng.uniform(max(0.0, 1 - cfg.jitter_brightness), 1 + cfg.jitter_brightness)
    c = rng.uniform(max(0.0, 1 - cfg.jitter_contrast), 1 + cfg.jitter_contrast)
    s = rng.uniform(max(0.0, 1 - cfg.jitter_saturation), 1 + cfg.jitter_saturation)
    h = rng.uniform(-cfg.jitter_hue, cfg.jitter_hue)
    img = TF.adjust_brightness(img, b)
    img = TF.adjust_contrast(img, c)
    img = TF.adjust_saturation(img, s)
    return TF.adjust_hue(img, h)


def _perspective(img, cfg, rng):
    h, w = img.shape[-2:]
    d = cfg.perspective_distortion
    hw, hh = w // 2, h // 2
    dx, dy = int(d * hw) + 1, int(d * hh) + 1
    tl = [int(rng.integers(0, dx)), int(rng.integers(0, dy))]
    tr = [int(w - 1 - rng.integers(0, dx)), int(rng.integers(0, dy))]
    br = [int(w - 1 - rng.integers(0, dx)), int(h - 1 - rng.integers(0, dy))]
    bl = [int(rng.integers(0, dx)), int(h - 1 - rng.integers(0, dy))]
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return TF.perspective(img, start, [tl, tr, br, bl], interpolation=InterpolationMode.BILINEAR)


def _affine(img, cfg, rng):
    angle = float(rng.uniform(-cfg.affine_degrees, cfg.affine_degrees))
    return TF.affine(img, angle=angle, translate=[0, 0], scale=1.0, shear=[0.0, 0.0],
                     interpolation=InterpolationMode.BILINEAR)


def _blur(img, cfg, rng):
    side = min(img.shape[-2:])
    k = max(3, int(round(0.05 * side)) | 1)
    sigma = float(rng.uniform(*cfg.blur_sigma))
    return TF.gaussian_blur(img, [k, k], [sigma, sigma])


def apply(image, cfg: AugmentConfig, rng: np.random.Generator, counter: AugmentCounter | None = None) -> torch.Tensor:
    """Augment one image once; returns a normalised ``(3, H, W)`` float tensor."""
    img = resize(to_float_image(image), cfg.target_size)
    if rng.random() < cfg.jitter_or_perspective_p:
        img = _jitter(img, cfg, rng) if rng.random() < 0.5 else _perspective(img, cfg, rng)
    if rng.random() < cfg.jitter_or_affine_p:
        img = _jitter(img, cfg, rng) if rng.random() < 0.5 else _affine(img, cfg, rng)
    if rng.random() < cfg.hflip_p:
        img = TF.hflip(img)
    if rng.random() < cfg.vflip_p:
        img = TF.vflip(img)
    if "solarize" in cfg.extra and rng.random() < cfg.solarize_p:
        img = torch.where(img >= cfg.solarize_threshold, 1.0 - img, img)
    if "gaussian_blur" in cfg.extra and rng.random() < cfg.blur_p:
        img = _blur(img, cfg, rng)
    if counter is not None:
        counter.increment()
    return normalize(img.clamp(0, 1), cfg)


def preprocess(image, cfg: AugmentConfig) -> torch.Tensor:
    """Deterministic evaluation path: resize and normalise only, not counted."""
    return normalize(resize(to_float_image(image), cfg.target_size), cfg)


@dataclass
class Augmenter:
    """Binds a config to a run-level counter; augments batches sample by sample."""

    cfg: AugmentConfig
    counter: AugmentCounter = field(default_factory=AugmentCounter)

    def __call__(self, image, rng):
        return apply(image, self.cfg, rng, self.counter)

    def batch(self, images, rng) -> torch.Tensor:
        return torch.stack([apply(img, self.cfg, rng, self.counter) for img in images])

    def plain_batch(self, images) -> torch.Tensor:
        return torch.stack([preprocess(img, self.cfg) for img in images])
