"""Model registry for the two arms, forward taps and the arm checkpoint format.

The registry holds desk-scale stand-ins for the ResNet / ViT families: a
four-block CNN, a small residual network and patch-4 / patch-8 ViTs. Every
model maps ``(B, 3, S, S)`` images to ``(B, head_dim)`` logits through a
linear ``head`` that fine-tuning can swap for a classifier.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
from torch import nn

from cass.errors import ContractError, RegistryError

CHECKPOINT_FORMAT = "cass-arm-v1"
FAMILIES = ("cnn", "vit")
PAIRING_KINDS = {("cnn", "vit"): "cnn_vit", ("vit", "cnn"): "cnn_vit",
                 ("cnn", "cnn"): "cnn_cnn", ("vit", "vit"): "vit_vit"}


@dataclass
class ArmSpec:
    family: str = "cnn"
    variant: str = "micro_cnn"
    head_dim: int = 64
    init: str = "random"  # or "pretrained_file"
    init_path: str | None = None
    image_size: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown family {self.family!r}")
        if self.head_dim < 1:
            raise ContractError("head_dim must be positive")
        if self.init not in ("random", "pretrained_file"):
            raise ContractError(f"unknown init {self.init!r}")
        if self.init == "pretrained_file" and not self.init_path:
            raise ContractError("init='pretrained_file' needs init_path")

    @property
    def param_count(self) -> int:
        return count_params(build_arm(self, seed=0))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# CNNs
# --------------------------------------------------------------------------

def _conv_bn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MicroCNN(nn.Module):
    family = "cnn"

    def __init__(self, head_dim: int, image_size: int = 32, widths=(16, 32, 64, 64)):
        super().__init__()
        self.image_size = image_size
        self.conv1 = nn.Conv2d(3, widths[0], 3, padding=1)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.block2 = _conv_bn(widths[0], widths[1], stride=2)
        self.block3 = _conv_bn(widths[1], widths[2], stride=2)
        self.block4 = _conv_bn(widths[2], widths[3], stride=2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = widths[3]
        self.head = nn.Linear(self.feature_dim, head_dim)

    def forward_features(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        x = self.block4(self.block3(self.block2(x)))
        return self.pool(x).flatten(1)

    def forward(self, x):
        return self.head(self.forward_features(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNetLike(nn.Module):
    """ResNet-18 layout ([2, 2, 2, 2] basic blocks) at reduced width."""

    family = "cnn"

    def __init__(self, head_dim: int, image_size: int = 32, widths=(16, 32, 64, 128), depths=(2, 2, 2, 2)):
        super().__init__()
        self.image_size = image_size
        self.conv1 = nn.Conv2d(3, widths[0], 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        stages, cin = [], widths[0]
        for i, (w, d) in enumerate(zip(widths, depths)):
            blocks = [BasicBlock(cin if j == 0 else w, w, 2 if (i > 0 and j == 0) else 1) for j in range(d)]
            stages.append(nn.Sequential(*blocks))
            cin = w
        self.layers = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = widths[-1]
        self.head = nn.Linear(self.feature_dim, head_dim)

    def forward_features(self, x):
        x = torch.relu(self.bn1(self.conv1(x)))
        return self.pool(self.layers(x)).flatten(1)

    def forward(self, x):
        return self.head(self.forward_features(x))


# --------------------------------------------------------------------------
# Vision Transformer
# --------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ContractError("width must be divisible by the number of heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ViT(nn.Module):
    family = "vit"

    def __init__(self, head_dim: int, image_size: int = 32, patch: int = 4, dim: int = 64,
                 depth: int = 4, heads: int = 4, mlp_ratio: int = 2):
        super().__init__()
        if image_size % patch:
            raise ContractError(f"image size {image_size} not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        self.num_patches = self.grid ** 2
        self.patch_embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.feature_dim = dim
        self.head = nn.Linear(dim, head_dim)

    def tokens(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward_features(self, x, return_attention=False):
        x = self.tokens(x)
        attentions = []
        for blk in self.blocks:
            x, attn = blk(x)
            if return_attention:
                attentions.append(attn.detach())
        feats = self.norm(x)[:, 0]
        return (feats, attentions) if return_attention else feats

    def forward(self, x):
        return self.head(self.forward_features(x))


REGISTRY: dict[str, tuple[str, Callable[..., nn.Module]]] = {
    "micro_cnn": ("cnn", lambda head_dim, image_size: MicroCNN(head_dim, image_size)),
    "resnet_like_18": ("cnn", lambda head_dim, image_size: ResNetLike(head_dim, image_size)),
    "vit_tiny_p4": ("vit", lambda head_dim, image_size: ViT(head_dim, image_size, patch=4)),
    "vit_tiny_p8": ("vit", lambda head_dim, image_size: ViT(head_dim, image_size, patch=8)),
    "vit_mini_p4": ("vit", lambda head_dim, image_size: ViT(head_dim, image_size, patch=4, dim=32, depth=2, heads=2)),
}


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_arm(spec: ArmSpec, seed: int) -> nn.Module:
    """Instantiate ``spec`` with parameters fully determined by ``seed``.

    The global torch RNG is left untouched. With ``init='pretrained_file'``
    the backbone is loaded from an arm checkpoint; the head is kept only if
    its shape matches.
    """
    if spec.variant not in REGISTRY:
        raise RegistryError(f"unknown variant {spec.variant!r}; known: {sorted(REGISTRY)}")
    family, ctor = REGISTRY[spec.variant]
    if family != spec.family:
        raise RegistryError(f"variant {spec.variant!r} belongs to family {family!r}, not {spec.family!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ctor(spec.head_dim, spec.image_size)
    if spec.init == "pretrained_file":
        state = torch.load(spec.init_path, map_location="cpu", weights_only=False)["state_dict"]
        own = model.state_dict()
        compatible = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
        model.load_state_dict(compatible, strict=False)
    model.spec = spec
    model.seed = seed
    return model


@dataclass
class ModelOutput:
    logits: torch.Tensor
    feature_maps: list[tuple[str, torch.Tensor]] = field(default_factory=list)
    attention: list[torch.Tensor] | None = None


def check_images(model: nn.Module, images: torch.Tensor) -> None:
    s = model.image_size
    if images.ndim != 4 or tuple(images.shape[1:]) != (3, s, s):
        raise ContractError(f"expected images of shape (B, 3, {s}, {s}); got {tuple(images.shape)}")


def _snapshot(out):
    if isinstance(out, (tuple, list)):
        return type(out)(_snapshot(o) for o in out)
    return out.detach().clone()


def forward(model: nn.Module, images: torch.Tensor, feature_layers=(), attention: bool = False) -> ModelOutput:
    """Run ``model`` and optionally capture intermediate activations.

    ``feature_layers`` are names from ``model.named_modules()`` (e.g.
    ``"conv1"``); their outputs are captured with forward hooks, which never
    alter the computation. ``attention=True`` returns per-layer attention
    weights ``(B, heads, tokens, tokens)`` and is only valid for ViTs.
    """
    check_images(model, images)
    if attention and model.family != "vit":
        raise ContractError("attention taps are only available on vit-family arms")
    modules = dict(model.named_modules())
    missing = [name for name in feature_layers if name not in modules]
    if missing:
        raise ContractError(f"unknown layers {missing}")
    captured: dict[str, torch.Tensor] = {}
    handles = [
        modules[name].register_forward_hook(
            lambda _m, _i, out, name=name: captured.__setitem__(name, _snapshot(out)))
        for name in feature_layers
    ]
    try:
        if attention:
            feats, attn = model.forward_features(images, return_attention=True)
            logits = model.head(feats)
        else:
            logits, attn = model(images), None
    finally:
        for h in handles:
            h.remove()
    return ModelOutput(logits, [(name, captured[name]) for name in feature_layers], attn)


@dataclass
class ArmPair:
    spec_a: ArmSpec
    spec_b: ArmSpec
    model_a: nn.Module
    model_b: nn.Module

    @property
    def pairing_kind(self) -> str:
        return PAIRING_KINDS[(self.spec_a.family, self.spec_b.family)]

    @property
    def models(self):
        return self.model_a, self.model_b


def arm_seeds(seed: int) -> tuple[int, int]:
    return seed, seed + 7919


def pair_arms(a: ArmSpec, b: ArmSpec, seed: int) -> ArmPair:
    """Build both arms with independent parameters (distinct derived seeds)."""
    if a.head_dim != b.head_dim:
        raise ContractError(f"head_dim mismatch: {a.head_dim} vs {b.head_dim}")
    sa, sb = arm_seeds(seed)
    return ArmPair(a, b, build_arm(a, sa), build_arm(b, sb))


def shared_parameters(m1: nn.Module, m2: nn.Module) -> set[int]:
    ids = {id(p) for p in m1.parameters()}
    ids |= {id(p.untyped_storage()) for p in m1.parameters()}
    other = {id(p) for p in m2.parameters()} | {id(p.untyped_storage()) for p in m2.parameters()}
    return ids & other


def replace_head(model: nn.Module, out_dim: int, seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.head = nn.Linear(model.feature_dim, out_dim)
    return model


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: nn.Module, path, *, epoch: int = 0, swa: bool = False, extra: dict | None = None) -> Path:
    """Write one arm as a single archive: state dict + metadata record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": CHECKPOINT_FORMAT, "spec": model.spec.to_dict(), "seed": model.seed,
            "epoch": epoch, "swa": swa, "head_out": model.head.out_features}
    if extra:
        meta.update(extra)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({"meta": meta, "state_dict": state}, path)
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    meta = blob["meta"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not an arm checkpoint")
    spec = ArmSpec(**{**meta["spec"], "init": "random", "init_path": None})
    model = build_arm(spec, meta["seed"])
    if meta["head_out"] != spec.head_dim:
        replace_head(model, meta["head_out"], 0)
    model.load_state_dict(blob["state_dict"])
    model.spec = ArmSpec(**meta["spec"])
    return model, meta


def state_digest(model: nn.Module) -> str:
    """Stable hash of all parameters and buffers, for bitwise comparisons."""
    import hashlib
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
