"""Four independent attention-pooled regressors combined into a total PASI.

Per region: staged conv encoder -> global average pool -> 8K->D embedding
(GELU) -> tanh-gated attention over the image set -> linear head clamped
to [0, 72].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .pasi import PASI_MAX, PASI_MIN, REGIONS, REGION_WEIGHTS, Region

CHECKPOINT_FORMAT = "psonet-npz-1"


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    variant: str = "tiny_conv"
    base_width: int = 16
    input_size: tuple = (64, 64)
    architecture: str = "tiny_conv"
    pretrained_path: Optional[str] = None

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.variant not in ("tiny_conv", "pluggable_pretrained"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ShapeError(f"input size {self.input_size} must be divisible by 32")
        if self.variant == "pluggable_pretrained" and not self.pretrained_path:
            raise ValueError("pluggable_pretrained needs pretrained_path")

    @property
    def stage_dims(self) -> tuple[int, int, int, int]:
        k = self.base_width
        return (k, 2 * k, 4 * k, 8 * k)

    @property
    def feature_dim(self) -> int:
        return 8 * self.base_width

    @property
    def spatial_size(self) -> tuple[int, int]:
        return (self.input_size[0] // 32, self.input_size[1] // 32)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 768
    attention_dim: int = 128
    share_encoder: bool = False
    clamp_output: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["input_size"] = list(self.encoder.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        return cls(encoder=enc, **d)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, x.shape[-1:], self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class ConvStage(nn.Module):
    """Optional norm + 2x2 stride-2 patch-merge downsample, then a residual 3x3 conv + GELU.

    The non-overlapping downsample plus the identity path keep each output
    cell tied to its own image patch, which the saliency maps rely on.
    """

    def __init__(self, in_ch: int, out_ch: int, downsample: bool):
        super().__init__()
        self.norm = ChannelNorm(in_ch) if downsample else None
        self.down = nn.Conv2d(in_ch, out_ch, 2, stride=2) if downsample else None
        self.conv = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        if self.down is not None:
            x = self.norm(x)
            h, w = x.shape[-2:]
            if h % 2 or w % 2:
                x = F.pad(x, (0, w % 2, 0, h % 2))
            x = self.down(x)
        return x + F.gelu(self.conv(x))


class TinyConvEncoder(nn.Module):
    """Patchify stem (stride 4) plus four conv stages at strides 4, 8, 16, 32.

    Works on any input of at least 4x4 (odd intermediate sides are padded);
    exact H/32 x W/32 output geometry needs sides divisible by 32.
    """

    def __init__(self, base_width: int = 16):
        super().__init__()
        dims = (base_width, 2 * base_width, 4 * base_width, 8 * base_width)
        self.stem = nn.Conv2d(3, dims[0], 4, stride=4)
        self.stem_norm = ChannelNorm(dims[0])
        self.stage0 = ConvStage(dims[0], dims[0], downsample=False)
        self.stage1 = ConvStage(dims[0], dims[1], downsample=True)
        self.stage2 = ConvStage(dims[1], dims[2], downsample=True)
        self.stage3 = ConvStage(dims[2], dims[3], downsample=True)
        self.out_channels = dims[3]

    def forward(self, x):
        x = self.stem_norm(self.stem(x))
        for stage in (self.stage0, self.stage1, self.stage2, self.stage3):
            x = stage(x)
        return x


ENCODER_FACTORIES: dict[str, Callable[[EncoderConfig], nn.Module]] = {
    "tiny_conv": lambda cfg: TinyConvEncoder(cfg.base_width),
}


def register_encoder(name: str, factory: Callable[[EncoderConfig], nn.Module]) -> None:
    """Make a third-party encoder available as ``EncoderConfig.architecture``.

    The module must map (B, 3, H, W) to (B, 8K, H/32, W/32).
    """
    ENCODER_FACTORIES[name] = factory


class AttentionOutput(NamedTuple):
    weights: torch.Tensor  # (B, N)
    pooled: torch.Tensor  # (B, D)
    logits: torch.Tensor  # (B, N), -inf on masked slots


class AttentionPool(nn.Module):
    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, embeddings, mask=None) -> AttentionOutput:
        return attention_pool(embeddings, mask, self)


def attention_pool(embeddings: torch.Tensor, mask: Optional[torch.Tensor], params: AttentionPool) -> AttentionOutput:
    """Softmax attention over the set axis; masked slots get weight exactly 0.

    ``embeddings`` is (B, N, D) or (N, D); ``mask`` is boolean with the
    matching leading shape (True = valid).
    """
    squeeze = embeddings.dim() == 2
    if squeeze:
        embeddings = embeddings.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if mask is None:
        mask = torch.ones(embeddings.shape[:2], dtype=torch.bool, device=embeddings.device)
    mask = mask.to(torch.bool)
    if mask.shape != embeddings.shape[:2]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match set shape {tuple(embeddings.shape[:2])}")
    if not bool(mask.any(dim=1).all()):
        raise ValueError("attention needs at least one valid slot per set; got a fully masked set")
    logits = params.fc2(torch.tanh(params.fc1(embeddings))).squeeze(-1)
    logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits, dim=1)
    pooled = torch.einsum("bn,bnd->bd", weights, embeddings)
    out = AttentionOutput(weights, pooled, logits)
    if squeeze:
        out = AttentionOutput(*(t.squeeze(0) for t in out))
    return out


class RegionalForward(NamedTuple):
    score: torch.Tensor  # (B,), clamped
    attention: AttentionOutput
    spatial: Optional[torch.Tensor] = None  # (B, N, 8K, h, w) when requested
    raw: Optional[torch.Tensor] = None  # (B,), head output before the clamp


class RegionalModel(nn.Module):
    def __init__(self, config: ModelConfig, region: Region | str, encoder: Optional[nn.Module] = None):
        super().__init__()
        self.region_code = Region.parse(region).value
        self.config = config
        self.encoder = encoder if encoder is not None else build_encoder(config.encoder)
        self.embed = nn.Linear(config.encoder.feature_dim, config.embed_dim)
        self.attention = AttentionPool(config.embed_dim, config.attention_dim)
        self.head = nn.Linear(config.embed_dim, 1)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(M, 3, H, W) -> final-stage spatial map (M, 8K, h, w)."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (M, 3, H, W) images, got {tuple(images.shape)}")
        return self.encoder(images)

    def embed_features(self, spatial: torch.Tensor) -> torch.Tensor:
        pooled = spatial.mean(dim=(-2, -1))
        if pooled.shape[-1] != self.embed.in_features:
            raise ShapeError(f"feature width {pooled.shape[-1]} != embedding input {self.embed.in_features}")
        return F.gelu(self.embed(pooled))

    def score_head(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.clamp(self.head(pooled).squeeze(-1))

    def clamp(self, raw: torch.Tensor) -> torch.Tensor:
        return raw.clamp(PASI_MIN, PASI_MAX) if self.config.clamp_output else raw

    def forward(self, images: torch.Tensor, mask: Optional[torch.Tensor] = None, return_spatial: bool = False):
        """Score sets of images: ``images`` (B, N, 3, H, W), ``mask`` (B, N)."""
        if images.dim() != 5:
            raise ShapeError(f"expected (B, N, 3, H, W) sets, got {tuple(images.shape)}")
        b, n = images.shape[:2]
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool, device=images.device)
        mask = mask.to(torch.bool)
        flat = images.reshape(b * n, *images.shape[2:])
        flat_mask = mask.reshape(-1)
        spatial_valid = self.encode(flat[flat_mask])
        emb_valid = self.embed_features(spatial_valid)
        emb = emb_valid.new_zeros(b * n, emb_valid.shape[-1])
        emb = emb.index_copy(0, flat_mask.nonzero().squeeze(1), emb_valid).reshape(b, n, -1)
        att = attention_pool(emb, mask, self.attention)
        raw = self.head(att.pooled).squeeze(-1)
        score = self.clamp(raw)
        spatial = None
        if return_spatial:
            spatial = spatial_valid.new_zeros(b * n, *spatial_valid.shape[1:])
            spatial = spatial.index_copy(0, flat_mask.nonzero().squeeze(1), spatial_valid)
            spatial = spatial.reshape(b, n, *spatial_valid.shape[1:])
        return RegionalForward(score, att, spatial, raw)


class PsoNet(nn.Module):
    """One :class:`RegionalModel` per body region plus the fixed weighted sum."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        shared = build_encoder(config.encoder) if config.share_encoder else None
        self.region = nn.ModuleDict({r.value: RegionalModel(config, r, encoder=shared) for r in REGIONS})
        self.register_buffer(
            "region_weights", torch.tensor([float(REGION_WEIGHTS[r]) for r in REGIONS]), persistent=False
        )

    def forward(self, batch: dict, raw: bool = False):
        """``batch`` maps region code -> (images (B, N, 3, H, W), mask (B, N)).

        Returns (regional scores (B, 4) in HN, UE, LE, TR order, totals (B,),
        per-region :class:`AttentionOutput`). With ``raw=True`` the regional
        scores are the unclamped head outputs.
        """
        scores, attention = [], {}
        for r in REGIONS:
            if r.value not in batch:
                raise KeyError(f"missing image set for region {r.value}")
            images, mask = batch[r.value]
            if tuple(images.shape[-2:]) != self.config.encoder.input_size:
                raise ShapeError(
                    f"{r.value} images are {tuple(images.shape[-2:])}, encoder expects {self.config.encoder.input_size}"
                )
            out = self.region[r.value](images, mask)
            scores.append(out.raw if raw else out.score)
            attention[r.value] = out.attention
        regional = torch.stack(scores, dim=1)
        total = regional @ self.region_weights.to(regional.dtype)
        return regional, total, attention


def build_encoder(config: EncoderConfig) -> nn.Module:
    try:
        factory = ENCODER_FACTORIES[config.architecture]
    except KeyError:
        raise ValueError(f"no encoder registered under {config.architecture!r}") from None
    return factory(config)


def _fan_in(weight: torch.Tensor) -> int:
    return int(np.prod(weight.shape[1:]))


@torch.no_grad()
def reset_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform init from a private generator.

    Convolutions use the He bound sqrt(6 / fan_in); linear layers and all
    biases use 1 / sqrt(fan_in).
    """
    gen = torch.Generator().manual_seed(int(seed))
    seen = set()
    for name, module in model.named_modules():
        if id(module) in seen or not isinstance(module, (nn.Conv2d, nn.Linear)):
            continue
        seen.add(id(module))
        fan_in = _fan_in(module.weight)
        bound = math.sqrt(6.0 / fan_in) if isinstance(module, nn.Conv2d) else 1.0 / math.sqrt(fan_in)
        module.weight.copy_(torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen))
        if module.bias is not None:
            b = 1.0 / math.sqrt(fan_in)
            module.bias.copy_(torch.empty_like(module.bias).uniform_(-b, b, generator=gen))


def init_params(config: ModelConfig, seed: int = 0) -> PsoNet:
    """Build a freshly initialised network; deterministic in ``seed``.

    For the ``pluggable_pretrained`` variant the encoder weights are then
    overwritten from ``config.encoder.pretrained_path``.
    """
    model = PsoNet(config)
    reset_parameters(model, seed)
    if config.encoder.variant == "pluggable_pretrained":
        for r in REGIONS:
            load_encoder_weights(model.region[r.value].encoder, config.encoder.pretrained_path)
    return model


# ---------------------------------------------------------------- checkpoints

def _encode_header(header: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_arrays(path: str | Path, arrays: dict, header: dict) -> Path:
    """Write named arrays plus a JSON header into one ``.npz`` archive.

    Floating arrays are stored as little-endian float32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"__header__": _encode_header(dict(header, format=CHECKPOINT_FORMAT))}
    for name, arr in arrays.items():
        arr = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        payload[name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path: str | Path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if "__header__" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(arrays.pop("__header__").tobytes().decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
    return header, arrays


def model_state(model: PsoNet) -> dict:
    return {name: t for name, t in model.state_dict().items()}


def load_state_into(module: nn.Module, arrays: dict, prefix: str = "") -> None:
    """Copy ``arrays[prefix + name]`` into every parameter, checking shapes."""
    own = module.state_dict()
    for name, tensor in own.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint has no tensor {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {key!r}: checkpoint {tuple(arr.shape)} vs model {tuple(tensor.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype))


def load_encoder_weights(encoder: nn.Module, path: str | Path) -> None:
    """Load encoder weights saved either bare (``stem.weight``) or under a
    region prefix (``region.HN.encoder.stem.weight``)."""
    _, arrays = load_arrays(path)
    first = next(iter(encoder.state_dict()))
    prefix = ""
    if first not in arrays:
        hits = [k for k in arrays if k.endswith(".encoder." + first)]
        if not hits:
            raise CheckpointError(f"{path}: no encoder tensor {first!r}")
        prefix = hits[0][: -len(first)]
    load_state_into(encoder, arrays, prefix)


def save_model(path: str | Path, model: PsoNet, extra: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    arrays = dict(model_state(model))
    arrays.update(extra or {})
    header = {"model_config": model.config.to_dict(), "meta": meta or {}}
    return save_arrays(path, arrays, header)


def load_model(path: str | Path) -> tuple[PsoNet, dict, dict]:
    """Rebuild the network from a checkpoint. Returns (model, header, arrays)."""
    header, arrays = load_arrays(path)
    config = ModelConfig.from_dict(header["model_config"])
    model = PsoNet(config)
    load_state_into(model, arrays)
    return model, header, arrays
