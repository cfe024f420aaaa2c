"""Pre-norm ViT encoder with a masked-token head and a classification head."""

from __future__ import annotations

import io
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._io import FormatError, atomic_write, check_magic, pack_tensor, pack_u32, read_tensor, read_u32
from .resample import bilinear_resize
from .patches import MaskPlan, PatchSequence, apply_mask, patchify_batch
from .tensor import (
    DimensionError,
    Tensor,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

__all__ = [
    "ModelConfig",
    "ModelState",
    "DESK_CONFIG",
    "VIT_BASE_CONFIG",
    "init_model",
    "embed",
    "embed_batch",
    "encoder_forward",
    "mim_logits",
    "classify",
    "attach_classifier",
    "resize_position_embeddings",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"MIMS"
VERSION = 1
LN_EPS = 1e-6
INIT_STD = 0.02

_LAYER_PARAMS = (
    "ln1_g",
    "ln1_b",
    "qkv_w",
    "qkv_b",
    "proj_w",
    "proj_b",
    "ln2_g",
    "ln2_b",
    "fc1_w",
    "fc1_b",
    "fc2_w",
    "fc2_b",
)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    patch_size: int = 4
    image_size: int = 32
    vocab_size: int = 64
    num_classes: int = 10
    mlp_ratio: int = 4
    channels: int = 3

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise DimensionError(f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}")
        for name, value in asdict(self).items():
            if value < (0 if name == "layers" else 1):
                raise ValueError(f"{name} must be positive, got {value}")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_patches(self) -> int:
        g = self.image_size // self.patch_size
        return g * g

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


DESK_CONFIG = ModelConfig()
VIT_BASE_CONFIG = ModelConfig(
    layers=12, hidden=768, heads=12, patch_size=16, image_size=224, vocab_size=8192, num_classes=1000
)


class ModelState:
    """Named parameter tensors in checkpoint order plus the config they realise."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})


def param_names(config: ModelConfig) -> list[str]:
    names = ["patch_embed", "pos_embed", "mask_embed"]
    for i in range(config.layers):
        names += [f"blocks.{i}.{n}" for n in _LAYER_PARAMS]
    names += ["mim_w", "mim_b", "cls_w", "cls_b"]
    return names


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_model(config: ModelConfig, seed: int = 0) -> ModelState:
    """Truncated-normal weights (std 0.02); zero biases, position and mask embeddings."""
    rng = np.random.default_rng(seed)
    shapes = init_shapes(config)
    params: dict[str, Tensor] = {}
    for name in param_names(config):
        short = name.rsplit(".", 1)[-1]
        shape = shapes[name]
        if short.endswith("_g"):
            data = np.ones(shape)
        elif short in ("patch_embed",) or short.endswith("_w"):
            data = _trunc_normal(rng, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return ModelState(config, params)


def attach_classifier(state: ModelState, num_classes: int, seed: int = 0) -> ModelState:
    """Replace the classification head with a freshly initialised one of ``num_classes`` outputs."""
    rng = np.random.default_rng(seed)
    config = replace(state.config, num_classes=num_classes)
    params = dict(state.params)
    params["cls_w"] = Tensor(_trunc_normal(rng, (config.hidden, num_classes)), requires_grad=True)
    params["cls_b"] = Tensor(np.zeros(num_classes), requires_grad=True)
    return ModelState(config, params)


# -- forward pass ----------------------------------------------------------------
def embed_batch(patches: np.ndarray, mask: np.ndarray | None, state: ModelState) -> Tensor:
    """(..., d, P*P*C) patches -> (..., d, D) embeddings.

    Row k is ``E @ patch_k``, replaced by the mask embedding where ``mask`` is
    set, plus ``E_pos[k]``.
    """
    pos = state["pos_embed"]
    if patches.shape[-2] != pos.shape[0]:
        raise DimensionError(f"{patches.shape[-2]} patches but position embedding has {pos.shape[0]} rows")
    x = matmul(Tensor(patches), state["patch_embed"].T)
    if mask is not None:
        x = apply_mask(x, mask, state["mask_embed"])
    return x + pos


def embed(patch_seq: PatchSequence, plan: MaskPlan | None, state: ModelState) -> Tensor:
    d = patch_seq.num_patches
    mask = None if plan is None else _plan_mask(plan, d)
    return embed_batch(patch_seq.patches, mask, state)


def _plan_mask(plan: MaskPlan, d: int) -> np.ndarray:
    if plan.masked and max(plan.masked) >= d:
        raise IndexError(f"mask index {max(plan.masked)} out of range for {d} patches")
    return plan.as_bool(d)


def _attention(x: Tensor, state: ModelState, prefix: str, record: list | None) -> Tensor:
    cfg = state.config
    *lead, d, D = x.shape
    h = cfg.heads
    dh = D // h
    qkv = matmul(x, state[prefix + "qkv_w"]) + state[prefix + "qkv_b"]
    qkv = qkv.reshape(*lead, d, 3, h, dh)
    n = len(lead)
    # -> (3, *lead, h, d, dh)
    qkv = qkv.transpose(n + 1, *range(n), n + 2, n, n + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, k.transpose(*range(n + 1), n + 2, n + 1)) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    if record is not None:
        record.append(weights.data)
    out = matmul(weights, v)  # (*lead, h, d, dh)
    out = out.transpose(*range(n), n + 1, n, n + 2).reshape(*lead, d, D)
    return matmul(out, state[prefix + "proj_w"]) + state[prefix + "proj_b"]


def encoder_forward(embedded: Tensor, state: ModelState, attention_record: list | None = None) -> Tensor:
    """Run the L pre-norm blocks: x + attn(LN(x)), then x + mlp(LN(x))."""
    x = embedded
    for i in range(state.config.layers):
        p = f"blocks.{i}."
        y = layer_norm(x, state[p + "ln1_g"], state[p + "ln1_b"], LN_EPS)
        x = x + _attention(y, state, p, attention_record)
        y = layer_norm(x, state[p + "ln2_g"], state[p + "ln2_b"], LN_EPS)
        y = gelu(matmul(y, state[p + "fc1_w"]) + state[p + "fc1_b"])
        x = x + (matmul(y, state[p + "fc2_w"]) + state[p + "fc2_b"])
    return x


def mim_logits(hidden: Tensor, plan: MaskPlan | np.ndarray, state: ModelState) -> Tensor:
    """Vocabulary logits for masked positions only, in ascending index order.

    ``hidden`` is d x D with a MaskPlan, or B x d x D with a boolean (B, d)
    mask; batched rows come out image by image.
    """
    d, D = hidden.shape[-2:]
    if isinstance(plan, MaskPlan):
        mask = _plan_mask(plan, d)
    else:
        mask = np.asarray(plan, dtype=bool)
    if mask.shape != hidden.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match hidden {hidden.shape[:-1]}")
    if not mask.any():
        raise ValueError("mim_logits needs at least one masked position")
    rows = np.flatnonzero(mask.reshape(-1))
    selected = hidden.reshape(-1, D)[rows]
    return matmul(selected, state["mim_w"]) + state["mim_b"]


def classify(hidden: Tensor, state: ModelState) -> Tensor:
    """Mean-pool over positions, then the affine classification head."""
    pooled = hidden.mean(axis=-2)
    if hidden.ndim == 2:
        pooled = pooled.reshape(1, -1)
        return (matmul(pooled, state["cls_w"]) + state["cls_b"]).reshape(-1)
    return matmul(pooled, state["cls_w"]) + state["cls_b"]


def forward_classify(images: np.ndarray, state: ModelState) -> Tensor:
    """(B, H, W, C) images at the model's resolution -> (B, K) logits."""
    patches = patchify_batch(images, state.config.patch_size)
    return classify(encoder_forward(embed_batch(patches, None, state), state), state)


# -- resolution change -------------------------------------------------------------
def resize_position_embeddings(state: ModelState, new_image_size: int) -> ModelState:
    """Interpolate E_pos onto the patch grid of ``new_image_size``.

    Returns ``state`` itself when the size is unchanged.
    """
    cfg = state.config
    if new_image_size % cfg.patch_size:
        raise DimensionError(f"image size {new_image_size} is not divisible by patch size {cfg.patch_size}")
    if new_image_size == cfg.image_size:
        return state
    r, c = cfg.grid
    g = new_image_size // cfg.patch_size
    old = state["pos_embed"].data.reshape(r, c, cfg.hidden)
    new = bilinear_resize(old, g, g).reshape(g * g, cfg.hidden)
    params = dict(state.params)
    params["pos_embed"] = Tensor(new, requires_grad=True)
    return ModelState(replace(cfg, image_size=new_image_size), params)


# -- checkpoint format --------------------------------------------------------------
_HEADER_FIELDS = ("layers", "hidden", "heads", "patch_size", "image_size", "vocab_size", "num_classes")


def checkpoint_to_bytes(state: ModelState) -> bytes:
    cfg = state.config
    out = [MAGIC, pack_u32(VERSION), pack_u32(*(getattr(cfg, f) for f in _HEADER_FIELDS))]
    for name in param_names(cfg):
        out.append(pack_tensor(state[name].data))
    return b"".join(out)


def checkpoint_from_bytes(payload: bytes) -> ModelState:
    fh = io.BytesIO(payload)
    check_magic(fh, MAGIC)
    (version,) = read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = dict(zip(_HEADER_FIELDS, read_u32(fh, len(_HEADER_FIELDS))))
    arrays = []
    while True:
        if not fh.read(1):
            break
        fh.seek(-1, io.SEEK_CUR)
        arrays.append(read_tensor(fh))
    # channels and mlp_ratio are implied by the patch embedding and first MLP shapes.
    p = header["patch_size"]
    channels = arrays[0].shape[1] // (p * p)
    mlp_ratio = arrays[3 + 8].shape[1] // header["hidden"] if header["layers"] else 4
    cfg = ModelConfig(**header, mlp_ratio=mlp_ratio, channels=channels)
    names = param_names(cfg)
    if len(names) != len(arrays):
        raise FormatError(f"expected {len(names)} tensors, found {len(arrays)}")
    params = {n: Tensor(a, requires_grad=True) for n, a in zip(names, arrays)}
    expected = init_shapes(cfg)
    for n, t in params.items():
        if t.shape != expected[n]:
            raise FormatError(f"tensor {n} has shape {t.shape}, expected {expected[n]}")
    return ModelState(cfg, params)


def init_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, m = cfg.hidden, cfg.hidden * cfg.mlp_ratio
    shapes = {
        "patch_embed": (D, cfg.patch_dim),
        "pos_embed": (cfg.num_patches, D),
        "mask_embed": (D,),
        "mim_w": (D, cfg.vocab_size),
        "mim_b": (cfg.vocab_size,),
        "cls_w": (D, cfg.num_classes),
        "cls_b": (cfg.num_classes,),
    }
    per_layer = dict(
        ln1_g=(D,), ln1_b=(D,), qkv_w=(D, 3 * D), qkv_b=(3 * D,), proj_w=(D, D), proj_b=(D,),
        ln2_g=(D,), ln2_b=(D,), fc1_w=(D, m), fc1_b=(m,), fc2_w=(m, D), fc2_b=(D,),
    )  # fmt: skip
    for i in range(cfg.layers):
        for k, v in per_layer.items():
            shapes[f"blocks.{i}.{k}"] = v
    return shapes


def save_checkpoint(state: ModelState, path: str | os.PathLike) -> None:
    atomic_write(path, checkpoint_to_bytes(state))


def load_checkpoint(path: str | os.PathLike) -> ModelState:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
