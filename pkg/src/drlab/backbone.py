"""Miniature pre-norm vision transformer standing in for the frozen pre-trained model."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import OptimizerConfig, Param, Tensor

log = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_side: int = Field(16, gt=0)
    patch_side: int = Field(4, gt=0)
    embed_dim: int = Field(32, gt=0)
    heads: int = Field(4, gt=0)
    blocks: int = Field(4, ge=2)
    ffn_hidden: int | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.image_side % self.patch_side:
            raise ValueError("image_side must be divisible by patch_side")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 4 * self.embed_dim


def _weight(rng: np.random.Generator, fan_in: int, fan_out: int, name: str, scale: float = 1.0) -> Param:
    std = scale * np.sqrt(2.0 / (fan_in + fan_out))
    return Param(rng.normal(0.0, std, size=(fan_in, fan_out)), name=name)


def _bias(size: int, name: str, value: float = 0.0) -> Param:
    return Param(np.full(size, value), name=name, decay=False)


@dataclass
class BlockParams:
    ln1_gain: Param
    ln1_bias: Param
    w_qkv: Param
    b_qkv: Param
    w_out: Param
    b_out: Param
    ln2_gain: Param
    ln2_bias: Param
    w_fc1: Param
    b_fc1: Param
    w_fc2: Param
    b_fc2: Param

    @classmethod
    def init(cls, cfg: BackboneConfig, rng: np.random.Generator) -> "BlockParams":
        d, h = cfg.embed_dim, cfg.hidden
        return cls(
            ln1_gain=_bias(d, "ln1_gain", 1.0),
            ln1_bias=_bias(d, "ln1_bias"),
            w_qkv=_weight(rng, d, 3 * d, "w_qkv"),
            b_qkv=_bias(3 * d, "b_qkv"),
            w_out=_weight(rng, d, d, "w_out"),
            b_out=_bias(d, "b_out"),
            ln2_gain=_bias(d, "ln2_gain", 1.0),
            ln2_bias=_bias(d, "ln2_bias"),
            w_fc1=_weight(rng, d, h, "w_fc1"),
            b_fc1=_bias(h, "b_fc1"),
            w_fc2=_weight(rng, h, d, "w_fc2"),
            b_fc2=_bias(d, "b_fc2"),
        )

    def named_params(self) -> dict[str, Param]:
        return dict(vars(self))


@dataclass
class BlockTrace:
    output_tokens: Tensor  # (B, N+1, d)
    attention: np.ndarray  # (B, heads, N+1, N+1), post-softmax


@dataclass
class BackboneState:
    config: BackboneConfig
    w_patch: Param
    b_patch: Param
    cls_token: Param
    pos_embed: Param
    blocks: list[BlockParams]
    pretrain_accuracy: float | None = None
    pretrain_losses: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int = 0) -> "BackboneState":
        rng = np.random.default_rng([seed, 0xB0])
        d, p = cfg.embed_dim, cfg.patch_side
        return cls(
            config=cfg,
            w_patch=_weight(rng, p * p, d, "w_patch"),
            b_patch=_bias(d, "b_patch"),
            cls_token=Param(rng.normal(0.0, 0.02, size=d), name="cls_token", decay=False),
            pos_embed=Param(rng.normal(0.0, 0.02, size=(cfg.num_tokens, d)), name="pos_embed", decay=False),
            blocks=[BlockParams.init(cfg, rng) for _ in range(cfg.blocks)],
        )

    def named_params(self) -> dict[str, Param]:
        out = {
            "w_patch": self.w_patch,
            "b_patch": self.b_patch,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for i, block in enumerate(self.blocks):
            for name, p in block.named_params().items():
                out[f"blocks.{i}.{name}"] = p
        return out

    def params(self) -> list[Param]:
        return list(self.named_params().values())

    def freeze(self) -> None:
        for p in self.params():
            p.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())


def to_patches(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, S, S) images -> (B, N, p*p) row-major patch vectors."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1:] != (cfg.image_side, cfg.image_side):
        raise DimensionError(
            f"image shape {images.shape[1:]} does not match configured side {cfg.image_side}"
        )
    b, s, p = images.shape[0], cfg.image_side, cfg.patch_side
    g = s // p
    patches = images.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4)
    return patches.reshape(b, g * g, p * p)


def patch_embed(images, state: BackboneState) -> Tensor:
    cfg = state.config
    patches = Tensor((to_patches(images, cfg) - PIXEL_MEAN) / PIXEL_STD)
    tokens = patches @ state.w_patch + state.b_patch
    cls = Tensor(np.zeros((tokens.shape[0], 1, cfg.embed_dim))) + state.cls_token
    return T.concat([cls, tokens], axis=1) + state.pos_embed


def block_forward(tokens: Tensor, block: BlockParams, heads: int) -> BlockTrace:
    b, n, d = tokens.shape
    if block.w_qkv.shape[0] != d:
        raise DimensionError(f"token width {d} does not match block width {block.w_qkv.shape[0]}")
    dh = d // heads
    x = T.layer_norm(tokens, block.ln1_gain, block.ln1_bias)
    qkv = (x @ block.w_qkv + block.b_qkv).reshape(b, n, 3, heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, H, N, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = T.softmax((q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    tokens = tokens + (mixed @ block.w_out + block.b_out)
    y = T.layer_norm(tokens, block.ln2_gain, block.ln2_bias)
    y = T.gelu(y @ block.w_fc1 + block.b_fc1) @ block.w_fc2 + block.b_fc2
    return BlockTrace(output_tokens=tokens + y, attention=attn.data)


def backbone_forward(images, state: BackboneState) -> tuple[Tensor, list[BlockTrace]]:
    """Run every block; returns the final class-token feature (B, d) and all traces."""
    tokens = patch_embed(images, state)
    traces = []
    for block in state.blocks:
        trace = block_forward(tokens, block, state.config.heads)
        traces.append(trace)
        tokens = trace.output_tokens
    return tokens[:, 0, :], traces


def params_checksum(params) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


def pretrain_backbone(
    images: np.ndarray,
    labels: np.ndarray,
    config: BackboneConfig,
    optimizer: OptimizerConfig,
    seed: int = 0,
) -> BackboneState:
    """Supervised training on the base classes with a throwaway linear head, then freeze."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ConfigurationError("pretraining dataset is empty")
    classes = np.unique(labels)
    index = {c: i for i, c in enumerate(classes.tolist())}
    y = np.array([index[c] for c in labels.tolist()])
    state = BackboneState.init(config, seed)
    rng = np.random.default_rng([seed, 0xB1])
    head_w = _weight(rng, config.embed_dim, len(classes), "head_w")
    head_b = _bias(len(classes), "head_b")
    ln_gain, ln_bias = _bias(config.embed_dim, "head_ln_gain", 1.0), _bias(config.embed_dim, "head_ln_bias")
    params = state.params() + [head_w, head_b, ln_gain, ln_bias]
    n = len(images)
    shuffle_rng = np.random.default_rng([seed, 0xB2])
    for epoch in range(optimizer.epochs):
        order = shuffle_rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, optimizer.batch_size):
            idx = order[start : start + optimizer.batch_size]
            feats, _ = backbone_forward(images[idx], state)
            logits = T.layer_norm(feats, ln_gain, ln_bias) @ head_w + head_b
            targets = y[idx]
            picked = logits[np.arange(len(idx)), targets]
            loss = (T.logsumexp(logits, axis=-1) - picked).mean()
            loss.backward()
            T.sgd_step(params, optimizer, epoch)
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == targets).sum())
        state.pretrain_losses.append(total / n)
        state.pretrain_accuracy = correct / n
        log.debug("pretrain epoch %d loss %.4f acc %.3f", epoch, total / n, correct / n)
    state.freeze()
    return state
