"""Incremental parallel adapters: per-block adapter + transfer gate, last-block transfer block,
and the single-pass composite forward over all streams.

Stream 0 is the frozen backbone. Stream s >= 1 starts from the shared patch
embedding and, at block l < L, computes

    f_hat = up(gelu(down(f_in)))                 adapter
    f_bar = mix(f_hat)                            attention mode (r_att reuses backbone attention)
    g_in  = (1 - gamma) f_{s-1}^l + gamma f_0^l    gate input
    M     = sigmoid(gate(g_in))
    f_out = fuse(f_bar, g_in, M, ...)             fusion mode

and at block L replaces gating with the transfer block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .backbone import BackboneState, _bias, _weight, block_forward, patch_embed
from .errors import ConfigurationError, ContractViolationError, DimensionError
from .supervision import LogitHead
from .tensor import Param, Tensor

UP_INIT_SCALE = 0.1


class FusionMode(str, Enum):
    SUM = "sum"
    GATE_PART = "gate_part"
    GATE_ADAPT = "gate_adapt"
    GATE_EXTRA = "gate_extra"


class AttentionMode(str, Enum):
    N_ATT = "n_att"
    S_ATT = "s_att"
    R_ATT = "r_att"


@dataclass
class AdapterParams:
    w_down: Param  # (d, r)
    b_down: Param
    w_up: Param  # (r, d)
    b_up: Param

    @classmethod
    def init(cls, d: int, r: int, rng: np.random.Generator):
        if not 0 < r < d:
            raise ConfigurationError(f"bottleneck width r={r} must satisfy 0 < r < d={d}")
        return cls(
            w_down=_weight(rng, d, r, "w_down"),
            b_down=_bias(r, "b_down"),
            w_up=_weight(rng, r, d, "w_up", UP_INIT_SCALE),
            b_up=_bias(d, "b_up"),
        )

    def named_params(self) -> dict[str, Param]:
        return dict(vars(self))


class GateParams(AdapterParams):
    """Same bottleneck as the adapter; its output goes through a sigmoid."""


@dataclass
class SelfAttentionParams:
    """Query/key projections used only by the ``s_att`` ablation.

    The key side has no bias: it would shift every logit of a row by the same
    amount, which the row softmax cancels, leaving a parameter with zero gradient.
    """

    w_q: Param
    b_q: Param
    w_k: Param

    @classmethod
    def init(cls, d: int, width: int, rng: np.random.Generator) -> "SelfAttentionParams":
        return cls(
            w_q=_weight(rng, d, width, "w_q"),
            b_q=_bias(width, "b_q"),
            w_k=_weight(rng, d, width, "w_k"),
        )

    def named_params(self) -> dict[str, Param]:
        return dict(vars(self))


@dataclass
class TransferBlockParams:
    w_first: Param  # (d, hidden)
    b_first: Param
    w_second: Param  # (hidden, d)
    b_second: Param

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator) -> "TransferBlockParams":
        return cls(
            w_first=_weight(rng, d, hidden, "w_first"),
            b_first=_bias(hidden, "b_first"),
            w_second=_weight(rng, hidden, d, "w_second", UP_INIT_SCALE),
            b_second=_bias(d, "b_second"),
        )

    def named_params(self) -> dict[str, Param]:
        return dict(vars(self))


@dataclass
class StageBlock:
    adapter: AdapterParams
    gate: GateParams | None = None
    extra_gate: GateParams | None = None
    attention: SelfAttentionParams | None = None

    def named_params(self) -> dict[str, Param]:
        out = {}
        for part in ("adapter", "gate", "extra_gate", "attention"):
            sub = getattr(self, part)
            if sub is not None:
                out.update({f"{part}.{k}": v for k, v in sub.named_params().items()})
        return out


@dataclass
class StageModule:
    """One stage's trainable bundle: L-1 adapter/gate blocks, a transfer block and a head."""

    stage: int
    blocks: list[StageBlock]
    transfer: TransferBlockParams
    head: LogitHead | None
    fusion_mode: FusionMode = FusionMode.GATE_ADAPT
    attention_mode: AttentionMode = AttentionMode.R_ATT
    gamma: float = 0.9
    per_head: bool = False
    transfer_attention: SelfAttentionParams | None = None

    @classmethod
    def init(
        cls,
        stage: int,
        embed_dim: int,
        num_blocks: int,
        r: int,
        num_classes: int,
        rng: np.random.Generator,
        fusion_mode=FusionMode.GATE_ADAPT,
        attention_mode=AttentionMode.R_ATT,
        gamma: float = 0.9,
        transfer_hidden: int | None = None,
        per_head: bool = False,
        init_scale: float = 10.0,
    ) -> "StageModule":
        fusion_mode, attention_mode = FusionMode(fusion_mode), AttentionMode(attention_mode)
        check_gamma(gamma)
        d = embed_dim
        s_att = attention_mode is AttentionMode.S_ATT
        blocks = [
            StageBlock(
                adapter=AdapterParams.init(d, r, rng),
                gate=None if fusion_mode is FusionMode.SUM else GateParams.init(d, r, rng),
                extra_gate=GateParams.init(d, r, rng) if fusion_mode is FusionMode.GATE_EXTRA else None,
                attention=SelfAttentionParams.init(d, r, rng) if s_att else None,
            )
            for _ in range(num_blocks - 1)
        ]
        return cls(
            stage=stage,
            blocks=blocks,
            transfer=TransferBlockParams.init(d, transfer_hidden or d, rng),
            head=LogitHead.init(d, num_classes, rng, init_scale) if num_classes else None,
            fusion_mode=fusion_mode,
            attention_mode=attention_mode,
            gamma=gamma,
            per_head=per_head,
            transfer_attention=SelfAttentionParams.init(d, r, rng) if s_att else None,
        )

    def named_params(self, include_head: bool = True) -> dict[str, Param]:
        out = {}
        for i, block in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in block.named_params().items()})
        out.update({f"transfer.{k}": v for k, v in self.transfer.named_params().items()})
        if self.transfer_attention is not None:
            out.update({f"transfer_attention.{k}": v for k, v in self.transfer_attention.named_params().items()})
        if include_head and self.head is not None:
            out.update({f"head.{k}": v for k, v in self.head.named_params().items()})
        return out

    def params(self, include_head: bool = True) -> list[Param]:
        return list(self.named_params(include_head).values())

    def freeze(self) -> None:
        for p in self.params():
            p.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())


def count_trainable(params) -> int:
    return int(sum(p.size for p in params if not p.frozen))


def closed_form_param_count(
    d: int,
    r: int,
    num_blocks: int,
    num_classes: int,
    attention_mode=AttentionMode.R_ATT,
    fusion_mode=FusionMode.GATE_ADAPT,
    transfer_hidden: int | None = None,
) -> int:
    fusion_mode = FusionMode(fusion_mode)
    bottleneck = d * r + r + r * d + d
    per_block = 2 * bottleneck
    if fusion_mode is FusionMode.SUM:
        per_block -= bottleneck
    elif fusion_mode is FusionMode.GATE_EXTRA:
        per_block += bottleneck
    h = transfer_hidden or d
    total = (num_blocks - 1) * per_block + (d * h + h) + (h * d + d)
    if AttentionMode(attention_mode) is AttentionMode.S_ATT:
        total += num_blocks * (2 * d * r + r)
    return total + d * num_classes + 1


# -- per-block operations ---------------------------------------------------------


def check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")


def adapter_forward(f_in, adapter: AdapterParams, activation=T.gelu) -> Tensor:
    f_in = T.as_tensor(f_in)
    if f_in.shape[-1] != adapter.w_down.shape[0]:
        raise DimensionError(f"adapter width {adapter.w_down.shape[0]} vs input {f_in.shape}")
    return activation(f_in @ adapter.w_down + adapter.b_down) @ adapter.w_up + adapter.b_up


def check_row_stochastic(attn: np.ndarray, tol: float = 1e-9) -> None:
    if (attn < 0).any() or not np.allclose(attn.sum(axis=-1), 1.0, rtol=0.0, atol=tol):
        raise ContractViolationError("attention matrix is not row-stochastic")


def reusable_attention_apply(
    f_hat,
    attn,
    mode=AttentionMode.R_ATT,
    self_attention: SelfAttentionParams | None = None,
    per_head: bool = False,
) -> Tensor:
    """Token mixing of adapter features.

    ``attn`` is the backbone's post-softmax attention, shaped (heads, n, n) or
    (B, heads, n, n). ``r_att`` applies its head mean (or, with ``per_head``,
    each head to its own channel group); ``s_att`` computes fresh attention from
    ``f_hat``; ``n_att`` returns the input untouched.
    """
    mode = AttentionMode(mode)
    f_hat = T.as_tensor(f_hat)
    if mode is AttentionMode.N_ATT:
        return f_hat
    if mode is AttentionMode.S_ATT:
        if self_attention is None:
            raise ConfigurationError("s_att needs query/key projections")
        q = f_hat @ self_attention.w_q + self_attention.b_q
        k = f_hat @ self_attention.w_k
        scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
        return T.softmax(scores, axis=-1) @ f_hat
    attn = np.asarray(attn, dtype=np.float64)
    check_row_stochastic(attn)
    if not per_head:
        return Tensor(attn.mean(axis=-3)) @ f_hat
    heads, d = attn.shape[-3], f_hat.shape[-1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible into {heads} head groups")
    lead = f_hat.shape[:-2]
    n = f_hat.shape[-2]
    grouped = f_hat.reshape(*lead, n, heads, d // heads)
    grouped = T.swapaxes(grouped, -3, -2)  # (..., heads, n, d/h)
    mixed = Tensor(attn) @ grouped
    return T.swapaxes(mixed, -3, -2).reshape(*lead, n, d)


def gate_mask(g_in, gate: GateParams) -> Tensor:
    return T.sigmoid(adapter_forward(g_in, gate))


def gate_input(f_prev_stream, f_ptm, gamma: float):
    """(1 - gamma) * previous stream + gamma * backbone; ``None`` previous means stage 1."""
    check_gamma(gamma)
    if f_prev_stream is None or f_prev_stream is f_ptm:
        return T.as_tensor(f_ptm)
    f_prev_stream, f_ptm = T.as_tensor(f_prev_stream), T.as_tensor(f_ptm)
    if f_prev_stream.shape != f_ptm.shape:
        raise DimensionError(f"gate input shapes differ: {f_prev_stream.shape} vs {f_ptm.shape}")
    return f_prev_stream * (1.0 - gamma) + f_ptm * gamma


def fuse(f_bar, g_in, mask, f_prev_raw, f_ptm, mode=FusionMode.GATE_ADAPT, extra_mask=None) -> Tensor:
    mode = FusionMode(mode)
    f_bar, g_in = T.as_tensor(f_bar), T.as_tensor(g_in)
    if mode is FusionMode.SUM:
        return f_bar + g_in
    if mask is None:
        raise ConfigurationError(f"{mode.value} fusion needs a gate mask")
    mask = T.as_tensor(mask)
    if mode is FusionMode.GATE_PART:
        return f_bar + mask * g_in
    if mode is FusionMode.GATE_ADAPT:
        return (1.0 - mask) * f_bar + mask * g_in
    if extra_mask is None:
        raise ConfigurationError("gate_extra fusion needs a second gate")
    extra_mask = T.as_tensor(extra_mask)
    return ((2.0 - mask - extra_mask) * f_bar + mask * T.as_tensor(f_prev_raw) + extra_mask * T.as_tensor(f_ptm)) * 0.5


def transfer_block_forward(
    f_in,
    tb: TransferBlockParams,
    attn_last,
    mode=AttentionMode.R_ATT,
    self_attention: SelfAttentionParams | None = None,
    per_head: bool = False,
) -> Tensor:
    """Token mixing with the backbone's last-block attention, then a residual two-layer MLP."""
    h = reusable_attention_apply(f_in, attn_last, mode, self_attention, per_head)
    return h + T.gelu(h @ tb.w_first + tb.b_first) @ tb.w_second + tb.b_second


# -- streams ----------------------------------------------------------------------


@dataclass
class PtmFeatures:
    """Backbone-side inputs every adapter stream consumes (all constant arrays)."""

    tokens: np.ndarray  # (B, n, d) shared patch embedding
    block_outputs: list[np.ndarray]  # L x (B, n, d)
    attentions: list[np.ndarray]  # L x (B, heads, n, n)

    @property
    def cls(self) -> np.ndarray:
        return self.block_outputs[-1][:, 0, :]

    def take(self, idx) -> "PtmFeatures":
        return PtmFeatures(self.tokens[idx], [b[idx] for b in self.block_outputs], [a[idx] for a in self.attentions])


@dataclass
class StreamOutput:
    block_outputs: list  # L-1 per-block outputs
    final: Tensor  # (B, n, d)

    @property
    def cls(self) -> Tensor:
        return self.final[:, 0, :]


def ptm_features(images, backbone: BackboneState) -> PtmFeatures:
    with T.no_grad():
        tokens = patch_embed(images, backbone)
        x, outputs, attentions = tokens, [], []
        for block in backbone.blocks:
            trace = block_forward(x, block, backbone.config.heads)
            x = trace.output_tokens
            outputs.append(x.data)
            attentions.append(trace.attention)
    return PtmFeatures(tokens=tokens.data, block_outputs=outputs, attentions=attentions)


def stream_forward(module: StageModule, ptm: PtmFeatures, prev_outputs=None) -> StreamOutput:
    """Evaluate one adapter stream given backbone features and the previous stream's
    per-block outputs (``None`` for the first stream, whose predecessor is the backbone)."""
    x = Tensor(ptm.tokens)
    outputs = []
    for l, block in enumerate(module.blocks):
        f_ptm = ptm.block_outputs[l]
        f_prev = None if prev_outputs is None else prev_outputs[l]
        f_hat = adapter_forward(x, block.adapter)
        f_bar = reusable_attention_apply(f_hat, ptm.attentions[l], module.attention_mode, block.attention, module.per_head)
        g_in = gate_input(f_prev, f_ptm, module.gamma)
        mask = None if module.fusion_mode is FusionMode.SUM else gate_mask(g_in, block.gate)
        extra = gate_mask(f_ptm, block.extra_gate) if block.extra_gate is not None else None
        prev_raw = f_ptm if f_prev is None else f_prev
        x = fuse(f_bar, g_in, mask, prev_raw, f_ptm, module.fusion_mode, extra)
        outputs.append(x)
    final = transfer_block_forward(
        x, module.transfer, ptm.attentions[-1], module.attention_mode, module.transfer_attention, module.per_head
    )
    return StreamOutput(outputs, final)


@dataclass
class CompositeOutput:
    features: np.ndarray  # (B, (t+1) d)
    per_stream_cls: list[np.ndarray]
    ptm: PtmFeatures
    stream_outputs: list[StreamOutput] = field(default_factory=list)


def composite_forward(images, backbone: BackboneState, modules: list[StageModule]) -> CompositeOutput:
    """One pass: backbone, then every adapter stream in stage order, each fed by its predecessor."""
    images = np.asarray(images, dtype=np.float64)
    with T.no_grad():
        ptm = ptm_features(images, backbone)
        per_stream = [ptm.cls]
        outputs = []
        prev = None
        for module in modules:
            out = stream_forward(module, ptm, prev)
            outputs.append(out)
            per_stream.append(out.cls.data)
            prev = [o.data for o in out.block_outputs]
    return CompositeOutput(np.concatenate(per_stream, axis=-1), per_stream, ptm, outputs)
