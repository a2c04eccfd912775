"""Finite-difference sweep over every trainable parameter group of a small network."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, BackboneState
from .engine import IncrementalState
from .ipa import StageModule, composite_forward, stream_forward
from .supervision import DasConfig, LossKind, total_loss
from .tensor import finite_difference_check

MINI_BACKBONE = BackboneConfig(image_side=8, patch_side=4, embed_dim=8, heads=2, blocks=3)
PERTURBATION = 0.2
HEAD_SCALE = 3.0
GROUPS = ("adapter", "gate", "extra_gate", "attention", "transfer", "head.w", "head.rho")


@dataclass
class GradcheckResult:
    loss: str
    alpha: float
    fusion_mode: str
    attention_mode: str
    group: str
    max_rel_error: float


def _group_of(name: str) -> str:
    if name.startswith("head."):
        return name
    if name.startswith("transfer"):
        return "transfer"
    return name.split(".")[2]


def mini_network(
    seed: int = 0,
    fusion_mode: str = "gate_adapt",
    attention_mode: str = "r_att",
    num_classes: int = 3,
    batch: int = 16,
):
    """Randomly initialised backbone, one sealed stream and a trainable second stream.

    Stream parameters keep their regular initialisation plus a Gaussian
    perturbation so biases are non-zero; the backbone is left unperturbed and
    pixels stay mid-range so that gate and GELU units are not saturated.
    The head scale is kept small to lower the round-off floor of the loss.
    """
    rng = np.random.default_rng([seed, 0x6C])
    cfg = MINI_BACKBONE
    backbone = BackboneState.init(cfg, seed)
    backbone.freeze()
    modules = []
    for stage in (1, 2):
        m = StageModule.init(stage, cfg.embed_dim, cfg.blocks, 4, num_classes, rng, fusion_mode, attention_mode, 0.9)
        for p in m.params():
            p.data = np.asarray(p.data + rng.normal(0.0, PERTURBATION, size=p.shape))
        m.head.rho.data = np.array(np.log(HEAD_SCALE))
        modules.append(m)
    modules[0].freeze()
    state = IncrementalState(backbone, streams=[modules[0]])
    images = rng.uniform(0.25, 0.75, size=(batch, cfg.image_side, cfg.image_side))
    targets = rng.integers(0, num_classes, size=batch)
    return state, modules[1], images, targets


def check_network(
    loss: str = "das",
    alpha: float = 0.5,
    fusion_mode: str = "gate_adapt",
    attention_mode: str = "r_att",
    seed: int = 0,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> list[GradcheckResult]:
    state, module, images, targets = mini_network(seed, fusion_mode, attention_mode)
    composite = composite_forward(images, state.backbone, state.streams)
    ptm = composite.ptm
    prev = [o.data for o in composite.stream_outputs[-1].block_outputs]
    das = DasConfig(k=1.0, lambda_p=3.0, lambda_n=1.0)

    def loss_fn():
        out = stream_forward(module, ptm, prev)
        total, _ = total_loss(out.cls, ptm.cls, targets, module.head, loss, das, alpha)
        return total

    named = module.named_params()
    results = []
    for group, items in itertools.groupby(sorted(named.items(), key=lambda kv: _group_of(kv[0])), key=lambda kv: _group_of(kv[0])):
        params = [p for _, p in items]
        err = finite_difference_check(loss_fn, params, h=h, floor=floor)
        results.append(GradcheckResult(loss, alpha, fusion_mode, attention_mode, group, err))
    return results


def sweep(seed: int = 0, h: float = 1e-5, full: bool = False, floor: float = 1e-8) -> tuple[list[GradcheckResult], float]:
    """Every loss with and without distillation on the default architecture; ``full`` adds
    every fusion/attention variant with DAS + distillation."""
    started = time.perf_counter()
    results = []
    for loss, alpha in itertools.product([k.value for k in LossKind], (0.0, 0.5)):
        results += check_network(loss, alpha, seed=seed, h=h, floor=floor)
    if full:
        for fusion, attention in itertools.product(("sum", "gate_part", "gate_adapt", "gate_extra"), ("n_att", "s_att", "r_att")):
            results += check_network("das", 0.5, fusion, attention, seed=seed, h=h, floor=floor)
    return results, time.perf_counter() - started
