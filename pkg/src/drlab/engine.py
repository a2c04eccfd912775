"""Non-rehearsal stage protocol: train a fresh stream per stage, freeze it, keep prototypes."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneState
from .config import RunConfig
from .datagen import Dataset, StageDataset
from .errors import DegenerateInputError, ProtocolViolationError
from .ipa import (
    CompositeOutput,
    PtmFeatures,
    StageModule,
    closed_form_param_count,
    composite_forward,
    count_trainable,
    ptm_features,
    stream_forward,
)
from .supervision import LogitHead, LossBreakdown, LossKind, compute_logits, total_loss
from .tensor import Param

log = logging.getLogger(__name__)

MEASURED, SYNTHESIZED = "measured", "synthesized"


@dataclass
class IncrementalState:
    backbone: BackboneState
    streams: list[StageModule] = field(default_factory=list)
    current: StageModule | None = None
    class_registry: dict[int, int] = field(default_factory=dict)

    @property
    def stage_index(self) -> int:
        return len(self.streams)

    def forward(self, images, upto: int | None = None) -> CompositeOutput:
        modules = self.streams if upto is None else self.streams[:upto]
        return composite_forward(images, self.backbone, modules)

    def frozen_params(self) -> list[Param]:
        params = self.backbone.params()
        for module in self.streams:
            params.extend(module.params())
        return params

    def classes_of_stage(self, stage: int) -> list[int]:
        return sorted(c for c, s in self.class_registry.items() if s == stage)


def params_digest(params) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


@dataclass
class PrototypeStore:
    segments: dict[int, list[np.ndarray]] = field(default_factory=dict)
    provenance: dict[int, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def classes(self) -> list[int]:
        return sorted(self.segments)

    def num_segments(self, c: int) -> int:
        return len(self.segments.get(c, []))

    def set_segment(self, c: int, stream: int, vector, flag: str = MEASURED) -> None:
        segs = self.segments.setdefault(c, [])
        flags = self.provenance.setdefault(c, [])
        if stream < len(segs):
            segs[stream], flags[stream] = np.asarray(vector, dtype=np.float64), flag
        elif stream == len(segs):
            segs.append(np.asarray(vector, dtype=np.float64))
            flags.append(flag)
        else:
            raise ProtocolViolationError(f"class {c}: segment {stream} set before segment {len(segs)}")

    def vector(self, c: int) -> np.ndarray:
        return np.concatenate(self.segments[c])

    def matrix(self, width_segments: int) -> tuple[list[int], np.ndarray]:
        classes = self.classes
        for c in classes:
            if self.num_segments(c) != width_segments:
                raise ProtocolViolationError(
                    f"class {c} has {self.num_segments(c)} prototype segments, expected {width_segments}"
                )
        if not classes:
            raise ProtocolViolationError("prototype store is empty")
        return classes, np.stack([self.vector(c) for c in classes])


@dataclass
class TrainReport:
    stage: int
    classes: list[int]
    epochs: list[LossBreakdown]
    train_accuracy: float
    per_class_accuracy: dict[int, float]
    wall_clock: float
    trainable_params: int
    closed_form_params: int
    frozen_params: int
    frozen_digest_before: str
    frozen_digest_after: str

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return out


# -- training --------------------------------------------------------------------


def _epoch_mean(parts: list[tuple[int, LossBreakdown]]) -> LossBreakdown:
    n = sum(size for size, _ in parts)
    first = parts[0][1]

    def avg(name):
        return sum(size * getattr(b, name) for size, b in parts) / n

    l_pos, l_neg, l_kd = avg("l_pos"), avg("l_neg"), avg("l_kd")
    return LossBreakdown(
        kind=first.kind,
        l_pos=l_pos,
        l_neg=l_neg,
        l_kd=l_kd,
        total=first.lambda_p * l_pos + first.lambda_n * l_neg + first.alpha * l_kd,
        alpha=first.alpha,
        lambda_p=first.lambda_p,
        lambda_n=first.lambda_n,
    )


def train_stream(
    module: StageModule,
    head: LogitHead,
    ptm: PtmFeatures,
    prev_outputs,
    targets: np.ndarray,
    config: RunConfig,
    rng: np.random.Generator,
    loss: LossKind | str | None = None,
    alpha: float | None = None,
) -> list[LossBreakdown]:
    """Minibatch SGD on one stream against cached backbone/previous-stream features."""
    opt = config.optimizer
    loss = config.loss if loss is None else loss
    alpha = config.alpha if alpha is None else alpha
    params = [p for p in module.params(include_head=False) + list(head.named_params().values()) if not p.frozen]
    n = len(targets)
    history = []
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        parts = []
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            prev = None if prev_outputs is None else [p[idx] for p in prev_outputs]
            out = stream_forward(module, ptm.take(idx), prev)
            total, breakdown = total_loss(
                out.cls, ptm.cls[idx], targets[idx], head, loss, config.das, alpha, config.cosface_margin
            )
            total.backward()
            T.sgd_step(params, opt, epoch)
            parts.append((len(idx), breakdown))
        history.append(_epoch_mean(parts))
    return history


def _head_accuracy(module, head, ptm, prev_outputs, targets, classes):
    with T.no_grad():
        out = stream_forward(module, ptm, prev_outputs)
        pred = compute_logits(out.cls, head).data.argmax(axis=1)
    per_class = {c: float((pred[targets == i] == i).mean()) for i, c in enumerate(classes)}
    return float((pred == targets).mean()), per_class


def run_stage(state: IncrementalState, stage: StageDataset, config: RunConfig) -> TrainReport:
    """Train, then seal, a new stream on ``stage`` data only."""
    if state.current is not None:
        raise ProtocolViolationError("previous stage was not sealed")
    overlap = set(stage.classes) & set(state.class_registry)
    if overlap:
        raise ProtocolViolationError(f"classes {sorted(overlap)} were already learned")
    started = time.perf_counter()
    t = state.stage_index + 1
    previously_frozen = state.frozen_params()
    digest_before = params_digest(previously_frozen)

    images, labels = stage.train.read()
    classes = sorted(set(labels.tolist()))
    index = {c: i for i, c in enumerate(classes)}
    targets = np.array([index[c] for c in labels.tolist()])
    composite = state.forward(images)
    ptm = composite.ptm
    prev = None if not composite.stream_outputs else [o.data for o in composite.stream_outputs[-1].block_outputs]

    rng = np.random.default_rng([config.seed, t, 0x5A])
    cfg = config.backbone
    module = StageModule.init(
        stage=t,
        embed_dim=cfg.embed_dim,
        num_blocks=cfg.blocks,
        r=config.bottleneck,
        num_classes=len(classes),
        rng=rng,
        fusion_mode=config.fusion_mode,
        attention_mode=config.attention_mode,
        gamma=config.gamma,
        transfer_hidden=config.transfer_hidden,
        per_head=config.per_head_attention,
        init_scale=config.init_scale,
    )
    state.current = module
    trainable = count_trainable(module.params())
    history = train_stream(module, module.head, ptm, prev, targets, config, rng)
    accuracy, per_class = _head_accuracy(module, module.head, ptm, prev, targets, classes)

    module.freeze()
    state.streams.append(module)
    state.current = None
    for c in classes:
        state.class_registry[c] = t
    digest_after = params_digest(previously_frozen)
    if digest_after != digest_before:
        raise ProtocolViolationError(f"stage {t}: frozen parameters changed during training")
    return TrainReport(
        stage=t,
        classes=classes,
        epochs=history,
        train_accuracy=accuracy,
        per_class_accuracy=per_class,
        wall_clock=time.perf_counter() - started,
        trainable_params=trainable,
        closed_form_params=closed_form_param_count(
            cfg.embed_dim,
            config.bottleneck,
            cfg.blocks,
            len(classes),
            config.attention_mode,
            config.fusion_mode,
            config.transfer_hidden,
        ),
        frozen_params=int(sum(p.size for p in previously_frozen)),
        frozen_digest_before=digest_before,
        frozen_digest_after=digest_after,
    )


# -- prototypes ------------------------------------------------------------------


def class_means(features: np.ndarray, labels: np.ndarray, classes) -> dict[int, np.ndarray]:
    out = {}
    for c in classes:
        rows = features[labels == c]
        if len(rows) == 0:
            raise DegenerateInputError(f"class {c} has no samples")
        out[c] = rows.mean(axis=0)
    return out


def extract_prototypes(state: IncrementalState, stage: StageDataset, store: PrototypeStore) -> None:
    """Per-stream class-token means for the current classes across streams 0..t."""
    images, labels = stage.train.read()
    composite = state.forward(images)
    for s, feats in enumerate(composite.per_stream_cls):
        for c, mean in class_means(feats, labels, stage.classes).items():
            store.set_segment(c, s, mean, MEASURED)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def synthesis_weights(old_proto: np.ndarray, current_protos: list[np.ndarray], tau: float) -> np.ndarray:
    sims = np.array([_cos(old_proto, p) for p in current_protos]) / tau
    sims = np.exp(sims - sims.max())
    return sims / sims.sum()


def synthesize_old_prototypes(store: PrototypeStore, state: IncrementalState, tau: float = 0.1) -> None:
    """Fill missing newest-stream segments of old classes from current-class prototypes.

    Each old class's segment is the similarity-softmax mixture of current-class
    segments, with similarity measured in the latest stream where both sides
    have measured prototypes.
    """
    t = state.stage_index
    current = state.classes_of_stage(t)
    if not current:
        raise ProtocolViolationError(f"no classes registered for stage {t}")
    for o in store.classes:
        if o in current:
            continue
        for stream in range(store.num_segments(o), t + 1):
            shared = [
                s
                for s in range(min(store.num_segments(o), t + 1))
                if store.provenance[o][s] == MEASURED and all(store.provenance[j][s] == MEASURED for j in current)
            ]
            if not shared:
                raise ProtocolViolationError(f"class {o}: no stream with measured prototypes on both sides")
            s_star = shared[-1]
            weights = synthesis_weights(store.segments[o][s_star], [store.segments[j][s_star] for j in current], tau)
            mixture = sum(w * store.segments[j][stream] for w, j in zip(weights, current))
            store.set_segment(o, stream, mixture, SYNTHESIZED)


def classify_batch(features: np.ndarray, store: PrototypeStore) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Cosine scores against concatenated prototypes; argmax with ties to the lowest class id."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not len(store):
        raise ProtocolViolationError("prototype store is empty")
    classes, protos = store.matrix(store.num_segments(store.classes[-1]))
    if protos.shape[1] != features.shape[1]:
        raise ProtocolViolationError(f"feature width {features.shape[1]} vs prototype width {protos.shape[1]}")
    f_norm = np.linalg.norm(features, axis=1, keepdims=True)
    p_norm = np.linalg.norm(protos, axis=1, keepdims=True)
    if (f_norm == 0).any() or (p_norm == 0).any():
        raise DegenerateInputError("zero-norm feature or prototype")
    scores = (features / f_norm) @ (protos / p_norm).T
    pred = np.asarray(classes)[scores.argmax(axis=1)]
    return pred, scores, classes


def classify(feature, store: PrototypeStore) -> tuple[int, dict[int, float]]:
    pred, scores, classes = classify_batch(feature, store)
    return int(pred[0]), dict(zip(classes, scores[0].tolist()))


def accuracy_after_stage(state: IncrementalState, store: PrototypeStore, test_sets: list[Dataset]) -> float:
    """Top-1 accuracy (percent) over every test sample of the seen stages."""
    data = Dataset.concat(test_sets)
    images, labels = data.read()
    for ds in test_sets:
        ds.access_log.extend(ds.ids.tolist())
    features = state.forward(images).features
    pred, _, _ = classify_batch(features, store)
    return 100.0 * int((pred == labels).sum()) / len(labels)


# -- stability probes ------------------------------------------------------------


def snapshot_streams(state: IncrementalState, images) -> list[np.ndarray]:
    return [f.copy() for f in state.forward(images).per_stream_cls]


def probe_invariance_check(state: IncrementalState, images, snapshot: list[np.ndarray]) -> bool:
    """True iff the snapshotted streams still produce bit-identical class tokens."""
    now = state.forward(images, upto=len(snapshot) - 1).per_stream_cls
    return len(now) == len(snapshot) and all(np.array_equal(a, b) for a, b in zip(snapshot, now))


# -- naive baseline --------------------------------------------------------------


class SequentialFinetune:
    """One adapter stream and one growing cosine head, retrained on each stage with CE.

    Nothing is frozen besides the backbone and no prototypes are kept, so this
    is the forgetting-prone reference the stream protocol is compared against.
    """

    def __init__(self, backbone: BackboneState, config: RunConfig):
        self.backbone = backbone
        self.config = config
        self.module: StageModule | None = None
        self.head: LogitHead | None = None
        self.classes: list[int] = []
        self.stage = 0

    def learn(self, stage: StageDataset) -> list[LossBreakdown]:
        self.stage += 1
        images, labels = stage.train.read()
        new = [c for c in stage.classes if c not in self.classes]
        rng = np.random.default_rng([self.config.seed, self.stage, 0xF7])
        cfg = self.config.backbone
        if self.module is None:
            self.module = StageModule.init(
                1,
                cfg.embed_dim,
                cfg.blocks,
                self.config.bottleneck,
                0,
                rng,
                self.config.fusion_mode,
                self.config.attention_mode,
                self.config.gamma,
                self.config.transfer_hidden,
            )
            self.head = LogitHead.init(cfg.embed_dim, len(new), rng, self.config.init_scale)
        else:
            extra = LogitHead.init(cfg.embed_dim, len(new), rng).w.data
            self.head = LogitHead(Param(np.concatenate([self.head.w.data, extra], axis=1), name="head.w"), self.head.rho)
        self.classes.extend(new)
        index = {c: i for i, c in enumerate(self.classes)}
        targets = np.array([index[c] for c in labels.tolist()])
        ptm = ptm_features(images, self.backbone)
        return train_stream(self.module, self.head, ptm, None, targets, self.config, rng, LossKind.CE, 0.0)

    def accuracy(self, test_sets: list[Dataset]) -> float:
        data = Dataset.concat(test_sets)
        images, labels = data.read()
        with T.no_grad():
            out = stream_forward(self.module, ptm_features(images, self.backbone), None)
            pred = np.asarray(self.classes)[compute_logits(out.cls, self.head).data.argmax(axis=1)]
        return 100.0 * int((pred == labels).sum()) / len(labels)
