"""Residual backbone with per-block gated 1x1 adapter corrections.

Every residual block computes ``x + f(x)`` where f is a 3x3 convolution
(preceded by ReLU, followed by a per-channel affine standing in for batch
norm). An attached adapter bank adds ``sum_k g_k(x) * h_k(x)`` on top of the
pre-activation residual sum: h_k are 1x1 convolutions and g is a softmax
gate over pooled channels, so the combined correction is a per-sample convex
combination of the K expert outputs.

The parameter partition separates the pretrained backbone (theta, frozen
after pretraining) from the task-specific additions (alpha: adapter kernels,
gates and the embedding head).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from adra import autodiff as ad
from adra.errors import ConfigurationError

ALPHA_MODES = ("adra", "finetune", "l2sp", "scratch", "feature-extract")


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple = ((16, 2), (32, 2), (64, 2))
    in_channels: int = 3
    resolution: int = 32
    embedding_dim: int = 64
    class_count: int = 10

    def validate(self):
        if len(self.stages) < 1 or any(b < 1 or c < 1 for c, b in self.stages):
            raise ConfigurationError(f"invalid stage layout {self.stages}")
        if self.embedding_dim < 2:
            raise ConfigurationError("embedding_dim must be >= 2")
        if self.resolution % (2 ** (len(self.stages) - 1)) != 0:
            raise ConfigurationError(
                f"resolution {self.resolution} not divisible by the "
                f"{len(self.stages) - 1} stage transitions")

    def to_json(self) -> str:
        return json.dumps({
            "stages": [list(s) for s in self.stages],
            "in_channels": self.in_channels,
            "resolution": self.resolution,
            "embedding_dim": self.embedding_dim,
            "class_count": self.class_count,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BackboneConfig":
        d = json.loads(text)
        return BackboneConfig(
            stages=tuple(tuple(s) for s in d["stages"]),
            in_channels=d["in_channels"], resolution=d["resolution"],
            embedding_dim=d["embedding_dim"], class_count=d["class_count"])


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class AdapterBank:
    """K 1x1 correction kernels plus a softmax gate over pooled channels."""

    def __init__(self, channels: int, K: int, prefix: str):
        if K < 1:
            raise ConfigurationError(f"adapter bank needs K >= 1, got {K}")
        self.K = K
        self.channels = channels
        self.corrections = [
            ad.Parameter(np.zeros((channels, channels, 1, 1), np.float32),
                         f"{prefix}.adapter{k}")
            for k in range(K)
        ]
        self.gate_weight = ad.Parameter(np.zeros((K, channels), np.float32),
                                        f"{prefix}.gate.weight")
        self.gate_bias = ad.Parameter(np.zeros(K, np.float32), f"{prefix}.gate.bias")

    def parameters(self):
        return [*self.corrections, self.gate_weight, self.gate_bias]


def gate(x: ad.Tensor, bank: AdapterBank) -> ad.Tensor:
    """Per-sample convex weights over the bank's K experts, shape (n, K)."""
    if x.shape[1] != bank.channels:
        raise ad.DimensionError(
            f"gate: input channels {x.shape} vs bank channels {bank.channels}")
    pooled = ad.global_avg_pool(x)
    return ad.softmax(ad.linear(pooled, bank.gate_weight, bank.gate_bias))


class ResidualBlock:
    def __init__(self, channels: int, prefix: str, rng: np.random.Generator):
        fan = channels * 9
        self.channels = channels
        self.kernel = ad.Parameter(
            glorot_uniform((channels, channels, 3, 3), fan, fan, rng), f"{prefix}.kernel")
        self.scale = ad.Parameter(np.ones(channels, np.float32), f"{prefix}.scale")
        self.shift = ad.Parameter(np.zeros(channels, np.float32), f"{prefix}.shift")
        self.bank: Optional[AdapterBank] = None
        self._prefix = prefix

    def add_bank(self, K: int):
        self.bank = AdapterBank(self.channels, K, self._prefix)

    def parameters(self):
        params = [self.kernel, self.scale, self.shift]
        if self.bank is not None:
            params.extend(self.bank.parameters())
        return params

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        body = ad.channel_affine(ad.conv2d(ad.relu(x), self.kernel, 1, 1),
                                 self.scale, self.shift)
        out = ad.add(x, body)
        if self.bank is not None:
            weights = gate(x, self.bank)
            correction = None
            for k, kern in enumerate(self.bank.corrections):
                term = ad.scale_rows(ad.conv2d(x, kern, 1, 0),
                                     ad.take_column(weights, k))
                correction = term if correction is None else ad.add(correction, term)
            out = ad.add(out, correction)
        return out


def block_forward(x: ad.Tensor, block: ResidualBlock) -> ad.Tensor:
    return block.forward(x)


class Transition:
    """Stage boundary: 2x2 average-pool downsample, then a 3x3 channel-change
    convolution. (A strided conv cannot downsample even resolutions under the
    exact-output-size contract of conv2d.)"""

    def __init__(self, c_in: int, c_out: int, prefix: str, rng: np.random.Generator):
        self.kernel = ad.Parameter(
            glorot_uniform((c_out, c_in, 3, 3), c_in * 9, c_out * 9, rng),
            f"{prefix}.kernel")
        self.scale = ad.Parameter(np.ones(c_out, np.float32), f"{prefix}.scale")
        self.shift = ad.Parameter(np.zeros(c_out, np.float32), f"{prefix}.shift")

    def parameters(self):
        return [self.kernel, self.scale, self.shift]

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        pooled = ad.avg_pool2(x)
        return ad.channel_affine(ad.conv2d(ad.relu(pooled), self.kernel, 1, 1),
                                 self.scale, self.shift)


class ResidualNet:
    """Backbone + optional adapter banks + embedding head (+ pretraining head)."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator,
                 with_classifier: bool = True):
        config.validate()
        self.config = config
        c0 = config.stages[0][0]
        self.stem_kernel = ad.Parameter(
            glorot_uniform((c0, config.in_channels, 3, 3),
                           config.in_channels * 9, c0 * 9, rng), "stem.kernel")
        self.stem_scale = ad.Parameter(np.ones(c0, np.float32), "stem.scale")
        self.stem_shift = ad.Parameter(np.zeros(c0, np.float32), "stem.shift")
        self.stages: list[list[ResidualBlock]] = []
        self.transitions: list[Transition] = []
        prev = c0
        for si, (channels, blocks) in enumerate(config.stages):
            if si > 0:
                self.transitions.append(
                    Transition(prev, channels, f"transition{si}", rng))
            self.stages.append([
                ResidualBlock(channels, f"stage{si}.block{bi}", rng)
                for bi in range(blocks)
            ])
            prev = channels
        d = config.embedding_dim
        self.embed_weight = ad.Parameter(
            glorot_uniform((d, prev), prev, d, rng), "embed.weight")
        self.embed_bias = ad.Parameter(np.zeros(d, np.float32), "embed.bias")
        self.head_weight: Optional[ad.Parameter] = None
        self.head_bias: Optional[ad.Parameter] = None
        if with_classifier:
            k = config.class_count
            self.head_weight = ad.Parameter(
                glorot_uniform((k, d), d, k, rng), "head.weight")
            self.head_bias = ad.Parameter(np.zeros(k, np.float32), "head.bias")

    # -- structure ---------------------------------------------------------

    @property
    def has_adapters(self) -> bool:
        return any(b.bank is not None for stage in self.stages for b in stage)

    @property
    def adapter_count(self) -> int:
        for stage in self.stages:
            for b in stage:
                if b.bank is not None:
                    return b.bank.K
        return 0

    def add_adapters(self, K: int):
        for stage in self.stages:
            for block in stage:
                block.add_bank(K)

    def remove_classifier(self):
        self.head_weight = None
        self.head_bias = None

    def blocks(self):
        return [b for stage in self.stages for b in stage]

    def parameters(self) -> list[ad.Parameter]:
        params = [self.stem_kernel, self.stem_scale, self.stem_shift]
        for si, stage in enumerate(self.stages):
            if si > 0:
                params.extend(self.transitions[si - 1].parameters())
            for block in stage:
                params.extend(block.parameters())
        params.extend([self.embed_weight, self.embed_bias])
        if self.head_weight is not None:
            params.extend([self.head_weight, self.head_bias])
        return params

    def param(self, stable_id: str) -> ad.Parameter:
        for p in self.parameters():
            if p.stable_id == stable_id:
                return p
        raise KeyError(stable_id)

    def backbone_ids(self) -> set[str]:
        """Stable ids of the pretrained body (stem, blocks, transitions)."""
        ids = set()
        for p in self.parameters():
            top = p.stable_id.split(".", 1)[0]
            if top.startswith(("stem", "stage", "transition")) and ".adapter" not in p.stable_id \
                    and ".gate." not in p.stable_id:
                ids.add(p.stable_id)
        return ids

    def task_ids(self) -> set[str]:
        """Stable ids of the task-specific additions (adapters, gates, embed head)."""
        ids = {"embed.weight", "embed.bias"}
        for p in self.parameters():
            if ".adapter" in p.stable_id or ".gate." in p.stable_id:
                ids.add(p.stable_id)
        return ids

    # -- forward -----------------------------------------------------------

    def features(self, x: ad.Tensor) -> ad.Tensor:
        n, c, h, w = x.shape
        if c != self.config.in_channels or h != self.config.resolution \
                or w != self.config.resolution:
            raise ConfigurationError(
                f"input {x.shape} does not match configured resolution "
                f"{self.config.in_channels}x{self.config.resolution}"
                f"x{self.config.resolution}")
        out = ad.channel_affine(ad.conv2d(x, self.stem_kernel, 1, 1),
                                self.stem_scale, self.stem_shift)
        for si, stage in enumerate(self.stages):
            if si > 0:
                out = self.transitions[si - 1].forward(out)
            for block in stage:
                out = block.forward(out)
        return out

    def embed(self, x: ad.Tensor) -> ad.Tensor:
        pooled = ad.global_avg_pool(self.features(x))
        return ad.linear(pooled, self.embed_weight, self.embed_bias)

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        if self.head_weight is None:
            raise ConfigurationError("classifier head was discarded")
        return ad.linear(self.embed(x), self.head_weight, self.head_bias)

    # -- state -------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {p.stable_id: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True):
        for p in self.parameters():
            if p.stable_id in state:
                src = state[p.stable_id]
                if src.shape != p.data.shape:
                    raise ConfigurationError(
                        f"state shape {src.shape} vs parameter {p.stable_id} "
                        f"shape {p.data.shape}")
                p.data = src.astype(np.float32).copy()
                p.grad = np.zeros_like(p.data)
            elif strict:
                raise ConfigurationError(f"missing state for {p.stable_id}")


def embed(x: ad.Tensor, model: ResidualNet) -> ad.Tensor:
    return model.embed(x)


# ---------------------------------------------------------------------------
# parameter partition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterPartition:
    theta_ids: frozenset
    alpha_ids: frozenset
    mode: str

    def validate(self, model: ResidualNet):
        all_ids = {p.stable_id for p in model.parameters()}
        if self.theta_ids & self.alpha_ids:
            raise ConfigurationError("theta and alpha overlap")
        if (self.theta_ids | self.alpha_ids) != all_ids:
            raise ConfigurationError("partition does not cover all parameters")


def make_partition(model: ResidualNet, mode: str) -> ParameterPartition:
    """Split parameters into frozen theta / trainable alpha and set the
    trainable flags accordingly."""
    if mode not in ALPHA_MODES:
        raise ConfigurationError(f"unknown partition mode {mode!r}")
    all_ids = {p.stable_id for p in model.parameters()}
    if mode == "adra":
        alpha = model.task_ids() & all_ids
        theta = all_ids - alpha
    elif mode in ("finetune", "l2sp", "scratch"):
        alpha, theta = all_ids, set()
    else:  # feature-extract
        alpha, theta = set(), all_ids
    for p in model.parameters():
        p.trainable = p.stable_id in alpha
    part = ParameterPartition(frozenset(theta), frozenset(alpha), mode)
    part.validate(model)
    return part


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def theta_hash(model: ResidualNet, theta_ids=None) -> str:
    """Content hash of the frozen backbone parameters (sorted by stable id)."""
    if theta_ids is None:
        theta_ids = model.backbone_ids()
    digest = hashlib.sha256()
    for p in sorted((p for p in model.parameters() if p.stable_id in theta_ids),
                    key=lambda p: p.stable_id):
        digest.update(p.stable_id.encode())
        digest.update(np.asarray(p.data.shape, "<u4").tobytes())
        digest.update(np.ascontiguousarray(p.data, "<f4").tobytes())
    return digest.hexdigest()


def count_params(model: ResidualNet, T: int, K: Optional[int] = None) -> dict:
    """Storage accounting for T tasks: shared backbone plus per-task additions.

    Without adapter banks the model is a monolith (no per-task share), which
    makes adra-total collapse to the backbone count for T = 1.
    """
    if K is not None and model.has_adapters and model.adapter_count != K:
        raise ConfigurationError(
            f"model has K={model.adapter_count} experts, expected {K}")
    sizes = {p.stable_id: p.data.size for p in model.parameters()
             if not p.stable_id.startswith("head.")}
    if model.has_adapters:
        alpha_ids = model.task_ids()
        alpha = sum(s for i, s in sizes.items() if i in alpha_ids)
        theta = sum(s for i, s in sizes.items() if i not in alpha_ids)
    else:
        alpha, theta = 0, sum(sizes.values())
    return {
        "theta": theta,
        "alpha_per_task": alpha,
        "adra_total": theta + T * alpha,
        "naive_total": T * theta,
    }


def per_task_budget_from_totals(naive_total: float, adra_total: float, T: int) -> dict:
    """Back-calculate the shared/per-task parameter split from the two
    reported storage totals for T tasks."""
    theta = naive_total / T
    return {"theta": theta, "alpha_per_task": (adra_total - theta) / T}


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def save_snapshot(model: ResidualNet, path):
    """Persist parameter values + config (uncompressed npz)."""
    arrays = {f"param:{i}": v for i, v in model.state().items()}
    np.savez(path, __config__=np.frombuffer(
        model.config.to_json().encode(), dtype=np.uint8), **arrays)


def load_snapshot(path, K: Optional[int] = None,
                  with_classifier: Optional[bool] = None) -> ResidualNet:
    """Rebuild a model from a snapshot; optionally attach fresh zero adapters.

    Adapter banks are zero-initialized, so a freshly loaded ADRA model
    computes exactly the snapshot backbone's embeddings.
    """
    with np.load(path) as archive:
        config = BackboneConfig.from_json(bytes(archive["__config__"]).decode())
        state = {k[len("param:"):]: archive[k] for k in archive.files
                 if k.startswith("param:")}
    has_head = "head.weight" in state
    if with_classifier is None:
        with_classifier = has_head
    model = ResidualNet(config, np.random.default_rng(0),
                        with_classifier=with_classifier)
    if not with_classifier:
        model.remove_classifier()
    if K is not None:
        model.add_adapters(K)
    model.load_state(state, strict=False)
    missing = {p.stable_id for p in model.parameters()} - set(state)
    allowed = {i for i in missing if ".adapter" in i or ".gate." in i}
    if missing - allowed:
        raise ConfigurationError(f"snapshot missing parameters: {sorted(missing - allowed)}")
    return model
