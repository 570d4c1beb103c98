"""Comparison methods: each name maps to one (init, partition, loss) recipe.

adra / uadra train gated adapters on a frozen pretrained backbone (with and
without an exposure corpus). tf / l2sp finetune everything from pretrained
weights (l2sp adds the squared-distance pull toward them). scratch and sad
train the full network from random init on the exposure loss. svdd trains
only the embedding head on the corpus-free loss on top of frozen features
(pretrained by default; `init="random"` gives the scratch-SVDD control).
knn-ad does no training: mean distance to the k nearest frozen embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from adra import objectives, trainer
from adra.errors import ConfigurationError, ContractError, MetricError
from adra.metrics import ScoredTestSet
from adra.model import ResidualNet, load_snapshot, make_partition
from adra.seeding import seeded_rng


@dataclass(frozen=True)
class MethodSpec:
    name: str
    mode: str             # partition mode
    loss: Optional[str]   # "hsc" | "one-class" | None (no training)
    init: str             # "pretrained" | "random"
    adapters: bool
    k: Optional[int] = None


METHODS = {
    "adra": MethodSpec("adra", "adra", "hsc", "pretrained", True),
    "uadra": MethodSpec("uadra", "adra", "one-class", "pretrained", True),
    "tf": MethodSpec("tf", "finetune", "hsc", "pretrained", False),
    "l2sp": MethodSpec("l2sp", "l2sp", "hsc", "pretrained", False),
    "scratch": MethodSpec("scratch", "scratch", "hsc", "random", False),
    "sad": MethodSpec("sad", "scratch", "hsc", "random", False),
    "svdd": MethodSpec("svdd", "adra", "one-class", "pretrained", False),
    "knn-ad": MethodSpec("knn-ad", "feature-extract", None, "pretrained", False, k=2),
}


def method_spec(name: str, k: Optional[int] = None,
                init: Optional[str] = None) -> MethodSpec:
    if name not in METHODS:
        raise ConfigurationError(
            f"unknown method {name!r}; choose from {sorted(METHODS)}")
    spec = METHODS[name]
    if k is not None:
        spec = replace(spec, k=k)
    if init is not None:
        spec = replace(spec, init=init)
    return spec


# ---------------------------------------------------------------------------
# kNN anomaly scoring
# ---------------------------------------------------------------------------

def knn_score(train_features: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Mean Euclidean distance to the k nearest training features.

    Accepts one query vector or a (q, d) batch; higher = more anomalous.
    """
    train = np.asarray(train_features, dtype=np.float64)
    if train.ndim != 2 or len(train) == 0:
        raise MetricError("knn_score requires a nonempty (m, d) training matrix")
    if k < 1 or k > len(train):
        raise ContractError(f"k={k} outside [1, {len(train)}]")
    single = queries.ndim == 1
    q = np.asarray(queries, dtype=np.float64).reshape(-1, train.shape[1])
    out = np.empty(len(q))
    chunk = max(1, int(2**24 // max(train.size, 1)))
    for start in range(0, len(q), chunk):
        block = q[start:start + chunk]
        d2 = ((train[None, :, :] - block[:, None, :]) ** 2).sum(axis=2)
        dists = np.sqrt(d2)
        smallest = np.partition(dists, k - 1, axis=1)[:, :k]
        out[start:start + chunk] = np.sort(smallest, axis=1).mean(axis=1)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# method execution
# ---------------------------------------------------------------------------

@dataclass
class MethodRun:
    method: str
    scored: ScoredTestSet
    model: ResidualNet
    train_result: Optional[trainer.TrainResult]
    partition_mode: str


def snapshot_config(snapshot_path):
    from adra.model import BackboneConfig
    with np.load(snapshot_path) as archive:
        return BackboneConfig.from_json(bytes(archive["__config__"]).decode())


def build_method_model(spec: MethodSpec, config: trainer.TrainConfig,
                       snapshot_path, seed: int):
    if spec.init == "pretrained":
        model = load_snapshot(snapshot_path,
                              K=config.K if spec.adapters else None)
    else:
        bconfig = snapshot_config(snapshot_path)
        model = ResidualNet(bconfig, seeded_rng(seed, "scratch-init"),
                            with_classifier=False)
        if spec.adapters:
            model.add_adapters(config.K)
    partition = make_partition(model, spec.mode)
    return model, partition


def run_method(spec: MethodSpec, task, corpus: Optional[np.ndarray],
               config: trainer.TrainConfig, snapshot_path, seed: int) -> MethodRun:
    """Train (if the method trains) and score the task's test set."""
    if spec.init == "pretrained" and snapshot_path is None:
        raise ContractError(f"method {spec.name} needs a pretrained snapshot")
    model, partition = build_method_model(spec, config, snapshot_path, seed)

    if spec.loss is None:  # knn-ad
        train_feats = objectives.embed_batch(model, task.nominal_images)
        test_feats = objectives.embed_batch(model, task.test.images)
        scores = knn_score(train_feats, test_feats, spec.k)
        return MethodRun(spec.name, ScoredTestSet(scores, task.test_anomaly),
                         model, None, partition.mode)

    use_corpus = corpus if spec.loss == "hsc" else None
    anchor = None
    if partition.mode == "l2sp":
        with np.load(snapshot_path) as archive:
            anchor = {k[len("param:"):]: archive[k] for k in archive.files
                      if k.startswith("param:")}
    result = trainer.train_task(model, partition, task.nominal_images,
                                use_corpus, config, seed, anchor=anchor)
    scores = objectives.score_batch(model, task.test.images)
    return MethodRun(spec.name, ScoredTestSet(scores, task.test_anomaly),
                     model, result, partition.mode)
