"""FedAvg simulation with per-client shift plans and clean rehearsal buffers."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .corruptions import KINDS, MAX_LEVEL, CorruptionSpec, client_kind, corrupt_images
from .errors import DivergenceError, InvalidConfig, ShapeError
from .nn_core import ModelParams, init_params, loss_and_grad, sgd_step
from .tasks import (
    ClientShard,
    TaskDataset,
    assign_rehearsal,
    evaluate_model,
    gen_classification,
    gen_segmentation,
    shard_clients,
    train_test_split,
)


@dataclass(frozen=True)
class FederationConfig:
    task: str = "classification"
    n_samples: int = 5000
    image_size: int = 16
    num_classes: int = 2
    noise_sigma: float = 0.05
    stripe_amp: float = 0.065
    level_step: float = 0.2
    hidden: tuple[int, ...] = (32,)
    total_clients: int = 20
    clients_per_round: int = 10
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    rounds_cd: int = 60
    rounds_cf: int = 30
    rehearsal_fraction: float = 0.0
    kinds: tuple[str, ...] = ("gaussian_noise",)
    per_client_kind: bool = False
    severity_table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise InvalidConfig(f"task must be classification or segmentation, got {self.task!r}")
        if self.total_clients < 1:
            raise InvalidConfig("total_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise InvalidConfig("clients_per_round must be in [1, total_clients]")
        if self.rounds_cd < 1 or self.rounds_cf < 1:
            raise InvalidConfig("rounds_cd and rounds_cf must be >= 1")
        if self.local_epochs < 0:
            raise InvalidConfig("local_epochs must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidConfig("lr must be positive and batch_size >= 1")
        if not 0.0 <= self.rehearsal_fraction < 1.0:
            raise InvalidConfig(f"rehearsal_fraction must be in [0, 1), got {self.rehearsal_fraction}")
        if not self.kinds:
            raise InvalidConfig("at least one corruption kind is required")
        for k in self.kinds:
            if k not in KINDS:
                raise InvalidConfig(f"unknown corruption kind {k!r}")
        if any(h < 1 for h in self.hidden):
            raise InvalidConfig("hidden layer sizes must be positive")

    @property
    def layer_dims(self) -> list[int]:
        d_in = self.image_size ** 2 if self.task == "classification" else 9
        n_out = self.num_classes if self.task == "classification" else 2
        return [d_in, *self.hidden, n_out]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


# segmentation needs a larger step and fewer samples to converge within 60 rounds
TASK_PRESETS = {
    "classification": {},
    "segmentation": {"n_samples": 1000, "lr": 0.5, "hidden": (16,)},
}


def desk_defaults(task: str = "classification", **overrides) -> FederationConfig:
    """Desk-scale configuration for ``task``; keyword overrides win over the preset."""
    if task not in TASK_PRESETS:
        raise InvalidConfig(f"unknown task {task!r}")
    return FederationConfig(task=task, **{**TASK_PRESETS[task], **overrides})


def shifted_clients(ratio: float, c: int, seed: int) -> frozenset[int]:
    """First ceil(ratio * c) ids of one seeded permutation; sets nest as ratio grows."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidConfig(f"shifted ratio must be in [0, 1], got {ratio}")
    # round first so e.g. 0.3 * 20 = 6.000000000000001 does not ceil to 7
    count = math.ceil(round(ratio * c, 9))
    perm = np.random.default_rng([seed, 0x73686966]).permutation(c)
    return frozenset(int(i) for i in perm[:count])


@dataclass(frozen=True)
class ShiftPlan:
    shifted_ratio: float
    severity: CorruptionSpec
    shifted_client_ids: frozenset[int]

    @classmethod
    def build(cls, ratio: float, severity: CorruptionSpec, c: int, seed: int) -> "ShiftPlan":
        return cls(ratio, severity, shifted_clients(ratio, c, seed))

    @classmethod
    def clean(cls, kind: str = "gaussian_noise") -> "ShiftPlan":
        return cls(0.0, CorruptionSpec(kind, level=0), frozenset())


@dataclass
class TrainingHistory:
    metrics: list[float] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.metrics)

    @property
    def final(self) -> float:
        return self.metrics[-1]

    def write_csv(self, path: str | Path, run_id: str, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            if not append:
                wr.writerow(["run_id", "round", "metric"])
            for r, m in enumerate(self.metrics):
                wr.writerow([run_id, r, format(m, ".17g")])


def aggregate(
    client_params: Sequence[ModelParams],
    client_sizes: Sequence[int],
    client_ids: Sequence[int] | None = None,
) -> ModelParams:
    """Size-weighted parameter mean.

    Summation runs in client-id order (or a canonical content order when no
    ids are given), so the result does not depend on list order.
    """
    if not client_params:
        raise InvalidConfig("cannot aggregate an empty client list")
    if len(client_sizes) != len(client_params):
        raise ShapeError("one size per client is required")
    shapes = [a.shape for a in client_params[0].arrays()]
    for p in client_params[1:]:
        if [a.shape for a in p.arrays()] != shapes:
            raise ShapeError("client parameter shapes differ")
    if any(s <= 0 for s in client_sizes):
        raise InvalidConfig("client sizes must be positive")

    if client_ids is not None:
        order = sorted(range(len(client_params)), key=lambda i: client_ids[i])
    else:
        order = sorted(
            range(len(client_params)),
            key=lambda i: (client_sizes[i], b"".join(a.tobytes() for a in client_params[i].arrays())),
        )
    total = float(sum(client_sizes))
    acc = None
    for i in order:
        wt = client_sizes[i] / total
        arrays = client_params[i].arrays()
        if acc is None:
            acc = [wt * a for a in arrays]
        else:
            for a_acc, a in zip(acc, arrays):
                a_acc += wt * a
    return ModelParams.from_arrays(acc)


def make_dataset(cfg: FederationConfig, seed: int) -> TaskDataset:
    if cfg.task == "classification":
        return gen_classification(
            cfg.n_samples, cfg.image_size, cfg.image_size, cfg.num_classes, cfg.noise_sigma, seed,
            stripe_amp=cfg.stripe_amp, level_step=cfg.level_step,
        )
    return gen_segmentation(cfg.n_samples, cfg.image_size, cfg.image_size, seed)


class Federation:
    """Data, shards and a corrupted-feature cache for one (config, seed)."""

    def __init__(self, cfg: FederationConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        full = make_dataset(cfg, seed)
        self.train, self.test = train_test_split(full, 0.2)
        shards = shard_clients(self.train, cfg.total_clients, seed)
        self.shards = assign_rehearsal(shards, cfg.rehearsal_fraction, seed)
        self._clean_x = self._per_sample_features(self.train.images)
        self._y = self._per_sample_labels()
        self._shifted_x: dict = {}

    # features grouped per training sample: [n, d] or [n, H*W, 9]
    def _per_sample_features(self, images: np.ndarray) -> np.ndarray:
        feats = self.train.features(images)
        if self.train.kind == "classification":
            return feats
        return feats.reshape(images.shape[0], -1, feats.shape[-1])

    def _per_sample_labels(self) -> np.ndarray:
        if self.train.kind == "classification":
            return self.train.targets
        return self.train.targets.reshape(len(self.train), -1)

    def _kinds_for(self, spec: CorruptionSpec) -> tuple[str, ...]:
        # the configured mix applies only to specs built from it
        if len(self.cfg.kinds) > 1 and spec.kind in self.cfg.kinds:
            return self.cfg.kinds
        return (spec.kind,)

    def default_severity(self, level: int = MAX_LEVEL) -> CorruptionSpec:
        return CorruptionSpec(self.cfg.kinds[0], level=level, salt=self.seed, table=self.cfg.severity_table)

    def shifted_features(self, spec: CorruptionSpec, client_id: int | None = None) -> np.ndarray:
        """Training features with every sample corrupted by ``spec`` (cached)."""
        kinds = self._kinds_for(spec)
        if self.cfg.per_client_kind and len(kinds) > 1:
            kinds = (client_kind(kinds, spec.salt, client_id),)
        key = (spec, kinds)
        if key not in self._shifted_x:
            if spec.is_identity:
                self._shifted_x[key] = self._clean_x
            else:
                shifted = corrupt_images(self.train.images, spec.with_kind(kinds[0]), kinds=kinds)
                self._shifted_x[key] = self._per_sample_features(shifted)
        return self._shifted_x[key]

    def client_data(self, shard: ClientShard, plan: ShiftPlan) -> tuple[np.ndarray, np.ndarray]:
        x = self._clean_x[shard.indices]
        if shard.client_id in plan.shifted_client_ids and not plan.severity.is_identity:
            keep_clean = ~shard.corruptible()
            x = self.shifted_features(plan.severity, shard.client_id)[shard.indices]
            if keep_clean.any():
                x[keep_clean] = self._clean_x[shard.indices[keep_clean]]
        return x, self._y[shard.indices]

    def local_train(
        self,
        global_params: ModelParams,
        shard: ClientShard,
        plan: ShiftPlan,
        round_idx: int,
        stream: tuple[int, ...],
    ) -> ModelParams:
        """Local SGD on one client; ``global_params`` is left untouched."""
        if len(shard) == 0:
            raise InvalidConfig(f"client {shard.client_id} has an empty shard")
        x, y = self.client_data(shard, plan)
        rng = np.random.default_rng([*stream, round_idx, 1, shard.client_id])
        params = global_params
        bs = self.cfg.batch_size
        for _ in range(self.cfg.local_epochs):
            order = rng.permutation(len(shard))
            for start in range(0, len(order), bs):
                b = order[start:start + bs]
                xb, yb = x[b], y[b]
                if xb.ndim == 3:
                    xb, yb = xb.reshape(-1, xb.shape[-1]), yb.reshape(-1)
                _, grads = loss_and_grad(params, xb, yb)
                params = sgd_step(params, grads, self.cfg.lr)
        return params

    def evaluate(self, params: ModelParams, spec: CorruptionSpec | None = None) -> float:
        """Metric on the held-out test split, clean unless ``spec`` is given."""
        if spec is None or spec.is_identity:
            return evaluate_model(params, self.test)
        # test samples use their own salt so they never share noise with training samples
        test_spec = replace(spec, salt=spec.salt + 0x7E57)
        return evaluate_model(params, self.test, corrupt_images(self.test.images, test_spec, kinds=self._kinds_for(spec)))

    def run(
        self,
        plan: ShiftPlan,
        rounds: int,
        start: ModelParams,
        stream: tuple[int, ...],
        round_offset: int = 0,
    ) -> tuple[ModelParams, TrainingHistory]:
        """FedAvg for ``rounds`` rounds, evaluating on clean test data after each."""
        cfg = self.cfg
        if start.layer_dims != cfg.layer_dims:
            raise ShapeError(f"start params {start.layer_dims} do not match config {cfg.layer_dims}")
        params = start
        history = TrainingHistory()
        for r in range(round_offset, round_offset + rounds):
            rng = np.random.default_rng([*stream, r, 0])
            chosen = np.sort(rng.choice(cfg.total_clients, size=cfg.clients_per_round, replace=False))
            updates = [self.local_train(params, self.shards[c], plan, r, stream) for c in chosen]
            params = aggregate(updates, [len(self.shards[c]) for c in chosen], [int(c) for c in chosen])
            if not params.is_finite():
                raise DivergenceError(f"non-finite parameters after round {r}", r)
            history.metrics.append(self.evaluate(params))
        return params, history

    def init_model(self) -> ModelParams:
        return init_params(self.cfg.layer_dims, self.seed)


@lru_cache(maxsize=8)
def get_federation(cfg: FederationConfig, seed: int) -> Federation:
    return Federation(cfg, seed)


def run_federation(
    cfg: FederationConfig,
    plan: ShiftPlan,
    phase_rounds: int,
    start: ModelParams,
    rng_stream: tuple[int, ...],
    seed: int = 0,
) -> tuple[ModelParams, TrainingHistory]:
    return get_federation(cfg, seed).run(plan, phase_rounds, start, tuple(rng_stream))
