"""Pretraining loop, checkpoint I/O, embedding extraction and the linear probe."""

from __future__ import annotations

import csv
import json
import logging
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_dict
from .errors import ConfigError, IngestError
from .graph import GraphDataset
from .hierarchy import Hierarchy, Partitioner, build_hierarchy, derive_seed
from .masking import make_plan
from .model import FiCoModel

log = logging.getLogger(__name__)

MAGIC = b"HGMK"
# the version word doubles as the payload width tag
VERSION_F32 = 1
VERSION_F64 = 2
_PAYLOAD = {VERSION_F32: "<f4", VERSION_F64: "<f8"}
LOG_HEADER = ("epoch", "loss", "recovered_S")


def prepare_hierarchies(dataset: GraphDataset, config: RunConfig,
                        partitioner: Partitioner | None = None) -> list[Hierarchy]:
    """One hierarchy per graph, seeded by ``(hierarchy.seed, graph index)``."""
    hc = config.hierarchy
    return [
        build_hierarchy(g, hc.S, hc.r_p, derive_seed(hc.seed, i), partitioner, hc.binarize_coarse)
        for i, g in enumerate(dataset)
    ]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recovered_S: int


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    d0: int
    final_epoch: int = -1
    final_loss: float = float("nan")
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def precision(self) -> str:
        return self.config.train.precision

    def build_model(self) -> FiCoModel:
        dtype = T.PRECISIONS[self.precision]
        model = FiCoModel(self.d0, self.config.hierarchy.S, self.config.model, seed=self.config.train.seed,
                          dtype=dtype)
        model.load_state_dict(self.params)
        return model

    def save(self, path) -> None:
        version = VERSION_F64 if self.precision == "float64" else VERSION_F32
        fmt = _PAYLOAD[version]
        chunks = [struct.pack("<4sII", MAGIC, version, len(self.params))]
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype=fmt).tobytes())
        meta = {
            "config": self.config.to_dict(),
            "d0": self.d0,
            "final_epoch": self.final_epoch,
            "final_loss": self.final_loss,
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        chunks.append(struct.pack("<I", len(blob)) + blob)
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        try:
            magic, version, count = struct.unpack_from("<4sII", data, 0)
            if magic != MAGIC:
                raise IngestError(f"{path}: not a checkpoint (bad magic {magic!r})")
            if version not in _PAYLOAD:
                raise IngestError(f"{path}: unsupported checkpoint version {version}")
            dt = np.dtype(_PAYLOAD[version])
            off = 12
            params = {}
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", data, off)
                off += 2
                name = data[off:off + name_len].decode("utf-8")
                off += name_len
                (ndim,) = struct.unpack_from("<B", data, off)
                off += 1
                dims = struct.unpack_from(f"<{ndim}I", data, off)
                off += 4 * ndim
                size = int(np.prod(dims)) if ndim else 1
                arr = np.frombuffer(data, dtype=dt, count=size, offset=off).reshape(dims)
                off += size * dt.itemsize
                if name in params:
                    raise IngestError(f"{path}: duplicate parameter {name!r}")
                params[name] = arr.astype(dt.newbyteorder("="))
            (blob_len,) = struct.unpack_from("<I", data, off)
            off += 4
            meta = json.loads(data[off:off + blob_len].decode("utf-8"))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise IngestError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
        return cls(config_from_dict(meta["config"]), params, int(meta["d0"]),
                   int(meta["final_epoch"]), float(meta["final_loss"]))


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def pretrain(
    dataset: GraphDataset,
    config: RunConfig,
    hierarchies: list[Hierarchy] | None = None,
    log_path=None,
) -> Checkpoint:
    """Self-supervised pretraining; returns the final parameters as a checkpoint.

    Each epoch reshuffles the graphs, draws a fresh mask plan per graph and takes
    one Adam step per mini-batch on the mean per-graph loss. Graphs with nothing
    masked contribute zero. With ``train.parallel`` the per-graph passes of a
    batch run on a thread pool and gradient accumulation order is no longer fixed.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    tc, mc = config.train, config.mask
    hierarchies = hierarchies if hierarchies is not None else prepare_hierarchies(dataset, config)
    schedule = config.schedule() if mc.recovery.enabled else None
    with T.precision(tc.precision):
        model = FiCoModel(dataset.d0, config.hierarchy.S, config.model, seed=tc.seed)
        opt = T.Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
        graph_seeds = [derive_seed(tc.seed, i) for i in range(len(dataset))]
        history: list[EpochRecord] = []
        lock = threading.Lock()
        pool = ThreadPoolExecutor() if tc.parallel else None

        def step_graph(gi: int, epoch: int, scale: float):
            plan = make_plan(mc.mode, hierarchies[gi], mc.r_m, schedule, epoch, graph_seeds[gi])
            with T.Tape() as tape:
                loss = model.forward_loss(hierarchies[gi], plan, dataset[gi].x)
                if loss is not None:
                    scaled = T.mul(loss, scale)
            if loss is None:
                return 0.0, plan.recovered
            if pool is None:
                T.backward(scaled, tape)
            else:
                with lock:
                    T.backward(scaled, tape)
            return loss.item(), plan.recovered

        try:
            for epoch in range(tc.epochs):
                order = np.random.default_rng([tc.seed, epoch]).permutation(len(dataset))
                total, recovered = 0.0, 0
                for batch in _batches(order, tc.batch_size):
                    opt.zero_grad()
                    scale = 1.0 / len(batch)
                    if pool is None:
                        results = [step_graph(int(gi), epoch, scale) for gi in batch]
                    else:
                        results = list(pool.map(lambda gi: step_graph(int(gi), epoch, scale), batch))
                    for value, rec in results:
                        total += value
                        recovered += rec
                    opt.step()
                history.append(EpochRecord(epoch, total / len(dataset), recovered))
                log.info("epoch %d loss %.6f recovered %d", epoch, history[-1].loss, recovered)
        finally:
            if pool is not None:
                pool.shutdown()
    if log_path is not None:
        write_log(history, log_path)
    return Checkpoint(config, model.state_dict(), dataset.d0, history[-1].epoch, history[-1].loss, history)


def write_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for rec in history:
            w.writerow([rec.epoch, repr(float(rec.loss)), rec.recovered_S])


def read_log(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["loss"]), int(r["recovered_S"])) for r in csv.DictReader(fh)]


def embed(
    dataset: GraphDataset,
    checkpoint: Checkpoint,
    hierarchies: list[Hierarchy] | None = None,
    mode: str | None = None,
) -> np.ndarray:
    """Unmasked forward pass per graph; one readout row per graph, in dataset order."""
    if dataset.d0 != checkpoint.d0:
        raise ConfigError(f"dataset has {dataset.d0} features, checkpoint expects {checkpoint.d0}", field="data")
    mode = mode or checkpoint.config.eval.readout_mode
    hierarchies = hierarchies if hierarchies is not None else prepare_hierarchies(dataset, checkpoint.config)
    model = checkpoint.build_model()
    rows = [model.readout(h, g.x, mode) for g, h in zip(dataset, hierarchies)]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeReport:
    fold_accuracies: list[float]
    seed: int
    folds: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies))

    def to_dict(self) -> dict:
        return {"fold_accuracies": self.fold_accuracies, "mean": self.mean, "std": self.std,
                "seed": self.seed, "folds": self.folds}


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample: shuffle within each class, then deal round-robin."""
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    counter = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (counter + np.arange(len(idx))) % folds
        counter += len(idx)
    return fold_of


def fit_logistic(x: np.ndarray, y: np.ndarray, num_classes: int, steps: int = 300, lr: float = 0.05,
                 l2: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch Adam from a zero start."""
    w = T.Tensor(np.zeros((x.shape[1], num_classes)), dtype=np.float64)
    b = T.Tensor(np.zeros(num_classes), dtype=np.float64)
    state = T.AdamState(lr=lr)
    onehot = np.eye(num_classes)[y]
    n = len(y)
    for _ in range(steps):
        logits = x @ w.values + b.values
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        T.adam_step([w, b], [x.T @ g + l2 * w.values, g.sum(axis=0)], state)
    return w.values, b.values


def probe(embeddings: np.ndarray, labels: np.ndarray, folds: int = 10, seed: int = 0) -> ProbeReport:
    """k-fold accuracy of a logistic classifier on frozen embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if folds < 2:
        raise ConfigError("probe needs at least 2 folds", field="eval.folds")
    if len(y) != len(x):
        raise ConfigError(f"{len(x)} embeddings for {len(y)} labels")
    if folds > len(y):
        raise ConfigError(f"{folds} folds for only {len(y)} samples", field="eval.folds")
    num_classes = int(y.max()) + 1
    fold_of = stratified_folds(y, folds, seed)
    accs = []
    for k in range(folds):
        test = fold_of == k
        train = ~test
        missing = set(range(num_classes)) - set(np.unique(y[train]).tolist())
        if missing:
            log.warning("fold %d: class(es) %s absent from the training split", k, sorted(missing))
        mu = x[train].mean(axis=0)
        sd = x[train].std(axis=0)
        sd[sd < 1e-12] = 1.0
        w, b = fit_logistic((x[train] - mu) / sd, y[train], num_classes)
        pred = np.argmax(((x[test] - mu) / sd) @ w + b, axis=1)
        accs.append(float(np.mean(pred == y[test])))
    return ProbeReport(accs, seed, folds)


def probe_repeated(embeddings, labels, folds: int = 10, seed: int = 0, repeats: int = 1) -> list[ProbeReport]:
    return [probe(embeddings, labels, folds, seed + r) for r in range(repeats)]
