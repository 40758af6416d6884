"""Training loop, evaluation metrics, and the binary checkpoint format."""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .losses import SCENE, THRESHOLD
from .model import PREDICT, ReCoModel, TrainConfig, group_by_length
from .numerics import ParameterStore, Trace

log = logging.getLogger(__name__)

MAGIC = b"RECO"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class LayoutError(CheckpointError):
    """Header tensor directory disagrees with the payload or the model."""


@dataclass
class Checkpoint:
    config: TrainConfig
    store: ParameterStore
    epoch: int = 0
    rng_state: Optional[dict] = None
    history: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    version: int = FORMAT_VERSION

    def model(self, provider=None) -> ReCoModel:
        return ReCoModel(self.config, store=self.store, provider=provider)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_length_accuracy: dict
    problem_accuracy: Optional[float]
    confusion: dict
    negative_class: dict
    n: int

    @classmethod
    def from_counts(cls, tp, fp, fn, tn, per_length=None, problem=(0, 0)) -> "MetricsReport":
        n = tp + fp + fn + tn
        p, r, f1 = _prf(tp, fp, fn)
        np_, nr, nf1 = _prf(tn, fn, fp)
        per_length = per_length or {}
        pla = {L: (c / t if t else None) for L, (c, t) in sorted(per_length.items())}
        correct, total = problem
        return cls(p, r, f1, (tp + tn) / n if n else 0.0, pla, correct / total if total else None,
                   {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
                   {"precision": np_, "recall": nr, "f1": nf1}, n)

    def to_json(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy,
            "per_length_accuracy": {str(k): v for k, v in self.per_length_accuracy.items()},
            "problem_accuracy": self.problem_accuracy,
            "confusion": self.confusion,
            "unreliable_class": self.negative_class,
            "n": self.n,
        }


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _count_group(model: ReCoModel, group, rng=None):
    po, _, _ = model.forward(group, PREDICT, rng=rng)
    pc, ps, pt = po.p_chain.data, po.p_scene.data, po.p_threshold.data
    pred_rel = pc[:, 1] > pc[:, 0]
    pred_scene = ps[:, 1] > ps[:, 0]
    pred_thr = pt[:, 1] > pt[:, 0]
    c = {"tp": 0, "fp": 0, "fn": 0, "tn": 0, "ok": 0, "prob_ok": 0, "prob_n": 0}
    for i, inst in enumerate(group):
        gold, pred = inst.label.reliable, bool(pred_rel[i])
        key = ("tp" if pred else "fn") if gold else ("fp" if pred else "tn")
        c[key] += 1
        c["ok"] += gold == pred
        if not gold:
            c["prob_n"] += 1
            c["prob_ok"] += (bool(pred_scene[i]) == (inst.label.problem == SCENE)
                             and bool(pred_thr[i]) == (inst.label.problem == THRESHOLD))
    return inst.length, c


def evaluate(model_or_cp, dataset: Sequence, jobs: int = 1, chunk: int = 256,
             rng: Optional[np.random.Generator] = None) -> MetricsReport:
    """Reliability P/R/F1/accuracy (reliable = positive), per-length accuracy,
    and exact-match problem diagnosis accuracy on unreliable instances."""
    model = model_or_cp.model() if isinstance(model_or_cp, Checkpoint) else model_or_cp
    # fixed order so results do not depend on the dataset order
    items = sorted(dataset, key=lambda x: x.id)
    work = [g for grp in group_by_length(items).values() for g in _chunks(grp, chunk)]
    if jobs > 1 and rng is None:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda g: _count_group(model, g), work))
    else:
        results = [_count_group(model, g, rng) for g in work]
    tot = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    per_len: dict[int, list] = {}
    prob = [0, 0]
    for L, c in results:
        for k in tot:
            tot[k] += c[k]
        pl = per_len.setdefault(L, [0, 0])
        pl[0] += c["ok"]
        pl[1] += c["tp"] + c["fp"] + c["fn"] + c["tn"]
        prob[0] += c["prob_ok"]
        prob[1] += c["prob_n"]
    for L in (3, 4, 5):
        per_len.setdefault(L, [0, 0])
    return MetricsReport.from_counts(tot["tp"], tot["fp"], tot["fn"], tot["tn"],
                                     {k: tuple(v) for k, v in per_len.items()}, tuple(prob))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def batch_step(model: ReCoModel, batch: Sequence, rng: np.random.Generator):
    """Mean loss over a batch (grouped by length) with its gradients."""
    with Trace() as tape:
        sums, parts = [], np.zeros(3)
        for grp in group_by_length(batch).values():
            s, p = model.group_loss(grp, rng=rng)
            sums.append(s)
            parts += p
        acc = sums[0]
        for s in sums[1:]:
            acc = nx.add(acc, s)
        loss = nx.scale(acc, 1.0 / len(batch))
    grads = nx.backward(tape, loss, model.store)
    return loss.item(), parts / len(batch), grads


def train(config: TrainConfig, train_set: Sequence, dev_set: Optional[Sequence] = None,
          provider=None, on_epoch: Optional[Callable[[dict], None]] = None) -> Checkpoint:
    """Adam on the mean batch loss; keeps the parameters with the best dev accuracy.

    Without a dev set the final epoch is kept.
    """
    if not train_set:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = ReCoModel(config, provider=provider, rng=rng)
    train_set = list(train_set)
    history = []
    best = (-1.0, None, None)  # (dev acc, epoch, params)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        losses, parts = [], np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            loss, p, grads = batch_step(model, batch, rng)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            nx.adam_step(model.store, grads, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            losses.append(loss * len(batch))
            parts += p * len(batch)
        rec = {"epoch": epoch, "loss": float(sum(losses) / len(train_set)),
               "l_chain": float(parts[0] / len(train_set)), "l_logic": float(parts[1] / len(train_set)),
               "l_kl": float(parts[2] / len(train_set))}
        if dev_set:
            rec["dev_accuracy"] = evaluate(model, dev_set).accuracy
            if rec["dev_accuracy"] > best[0]:
                best = (rec["dev_accuracy"], epoch, model.store.copy())
        history.append(rec)
        log.info("epoch %d loss %.5f%s", epoch, rec["loss"],
                 f" dev acc {rec['dev_accuracy']:.4f}" if dev_set else "")
        if on_epoch:
            on_epoch(rec)

    store, best_epoch = model.store, config.epochs
    if best[2] is not None:
        store, best_epoch = best[2], best[1]
    return Checkpoint(config, store, epoch=config.epochs, rng_state=rng.bit_generator.state,
                      history=history, best_epoch=best_epoch)


# --------------------------------------------------------------------------
# Checkpoint I/O
# --------------------------------------------------------------------------

def save_checkpoint(path, cp: Checkpoint) -> None:
    """``RECO`` | u32 version | u32 header length | JSON header | float64 LE payload."""
    directory, chunks, offset = [], [], 0
    for name, entry in cp.store.items():
        for role, arr in (("param", entry.tensor.data), ("adam_m", entry.m), ("adam_v", entry.v)):
            buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            directory.append({"name": name, "role": role, "shape": list(arr.shape), "offset": offset})
            chunks.append(buf)
            offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "config": cp.config.to_dict(),
        "epoch": cp.epoch,
        "best_epoch": cp.best_epoch,
        "rng_state": cp.rng_state,
        "history": cp.history,
        "adam_steps": {name: e.step for name, e in cp.store.items()},
        "tensors": directory,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 12:
        raise ChecksumError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: corrupt or truncated header") from exc
    payload = blob[12 + hlen:]
    if len(payload) != header["payload_bytes"] or zlib.crc32(payload) != header["crc32"]:
        raise ChecksumError(f"{path}: payload checksum mismatch "
                            f"({len(payload)} of {header['payload_bytes']} bytes)")

    config = TrainConfig.from_dict(header["config"])
    model = ReCoModel(config)  # builds the expected parameter layout
    store = model.store
    seen = set()
    for ent in header["tensors"]:
        name, role, shape = ent["name"], ent["role"], tuple(ent["shape"])
        if name not in store:
            raise LayoutError(f"{path}: unknown tensor {name!r}")
        expected = store[name].data.shape
        if shape != expected:
            raise LayoutError(f"{path}: tensor {name}/{role} has shape {shape}, model expects {expected}")
        size = int(np.prod(shape)) * 8
        start = ent["offset"]
        if start < 0 or start + size > len(payload):
            raise LayoutError(f"{path}: tensor {name}/{role} at offset {start} overruns the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=start).reshape(shape)
        e = store.entry(name)
        {"param": e.tensor.data, "adam_m": e.m, "adam_v": e.v}[role][...] = arr
        seen.add((name, role))
    missing = {(n, r) for n in store for r in ("param", "adam_m", "adam_v")} - seen
    if missing:
        raise LayoutError(f"{path}: missing tensors {sorted(missing)[:5]}")
    for name, step in header["adam_steps"].items():
        store.entry(name).step = int(step)
    return Checkpoint(config, store, epoch=header["epoch"], rng_state=header["rng_state"],
                      history=header.get("history", []), best_epoch=header.get("best_epoch"),
                      version=version)


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_length: dict       # n -> max relative error over all parameters
    worst: tuple           # (n, parameter name) of the largest error
    skipped_kinks: int     # coordinates where the loss is non-smooth

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4

    def to_json(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "ok": self.ok,
                "per_length": {str(k): v for k, v in self.per_length.items()},
                "worst": list(self.worst), "skipped_kinks": self.skipped_kinks}


def _probe_instance(n: int, label, rng: np.random.Generator):
    from .data import Instance

    words = [f"w{k}" for k in range(30)]
    text = lambda: " ".join(rng.choice(words, size=4))  # noqa: E731
    return Instance(f"probe-{n}", [text() for _ in range(n)], [text() for _ in range(n - 1)], label, f"probe-{n}")


def gradient_check(m: int = 8, seed: int = 0, d: int = 16, h: float = 1e-4,
                   config: Optional[TrainConfig] = None) -> GradCheckResult:
    """Backward vs central differences over every parameter of a random model.

    One instance per length 3, 4, 5 (scene drift, threshold effect and
    reliable labels respectively), with the sampling noise frozen.
    """
    from .losses import NONE, InstanceLabel

    rng = np.random.default_rng(seed)
    cfg = config or TrainConfig(m=m, seed=seed, provider_params={"dim": d})
    model = ReCoModel(cfg, rng=rng)
    labels = {3: InstanceLabel(False, SCENE), 4: InstanceLabel(False, THRESHOLD), 5: InstanceLabel(True, NONE)}
    per_length, worst, kinks = {}, (0.0, None), 0
    for n, label in labels.items():
        inst = _probe_instance(n, label, rng)
        eps = [rng.standard_normal(cfg.m) for _ in range(n - 1)]

        def f(_store):
            return model.group_loss(inst, epsilon=eps)[0].item()

        with Trace() as tape:
            loss, _ = model.group_loss(inst, epsilon=eps)
        analytic = nx.backward(tape, loss, model.store)
        numeric = nx.finite_diff(f, model.store, h=h)
        err_n = 0.0
        for name in model.store.names():
            err = nx.rel_error(analytic[name], numeric[name])
            bad = numeric.nonsmooth[name]
            if bad:
                kinks += len(bad)
                err.reshape(-1)[bad] = 0.0
            e = float(err.max()) if err.size else 0.0
            err_n = max(err_n, e)
            if e > worst[0]:
                worst = (e, (n, name))
        per_length[n] = err_n
    return GradCheckResult(max(per_length.values()), per_length, worst[1] or (None, None), kinks)
