"""Causal-chain datasets: record types, chain -> instance splitting, JSONL
I/O, joining causal pairs into chains, and a synthetic generator whose
labels come from known scene/magnitude latents.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoder import RawChain, tokenize
from .losses import NONE, SCENE, THRESHOLD, InstanceLabel

log = logging.getLogger(__name__)

CHAIN_KIND = "chain"
INSTANCE_KIND = "instance"


class RecordError(ValueError):
    """A JSONL record failed to parse or validate."""

    def __init__(self, msg, path=None, lineno=None):
        self.path, self.lineno = path, lineno
        where = f"{path}:{lineno}: " if lineno is not None else ""
        super().__init__(where + msg)


class ChainRejected(ValueError):
    pass


def _check_texts(kind, id_, texts, n):
    if not isinstance(texts, list) or len(texts) != n:
        got = len(texts) if isinstance(texts, list) else type(texts).__name__
        raise RecordError(f"{kind} {id_}: expected {n} texts, got {got}")
    for t in texts:
        if not isinstance(t, str) or not t.strip():
            raise RecordError(f"{kind} {id_}: empty or non-string text")


def _problem_in(value) -> str:
    return NONE if value in (None, NONE) else value


def _problem_out(value: str):
    return None if value == NONE else value


@dataclass
class AnnotatedChain:
    id: str
    events: list
    contexts: list
    break_edge: Optional[int]
    problem: str = NONE

    def __post_init__(self):
        self.problem = _problem_in(self.problem)
        _check_texts("chain", self.id, self.events, 5)
        _check_texts("chain", self.id, self.contexts, 4)
        if self.break_edge is not None and self.break_edge not in (1, 2, 3, 4):
            raise RecordError(f"chain {self.id}: break_edge must be 1-4 or null, got {self.break_edge!r}")
        if self.problem not in (NONE, THRESHOLD, SCENE):
            raise RecordError(f"chain {self.id}: unknown problem {self.problem!r}")
        if (self.break_edge is None) != (self.problem == NONE):
            raise RecordError(f"chain {self.id}: break_edge={self.break_edge} inconsistent "
                              f"with problem={_problem_out(self.problem)}")

    def to_json(self) -> dict:
        return {"kind": CHAIN_KIND, "id": self.id, "events": self.events, "contexts": self.contexts,
                "break_edge": self.break_edge, "problem": _problem_out(self.problem)}

    @classmethod
    def from_json(cls, rec: dict) -> "AnnotatedChain":
        return cls(rec["id"], rec["events"], rec["contexts"], rec.get("break_edge"), rec.get("problem"))


@dataclass
class Instance:
    id: str
    events: list
    contexts: list
    label: InstanceLabel
    source_chain: str

    def __post_init__(self):
        n = len(self.events) if isinstance(self.events, list) else 0
        if not 3 <= n <= 5:
            raise RecordError(f"instance {self.id}: needs 3-5 events, got {n}")
        _check_texts("instance", self.id, self.events, n)
        _check_texts("instance", self.id, self.contexts, n - 1)

    @property
    def length(self) -> int:
        return len(self.events)

    def raw(self) -> RawChain:
        return RawChain(self.id, self.events, self.contexts)

    def to_json(self) -> dict:
        return {"kind": INSTANCE_KIND, "id": self.id, "source_chain": self.source_chain,
                "length": self.length, "events": self.events, "contexts": self.contexts,
                "reliable": self.label.reliable, "problem": _problem_out(self.label.problem)}

    @classmethod
    def from_json(cls, rec: dict) -> "Instance":
        try:
            label = InstanceLabel(bool(rec["reliable"]), _problem_in(rec.get("problem")))
        except ValueError as exc:
            raise RecordError(f"instance {rec.get('id')}: {exc}") from exc
        inst = cls(rec["id"], rec["events"], rec["contexts"], label, rec.get("source_chain", rec["id"]))
        if "length" in rec and rec["length"] != inst.length:
            raise RecordError(f"instance {inst.id}: length field {rec['length']} != {inst.length} events")
        return inst


@dataclass
class CausalPair:
    cause: str
    effect: str
    context: str

    def __post_init__(self):
        for t in (self.cause, self.effect, self.context):
            if not t or not t.strip():
                raise ValueError("causal pair texts must be non-empty")


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------

def split_chain(chain: AnnotatedChain) -> list[Instance]:
    """Prefix instances of lengths 3..5 for one annotated chain.

    A prefix of length L is reliable iff all its L-1 edges precede the break
    edge; only the first broken prefix (L = break_edge + 1) is emitted as a
    negative. Chains broken at edge 1 have no reliable antecedent and raise
    :class:`ChainRejected`.
    """
    b = chain.break_edge
    if b == 1:
        raise ChainRejected(f"chain {chain.id}: breaks at edge 1, no reliable antecedent")
    last = 5 if b is None else min(b + 1, 5)
    out = []
    for L in range(3, last + 1):
        reliable = b is None or L <= b
        label = InstanceLabel(True) if reliable else InstanceLabel(False, chain.problem)
        out.append(Instance(f"{chain.id}-{L}", chain.events[:L], chain.contexts[:L - 1], label, chain.id))
    return out


def split_chains(chains: Iterable[AnnotatedChain]):
    """Split many chains; returns (instances, rejected chain ids)."""
    instances, rejected = [], []
    for ch in chains:
        try:
            instances.extend(split_chain(ch))
        except ChainRejected as exc:
            log.info("%s", exc)
            rejected.append(ch.id)
    return instances, rejected


def length_counts(instances: Sequence[Instance]) -> dict:
    counts = {3: 0, 4: 0, 5: 0}
    for inst in instances:
        counts[inst.length] += 1
    return counts


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

def read_jsonl(path, kind: str = CHAIN_KIND) -> list:
    """Read chains (default) or instances; every bad line is reported with its number."""
    cls = AnnotatedChain if kind == CHAIN_KIND else Instance
    out, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise RecordError("record is not a JSON object")
                if rec.get("kind", kind) != kind:
                    raise RecordError(f"expected kind {kind!r}, got {rec.get('kind')!r}")
                out.append(cls.from_json(rec))
            except json.JSONDecodeError as exc:
                errors.append(RecordError(f"invalid JSON ({exc.msg})", path, lineno))
            except (RecordError, KeyError, TypeError, ValueError) as exc:
                errors.append(RecordError(str(exc) if not isinstance(exc, KeyError)
                                          else f"missing field {exc}", path, lineno))
    if errors:
        err = errors[0]
        if len(errors) > 1:
            err = RecordError(f"{len(errors)} bad records; first: {errors[0]}")
        err.errors = errors
        raise err
    return out


def write_jsonl(path, records: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


# --------------------------------------------------------------------------
# Joining causal pairs into chains
# --------------------------------------------------------------------------

def jaccard(a: str, b: str) -> float:
    ta, tb = set(tokenize(a)), set(tokenize(b))
    union = ta | tb
    if not union:
        return 0.0
    return len(ta & tb) / len(union)


def _successors(pairs: Sequence[CausalPair], sim_threshold: float) -> list[list[int]]:
    succ = []
    for p in pairs:
        succ.append([j for j, q in enumerate(pairs) if jaccard(p.effect, q.cause) >= sim_threshold])
    return succ


def _contiguous_in(short: tuple, long: tuple) -> bool:
    k = len(short)
    return any(long[i:i + k] == short for i in range(len(long) - k + 1))


def select_chains(paths: Iterable[tuple], pairs: Sequence[CausalPair], max_overlap: int) -> list[RawChain]:
    """Canonical ordering, sub-chain removal and greedy overlap filtering.

    Shared by :func:`join_pairs_into_chains` and its brute-force oracle.
    """
    paths = sorted(set(paths))
    maximal = [p for p in paths if not any(q != p and len(q) > len(p) and _contiguous_in(p, q) for q in paths)]
    accepted: list[tuple[tuple, set]] = []
    out = []
    for path in maximal:
        events = [pairs[path[0]].cause] + [pairs[i].effect for i in path]
        ev_set = set(events)
        if all(len(ev_set & other) <= max_overlap for _, other in accepted):
            accepted.append((path, ev_set))
            out.append(RawChain("chain-" + "-".join(map(str, path)), events, [pairs[i].context for i in path]))
    return out


def join_pairs_into_chains(pairs: Sequence[CausalPair], sim_threshold: float, max_len: int = 5,
                           max_overlap: int = 3) -> list[RawChain]:
    """Breadth-first extension of causal pairs into chains of 3..max_len events.

    Pair (e -> f) extends a chain ending in event g when jaccard(g, e) >=
    sim_threshold; no pair or event text repeats within a chain. Candidates
    are the chains that reach ``max_len`` or cannot be extended; candidates
    contained in a longer candidate are dropped; the rest are accepted
    greedily (lexicographic pair-index order) while every two accepted
    chains share at most ``max_overlap`` events.
    """
    if not 0 < sim_threshold <= 1:
        raise ValueError("sim_threshold must be in (0, 1]")
    succ = _successors(pairs, sim_threshold)
    found = []
    queue = deque((i,) for i in range(len(pairs)))
    while queue:
        path = queue.popleft()
        events = [pairs[path[0]].cause] + [pairs[i].effect for i in path]
        extended = False
        if len(events) < max_len:
            for j in succ[path[-1]]:
                if j in path or pairs[j].effect in events:
                    continue
                queue.append(path + (j,))
                extended = True
        if not extended and len(events) >= 3:
            found.append(path)
    return select_chains(found, pairs, max_overlap)


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------

LOW, HIGH = 0, 1


@dataclass
class SynthSpec:
    n_chains: int = 100
    n_scenes: int = 4
    n_concepts: int = 40
    p_scene_break: float = 0.25
    p_threshold_break: float = 0.25
    # probability that a context's scene/magnitude tokens are replaced at random
    context_noise: float = 0.0
    # add joint tokens for the (previous, current) scene and magnitude of the
    # incoming edge, so each problem is linearly separable from one event
    transition_tags: bool = True

    def validate(self):
        if self.n_chains < 0:
            raise ValueError("n_chains must be >= 0")
        if self.n_scenes < 2 or self.n_concepts < 2:
            raise ValueError("need at least 2 scenes and 2 concepts")
        for name in ("p_scene_break", "p_threshold_break", "context_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.p_scene_break + self.p_threshold_break > 1.0:
            raise ValueError("p_scene_break + p_threshold_break must be <= 1")


@dataclass
class ChainLatents:
    """Per-edge latents of one synthetic chain (index 0 is edge 1)."""
    scene: list
    produced: list  # magnitude an edge's cause delivers
    required: list  # magnitude an edge's cause needs from upstream
    concepts: list = field(default_factory=list)


def label_from_latents(lat: ChainLatents):
    """First edge i >= 2 whose scene differs from edge i-1's, or whose required
    magnitude exceeds what edge i-1 produced. Returns (break_edge, problem)."""
    for i in range(1, 4):
        if lat.scene[i] != lat.scene[i - 1]:
            return i + 1, SCENE
        if lat.produced[i - 1] < lat.required[i]:
            return i + 1, THRESHOLD
    return None, NONE


def _mag(v):
    return "high" if v == HIGH else "low"


def render_chain(id_: str, lat: ChainLatents, rng: np.random.Generator, spec: SynthSpec) -> AnnotatedChain:
    """Texts for a chain. Event X_{i+1} carries the latents of edge i (X_1 those of edge 1)."""
    events = []
    for j in range(5):
        e = max(j - 1, 0)
        text = (f"concept_{lat.concepts[j]} scene_{lat.scene[e]} "
                f"gives_{_mag(lat.produced[e])} needs_{_mag(lat.required[e])}")
        if spec.transition_tags:
            p = max(e - 1, 0)
            given = lat.produced[p] if e > 0 else HIGH
            text += f" shift_{lat.scene[p]}_{lat.scene[e]} flow_{_mag(given)}_{_mag(lat.required[e])}"
        events.append(text)
    contexts = []
    for i in range(4):
        s, g, r = lat.scene[i], lat.produced[i], lat.required[i]
        if spec.context_noise and rng.random() < spec.context_noise:
            s = int(rng.integers(spec.n_scenes))
            g, r = int(rng.integers(2)), int(rng.integers(2))
        contexts.append(f"ctx scene_{s} mag_{_mag(g)} need_{_mag(r)}")
    b, problem = label_from_latents(lat)
    return AnnotatedChain(id_, events, contexts, b, problem)


def _sample_latents(rng: np.random.Generator, spec: SynthSpec):
    concepts = [int(c) for c in rng.choice(spec.n_concepts, size=5, replace=False)] \
        if spec.n_concepts >= 5 else [int(c) for c in rng.integers(spec.n_concepts, size=5)]
    s0 = int(rng.integers(spec.n_scenes))
    scene = [s0] * 4
    produced = [int(rng.integers(2)) for _ in range(4)]
    # reliable by construction: an edge needs "high" only if upstream gives "high"
    required = [int(rng.integers(2))] + [HIGH if produced[i - 1] == HIGH and rng.random() < 0.5 else LOW
                                         for i in range(1, 4)]
    u = rng.random()
    edge = None
    kind = SCENE if u < spec.p_scene_break else THRESHOLD if u < spec.p_scene_break + spec.p_threshold_break else NONE
    if kind != NONE:
        edge = int(rng.integers(2, 5))  # 1-based edge in {2,3,4}
        i = edge - 1
        if kind == SCENE:
            new = int(rng.integers(spec.n_scenes - 1))
            new = new + 1 if new >= scene[i - 1] else new
            for k in range(i, 4):
                scene[k] = new
            # keep the magnitude condition satisfied at the break edge
            if produced[i - 1] < required[i]:
                required[i] = LOW
        else:
            produced[i - 1], required[i] = LOW, HIGH
    return ChainLatents(scene, produced, required, concepts), edge, kind


def gen_synthetic(spec: SynthSpec, seed: int = 0) -> list[AnnotatedChain]:
    """Chains whose break edge and problem follow from sampled latents.

    Each chain uses its own generator seeded by (seed, index), so chains can
    be produced independently. Labels are checked against the independent
    :func:`label_from_latents` oracle.
    """
    spec.validate()
    out = []
    for k in range(spec.n_chains):
        rng = np.random.default_rng([seed, k])
        lat, edge, kind = _sample_latents(rng, spec)
        ch = render_chain(f"syn-{seed}-{k:06d}", lat, rng, spec)
        if (ch.break_edge, ch.problem) != (edge, kind):
            raise AssertionError(f"generator/oracle disagreement on chain {ch.id}")
        out.append(ch)
    return out


def chain_bucket(chain_id: str, salt: int = 0) -> float:
    """Deterministic position in [0, 1) for hash-based splitting."""
    h = hashlib.blake2b(f"{salt}:{chain_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2 ** 64
