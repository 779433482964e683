"""Circular substructure fingerprints and a logistic-regression baseline.

The fingerprint is an iterative-hash scheme over atom environments: round 0
hashes each atom's invariant tuple, every later round hashes the atom's
previous identifier together with the sorted (bond type, neighbor
identifier) pairs, and all identifiers from all rounds are folded modulo
the bit length. Hashing is FNV-1a 64-bit over a fixed little-endian
serialization, so fingerprints are bit-identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .molgraph import HCOUNT_SLOTS, MolecularGraph

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

DEFAULT_RADIUS = 2
DEFAULT_NBITS = 1024


def fnv1a64(data: bytes) -> int:
    value = FNV64_OFFSET
    for byte in data:
        value ^= byte
        value = (value * FNV64_PRIME) & _MASK64
    return value


def _hash_ints(values: Iterable[int]) -> int:
    """FNV-1a over each integer as 8 little-endian bytes, in order."""
    return fnv1a64(b"".join(v.to_bytes(8, "little") for v in values))


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray  # uint8 0/1, length nbits
    radius: int
    nbits: int

    def popcount(self) -> int:
        return int(self.bits.sum())

    def to_hex(self) -> str:
        """nbits/4 hex characters, bit 0 is the most significant bit."""
        value = 0
        for bit in self.bits:
            value = (value << 1) | int(bit)
        return format(value, f"0{self.nbits // 4}x")

    @classmethod
    def from_hex(cls, text: str, radius: int = DEFAULT_RADIUS) -> "Fingerprint":
        nbits = 4 * len(text)
        value = int(text, 16)
        bits = np.fromiter(((value >> (nbits - 1 - k)) & 1 for k in range(nbits)), dtype=np.uint8, count=nbits)
        return cls(bits=bits, radius=radius, nbits=nbits)


def atom_identifiers(graph: MolecularGraph, radius: int) -> list[list[int]]:
    """Per-round atom environment identifiers, rounds 0..radius."""
    if graph.element_slots is None:
        raise ValueError("graph is not featurized; element slots are part of the atom invariant")
    m = graph.n_nodes
    bonded: list[list[tuple[int, int]]] = [[] for _ in range(m)]  # (bond type, neighbor)
    for e in graph.edges:
        bonded[e.i].append((e.relation, e.j))
        bonded[e.j].append((e.relation, e.i))

    current = [
        _hash_ints((graph.element_slots[i], node.degree, min(node.h_neighbors, HCOUNT_SLOTS - 1)))
        for i, node in enumerate(graph.nodes)
    ]
    rounds = [current]
    for r in range(1, radius + 1):
        nxt = []
        for i in range(m):
            pairs = sorted((bond_type, current[j]) for bond_type, j in bonded[i])
            flat = [r, current[i]]
            for bond_type, neighbor_id in pairs:
                flat.append(bond_type)
                flat.append(neighbor_id)
            nxt.append(_hash_ints(flat))
        rounds.append(nxt)
        current = nxt
    return rounds


def circular_fingerprint(
    graph: MolecularGraph,
    radius: int = DEFAULT_RADIUS,
    nbits: int = DEFAULT_NBITS,
) -> Fingerprint:
    """Fold every identifier from every round into an nbits bit vector."""
    if nbits < 2 or nbits & (nbits - 1):
        raise ValueError(f"nbits must be a power of two >= 2, got {nbits}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    bits = np.zeros(nbits, dtype=np.uint8)
    for round_ids in atom_identifiers(graph, radius):
        for identifier in round_ids:
            bits[identifier % nbits] = 1
    return Fingerprint(bits=bits, radius=radius, nbits=nbits)


def fingerprint_csv(rows: Sequence[tuple[str, Fingerprint]]) -> str:
    """Export as ``id,hexstring`` lines with a header."""
    lines = ["id,fingerprint"]
    lines.extend(f"{example_id},{fp.to_hex()}" for example_id, fp in rows)
    return "\n".join(lines) + "\n"


# -- logistic-regression baseline ---------------------------------------------


@dataclass(frozen=True)
class LogisticConfig:
    steps: int = 400
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2: float = 1e-4


@dataclass(eq=False)
class LogisticModel:
    weights: np.ndarray
    bias: float


def _design_matrix(fingerprints: Sequence[Fingerprint] | np.ndarray) -> np.ndarray:
    if isinstance(fingerprints, np.ndarray):
        return np.asarray(fingerprints, dtype=np.float64)
    widths = {fp.nbits for fp in fingerprints}
    if len(widths) > 1:
        raise ValueError(f"fingerprints of mixed lengths {sorted(widths)}")
    return np.stack([fp.bits for fp in fingerprints]).astype(np.float64)


def logistic_baseline_train(
    fingerprints: Sequence[Fingerprint] | np.ndarray,
    labels: Sequence[int],
    config: LogisticConfig = LogisticConfig(),
) -> LogisticModel:
    """L2-regularized logistic regression, fit full-batch with the same
    adaptive optimizer as the main model. Deterministic (zero init)."""
    from .training import AdamState, adam_step

    x = _design_matrix(fingerprints)
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ValueError(f"{x.shape[0]} fingerprints but {y.shape} labels")
    params = {"weights": np.zeros(x.shape[1]), "bias": np.zeros(1)}
    state = AdamState.for_params(params)
    n = x.shape[0]
    for _ in range(config.steps):
        z = x @ params["weights"] + params["bias"][0]
        p = 1.0 / (1.0 + np.exp(-z))
        residual = (p - y) / n
        grads = {
            "weights": x.T @ residual + 2.0 * config.l2 * params["weights"],
            "bias": np.asarray([residual.sum()]),
        }
        adam_step(params, grads, state, config)
    return LogisticModel(weights=params["weights"], bias=float(params["bias"][0]))


def logistic_baseline_predict(model: LogisticModel, fingerprint: Fingerprint | np.ndarray) -> float:
    bits = fingerprint.bits if isinstance(fingerprint, Fingerprint) else fingerprint
    z = float(np.asarray(bits, dtype=np.float64) @ model.weights + model.bias)
    return 1.0 / (1.0 + np.exp(-z))
