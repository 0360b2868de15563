"""Synthetic data, dataset files, and client partitioning."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation
from .models import Batch
from .numkit import RngStream, sym_eig

DIRICHLET_MAX_ATTEMPTS = 100
FPD1_MAGIC = b"FPD1"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.labels) != self.features.shape[0]:
            raise ContractViolation("features must be (n, dim) with one label per row")
        if len(self.labels) < 1:
            raise ContractViolation("dataset must contain at least one sample")
        if np.issubdtype(self.labels.dtype, np.integer):
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise ContractViolation("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.features, self.labels)
        return Batch(self.features[idx], self.labels[idx])


def gen_blobs(num_classes: int, dim: int, n: int, spread: float, seed: RngStream) -> Dataset:
    """Gaussian blobs around class centers on the radius-3 sphere.

    Labels cycle through the classes so class counts differ by at most one.
    """
    if n < num_classes:
        raise ContractViolation("need at least one sample per class")
    gen = seed.generator()
    centers = gen.normal(size=(num_classes, dim))
    centers *= 3.0 / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(n) % num_classes
    features = centers[labels] + spread * gen.normal(size=(n, dim))
    return Dataset(features, labels.astype(np.int64), num_classes)


def _random_rotation(gen: np.random.Generator, d: int) -> np.ndarray:
    Q, R = np.linalg.qr(gen.normal(size=(d, d)))
    return Q * np.sign(np.diag(R))


@dataclass(frozen=True)
class QuadClientSet:
    """Per-client quadratics ``F_i(w) = 1/2 w^T A_i w - b_i^T w``."""

    A: np.ndarray  # (m, d, d)
    b: np.ndarray  # (m, d)
    w_star: np.ndarray
    mu: float
    L_q: float

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def client_loss(self, i: int, w) -> float:
        return float(0.5 * w @ self.A[i] @ w - self.b[i] @ w)

    def client_grad(self, i: int, w) -> np.ndarray:
        return self.A[i] @ w - self.b[i]

    def loss(self, w) -> float:
        return float(np.mean([self.client_loss(i, w) for i in range(self.m)]))

    def grad(self, w) -> np.ndarray:
        return self.A.mean(axis=0) @ w - self.b.mean(axis=0)

    def client_grads(self, w) -> np.ndarray:
        return np.einsum("ijk,k->ij", self.A, w) - self.b

    @property
    def f_star(self) -> float:
        return self.loss(self.w_star)

    @property
    def smoothness(self) -> float:
        """Largest eigenvalue of the averaged curvature (the exact L of the averaged objective)."""
        return float(sym_eig(self.A.mean(axis=0))[1][0])


def gen_quadratics(m: int, d: int, mu: float, L_q: float, hetero: float, seed: RngStream) -> QuadClientSet:
    """Heterogeneous quadratic clients with a known optimum.

    Every client curvature is a convex blend ``(1-s) A_0 + s A_i'`` of a shared
    matrix and a private one, with ``s = hetero / (1 + hetero)``; both have
    spectra in ``[mu, L_q]``, so the blend does too. Linear terms are
    ``b_i = b + hetero * xi_i``. At ``hetero = 0`` all clients coincide.
    """
    if not 0 < mu <= L_q:
        raise ContractViolation("need 0 < mu <= L_q")
    if hetero < 0:
        raise ContractViolation("hetero must be non-negative")
    gen = seed.generator()

    def spd():
        if mu == L_q:
            return mu * np.eye(d)
        Q = _random_rotation(gen, d)
        lam = gen.uniform(mu, L_q, size=d)
        if d >= 2:
            lam[0], lam[-1] = mu, L_q
        M = (Q * lam) @ Q.T
        return 0.5 * (M + M.T)

    A0 = spd()
    s = hetero / (1.0 + hetero)
    A = np.empty((m, d, d))
    for i in range(m):
        private = spd()
        A[i] = A0 if s == 0.0 else (1.0 - s) * A0 + s * private
    b0 = gen.normal(size=d)
    b = b0 + hetero * gen.normal(size=(m, d))
    w_star = np.linalg.solve(A.mean(axis=0), b.mean(axis=0))
    return QuadClientSet(A, b, w_star, mu, L_q)


@dataclass(frozen=True)
class PartitionScheme:
    kind: str = "iid"
    shards_per_client: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("iid", "shards", "dirichlet"):
            raise ConfigError(f"partition scheme must be iid, shards or dirichlet, got {self.kind!r}")
        if self.shards_per_client < 1:
            raise ConfigError("shards_per_client must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("dirichlet alpha must be positive")


@dataclass(frozen=True)
class Partition:
    assignments: tuple[np.ndarray, ...]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def partition(data: Dataset, scheme: PartitionScheme, m: int, seed: RngStream) -> Partition:
    n = len(data)
    if not 1 <= m <= n:
        raise ConfigError(f"cannot split {n} samples across {m} clients")
    gen = seed.generator()

    if scheme.kind == "iid":
        parts = np.array_split(gen.permutation(n), m)

    elif scheme.kind == "shards":
        num_shards = m * scheme.shards_per_client
        if n % num_shards != 0:
            raise ConfigError(f"{n} samples do not split into {num_shards} equal shards")
        order = np.argsort(data.labels, kind="stable")
        shards = order.reshape(num_shards, -1)
        dealt = gen.permutation(num_shards).reshape(m, scheme.shards_per_client)
        parts = [np.sort(shards[row].ravel()) for row in dealt]

    else:
        labels = np.asarray(data.labels, dtype=np.int64)
        for _ in range(DIRICHLET_MAX_ATTEMPTS):
            buckets = [[] for _ in range(m)]
            for c in range(data.num_classes):
                idx = gen.permutation(np.flatnonzero(labels == c))
                props = gen.dirichlet(np.full(m, scheme.alpha))
                cuts = np.rint(np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
                for i, piece in enumerate(np.split(idx, cuts)):
                    buckets[i].append(piece)
            parts = [np.sort(np.concatenate(b)) for b in buckets]
            if all(len(p) for p in parts):
                break
        else:
            raise ConfigError(
                f"dirichlet partition left a client empty after {DIRICHLET_MAX_ATTEMPTS} attempts"
            )

    return Partition(tuple(np.asarray(p, dtype=np.int64) for p in parts))


def next_batch(data: Dataset, part: Partition, client: int, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw without replacement from one client's shard."""
    idx = part.assignments[client]
    if batch_size > len(idx):
        raise ConfigError(f"batch size {batch_size} exceeds client {client}'s {len(idx)} samples")
    return data.batch(rng.choice(idx, size=batch_size, replace=False))


def train_val_split(data: Dataset, val_fraction: float, seed: RngStream) -> tuple[Dataset, Dataset | None]:
    if val_fraction <= 0:
        return data, None
    n_val = int(round(len(data) * val_fraction))
    if not 0 < n_val < len(data):
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty split")
    perm = seed.generator().permutation(len(data))
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


# file formats -----------------------------------------------------------------

def write_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(data.dim)])
        for y, row in zip(data.labels, data.features):
            writer.writerow([repr(y.item())] + [repr(float(x)) for x in row])


def read_csv(path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
            raise ConfigError(f"{path}: header must be label,f0,f1,...")
        rows = [r for r in reader if r]
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    labels, features = arr[:, 0], arr[:, 1:]
    if np.all(labels == np.round(labels)) and (num_classes is None or num_classes > 1):
        labels = labels.astype(np.int64)
        k = int(labels.max()) + 1 if num_classes is None else num_classes
        return Dataset(features, labels, k)
    return Dataset(features, labels, 1)


def write_fpd1(data: Dataset, path) -> None:
    n, dim = data.features.shape
    with open(path, "wb") as fh:
        fh.write(FPD1_MAGIC + struct.pack("<III", n, dim, data.num_classes))
        fh.write(np.ascontiguousarray(data.features, dtype="<f8").tobytes())
        fh.write(np.asarray(data.labels, dtype="<u4").tobytes())


def read_fpd1(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != FPD1_MAGIC:
        raise ConfigError(f"{path}: not an FPD1 file")
    n, dim, k = struct.unpack_from("<III", raw, 4)
    off = 16
    expected = off + 8 * n * dim + 4 * n
    if len(raw) != expected:
        raise ConfigError(f"{path}: expected {expected} bytes, found {len(raw)}")
    features = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off + 8 * n * dim).astype(np.int64)
    return Dataset(features, labels, k)


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == FPD1_MAGIC:
        return read_fpd1(path)
    return read_csv(path, num_classes)
