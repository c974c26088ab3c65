"""Biohash templates: PCA, keyed random projection, mean-threshold quantization.

    y = A (x - w)          PCA coefficients
    z = R_GS y             projection on a key-seeded orthonormal basis
    bit_j = [z_j >= mean(z)]

Biohashes are uint8 numpy arrays of 0/1 values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_LENGTH = 256
TABLE_LENGTHS = (112, 192, 256, 512, 2048)
PIVOT_FLOOR = 1e-12


class RankDeficientError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} is linearly dependent on the rows above it")
        self.row = row


def default_mu(length: int) -> int:
    return length // 4


# -- keyed Gaussian stream ---------------------------------------------------

def keyed_words(key: bytes, count: int, start: int = 0) -> np.ndarray:
    """uint64 words: first 8 bytes of SHA-256(key || counter), counter big-endian."""
    digests = b"".join(hashlib.sha256(key + i.to_bytes(8, "big")).digest()[:8]
                       for i in range(start, start + count))
    return np.frombuffer(digests, dtype=">u8").astype(np.uint64)


def keyed_normals(key: bytes, count: int) -> np.ndarray:
    """``count`` standard normals from the keyed word stream via Box-Muller.

    Each pair of words (w1, w2) maps to u = (w + 1) / 2**64 in (0, 1] and
    yields r*cos(2 pi u2), r*sin(2 pi u2) with r = sqrt(-2 ln u1).
    """
    pairs = (count + 1) // 2
    words = keyed_words(key, 2 * pairs)
    u = (words.astype(np.float64) + 1.0) * 2.0 ** -64
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]


# -- linear algebra ----------------------------------------------------------

def gram_schmidt(m) -> np.ndarray:
    """Orthonormalize the rows of ``m``, keeping the row space.

    Each row is projected out against the finished rows twice, which keeps
    orthogonality at machine precision even for badly conditioned input.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("gram_schmidt expects a 2-D matrix")
    q = np.zeros_like(m)
    for i, row in enumerate(m):
        scale = np.linalg.norm(row)
        v = row.copy()
        for _ in range(2):
            v -= q[:i].T @ (q[:i] @ v)
        norm = np.linalg.norm(v)
        if scale == 0 or norm < PIVOT_FLOOR * scale:
            raise RankDeficientError(i)
        q[i] = v / norm
    return q


@dataclass(frozen=True)
class PcaModel:
    components: np.ndarray  # k x d, orthonormal rows
    mean: np.ndarray        # d

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, components=self.components, mean=self.mean)

    @classmethod
    def load(cls, path) -> "PcaModel":
        with np.load(path) as data:
            return cls(components=data["components"], mean=data["mean"])


def pca_train(samples, k: int) -> PcaModel:
    """Top-k eigenvectors of the sample covariance, largest eigenvalue first."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two samples of equal dimension")
    s, d = x.shape
    if not 1 <= k <= min(s - 1, d):
        raise ValueError(f"k={k} must lie in [1, {min(s - 1, d)}]")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    w = x.mean(axis=0)
    xc = x - w
    if d <= s:
        vals, vecs = np.linalg.eigh(xc.T @ xc / (s - 1))
        order = np.argsort(vals)[::-1][:k]
        vals, comps = vals[order], vecs[:, order].T
    else:
        # fewer samples than dimensions: diagonalize the s x s Gram matrix instead
        vals, u = np.linalg.eigh(xc @ xc.T / (s - 1))
        order = np.argsort(vals)[::-1][:k]
        vals = vals[order]
        comps = (xc.T @ u[:, order]).T
        norms = np.linalg.norm(comps, axis=1)
        if np.any(norms == 0):
            raise ValueError("samples are degenerate")
        comps = comps / norms[:, None]
    top = vals[0] if len(vals) else 0.0
    if top <= 0 or vals[-1] <= 1e-12 * top:
        raise ValueError("samples are degenerate: covariance rank is below k")
    # fix each eigenvector's sign so training is reproducible
    pivots = comps[np.arange(k), np.argmax(np.abs(comps), axis=1)]
    comps = comps * np.where(pivots < 0, -1.0, 1.0)[:, None]
    return PcaModel(components=np.ascontiguousarray(comps), mean=w)


def pca_project(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.mean.shape:
        raise ValueError(f"feature dimension {x.shape} does not match model {model.mean.shape}")
    return model.components @ (x - model.mean)


@dataclass(frozen=True)
class RpMatrix:
    matrix: np.ndarray  # l x k, orthonormal rows
    key_fingerprint: str


def key_fingerprint(key: bytes) -> str:
    return hashlib.sha256(b"thrive-biohash-key" + key).hexdigest()[:16]


def gen_rp_matrix(key: bytes, length: int, k: int) -> RpMatrix:
    if not key:
        raise ValueError("biohash key must not be empty")
    if not 1 <= length <= k:
        raise ValueError(f"cannot build {length} orthonormal rows in dimension {k}")
    raw = keyed_normals(key, length * k).reshape(length, k)
    return RpMatrix(gram_schmidt(raw), key_fingerprint(key))


# -- templates ---------------------------------------------------------------

def quantize(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("cannot quantize an empty vector")
    return (z >= z.mean()).astype(np.uint8)


def biohash(model: PcaModel, key: bytes, x, length: int = DEFAULT_LENGTH) -> np.ndarray:
    rp = gen_rp_matrix(key, length, model.k)
    return quantize(rp.matrix @ pca_project(model, x))


def _pair(a, b):
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"biohash lengths differ: {a.size} vs {b.size}")
    return a, b


def hamming(a, b) -> int:
    a, b = _pair(a, b)
    return int(np.count_nonzero(a != b))


def matches(a, b, mu: int) -> bool:
    if mu < 0:
        raise ValueError("threshold must be non-negative")
    return hamming(a, b) <= mu


# -- feature files -----------------------------------------------------------

def read_features(path) -> np.ndarray:
    """Read a feature CSV: one vector per line, optional ``dim=<k>`` first line."""
    rows, dim = [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.startswith("dim="):
            dim = int(line[4:])
            continue
        rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise ValueError(f"{path}: no feature vectors")
    width = dim if dim is not None else len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: vector {i} has {len(row)} values, expected {width}")
    out = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{path}: non-finite feature values")
    return out


def write_features(path, vectors, header: bool = True) -> None:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    lines = [f"dim={vectors.shape[1]}"] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in vectors]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synthetic_users(n_users: int, samples: int, dim: int, noise: float = 0.05, rng=None) -> np.ndarray:
    """Gaussian stand-in for face features: shape (n_users, samples, dim).

    Each user has a standard normal identity vector; samples add isotropic
    noise of ``noise`` times the per-coordinate signal scale.
    """
    rng = rng if rng is not None else np.random.default_rng()
    centers = rng.standard_normal((n_users, 1, dim))
    return centers + noise * rng.standard_normal((n_users, samples, dim))
