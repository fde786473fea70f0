"""Rank-r spiked tensor model with correlated spikes and Gaussian noise.

``T = sum_i beta_i x_{i,1} (x) ... (x) x_{i,d} + W / sqrt(N)`` with
``N = n_1 + ... + n_d`` and i.i.d. standard normal ``W``.

Random streams come from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=(stream,))``; the spike directions and the
noise use different streams of the same seed, so changing the signal strengths
never changes the noise draw.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import as_tensor, outer_product

__all__ = [
    "ModelParams",
    "SpikeSet",
    "FormatError",
    "make_rng",
    "alpha_tensor",
    "generate_correlated_spikes",
    "sample_noise",
    "assemble_model",
    "generate_model",
    "save_model",
    "load_model",
]

SPIKE_STREAM = 0
NOISE_STREAM = 1

MAGIC = b"SPKT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed model file or configuration field."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``; seeds are unsigned 64-bit."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))


def alpha_tensor(alpha, r: int, d: int) -> np.ndarray:
    """Expand a correlation spec to a ``(d, r, r)`` array with unit diagonal.

    ``alpha`` may be a scalar (same for every pair and mode), an ``(r, r)``
    matrix shared by all modes, or a full ``(d, r, r)`` array.  Only the
    off-diagonal entries are read.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim == 0:
        out = np.full((d, r, r), float(a))
    elif a.shape == (r, r):
        out = np.broadcast_to(a, (d, r, r)).copy()
    elif a.shape == (d, r, r):
        out = a.copy()
    else:
        raise ValueError(f"alphas must be scalar, ({r},{r}) or ({d},{r},{r}); got shape {a.shape}")
    idx = np.arange(r)
    out[:, idx, idx] = 1.0
    return out


@dataclass
class ModelParams:
    dims: tuple[int, ...]
    betas: tuple[float, ...]
    alphas: np.ndarray = field(default=None)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.dims) < 3:
            raise ValueError("order d must be >= 3")
        if any(n <= 0 for n in self.dims):
            raise ValueError(f"dimensions must be positive, got {self.dims}")
        if len(self.betas) < 1:
            raise ValueError("rank must be >= 1")
        if any(b < 0 for b in self.betas):
            raise ValueError(f"betas must be non-negative, got {self.betas}")
        self.alphas = alpha_tensor(0.0 if self.alphas is None else self.alphas, self.r, self.d)
        off = ~np.eye(self.r, dtype=bool)
        if np.any(self.alphas[:, off] < 0) or np.any(self.alphas[:, off] > 1):
            raise ValueError("alphas must lie in [0, 1]")
        if np.any(np.abs(self.alphas - self.alphas.transpose(0, 2, 1)) > 0):
            raise ValueError("alphas must be symmetric in the spike indices")

    @property
    def r(self) -> int:
        return len(self.betas)

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def N(self) -> int:
        return sum(self.dims)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "betas": list(self.betas),
                "alphas": self.alphas.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        for key in ("dims", "betas"):
            if key not in data:
                raise FormatError(f"model: missing field '{key}'")
        try:
            return cls(dims=data["dims"], betas=data["betas"],
                       alphas=data.get("alphas", data.get("alpha", 0.0)),
                       seed=int(data.get("seed", 0)))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"model: {exc}") from exc


@dataclass
class SpikeSet:
    """``components[i][l]`` is the unit vector ``x_{i,l}``; ``realized_gram[l]`` is ``X_l^T X_l``."""

    weights: tuple[float, ...]
    components: list[list[np.ndarray]]
    realized_gram: np.ndarray

    @property
    def r(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return len(self.components[0])

    def tensor(self) -> np.ndarray:
        """The noiseless signal ``sum_i beta_i x_{i,1} (x) ... (x) x_{i,d}``."""
        out = None
        for beta, comp in zip(self.weights, self.components):
            term = outer_product(comp, beta)
            out = term if out is None else out + term
        return out


def _gram_factor(gram: np.ndarray) -> np.ndarray:
    # F with F F^T = gram; Cholesky when definite, eigen-factor when only semidefinite
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(gram)
        if w.min() < -1e-12:
            raise ValueError(f"target Gram matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
        return v * np.sqrt(np.clip(w, 0.0, None))


def generate_correlated_spikes(params: ModelParams) -> SpikeSet:
    """Unit spike vectors whose per-mode Gram matrix equals the target exactly.

    Per mode: orthonormalize ``r`` Gaussian draws, then mix them with a
    square-root factor of the target Gram matrix.
    """
    r, d = params.r, params.d
    for ell, n in enumerate(params.dims):
        if n < r:
            raise ValueError(f"mode {ell} has dimension {n} < rank {r}")
    factors = []
    for ell in range(d):
        w = np.linalg.eigvalsh(params.alphas[ell])
        if w.min() < -1e-12:
            raise ValueError(f"mode {ell}: target Gram matrix is not positive semidefinite")
        factors.append(_gram_factor(params.alphas[ell]))
    rng = make_rng(params.seed, SPIKE_STREAM)
    comps = [[None] * d for _ in range(r)]
    gram = np.empty((d, r, r))
    for ell, n in enumerate(params.dims):
        q, _ = np.linalg.qr(rng.standard_normal((n, r)))
        x = q @ factors[ell].T
        x /= np.linalg.norm(x, axis=0)
        for i in range(r):
            comps[i][ell] = np.ascontiguousarray(x[:, i])
        gram[ell] = x.T @ x
    return SpikeSet(params.betas, comps, gram)


def sample_noise(dims: Sequence[int], seed: int, stream: int = NOISE_STREAM) -> np.ndarray:
    """I.i.d. standard normal tensor of shape ``dims``."""
    dims = tuple(int(n) for n in dims)
    if not dims or any(n <= 0 for n in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    return make_rng(seed, stream).standard_normal(dims)


def assemble_model(spikes: SpikeSet, noise: np.ndarray) -> np.ndarray:
    """``sum_i beta_i outer(x_{i,.}) + noise / sqrt(N)``."""
    noise = as_tensor(noise)
    shape = tuple(len(v) for v in spikes.components[0])
    if noise.shape != shape:
        raise ValueError(f"noise shape {noise.shape} does not match spike dimensions {shape}")
    return spikes.tensor() + noise / np.sqrt(sum(shape))


def generate_model(params: ModelParams) -> tuple[np.ndarray, SpikeSet]:
    spikes = generate_correlated_spikes(params)
    noise = sample_noise(params.dims, params.seed)
    return assemble_model(spikes, noise), spikes


def save_model(path, t: np.ndarray) -> None:
    """Raw binary dump.

    Layout (little-endian): ``b"SPKT"``, ``u32`` version, ``u32`` order ``d``,
    ``d`` x ``u64`` dimensions, then the row-major data as ``f64``.
    """
    t = as_tensor(t)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, t.ndim))
        fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        fh.write(t.astype("<f8").tobytes(order="C"))


def load_model(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, d = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if d < 2 or len(raw) < 12 + 8 * d:
        raise FormatError(f"{path}: bad order field {d}")
    dims = struct.unpack_from(f"<{d}Q", raw, 12)
    offset = 12 + 8 * d
    count = int(np.prod(dims))
    if len(raw) - offset != 8 * count:
        raise FormatError(f"{path}: data length {len(raw) - offset} bytes does not match dims {dims}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)
