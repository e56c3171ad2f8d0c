"""Particle-system data model, rigid motions, and distance featurization.

Positions enter the network only through mean-centered norms/directions and
pairwise distances, so everything downstream is translation-invariant by
construction.  All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

ORTHO_TOL = 1e-10
SIGMA_FLOOR = 1e-6


class ValidationError(ValueError):
    """Input violates a structural invariant (bad rotation, bad type id, ...)."""


@dataclass
class MolecularSystem:
    """Per-particle integer type ids, positions (n x 3), optional velocities."""

    types: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None

    def __post_init__(self):
        self.types = np.asarray(self.types, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=np.float64)
        n = self.types.shape[0]
        if n < 1:
            raise ValidationError("system needs at least one particle")
        if self.positions.shape != (n, 3):
            raise ValidationError(
                f"positions shape {self.positions.shape} does not match n={n}"
            )
        if self.velocities is not None and self.velocities.shape != (n, 3):
            raise ValidationError(
                f"velocities shape {self.velocities.shape} does not match n={n}"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions must be finite")
        if np.any(self.types < 0):
            raise ValidationError("type ids must be non-negative")

    @property
    def n(self) -> int:
        return self.types.shape[0]


@dataclass
class RigidMotion:
    """Orthogonal 3x3 matrix R plus translation t; det(R) = det_sign."""

    R: np.ndarray
    t: np.ndarray
    det_sign: int = 1

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ValidationError("rigid motion needs a 3x3 matrix and a 3-vector")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > ORTHO_TOL:
            raise ValidationError("matrix is not orthogonal within 1e-10")
        if abs(np.linalg.det(self.R) - self.det_sign) > ORTHO_TOL:
            raise ValidationError(
                f"det(R)={np.linalg.det(self.R):.3f} does not match det_sign={self.det_sign}"
            )

    @staticmethod
    def identity() -> "RigidMotion":
        return RigidMotion(np.eye(3), np.zeros(3))


def apply_rigid_motion(sys: MolecularSystem, g: RigidMotion) -> MolecularSystem:
    """Positions map to R r + t; velocities (position differences) only rotate."""
    positions = sys.positions @ g.R.T + g.t
    velocities = None if sys.velocities is None else sys.velocities @ g.R.T
    return MolecularSystem(sys.types.copy(), positions, velocities)


def random_rotation(seed: int, allow_reflection: bool = False) -> RigidMotion:
    """Haar-uniform rotation from a normalized quaternion, plus N(0,1) translation.

    With ``allow_reflection`` one axis is flipped with probability 1/2,
    giving det -1 half the time.
    """
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    det_sign = 1
    if allow_reflection and rng.random() < 0.5:
        R = R @ np.diag([1.0, 1.0, -1.0])
        det_sign = -1
    t = rng.normal(size=3)
    return RigidMotion(R, t, det_sign)


def point_inversion() -> RigidMotion:
    return RigidMotion(-np.eye(3), np.zeros(3), det_sign=-1)


def mean_center(positions: np.ndarray) -> np.ndarray:
    """Subtract the centroid.  The per-coordinate sum runs over sorted values
    so the centroid is bitwise independent of particle order; downstream
    permutation-equivariance then holds to float addition-order noise only."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[-2]
    centroid = np.sort(positions, axis=-2).sum(axis=-2, keepdims=True) / n
    return positions - centroid


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    diff = positions[..., :, None, :] - positions[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def unit_directions(centered: np.ndarray) -> np.ndarray:
    """Row-wise unit vectors; a row exactly at the origin maps to the zero vector."""
    norms = np.linalg.norm(centered, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return np.where(norms == 0.0, 0.0, centered / safe)


@dataclass
class GaussianBasisParams:
    """Bank of K Gaussian responses over a scalar, with learnable affine input.

    ``gamma``/``beta`` are indexed by type id (input featurization) or by
    flattened type-pair id (attention bias).  ``w`` projects the K responses
    to the output width; the bias path instead carries the two dense maps
    ``w`` (K x K) and ``w2`` (K x 1).
    """

    mu: Tensor
    sigma: Tensor
    gamma: Tensor
    beta: Tensor
    w: Tensor
    w2: Tensor | None = None

    @property
    def kernels(self) -> int:
        return self.mu.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.mu": self.mu,
            f"{prefix}.sigma": self.sigma,
            f"{prefix}.gamma": self.gamma,
            f"{prefix}.beta": self.beta,
            f"{prefix}.w": self.w,
        }
        if self.w2 is not None:
            out[f"{prefix}.w2"] = self.w2
        return out


def init_gaussian_basis(rng: np.random.Generator, kernels: int, out_dim: int,
                        table_size: int, pair_table: bool = False,
                        mu_span: float = 3.0) -> GaussianBasisParams:
    """Centers spread over [0, mu_span], unit widths, identity affine."""
    size = table_size * table_size if pair_table else table_size
    mu = Tensor(np.linspace(0.0, mu_span, kernels))
    sigma = Tensor(np.ones(kernels))
    gamma = Tensor(np.ones((size, 1)))
    beta = Tensor(np.zeros((size, 1)))
    if out_dim > 0:
        w = Tensor(rng.normal(scale=1.0 / np.sqrt(kernels), size=(kernels, out_dim)))
        w2 = None
    else:  # bias path: K->K dense then K->1 readout
        w = Tensor(rng.normal(scale=1.0 / np.sqrt(kernels), size=(kernels, kernels)))
        w2 = Tensor(rng.normal(scale=1.0 / np.sqrt(kernels), size=(kernels, 1)))
    return GaussianBasisParams(mu, sigma, gamma, beta, w, w2)


def _clamped_abs_sigma(sigma: Tensor) -> Tensor:
    # |sigma| with a floor; 1/|sigma| is singular at zero and nothing in
    # training prevents sigma from crossing it.
    s = T.absolute(sigma)
    floor = Tensor(np.full(sigma.shape, SIGMA_FLOOR))
    # piecewise clamp via constant mask; gradient exact away from the boundary
    mask = Tensor((s.data >= SIGMA_FLOOR).astype(np.float64))
    return s * mask + floor * (1.0 - mask)


def gaussian_responses(x: np.ndarray, type_index: np.ndarray,
                       params: GaussianBasisParams) -> Tensor:
    """K kernel responses for each scalar in ``x``.

    ``x`` has any shape S; ``type_index`` (same shape) selects the affine
    row.  Returns a tracked tensor of shape S + (K,), each value in
    [-1/(sqrt(2 pi)|sigma|), 0).
    """
    x = np.asarray(x, dtype=np.float64)
    flat_idx = np.asarray(type_index).reshape(-1)
    onehot = Tensor(np.eye(params.gamma.shape[0])[flat_idx])
    gamma = T.matmul(onehot, params.gamma).reshape(x.shape + (1,))
    beta = T.matmul(onehot, params.beta).reshape(x.shape + (1,))
    xs = Tensor(x[..., None])
    sig = _clamped_abs_sigma(params.sigma)
    z = (gamma * xs + beta - params.mu) / sig
    amp = Tensor(np.full(params.mu.shape, -1.0 / np.sqrt(2.0 * np.pi))) / sig
    return amp * T.exp(T.mul(z, z) * (-0.5))


def gaussian_basis(x: np.ndarray, type_index: np.ndarray,
                   params: GaussianBasisParams) -> Tensor:
    """Kernel responses projected through W: shape S + (out_dim,)."""
    return T.matmul(gaussian_responses(x, type_index, params), params.w)


def structural_bias(distances: np.ndarray, type_pairs: np.ndarray,
                    params: GaussianBasisParams) -> Tensor:
    """Invariant pairwise scalar bias added inside attention softmax.

    ``distances``: (..., n, n); ``type_pairs``: matching flattened pair ids.
    Responses go through a dense K->K map, GELU, then a K->1 readout.
    """
    b = gaussian_responses(distances, type_pairs, params)
    hidden = T.gelu(T.matmul(b, params.w))
    out = T.matmul(hidden, params.w2)
    return out.reshape(distances.shape)


def type_pair_ids(types: np.ndarray, vocab: int) -> np.ndarray:
    """Flattened (type_i, type_j) pair index, shape (..., n, n)."""
    types = np.asarray(types, dtype=np.int64)
    return types[..., :, None] * vocab + types[..., None, :]
