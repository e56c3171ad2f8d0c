"""Randomized, machine-readable audits of the model's symmetry contracts and
of the tape gradients, plus deliberately broken variants (mutations) that the
audits must catch.

Deviations are relative with a +1e-12 floor since outputs span orders of
magnitude across random parameter draws.  All checks are seed-deterministic.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import attention as A
from . import geometry as G
from . import model as M
from . import tensor as T
from .tensor import Tensor

DEVIATION_FLOOR = 1e-12
SYMMETRY_TOL = 1e-8
PERMUTATION_TOL = 1e-12
GRADIENT_TOL = 1e-5
GRADIENT_H = 1e-5


class ModeError(RuntimeError):
    """A check was requested in a symmetry mode where it is undefined."""


@dataclass
class CheckRow:
    name: str
    trials: int
    max_deviation: float
    tolerance: float
    passed: bool

    @staticmethod
    def build(name: str, trials: int, dev: float, tol: float) -> "CheckRow":
        return CheckRow(name, trials, float(dev), tol, bool(dev <= tol))


@dataclass
class SymmetryReport:
    seed: int
    config_hash: str
    rows: list[CheckRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def add(self, row: CheckRow | list[CheckRow]):
        self.rows.extend(row if isinstance(row, list) else [row])

    def to_ndjson(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        lines.append(json.dumps({
            "summary": True, "passed": self.passed, "checks": len(self.rows),
            "seed": self.seed, "config_hash": self.config_hash,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


def config_hash(cfg: M.ModelConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def new_report(model: M.Model, seed: int) -> SymmetryReport:
    return SymmetryReport(seed=seed, config_hash=config_hash(model.cfg))


def _random_system(rng: np.random.Generator, cfg: M.ModelConfig,
                   n_range=(2, 6)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    types = rng.integers(0, cfg.vocab, size=(1, n))
    p = rng.normal(size=(1, n, 3))
    v = 0.5 * rng.normal(size=(1, n, 3)) if cfg.velocity_input else None
    return types, p, v


def _rel(delta: np.ndarray, reference: np.ndarray) -> float:
    return float(np.abs(delta).max() / (np.abs(reference).max() + DEVIATION_FLOOR))


def _streams(model, types, p, v):
    out = M.forward(model, types, p, v)
    return out.z_inv.data, out.z_equ.data


def check_rotation_equivariance(model: M.Model, trials: int = 100,
                                tol: float = SYMMETRY_TOL, seed: int = 0,
                                transform_reference: bool = True) -> CheckRow:
    """z_equ and predicted positions must co-rotate with the input; z_inv must
    not move.  ``transform_reference=False`` deliberately skips rotating the
    reference output — a broken-harness mutation that must make this fail."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        types, p, v = _random_system(rng, model.cfg)
        g = G.random_rotation(int(rng.integers(1 << 31)))
        zi, ze = _streams(model, types, p, v)
        pred = M.equivariant_head(
            M.forward(model, types, p, v), p, model.head).data
        pg = p @ g.R.T + g.t
        vg = None if v is None else v @ g.R.T
        zi2, ze2 = _streams(model, types, pg, vg)
        pred2 = M.equivariant_head(
            M.forward(model, types, pg, vg), pg, model.head).data
        R = g.R if transform_reference else np.eye(3)
        t = g.t if transform_reference else np.zeros(3)
        worst = max(worst,
                    _rel(ze2 - np.einsum("ab,nibd->niad", R, ze), ze),
                    _rel(zi2 - zi, zi),
                    _rel(pred2 - (pred @ R.T + t), pred))
    return CheckRow.build("rotation_equivariance", trials, worst, tol)


def check_translation(model: M.Model, trials: int = 100,
                      tol: float = SYMMETRY_TOL, seed: int = 0) -> list[CheckRow]:
    """z_equ and z_inv unchanged under pure translation; predicted positions
    shift by exactly t."""
    rng = np.random.default_rng(seed)
    worst_equ = worst_inv = worst_pred = 0.0
    for _ in range(trials):
        types, p, v = _random_system(rng, model.cfg)
        t = rng.normal(size=3)
        zi, ze = _streams(model, types, p, v)
        pred = M.equivariant_head(M.forward(model, types, p, v), p, model.head).data
        zi2, ze2 = _streams(model, types, p + t, v)
        pred2 = M.equivariant_head(M.forward(model, types, p + t, v),
                                   p + t, model.head).data
        worst_equ = max(worst_equ, _rel(ze2 - ze, ze))
        worst_inv = max(worst_inv, _rel(zi2 - zi, zi))
        worst_pred = max(worst_pred, _rel(pred2 - (pred + t), pred))
    return [CheckRow.build("translation_invariance_equ", trials, worst_equ, tol),
            CheckRow.build("translation_invariance_inv", trials, worst_inv, tol),
            CheckRow.build("translation_equivariance_pred", trials, worst_pred, tol)]


def check_reflection(model: M.Model, trials: int = 100,
                     tol: float = SYMMETRY_TOL, seed: int = 0) -> CheckRow:
    """Equivariance under det = -1 orthogonal maps.  Only defined for E3-mode
    models; the SE3 contract does not include reflections, so asking for the
    check there is a caller error.  Point inversion is always included."""
    if not model.cfg.e3:
        raise ModeError("reflection check is undefined for an SE3-mode model; "
                        "build the model with symmetry='e3'")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        types, p, v = _random_system(rng, model.cfg)
        if trial == 0:
            g = G.point_inversion()
        else:
            g = G.random_rotation(int(rng.integers(1 << 31)), allow_reflection=True)
            if g.det_sign == 1:   # force an improper transform
                g = G.RigidMotion(g.R @ np.diag([1.0, 1.0, -1.0]), g.t, -1)
        zi, ze = _streams(model, types, p, v)
        pred = M.equivariant_head(M.forward(model, types, p, v), p, model.head).data
        pg = p @ g.R.T + g.t
        vg = None if v is None else v @ g.R.T
        zi2, ze2 = _streams(model, types, pg, vg)
        pred2 = M.equivariant_head(M.forward(model, types, pg, vg),
                                   pg, model.head).data
        worst = max(worst,
                    _rel(ze2 - np.einsum("ab,nibd->niad", g.R, ze), ze),
                    _rel(zi2 - zi, zi),
                    _rel(pred2 - (pred @ g.R.T + g.t), pred))
    return CheckRow.build("reflection_equivariance", trials, worst, tol)


def check_permutation(model: M.Model, trials: int = 100,
                      tol: float = PERMUTATION_TOL, seed: int = 0) -> CheckRow:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        types, p, v = _random_system(rng, model.cfg)
        n = types.shape[1]
        perm = rng.permutation(n)
        zi, ze = _streams(model, types, p, v)
        zi2, ze2 = _streams(model, types[:, perm], p[:, perm],
                            None if v is None else v[:, perm])
        worst = max(worst, _rel(zi2 - zi[:, perm], zi),
                    _rel(ze2 - ze[:, perm], ze))
    return CheckRow.build("permutation_equivariance", trials, worst, tol)


def tiny_gradient_model(seed: int = 0) -> M.Model:
    """The audit configuration: 2 blocks, width 8, 2 heads, 4 basis kernels."""
    cfg = M.ModelConfig(layers=2, width=8, heads=2, ffn_width=8, kernels=4,
                        seed=seed)
    return M.Model(cfg).randomize(seed + 1)


def check_gradients(model: M.Model, tol: float = GRADIENT_TOL, n: int = 4,
                    seed: int = 0, h: float = GRADIENT_H) -> list[CheckRow]:
    """Compare every parameter's tape gradient of the MSE loss against
    per-coordinate central differences."""
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    types = rng.integers(0, cfg.vocab, size=(1, n))
    p0 = rng.normal(size=(1, n, 3))
    v0 = 0.5 * rng.normal(size=(1, n, 3)) if cfg.velocity_input else None
    target = rng.normal(size=(1, n, 3))

    params = model.params()
    with T.Tape() as tape:
        for t in params.values():
            tape.watch(t)
        pred = M.predict_positions(model, types, p0, v0)
        diff = pred - Tensor(target)
        loss = T.mul(diff, diff).mean()
        T.backward(loss)
        tape_grads = {name: tape.grad(t).copy() for name, t in params.items()}

    def loss_value() -> float:
        pred = M.predict_positions(model, types, p0, v0)
        return float(np.mean((pred.data - target) ** 2))

    rows = []
    for name, t in params.items():
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        dev = _rel(tape_grads[name] - fd, fd)
        rows.append(CheckRow.build(f"gradient.{name}", flat.size, dev, tol))
    return rows


MUTATIONS = ("gelu-on-equ", "uncentered-positions", "spatial-head-split",
             "raw-coordinate-bias", "missing-transform-in-test")


@contextlib.contextmanager
def apply_mutation(name: str):
    """Temporarily install one documented symmetry-breaking defect.

    - gelu-on-equ: a raw pointwise nonlinearity on the equivariant stream
      right after the input layer (breaks rotation equivariance).
    - uncentered-positions: positions enter the input layer without
      mean-centering (breaks translation invariance).
    - spatial-head-split: heads are split across the flattened spatial x
      channel axis, mixing vector components between heads (breaks rotation).
    - raw-coordinate-bias: the attention bias reads raw x coordinates instead
      of pairwise distances (breaks rotation and translation).
    - missing-transform-in-test: the rotation check forgets to rotate the
      reference output; the correctly built model must then FAIL the check,
      proving the harness really applies the transform.
    """
    if name == "gelu-on-equ":
        orig = M.input_layer

        def mutated(model, types, positions, velocities=None, drop=None):
            out = orig(model, types, positions, velocities, drop)
            return A.StreamPair(out.z_inv, T.gelu(out.z_equ))

        M.input_layer = mutated
        try:
            yield
        finally:
            M.input_layer = orig
    elif name == "uncentered-positions":
        orig = G.mean_center
        G.mean_center = lambda positions: np.asarray(positions, dtype=np.float64)
        try:
            yield
        finally:
            G.mean_center = orig
    elif name == "spatial-head-split":
        orig_split, orig_merge = A._split_heads_equ, A._merge_heads_equ

        def bad_split(x, heads):
            b, n, three, d = x.shape
            return x.reshape((b, n, three * d)) \
                    .reshape((b, n, heads, (three * d) // heads)) \
                    .transpose((0, 2, 1, 3))

        def bad_merge(x):
            b, h, n, tdh = x.shape
            return x.transpose((0, 2, 1, 3)).reshape((b, n, h * tdh)) \
                    .reshape((b, n, 3, (h * tdh) // 3))

        A._split_heads_equ, A._merge_heads_equ = bad_split, bad_merge
        try:
            yield
        finally:
            A._split_heads_equ, A._merge_heads_equ = orig_split, orig_merge
    elif name == "raw-coordinate-bias":
        orig = G.pairwise_distances

        def raw_bias(positions):
            positions = np.asarray(positions, dtype=np.float64)
            x = positions[..., 0]
            return np.abs(x[..., :, None] + x[..., None, :])

        G.pairwise_distances = raw_bias
        try:
            yield
        finally:
            G.pairwise_distances = orig
    elif name == "missing-transform-in-test":
        # handled inside run_checks: the rotation check runs with
        # transform_reference=False
        yield
    else:
        raise ValueError(f"unknown mutation {name!r} (choose from {MUTATIONS})")


def run_checks(model: M.Model, trials: int = 100, seed: int = 0,
               mutation: str | None = None,
               include_gradients: bool = False) -> SymmetryReport:
    """All applicable checks for the model's mode, optionally under a
    mutation; gradient rows only when requested (they need a tiny model)."""
    report = new_report(model, seed)

    def body():
        skip_reference = mutation == "missing-transform-in-test"
        report.add(check_rotation_equivariance(
            model, trials, seed=seed, transform_reference=not skip_reference))
        report.add(check_translation(model, trials, seed=seed + 1))
        report.add(check_permutation(model, trials, seed=seed + 2))
        if model.cfg.e3:
            report.add(check_reflection(model, trials, seed=seed + 3))
        if include_gradients:
            report.add(check_gradients(model, seed=seed + 4))

    if mutation is None:
        body()
    else:
        with apply_mutation(mutation):
            body()
    return report
