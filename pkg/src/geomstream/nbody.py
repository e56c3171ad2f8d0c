"""Charged N-body simulation and dataset generation.

Softened Coulomb interaction integrated with velocity Verlet.  A dataset is a
single newline-delimited JSON file: one header line carrying
{"version", "n", "dt", "steps", "eps_soft", "counts"}, then all trajectory
records ordered train, valid, test (sizes per the header counts).  Splits draw
from disjoint seed ranges, so a record's split is also recoverable from its
seed alone.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

SOFTENING = 0.01
DT = 1e-3
STEPS = 1000
BLOWUP_LIMIT = 1e3
MAX_RESAMPLES = 100

DATASET_VERSION = 1
SPLITS = ("train", "valid", "test")
# seed = base + split offset + index; offsets keep the per-split seed ranges
# disjoint for any split size up to SPLIT_STRIDE
SPLIT_STRIDE = 1_000_000
SPLIT_OFFSETS = {"train": 0, "valid": SPLIT_STRIDE, "test": 2 * SPLIT_STRIDE}
# seed offset used when a blown-up trajectory is resampled; far outside any
# split's seed range
RESAMPLE_OFFSET = 10 * SPLIT_STRIDE
DEFAULT_SPLIT_SIZES = {"train": 3000, "valid": 2000, "test": 2000}


class SimulationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class ParticleState:
    """Positions, velocities (n x 3) and charges (n,) at one instant."""

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.charges = np.asarray(self.charges, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.charges.shape[0]


@dataclass
class TrajectoryRecord:
    """One supervised sample: initial state and the positions after the
    integration horizon."""

    seed: int
    charges: np.ndarray
    p0: np.ndarray
    v0: np.ndarray
    pT: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "charges": np.asarray(self.charges).tolist(),
            "p0": np.asarray(self.p0).tolist(),
            "v0": np.asarray(self.v0).tolist(),
            "pT": np.asarray(self.pT).tolist(),
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "TrajectoryRecord":
        obj = json.loads(line)
        return TrajectoryRecord(
            seed=int(obj["seed"]),
            charges=np.asarray(obj["charges"], dtype=np.float64),
            p0=np.asarray(obj["p0"], dtype=np.float64),
            v0=np.asarray(obj["v0"], dtype=np.float64),
            pT=np.asarray(obj["pT"], dtype=np.float64),
        )


def coulomb_forces(positions: np.ndarray, charges: np.ndarray,
                   softening: float = SOFTENING) -> np.ndarray:
    """F_i = sum_j c_i c_j (r_i - r_j) / (|r_i - r_j|^2 + eps^2)^{3/2}."""
    positions = np.asarray(positions, dtype=np.float64)
    charges = np.asarray(charges, dtype=np.float64)
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.sum(diff * diff, axis=-1) + softening ** 2
    np.fill_diagonal(d2, np.inf)
    qq = charges[:, None] * charges[None, :]
    return np.sum(qq[..., None] * diff / d2[..., None] ** 1.5, axis=1)


def total_energy(state: ParticleState, softening: float = SOFTENING) -> float:
    """Kinetic (unit masses) plus softened pairwise Coulomb potential."""
    kinetic = 0.5 * float(np.sum(state.velocities ** 2))
    diff = state.positions[:, None, :] - state.positions[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1) + softening ** 2)
    qq = state.charges[:, None] * state.charges[None, :]
    potential = float(np.sum(np.triu(qq / d, k=1)))
    return kinetic + potential


def total_momentum(state: ParticleState) -> np.ndarray:
    return state.velocities.sum(axis=0)


def leapfrog_step(state: ParticleState, dt: float = DT,
                  softening: float = SOFTENING,
                  forces: np.ndarray | None = None) -> tuple[ParticleState, np.ndarray]:
    """One velocity-Verlet step; returns the new state and its forces so the
    caller can chain steps with one force evaluation each."""
    if forces is None:
        forces = coulomb_forces(state.positions, state.charges, softening)
    v_half = state.velocities + 0.5 * dt * forces
    p_new = state.positions + dt * v_half
    f_new = coulomb_forces(p_new, state.charges, softening)
    v_new = v_half + 0.5 * dt * f_new
    return ParticleState(p_new, v_new, state.charges), f_new


def simulate(state: ParticleState, steps: int = STEPS, dt: float = DT,
             softening: float = SOFTENING) -> ParticleState:
    """Integrate ``steps`` velocity-Verlet steps; raises SimulationError if
    any coordinate leaves [-1e3, 1e3] mid-trajectory (close encounters can
    slingshot particles despite softening)."""
    forces = None
    for _ in range(steps):
        state, forces = leapfrog_step(state, dt, softening, forces)
        if not np.all(np.isfinite(state.positions)) or \
                np.any(np.abs(state.positions) > BLOWUP_LIMIT):
            raise SimulationError("trajectory blew up (|coordinate| > 1e3)")
    return state


def sample_initial(rng: np.random.Generator, n: int = 5) -> ParticleState:
    """Positions N(0,1), velocities 0.5 N(0,1), charges uniform in {-1,+1}."""
    positions = rng.normal(size=(n, 3))
    velocities = 0.5 * rng.normal(size=(n, 3))
    charges = rng.choice([-1.0, 1.0], size=n)
    return ParticleState(positions, velocities, charges)


def simulate_record(seed: int, n: int = 5, steps: int = STEPS,
                    dt: float = DT) -> tuple[TrajectoryRecord, int]:
    """Simulate from a seeded initial condition.  A blown-up trajectory is
    discarded and resampled from seed + RESAMPLE_OFFSET (repeatedly if
    needed); returns the record (tagged with the original seed) and the seed
    actually used, so substitutions can be recorded in the file header."""
    attempt_seed = seed
    for _ in range(MAX_RESAMPLES):
        rng = np.random.default_rng(attempt_seed)
        init = sample_initial(rng, n)
        try:
            final = simulate(init, steps, dt)
        except SimulationError:
            attempt_seed += RESAMPLE_OFFSET
            continue
        rec = TrajectoryRecord(seed, init.charges, init.positions,
                               init.velocities, final.positions)
        return rec, attempt_seed
    raise SimulationError(f"no stable trajectory after {MAX_RESAMPLES} "
                          f"resamples (seed {seed})")


def generate_dataset(path: str, counts: dict[str, int] | None = None,
                     seed: int = 0, n: int = 5, steps: int = STEPS,
                     dt: float = DT, workers: int = 1) -> dict:
    """Write one ndjson dataset file holding every split.

    Trajectory seeds are ``seed + split offset + index``; output bytes are
    identical for any ``workers`` value (results are assembled in order).
    Returns the header that was written.
    """
    counts = dict(DEFAULT_SPLIT_SIZES if counts is None else counts)
    for split, count in counts.items():
        if split not in SPLIT_OFFSETS:
            raise ValueError(f"unknown split {split!r}")
        if count < 0 or count > SPLIT_STRIDE:
            raise ValueError(f"count {count} for {split!r} outside "
                             f"[0, {SPLIT_STRIDE}]")
    seeds = [seed + SPLIT_OFFSETS[split] + i
             for split in SPLITS for i in range(counts.get(split, 0))]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(simulate_record, seeds,
                                    [n] * len(seeds), [steps] * len(seeds),
                                    [dt] * len(seeds), chunksize=32))
    else:
        results = [simulate_record(s, n, steps, dt) for s in seeds]

    substitutions = {str(rec.seed): used for rec, used in results
                     if used != rec.seed}
    header = {
        "version": DATASET_VERSION,
        "n": n,
        "dt": dt,
        "steps": steps,
        "eps_soft": SOFTENING,
        "counts": {split: counts.get(split, 0) for split in SPLITS},
        "base_seed": seed,
    }
    if substitutions:
        header["resampled"] = substitutions
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec, _ in results:
            fh.write(rec.to_json() + "\n")
    return header


def load_dataset(path: str) -> tuple[dict, dict[str, list[TrajectoryRecord]]]:
    """Read a dataset file; returns (header, {split: records})."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"bad dataset header in {path}: {exc}") from None
        if not isinstance(header, dict) or "counts" not in header:
            raise DatasetError(f"{path} is not a trajectory dataset "
                             f"(header lacks 'counts')")
        records = [TrajectoryRecord.from_json(line) for line in fh if line.strip()]
    counts = header["counts"]
    expected = sum(counts.get(s, 0) for s in SPLITS)
    if expected != len(records):
        raise DatasetError(f"{path}: header counts total {expected}, "
                         f"found {len(records)} records")
    splits = {}
    lo = 0
    for split in SPLITS:
        hi = lo + counts.get(split, 0)
        splits[split] = records[lo:hi]
        lo = hi
    return header, splits


def records_to_arrays(records: list[TrajectoryRecord]):
    """Stack records into (types, p0, v0, pT) arrays; type id 0 = charge -1,
    type id 1 = charge +1."""
    charges = np.stack([r.charges for r in records])
    types = (charges > 0).astype(np.int64)
    p0 = np.stack([r.p0 for r in records])
    v0 = np.stack([r.v0 for r in records])
    pT = np.stack([r.pT for r in records])
    return types, p0, v0, pT
