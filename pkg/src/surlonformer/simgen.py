"""Synthetic longitudinal-image cohorts with block-diagonal image risk.

Each patient gets a uniform-noise base image that drifts by a spatially
constant amount over time. The true log-risk is the summed Frobenius inner
product of the first four ground-truth images with a block-diagonal
coefficient matrix, and event times are drawn by inverting the survival
function of a constant-baseline Cox model.
"""
from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .cox import SurvivalRecord
from .model import ImageSequence, InputError

__all__ = [
    "SimConfig",
    "Dataset",
    "coefficient_matrix",
    "ground_truth_sequence",
    "true_risk",
    "sample_event_time",
    "generate_cohort",
    "write_image",
    "read_image",
    "save_dataset",
    "load_dataset",
    "ManifestError",
]

RISK_VISITS = 4


@dataclass(frozen=True)
class SimConfig:
    cohort: int = 700
    side: int = 64
    visit_months: float = 6.0
    horizon_months: float = 120.0
    log_baseline_hazard: float = -5.0
    # time unit of the baseline hazard, in standardized horizons (1/120 = per month)
    hazard_time_unit: float = 1.0 / 120.0
    noise_variance: float = 0.001
    censor_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.cohort < 10:
            raise ValueError("cohort must have at least 10 patients")
        if self.side % 8:
            raise ValueError("image side must be divisible by 8")
        if not 0.0 <= self.censor_fraction < 1.0:
            raise ValueError("censor_fraction must lie in [0, 1)")
        if self.noise_variance < 0 or self.hazard_time_unit <= 0:
            raise ValueError("invalid noise variance or hazard time unit")

    @property
    def visit_step(self) -> float:
        return self.visit_months / self.horizon_months

    @property
    def max_visits(self) -> int:
        return int(math.floor(self.horizon_months / self.visit_months + 1e-9)) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(names)
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        out = {}
        for k, v in raw.items():
            out[k] = int(v) if isinstance(names[k].default, int) else float(v)
        return cls(**out)


@dataclass
class Dataset:
    sequences: list[ImageSequence]
    records: list[SurvivalRecord]
    true_risks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        tr = None if self.true_risks is None else self.true_risks[idx]
        return Dataset([self.sequences[i] for i in idx], [self.records[i] for i in idx], tr)


def coefficient_matrix(side: int = 64, blocks: int = 8) -> np.ndarray:
    """Zero matrix except ``blocks`` diagonal square blocks, block ``g`` equal to ``g/70``."""
    beta = np.zeros((side, side))
    b = side // blocks
    for g in range(blocks):
        beta[g * b:(g + 1) * b, g * b:(g + 1) * b] = g / 70.0
    return beta


def ground_truth_sequence(base: np.ndarray, times: Sequence[float]) -> list[np.ndarray]:
    """``base + (0.05 t + 0.05 t^2)`` at each visit time."""
    base = np.asarray(base, dtype=np.float64)
    return [base + (0.05 * t + 0.05 * t * t) for t in times]


def true_risk(images: Sequence[np.ndarray], beta: np.ndarray) -> float:
    """Sum over the first four ground-truth images of ``<beta, X>_F``."""
    if len(images) < RISK_VISITS:
        raise InputError(f"true risk needs {RISK_VISITS} ground-truth images")
    return float(sum(np.sum(beta * images[j]) for j in range(RISK_VISITS)))


def sample_event_time(r: float, u: float, log_baseline_hazard: float = -5.0,
                      time_unit: float = 1.0) -> tuple[float, float, int]:
    """Invert ``S(t) = exp(-t exp(log_h0 + r))`` at ``u``.

    ``time_unit`` is the length, in standardized time, of one unit of the
    hazard's clock. Returns ``(U, T, delta)`` with ``T = min(U, 1)`` and
    ``delta = 1`` iff ``U <= 1``.
    """
    if not 0.0 < u < 1.0:
        raise InputError(f"u={u} outside (0, 1)")
    U = -math.log(u) * math.exp(-log_baseline_hazard - r) * time_unit
    return U, min(U, 1.0), int(U <= 1.0)


def generate_cohort(config: SimConfig) -> Dataset:
    """Simulate ``config.cohort`` patients, reproducibly from ``config.seed``.

    Each patient draws from its own substream spawned off the master seed.
    """
    beta = coefficient_matrix(config.side)
    step = config.visit_step
    grid = np.round(np.arange(config.max_visits) * step, 12)
    master = np.random.SeedSequence(config.seed)
    streams = master.spawn(config.cohort + 1)
    censor_rng = np.random.default_rng(streams[-1])
    n_censor = math.ceil(config.censor_fraction * config.cohort)
    censored = set(censor_rng.choice(config.cohort, size=n_censor, replace=False).tolist()) \
        if n_censor else set()

    sequences, records, risks = [], [], []
    sd = math.sqrt(config.noise_variance)
    for i in range(config.cohort):
        rng = np.random.default_rng(streams[i])
        base = rng.uniform(-0.5, 0.5, size=(config.side, config.side))
        r = true_risk(ground_truth_sequence(base, grid[:RISK_VISITS]), beta)
        u = rng.uniform()
        while u == 0.0:
            u = rng.uniform()
        _, T, delta = sample_event_time(r, u, config.log_baseline_hazard,
                                        config.hazard_time_unit)
        c_draw = rng.uniform()
        if i in censored:
            T = max(c_draw * T, 1e-9)
            delta = 0
        n_vis = min(int(math.floor(T / step + 1e-9)) + 1, config.max_visits)
        times = grid[:n_vis]
        truth = ground_truth_sequence(base, times)
        noise = rng.normal(0.0, sd, size=(n_vis, config.side, config.side))
        images = [truth[j] + noise[j] for j in range(n_vis)]
        pid = f"P{i:05d}"
        sequences.append(ImageSequence(pid, times, images))
        records.append(SurvivalRecord(pid, float(T), int(delta)))
        risks.append(r)
    return Dataset(sequences, records, np.array(risks))


# on-disk layout ---------------------------------------------------------

_IMG_MAGIC = b"IMG1"


class ManifestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"manifest line {line}: {message}")
        self.line = line


def write_image(path, image: np.ndarray) -> None:
    """16-byte header (``IMG1``, u32 rows, u32 cols, 4 reserved bytes) + LE f64 pixels."""
    img = np.ascontiguousarray(image, dtype="<f8")
    rows, cols = img.shape
    Path(path).write_bytes(_IMG_MAGIC + struct.pack("<III", rows, cols, 0) + img.tobytes())


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _IMG_MAGIC:
        raise InputError(f"{path}: not an IMG1 image")
    rows, cols, _ = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 8 * rows * cols:
        raise InputError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(rows, cols)


MANIFEST = "manifest.csv"
_BASE_COLUMNS = ["id", "T", "delta", "J", "visit_times", "true_risk", "covariates", "images"]


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.csv`` plus one ``IMG1`` file per visit under ``images/``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / MANIFEST
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_BASE_COLUMNS)
        for k, (seq, rec) in enumerate(zip(ds.sequences, ds.records)):
            paths = []
            for j, img in enumerate(seq.images):
                rel = f"images/{seq.patient_id}_{j:02d}.img"
                write_image(out / rel, img)
                paths.append(rel)
            risk = "" if ds.true_risks is None else repr(float(ds.true_risks[k]))
            w.writerow([seq.patient_id, repr(rec.time), rec.event, len(seq.images),
                        " ".join(repr(float(t)) for t in seq.times), risk,
                        " ".join(repr(float(x)) for x in seq.covariates), " ".join(paths)])
    return manifest


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise ManifestError(0, f"{manifest} not found")
    sequences, records, risks = [], [], []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _BASE_COLUMNS:
            raise ManifestError(1, f"unexpected header {header}")
        for line, row in enumerate(reader, start=2):
            if len(row) != len(_BASE_COLUMNS):
                raise ManifestError(line, f"expected {len(_BASE_COLUMNS)} fields, got {len(row)}")
            try:
                pid, T, delta, J = row[0], float(row[1]), int(row[2]), int(row[3])
                times = [float(x) for x in row[4].split()]
                cov = [float(x) for x in row[6].split()]
                paths = row[7].split()
                if len(paths) != J or len(times) != J:
                    raise ValueError(f"J={J} but {len(times)} times and {len(paths)} images")
                images = [read_image(root / p) for p in paths]
                sequences.append(ImageSequence(pid, times, images, cov))
                records.append(SurvivalRecord(pid, T, delta))
                risks.append(float(row[5]) if row[5] else math.nan)
            except (ValueError, OSError) as exc:
                raise ManifestError(line, str(exc)) from exc
    tr = np.array(risks)
    return Dataset(sequences, records, None if np.all(np.isnan(tr)) else tr)


def dataset_checksum(in_dir) -> str:
    """SHA-256 over the manifest and every image file, in manifest order."""
    root = Path(in_dir)
    h = hashlib.sha256((root / MANIFEST).read_bytes())
    for p in sorted((root / "images").glob("*.img")):
        h.update(p.read_bytes())
    return h.hexdigest()
