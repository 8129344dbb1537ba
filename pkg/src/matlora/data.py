"""Timestamped domain sequences and the rotating 2-moons benchmark.

Each domain rotates the same base point set a further `rotation_deg`
counterclockwise about the centroid of the noiseless first domain, then adds
fresh isotropic Gaussian noise. Noise comes from a PCG32 stream via
Box-Muller (one pair per point), so identical seeds give bit-identical
datasets in any implementation of the documented generator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from matlora.errors import ArgumentError, ParseError
from matlora.rng import STREAM_DATA, Pcg32

SEQUENCE_FORMAT_VERSION = 1


@dataclass
class Domain:
    timestamp: float
    inputs: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ArgumentError("domain inputs and labels must have equal length")


@dataclass
class DomainSequence:
    domains: list[Domain]
    train_count: int
    num_classes: int
    generator_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        validate_sequence(self)

    @property
    def train_indices(self) -> list[int]:
        return list(range(self.train_count))

    @property
    def test_indices(self) -> list[int]:
        return list(range(self.train_count, len(self.domains)))


def validate_sequence(seq: DomainSequence) -> None:
    if not seq.domains:
        raise ArgumentError("sequence must contain at least one domain")
    stamps = [d.timestamp for d in seq.domains]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ArgumentError("timestamps must be strictly increasing")
    if not 1 <= seq.train_count < len(seq.domains):
        raise ArgumentError(
            f"train_count must be in [1, {len(seq.domains) - 1}], got {seq.train_count}"
        )
    for d in seq.domains:
        if len(d.labels) and (d.labels.min() < 0 or d.labels.max() >= seq.num_classes):
            raise ArgumentError("labels must lie in [0, num_classes)")


def rotate2d(point, angle_rad: float, center=(0.0, 0.0)) -> np.ndarray:
    """Rotate a point (or (n,2) array of points) about `center`."""
    p = np.asarray(point, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    ca, sa = math.cos(angle_rad), math.sin(angle_rad)
    rot = np.array([[ca, -sa], [sa, ca]])
    return (p - c) @ rot.T + c


def _base_moons(samples_per_domain: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical noiseless arcs: upper moon class 0, lower moon class 1."""
    half = samples_per_domain // 2
    theta = np.linspace(0.0, math.pi, half)
    upper = np.column_stack([np.cos(theta), np.sin(theta)])
    lower = np.column_stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)])
    points = np.vstack([upper, lower])
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
    return points, labels


def gen_two_moons(
    num_domains: int = 12,
    samples_per_domain: int = 200,
    rotation_deg: float = 18.0,
    noise_sigma: float = 0.10,
    seed: int = 0,
    train_count: int | None = None,
) -> DomainSequence:
    """Rotating 2-moons sequence: domain t is the base set rotated t steps.

    The rotation center is the centroid of the noiseless base set (fixed
    across domains), so the noiseless trajectory is a pure rotation group
    action. Noise draws consume exactly one Box-Muller pair per point, in
    storage order, from PCG32 stream STREAM_DATA of `seed`.
    """
    if num_domains < 2:
        raise ArgumentError("num_domains must be >= 2")
    if samples_per_domain % 2 != 0 or samples_per_domain <= 0:
        raise ArgumentError("samples_per_domain must be even and positive")
    if train_count is None:
        train_count = min(9, num_domains - 1)
    base, labels = _base_moons(samples_per_domain)
    center = base.mean(axis=0)
    rng = Pcg32(seed, STREAM_DATA)
    angle_step = math.radians(rotation_deg)
    domains = []
    for t in range(num_domains):
        pts = rotate2d(base, t * angle_step, center)
        if noise_sigma != 0.0:
            noise = np.empty_like(pts)
            for i in range(len(pts)):
                noise[i] = rng.gauss_pair()
            pts = pts + noise_sigma * noise
        else:
            # Keep the stream position independent of sigma for clarity: no draws.
            pts = pts.copy()
        domains.append(Domain(float(t), pts, labels.copy()))
    params = {
        "num_domains": num_domains,
        "samples_per_domain": samples_per_domain,
        "rotation_deg": rotation_deg,
        "noise_sigma": noise_sigma,
    }
    return DomainSequence(domains, train_count, 2, params, seed)


def sequences_equal(a: DomainSequence, b: DomainSequence) -> bool:
    if (a.train_count, a.num_classes, a.seed) != (b.train_count, b.num_classes, b.seed):
        return False
    if a.generator_params != b.generator_params or len(a.domains) != len(b.domains):
        return False
    for da, db in zip(a.domains, b.domains):
        if da.timestamp != db.timestamp:
            return False
        if not np.array_equal(da.inputs, db.inputs) or not np.array_equal(da.labels, db.labels):
            return False
    return True


def save_sequence(seq: DomainSequence, path) -> None:
    doc = {
        "version": SEQUENCE_FORMAT_VERSION,
        "num_domains": len(seq.domains),
        "train_count": seq.train_count,
        "num_classes": seq.num_classes,
        "generator_params": seq.generator_params,
        "seed": seq.seed,
        "domains": [
            {
                "timestamp": d.timestamp,
                "samples": [
                    [float(x[0]), float(x[1]), int(y)] for x, y in zip(d.inputs, d.labels)
                ],
            }
            for d in seq.domains
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_sequence(path) -> DomainSequence:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        if doc["version"] != SEQUENCE_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported sequence version {doc['version']}")
        raw_domains = doc["domains"]
        if not isinstance(raw_domains, list) or not raw_domains:
            raise ParseError(f"{path}: empty or missing domain list")
        domains = []
        for entry in raw_domains:
            samples = entry["samples"]
            inputs = np.array([[s[0], s[1]] for s in samples], dtype=np.float64)
            labels = np.array([s[2] for s in samples], dtype=np.int64)
            domains.append(Domain(float(entry["timestamp"]), inputs, labels))
        seq = DomainSequence(
            domains,
            int(doc["train_count"]),
            int(doc["num_classes"]),
            doc.get("generator_params", {}),
            int(doc.get("seed", 0)),
        )
    except ParseError:
        raise
    except (KeyError, IndexError, TypeError, ValueError, ArgumentError) as exc:
        raise ParseError(f"{path}: invalid sequence file: {exc}") from exc
    return seq


def export_domain_csv(seq: DomainSequence, domain_index: int, path) -> None:
    """One row per sample, columns x1,x2,label."""
    if not 0 <= domain_index < len(seq.domains):
        raise ArgumentError(f"domain index {domain_index} out of range")
    d = seq.domains[domain_index]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "label"])
        for x, y in zip(d.inputs, d.labels):
            w.writerow([repr(float(x[0])), repr(float(x[1])), int(y)])
