"""Dataset generation, ingestion, and persistence.

The synthetic task draws latents from a fixed three-Gaussian mixture and
adds Gaussian noise with a fixed covariance.  The wine-quality tables are
ingested from their semicolon-separated source files: the integer quality
column is dropped, features are normalized on the full table, the rows are
shuffled and split 90/10, and noise is added to the training portion only.

Datasets persist as an .npz payload plus a JSON sidecar carrying metadata
and per-array SHA-256 checksums; identical inputs produce byte-identical
files.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DataError
from .gmm import Gmm
from .rng import stream

FORMAT_VERSION = 1

# ground truth for the synthetic task
TOY_WEIGHTS = np.full(3, 1.0 / 3.0)
TOY_MEANS = np.array([[-2.0, 0.0], [0.0, -2.0], [0.0, 2.0]])
TOY_COVS = np.array(
    [np.diag([0.3**2, 1.0]), np.diag([1.0, 0.3**2]), np.diag([1.0, 0.3**2])]
)
TOY_NOISE = np.diag([0.1, 1.0])

UCI_FILES = {
    "white-wine": "winequality-white.csv",
    "red-wine": "winequality-red.csv",
}
UCI_ROW_COUNTS = {"white-wine": 4898, "red-wine": 1599}


def toy_ground_truth() -> Gmm:
    return Gmm(TOY_WEIGHTS, TOY_MEANS, TOY_COVS)


@dataclass
class DeconvDataset:
    """Observations with known noise statistics, plus latents when available."""

    w: np.ndarray  # (N, D)
    s_mat: np.ndarray  # (D, D) shared, or (N, D, D) per point
    v: np.ndarray | None = None
    split: str = "train"
    norm_mean: np.ndarray | None = None
    norm_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.asarray(self.w, float)
        self.s_mat = np.asarray(self.s_mat, float)
        if self.v is not None:
            self.v = np.asarray(self.v, float)
            if self.v.shape != self.w.shape:
                raise DataError("latents and observations must align")
        if self.s_mat.ndim == 3 and len(self.s_mat) != len(self.w):
            raise DataError("per-point noise must have one matrix per row")

    def __len__(self) -> int:
        return len(self.w)

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @property
    def per_point_noise(self) -> bool:
        return self.s_mat.ndim == 3

    def noise_for_rows(self, idx) -> np.ndarray:
        return self.s_mat[idx] if self.per_point_noise else self.s_mat


def _make_split(n: int, seed: int, tag: str) -> DeconvDataset:
    gmm = toy_ground_truth()
    rng = stream(seed, "toy", tag)
    v = gmm.sample(n, rng)
    noise = rng.standard_normal((n, 2)) @ np.linalg.cholesky(TOY_NOISE).T
    return DeconvDataset(
        w=v + noise,
        s_mat=TOY_NOISE.copy(),
        v=v,
        split=tag,
        meta={"task": "toy", "seed": seed, "n": n},
    )


def generate_toy(n_train: int = 50000, n_val: int = 12500,
                 n_test: int = 50000, seed: int = 0):
    """Latents from the three-Gaussian target, observations with added noise."""
    if min(n_train, n_val, n_test) < 1:
        raise DataError("split sizes must be positive")
    return (
        _make_split(n_train, seed, "train"),
        _make_split(n_val, seed, "val"),
        _make_split(n_test, seed, "test"),
    )


def read_uci_table(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Semicolon-separated numeric table with a quoted header row."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"source file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=";")
        try:
            header = [h.strip().strip('"') for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {i + 1} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            try:
                rows.append([float(x) for x in row])
            except ValueError as e:
                raise DataError(f"{path}: row {i + 1}: {e}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, np.asarray(rows, float)


def load_uci(path: str | Path, dataset_id: str, noise_var: float = 0.1,
             seed: int = 0):
    """Wine-quality triple: noised train/val (a tenth of train) and clean test.

    Features are normalized to zero mean and unit variance on the full
    table before splitting; the training portion is floor(0.9 N) rows and
    validation is the last tenth of it, held out after noising.
    """
    if dataset_id not in UCI_FILES:
        raise DataError(f"unknown dataset id {dataset_id!r}")
    header, table = read_uci_table(path)
    if "quality" not in header:
        raise DataError(f"{path}: expected a 'quality' column")
    keep = [i for i, h in enumerate(header) if h != "quality"]
    values = table[:, keep]
    names = [header[i] for i in keep]

    norm_mean = values.mean(axis=0)
    norm_scale = values.std(axis=0)
    if np.any(norm_scale == 0):
        raise DataError(f"{path}: constant feature cannot be normalized")
    values = (values - norm_mean) / norm_scale

    n = len(values)
    rng = stream(seed, "uci", dataset_id)
    order = rng.permutation(n)
    values = values[order]
    n_train_full = int(np.floor(0.9 * n))
    train_v = values[:n_train_full]
    test_v = values[n_train_full:]

    d = values.shape[1]
    s_mat = noise_var * np.eye(d)
    noise = rng.standard_normal(train_v.shape) @ np.linalg.cholesky(s_mat).T
    train_w = train_v + noise

    n_val = n_train_full // 10
    n_train = n_train_full - n_val
    common = {
        "task": dataset_id,
        "seed": seed,
        "noise_var": noise_var,
        "features": names,
    }

    def make(split, v, w):
        return DeconvDataset(
            w=w, s_mat=s_mat.copy(), v=v, split=split,
            norm_mean=norm_mean.copy(), norm_scale=norm_scale.copy(),
            meta=dict(common, n=len(v)),
        )

    test_noise = stream(seed, "uci-test-noise", dataset_id).standard_normal(
        test_v.shape
    ) @ np.linalg.cholesky(s_mat).T
    return (
        make("train", train_v[:n_train], train_w[:n_train]),
        make("val", train_v[n_train:], train_w[n_train:]),
        make("test", test_v, test_v + test_noise),
    )


# ---------------------------------------------------------------------------
# persistence


def _array_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_dataset(ds: DeconvDataset, path: str | Path) -> None:
    """Write <path> (npz payload) and <path>.json (metadata + checksums)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"w": ds.w, "s_mat": ds.s_mat}
    if ds.v is not None:
        arrays["v"] = ds.v
    if ds.norm_mean is not None:
        arrays["norm_mean"] = ds.norm_mean
        arrays["norm_scale"] = ds.norm_scale
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "split": ds.split,
        "meta": ds.meta,
        "checksums": {k: _array_digest(v) for k, v in arrays.items()},
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | Path) -> DeconvDataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    sidecar_path = Path(f"{path}.json")
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar: {sidecar_path}")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"unsupported dataset format version {sidecar.get('format_version')}"
        )
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    for name, digest in sidecar["checksums"].items():
        if name not in arrays:
            raise ChecksumError(f"{path}: missing array {name}")
        if _array_digest(arrays[name]) != digest:
            raise ChecksumError(f"{path}: checksum mismatch for array {name}")
    return DeconvDataset(
        w=arrays["w"],
        s_mat=arrays["s_mat"],
        v=arrays.get("v"),
        split=sidecar["split"],
        norm_mean=arrays.get("norm_mean"),
        norm_scale=arrays.get("norm_scale"),
        meta=sidecar["meta"],
    )
