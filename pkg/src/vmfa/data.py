"""Binary dataset and checkpoint containers, CSV import and synthetic MFA data.

MFAD (dataset), little-endian:
    "MFAD" | u32 version | u64 N | u32 D | u8 dtype | 7 reserved bytes | N*D values, row-major
    dtype 0 = float32, 1 = float64

MFAM (checkpoint), little-endian:
    "MFAM" | u32 version | u32 C | u32 D | u32 H | pi, mu, Lambda, Dnoise as float64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BadMagic, FormatError, TruncatedFile, UnsupportedVersion
from .model import Dataset, MfaParams

DATASET_MAGIC = b"MFAD"
MODEL_MAGIC = b"MFAM"
FORMAT_VERSION = 1
_DATA_HEADER = struct.Struct("<4sIQIB7x")
_MODEL_HEADER = struct.Struct("<4sIIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CSV_MAX_CELLS = 1_000_000
SYNTH_BLOCK = 4096


def _read_header(buf, header, magic):
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagic(f"expected magic {magic!r}, found {bytes(buf[:4])!r}")
    if len(buf) < header.size:
        raise TruncatedFile(f"header needs {header.size} bytes, file has {len(buf)}")
    fields = header.unpack_from(buf)
    if fields[1] != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {fields[1]} (supported: {FORMAT_VERSION})")
    return fields


def _payload(buf, offset, count, dtype):
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"payload needs {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} unexpected trailing bytes")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def save_dataset(dataset, path):
    X = dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset)
    if X.dtype not in _CODES:
        X = X.astype(np.float32)
    code = _CODES[X.dtype]
    with open(path, "wb") as fh:
        fh.write(_DATA_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, X.shape[0], X.shape[1], code))
        fh.write(np.ascontiguousarray(X, dtype=_DTYPES[code]).tobytes())


def load_dataset(path, split=None) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    _, _, N, D, code = _read_header(buf, _DATA_HEADER, DATASET_MAGIC)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    vals = _payload(buf, _DATA_HEADER.size, N * D, _DTYPES[code])
    return Dataset(vals.reshape(N, D).astype(_DTYPES[code].newbyteorder("=")), split)


def save_checkpoint(params: MfaParams, path):
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, params.C, params.D, params.H))
        for a in (params.pi, params.mu, params.Lambda, params.Dnoise):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> MfaParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    _, _, C, D, H = _read_header(buf, _MODEL_HEADER, MODEL_MAGIC)
    sizes = [C, C * D, C * D * H, C * D]
    vals = _payload(buf, _MODEL_HEADER.size, sum(sizes), np.dtype("<f8")).astype(np.float64)
    pi, mu, lam, dn = np.split(vals, np.cumsum(sizes)[:-1])
    return MfaParams(pi, mu.reshape(C, D), lam.reshape(C, D, H), dn.reshape(C, D))


def stored_scalar_count(C, D, H):
    """Scalars in a checkpoint payload: C + C*D + C*D*H + C*D."""
    return C * (D * (H + 2) + 1)


def count_trainable_parameters(C, D, H):
    """Free parameters of an MFA; one mixing weight is fixed by normalisation."""
    return C * (D * (H + 2) + 1) - 1


def load_csv(path, delimiter=",", skip_header=None) -> Dataset:
    """Small dense CSV matrices only (at most 10^6 cells).

    A first row that does not parse as numbers is treated as a header.
    """
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty CSV file")
    if skip_header is None:
        try:
            [float(v) for v in lines[0].split(delimiter)]
            skip_header = False
        except ValueError:
            skip_header = True
    rows = lines[1:] if skip_header else lines
    D = len(rows[0].split(delimiter)) if rows else 0
    if len(rows) * D > CSV_MAX_CELLS:
        raise FormatError(f"CSV has {len(rows) * D} cells; the limit is {CSV_MAX_CELLS}")
    X = np.loadtxt(rows, delimiter=delimiter, dtype=np.float64, ndmin=2)
    return Dataset(X.astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    C_true: int
    D: int
    H_true: int
    N: int
    separation: float = 4.0  # spread of the means in units of the typical component scale
    loading_scale: float = 1.0
    noise_scale: float = 0.5
    seed: int = 0
    pi: Optional[np.ndarray] = None  # defaults to uniform

    def validate(self):
        if min(self.C_true, self.D, self.H_true, self.N) < 1:
            raise ValueError("C_true, D, H_true and N must be positive")
        if self.H_true > self.D:
            raise ValueError("H_true must not exceed D")
        if min(self.separation, self.loading_scale, self.noise_scale) < 0:
            raise ValueError("scales must be non-negative")
        return self


def synthetic_truth(spec: SyntheticSpec) -> MfaParams:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    C, D, H = spec.C_true, spec.D, spec.H_true
    scale = np.sqrt(H * spec.loading_scale**2 + spec.noise_scale**2)
    mu = rng.normal(0.0, spec.separation * scale, size=(C, D))
    lam = rng.normal(0.0, spec.loading_scale, size=(C, D, H))
    dn = spec.noise_scale**2 * rng.uniform(0.5, 1.5, size=(C, D))
    pi = np.full(C, 1.0 / C) if spec.pi is None else np.asarray(spec.pi, dtype=np.float64)
    return MfaParams(pi / pi.sum(), mu, lam, dn)


def sample_mfa(params: MfaParams, N, seed=0, first_row=0):
    """Rows first_row .. first_row+N-1 of the generative stream for ``seed``.

    Rows are produced in fixed blocks, each from its own PRNG stream keyed by
    (seed, block), so any row range is reproducible independently.
    Returns (X float32, component labels).
    """
    C, D, H = params.C, params.D, params.H
    out = np.empty((N, D), dtype=np.float32)
    labels = np.empty(N, dtype=np.int64)
    cdf = np.cumsum(params.pi)
    cdf /= cdf[-1]
    stop = first_row + N
    for b in range(first_row // SYNTH_BLOCK, (stop - 1) // SYNTH_BLOCK + 1 if N else 0):
        rng = np.random.default_rng([seed, 1, b])
        m = SYNTH_BLOCK
        c = np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), C - 1)
        z = rng.standard_normal((m, H))
        eps = rng.standard_normal((m, D)) * np.sqrt(params.Dnoise[c])
        x = np.einsum("ndh,nh->nd", params.Lambda[c], z) + params.mu[c] + eps
        lo, hi = max(first_row, b * m), min(stop, (b + 1) * m)
        out[lo - first_row : hi - first_row] = x[lo - b * m : hi - b * m]
        labels[lo - first_row : hi - first_row] = c[lo - b * m : hi - b * m]
    return out, labels


def gen_synthetic(spec: SyntheticSpec, with_labels=False):
    """(Dataset, ground-truth params) sampled from an MFA."""
    truth = synthetic_truth(spec)
    X, labels = sample_mfa(truth, spec.N, spec.seed)
    ds = Dataset(X, "train")
    return (ds, truth, labels) if with_labels else (ds, truth)


def gen_synthetic_split(spec: SyntheticSpec, n_test):
    """Train and test sets from disjoint row ranges of the same generative stream."""
    truth = synthetic_truth(spec)
    X, _ = sample_mfa(truth, spec.N, spec.seed)
    Xt, _ = sample_mfa(truth, n_test, spec.seed, first_row=spec.N)
    return Dataset(X, "train"), Dataset(Xt, "test"), truth

