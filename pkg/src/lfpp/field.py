"""Grid samples of the log-correlated Gaussian field on [0, 1]^d.

The field at resolution eps = 2^-k is the sum of k independent stationary
Gaussian layers.  Layer j has covariance

    C_j(r) = ln 2 * exp(-4^j r^2 / (2 s^2)),

so the pointwise variance is k ln 2 = log(1/eps) and the covariance at
separation eps << r << 1 is log(1/r) + O(1).  All layers are drawn together
by spectral synthesis on a periodic torus of side ``padding_factor`` and the
unit box is read off the torus.

One complex Gaussian noise array per sample drives the summed field.  The
individual layers, or the partial sum over the coarsest layers, are
recovered from the same realization by exact Gaussian conditioning on the
summed Fourier coefficients, using a second, independent stream.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.fft

from .errors import (
    DomainError,
    IncompatibleSamplesError,
    InvalidResolutionError,
    ResourceLimitError,
)

LN2 = math.log(2.0)

DEFAULT_MEM_CAP = 4 * 1024**3

# Poisson-summation images used for the lattice-aliased layer spectrum.
_ALIAS_TERMS = 4


# ---------------------------------------------------------------------------
# Random streams


def stream_key(*parts) -> int:
    """128-bit integer digest of an arbitrary tuple of labels."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def derive_rng(master_seed: int, *key) -> np.random.Generator:
    """Independent generator for ``(master_seed, *key)``.

    Distinct keys give statistically independent streams without any
    coordination between workers.
    """
    return np.random.default_rng(np.random.SeedSequence(stream_key(int(master_seed), *key)))


def job_key_id(job_key) -> int:
    """Fixed-width integer identifier of a job key (used in binary headers)."""
    if isinstance(job_key, int) and 0 <= job_key < 2**64:
        return job_key
    return stream_key("job_key", str(job_key)) & (2**64 - 1)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class FieldSpec:
    d: int
    k: int
    padding_factor: float = 2.0
    layer_base_scale: float = 1.0
    master_seed: int = 0
    job_key: str = ""

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise DomainError(f"dimension must be an integer >= 2, got {self.d}")
        if int(self.k) != self.k or self.k < 1:
            raise DomainError(f"scale index must be an integer >= 1, got {self.k}")
        if not self.padding_factor >= 2:
            raise DomainError(f"padding_factor must be >= 2, got {self.padding_factor}")
        if not self.layer_base_scale > 0:
            raise DomainError("layer_base_scale must be positive")

    @property
    def eps(self) -> float:
        return 2.0 ** -self.k

    @property
    def side(self) -> int:
        """Sites per axis of the unit-box grid."""
        return 2**self.k + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    @property
    def torus_points(self) -> int:
        n = int(round(self.padding_factor * 2**self.k))
        return n + (n % 2)

    @property
    def geometry(self) -> tuple:
        """Everything that fixes the law of the sample (seed excluded)."""
        return (self.d, self.k, self.torus_points, float(self.layer_base_scale))

    def replace(self, **changes) -> "FieldSpec":
        return dataclasses.replace(self, **changes)

    def memory_bytes(self) -> int:
        """Peak working memory of :func:`sample_field` for this spec."""
        n = self.torus_points
        half = n ** (self.d - 1) * (n // 2 + 1)
        # amplitude (f4) + noise/spectrum (c8) + real output (f4) + box copy (f8)
        return half * (4 + 8) + n**self.d * 4 + self.n_sites * 8 * 2

    def check_memory(self, mem_cap: int | None = None) -> None:
        cap = DEFAULT_MEM_CAP if mem_cap is None else mem_cap
        need = self.memory_bytes()
        if need > cap:
            raise ResourceLimitError(
                f"d={self.d}, k={self.k} needs about {need / 2**20:.0f} MiB, cap is {cap / 2**20:.0f} MiB"
            )


@dataclass(frozen=True, eq=False)
class FieldSample:
    spec: FieldSpec
    values: np.ndarray
    centered: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.spec.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if self.centered and abs(values.mean()) > 1e-9:
            raise ValueError("centered sample has nonzero mean")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def at(self, site: Sequence[int]) -> float:
        return float(self.values[tuple(site)])


@dataclass(frozen=True)
class MollifierKernel:
    """Probability kernel for box mollification.

    ``box_d`` is uniform on [-1, 1]^d, ``box_slice`` uniform on
    [-1, 1]^(d-1) x {0}; both have finite logarithmic energy.
    ``layer_truncation`` keeps the layers coarser than the target scale.
    """

    kind: str
    d: int

    KINDS = ("box_d", "box_slice", "layer_truncation")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if self.d < 2:
            raise DomainError("kernel dimension must be >= 2")


# ---------------------------------------------------------------------------
# Spectral synthesis


def layer_eigenvalues_1d(n: int, eps: float, sigma: float, half: bool = False) -> np.ndarray:
    """DFT eigenvalues of exp(-x^2 / (2 sigma^2)) periodised on a torus of n sites.

    Evaluated through Poisson summation, which keeps every eigenvalue
    strictly positive (no round-off floor from a numerical FFT).
    """
    idx = np.fft.rfftfreq(n, 1.0 / n) if half else np.fft.fftfreq(n, 1.0 / n)
    q = np.arange(-_ALIAS_TERMS, _ALIAS_TERMS + 1)
    omega = 2.0 * np.pi * (idx[:, None] + q[None, :] * n) / (n * eps)
    return (math.sqrt(2.0 * np.pi) * sigma / eps * np.exp(-0.5 * (sigma * omega) ** 2)).sum(axis=1)


def _layer_sigma(j: int, s: float) -> float:
    return s * 2.0**-j


def _layer_factors(spec: FieldSpec, j: int) -> list[np.ndarray]:
    """Per-axis eigenvalue factors of layer j on the half spectrum grid."""
    n, eps = spec.torus_points, spec.eps
    sigma = _layer_sigma(j, spec.layer_base_scale)
    full = layer_eigenvalues_1d(n, eps, sigma)
    last = layer_eigenvalues_1d(n, eps, sigma, half=True)
    return [full] * (spec.d - 1) + [last]


def _outer(factors: Sequence[np.ndarray], dtype=np.float64) -> np.ndarray:
    out = np.asarray(factors[0], dtype=dtype)
    for f in factors[1:]:
        out = np.multiply.outer(out, np.asarray(f, dtype=dtype))
    return out


def layer_spectrum(spec: FieldSpec, layers: Iterable[int], dtype=np.float64) -> np.ndarray:
    """Summed eigenvalues of the given layers on the half spectrum grid."""
    total = None
    for j in layers:
        term = _outer(_layer_factors(spec, j), dtype=dtype)
        term *= LN2
        if total is None:
            total = term
        else:
            total += term
    if total is None:
        n = spec.torus_points
        total = np.zeros((n,) * (spec.d - 1) + (n // 2 + 1,), dtype=dtype)
    return total


def _synthesis_scale(spec: FieldSpec) -> np.ndarray:
    """Per-mode factor turning unit complex noise into irfftn input.

    Interior modes of the last axis stand for a conjugate pair, so they get
    half the variance of the self-conjugate planes (index 0 and n/2).
    """
    n, d = spec.torus_points, spec.d
    last = np.full(n // 2 + 1, 0.5)
    last[0] = 1.0
    last[-1] = 1.0
    return np.sqrt(n**d * last)


@functools.lru_cache(maxsize=2)
def _amplitude(geometry: tuple) -> np.ndarray:
    d, k, n, s = geometry
    spec = FieldSpec(d=d, k=k, padding_factor=n / 2**k, layer_base_scale=s)
    lam = layer_spectrum(spec, range(1, k + 1), dtype=np.float32)
    np.sqrt(lam, out=lam)
    lam *= _synthesis_scale(spec).astype(np.float32)
    lam.setflags(write=False)
    return lam


def _unit_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Complex64 array whose real and imaginary parts are iid N(0, 1)."""
    buf = np.empty(2 * math.prod(shape), dtype=np.float32)
    rng.standard_normal(out=buf, dtype=np.float32)
    return buf.view(np.complex64).reshape(shape)


def _noise(spec: FieldSpec) -> np.ndarray:
    n = spec.torus_points
    shape = (n,) * (spec.d - 1) + (n // 2 + 1,)
    return _unit_noise(derive_rng(spec.master_seed, "field", spec.job_key), shape)


def _to_torus(spec: FieldSpec, coeffs: np.ndarray) -> np.ndarray:
    n = spec.torus_points
    return scipy.fft.irfftn(coeffs, s=(n,) * spec.d, overwrite_x=True)


def _to_box(spec: FieldSpec, coeffs: np.ndarray) -> np.ndarray:
    torus = _to_torus(spec, coeffs)
    return np.array(torus[(slice(0, spec.side),) * spec.d], dtype=np.float64)


def _synthesize(spec: FieldSpec) -> np.ndarray:
    """Uncentered torus realization behind ``sample_field(spec)``."""
    coeffs = _noise(spec)
    coeffs *= _amplitude(spec.geometry)
    return _to_torus(spec, coeffs)


def _center(values: np.ndarray) -> np.ndarray:
    values -= values.mean()
    return values


def sample_field(spec: FieldSpec, mem_cap: int | None = None, centered: bool = True) -> FieldSample:
    """Grid sample of the mollified field h_eps on [0, 1]^d.

    Deterministic in ``(spec.master_seed, spec.job_key)``.  The grid mean is
    subtracted unless ``centered=False``, which returns the stationary torus
    field restricted to the box.
    """
    spec.check_memory(mem_cap)
    torus = _synthesize(spec)
    values = np.array(torus[(slice(0, spec.side),) * spec.d], dtype=np.float64)
    if centered:
        _center(values)
    return FieldSample(spec, values, centered=centered)


def iter_samples(spec: FieldSpec, replicates: int, mem_cap: int | None = None, centered: bool = True) -> Iterator[FieldSample]:
    """Independent replicates; replicate r uses job key ``f"{job_key}/rep{r}"``."""
    for r in range(replicates):
        yield sample_field(spec.replace(job_key=f"{spec.job_key}/rep{r}"), mem_cap=mem_cap, centered=centered)


def _bridge_rng(spec: FieldSpec) -> np.random.Generator:
    return derive_rng(spec.master_seed, "layers", spec.job_key)


def layer_coefficients(spec: FieldSpec) -> list[np.ndarray]:
    """Fourier coefficients (in unit-noise scale) of every layer of the sample.

    Layers are peeled off the summed coefficients one at a time: given the
    remaining sum R with variance U, layer j is drawn from its exact
    conditional law N(R v_j / U, v_j (U - v_j) / U).  The returned layers
    sum exactly to the coefficients used by :func:`sample_field`.
    """
    z = _noise(spec)
    variances = [layer_spectrum(spec, [j]) for j in range(1, spec.k + 1)]
    remaining_var = np.sum(variances, axis=0)
    remaining = np.sqrt(remaining_var) * z.astype(np.complex128)
    rng = _bridge_rng(spec)
    out = []
    for v in variances[:-1]:
        with np.errstate(divide="ignore", invalid="ignore"):
            share = np.where(remaining_var > 0, v / remaining_var, 0.0)
        cond_sd = np.sqrt(np.clip(v * (1.0 - share), 0.0, None))
        fresh = _unit_noise(rng, z.shape).astype(np.complex128)
        layer = share * remaining + cond_sd * fresh
        out.append(layer)
        remaining = remaining - layer
        remaining_var = np.clip(remaining_var - v, 0.0, None)
    out.append(remaining)
    return out


def sample_layers(spec: FieldSpec, mem_cap: int | None = None) -> list[np.ndarray]:
    """Uncentered box values of each layer, coupled to ``sample_field(spec)``.

    ``sum(layers) - mean(sum(layers))`` reproduces the sample up to float32
    synthesis round-off.
    """
    spec.check_memory(mem_cap)
    scale = _synthesis_scale(spec)
    return [_to_box(spec, (c * scale).astype(np.complex64)) for c in layer_coefficients(spec)]


def truncated_field(spec: FieldSpec, keep: int, mem_cap: int | None = None) -> np.ndarray:
    """Centered box values of layers 1..keep of the realization ``sample_field(spec)``.

    Uses a single conditional draw N(c V_keep / V, V_keep (V - V_keep) / V)
    per Fourier mode instead of materialising every layer.
    """
    if not 1 <= keep <= spec.k:
        raise InvalidResolutionError(f"keep must lie in [1, {spec.k}], got {keep}")
    spec.check_memory(mem_cap)
    z = _noise(spec).astype(np.complex128)
    coarse = layer_spectrum(spec, range(1, keep + 1))
    fine = layer_spectrum(spec, range(keep + 1, spec.k + 1))
    total = coarse + fine
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(total > 0, coarse / total, 0.0)
    cond_sd = np.sqrt(np.clip(coarse * (1.0 - share), 0.0, None))
    fresh = _unit_noise(derive_rng(spec.master_seed, "truncate", spec.job_key, keep), z.shape)
    coeffs = share * np.sqrt(total) * z + cond_sd * fresh.astype(np.complex128)
    coeffs *= _synthesis_scale(spec)
    return _center(_to_box(spec, coeffs.astype(np.complex64)))


def covariance_function(spec: FieldSpec, r: np.ndarray | float) -> np.ndarray:
    """Whole-space covariance sum_j ln2 exp(-4^j r^2 / (2 s^2)) of the sampler."""
    r = np.asarray(r, dtype=np.float64)
    s = spec.layer_base_scale
    return sum(LN2 * np.exp(-(4.0**j) * r**2 / (2 * s * s)) for j in range(1, spec.k + 1))


# ---------------------------------------------------------------------------
# Mollification


def _window_mean(values: np.ndarray, radius: int, axes: Sequence[int]) -> np.ndarray:
    """Mean over the cube of half-width ``radius`` along ``axes``, truncated at the grid edge."""
    out = values.astype(np.float64, copy=True)
    for ax in axes:
        n = out.shape[ax]
        csum = np.cumsum(out, axis=ax)
        pad = [(0, 0)] * out.ndim
        pad[ax] = (1, 0)
        csum = np.pad(csum, pad)
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        width = (hi - lo).astype(np.float64)
        shape = [1] * out.ndim
        shape[ax] = n
        out = (np.take(csum, hi, axis=ax) - np.take(csum, lo, axis=ax)) / width.reshape(shape)
    return out


def _extended_values(fine: FieldSample, radius: int) -> np.ndarray:
    """``fine`` plus a halo of ``radius`` sites taken from its own torus realization."""
    spec = fine.spec
    torus = _synthesize(spec)
    box = np.array(torus[(slice(0, spec.side),) * spec.d], dtype=np.float64)
    mean = box.mean()
    if not np.array_equal(_center(box), fine.values):
        raise InvalidResolutionError("sample does not match the synthesis of its spec; use edge='truncate'")
    idx = np.arange(-radius, spec.side + radius) % spec.torus_points
    ext = np.asarray(torus[np.ix_(*([idx] * spec.d))], dtype=np.float64)
    return ext - mean


def box_mollify(fine: FieldSample, target_k: int, kernel: MollifierKernel, edge: str = "truncate") -> FieldSample:
    """Coarsen ``fine`` to resolution 2^-target_k with the given kernel.

    For the box kernels the coarse value at x is the arithmetic mean of the
    fine values in x + [-eps_t, eps_t]^d (or its codimension-one slice).
    Near the boundary of the unit cube, ``edge="truncate"`` averages over
    the sites inside the cube only, while ``edge="extend"`` uses the full
    window, reading the field outside the cube from the torus realization
    of ``fine.spec`` (the sample must be an unmodified ``sample_field``
    output).  The ``layer_truncation`` kernel returns layers 1..target_k of
    the same realization.  The result is not re-centered, except for layer
    truncation.
    """
    spec = fine.spec
    if target_k >= spec.k or target_k < 1:
        raise InvalidResolutionError(f"target_k={target_k} must lie in [1, {spec.k - 1}]")
    if kernel.d != spec.d:
        raise InvalidResolutionError(f"kernel dimension {kernel.d} != field dimension {spec.d}")
    if edge not in ("truncate", "extend"):
        raise ValueError(f"edge must be 'truncate' or 'extend', got {edge!r}")
    ratio = 2 ** (spec.k - target_k)
    coarse_spec = spec.replace(k=target_k)
    sub = (slice(None, None, ratio),) * spec.d
    if kernel.kind == "layer_truncation":
        values = truncated_field(spec, target_k)[sub]
        return FieldSample(coarse_spec, _center(np.array(values)), centered=True)
    axes = list(range(spec.d) if kernel.kind == "box_d" else range(spec.d - 1))
    if edge == "extend":
        ext = _window_mean(_extended_values(fine, ratio), ratio, axes)
        inner = (slice(ratio, ratio + spec.side),) * spec.d
        values = ext[inner][sub]
    else:
        values = _window_mean(fine.values, ratio, axes)[sub]
    return FieldSample(coarse_spec, np.array(values), centered=False)


# ---------------------------------------------------------------------------
# Statistics


def _check_same_geometry(samples: Sequence[FieldSample]) -> None:
    geo = samples[0].spec.geometry
    if any(s.spec.geometry != geo for s in samples[1:]):
        raise IncompatibleSamplesError("samples come from different field specs")


def covariance_estimate(samples: Sequence[FieldSample], x: Sequence[int], y: Sequence[int]) -> float:
    """Unbiased sample covariance of h(x) and h(y) across ``samples``."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    if tuple(x) == tuple(y):
        raise ValueError("x == y: use the variance path (variance_profile) instead")
    _check_same_geometry(samples)
    a = np.array([s.at(x) for s in samples])
    b = np.array([s.at(y) for s in samples])
    return float(np.cov(a, b, ddof=1)[0, 1])


def restrict_to_hyperplane(sample: FieldSample) -> FieldSample:
    """The slice {x_d = 0} of a d-dimensional sample as a (d-1)-dimensional sample."""
    spec = sample.spec
    if spec.d < 3:
        raise DomainError("restriction needs a sample of dimension >= 3")
    values = np.array(sample.values[..., 0])
    sub_spec = spec.replace(d=spec.d - 1, job_key=f"{spec.job_key}/slice")
    return FieldSample(sub_spec, _center(values), centered=True)


class RunningMoments:
    """Streaming per-site mean and variance (Welford)."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        self.n += 1
        if self.mean is None:
            self.mean = values.copy()
            self.m2 = np.zeros_like(self.mean)
            return
        delta = values - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (values - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            raise ValueError("variance needs at least two observations")
        return self.m2 / (self.n - 1)


def variance_profile(specs: Sequence[FieldSpec], replicates: int, mem_cap: int | None = None) -> list[tuple[int, float]]:
    """Grid-averaged pointwise variance for each spec, as (k, variance) rows."""
    if replicates < 2:
        raise ValueError("variance_profile needs at least two replicates")
    table = []
    for spec in specs:
        moments = RunningMoments()
        for sample in iter_samples(spec, replicates, mem_cap=mem_cap):
            moments.add(sample.values)
        table.append((spec.k, float(moments.variance.mean())))
    return table


def variance_slope(table: Sequence[tuple[int, float]]) -> float:
    """Least-squares slope of variance against log(1/eps) = k ln 2."""
    ks = np.array([row[0] for row in table], dtype=np.float64)
    var = np.array([row[1] for row in table])
    return float(np.polyfit(ks * LN2, var, 1)[0])


def site_values(spec: FieldSpec, replicates: int, sites: Sequence[Sequence[int]], mem_cap: int | None = None) -> np.ndarray:
    """Replicates x sites matrix of field values, without keeping the samples."""
    index = tuple(np.array(sites).T)
    return np.array([s.values[index] for s in iter_samples(spec, replicates, mem_cap=mem_cap)])


def covariance_slope(distances: np.ndarray, covariances: np.ndarray) -> float:
    """Slope of covariance against -log|x - y|."""
    return float(np.polyfit(-np.log(distances), covariances, 1)[0])


# ---------------------------------------------------------------------------
# Snapshots

_HEADER = struct.Struct("<qqQQq")


def save_snapshot(sample: FieldSample, path: str | Path) -> Path:
    """Write ``path`` (binary) and ``path.json`` (metadata).

    Binary layout: little-endian int64 d, int64 k, uint64 seed, uint64 job-key
    id, int64 centered flag, followed by the row-major float64 values.
    """
    path = Path(path)
    spec = sample.spec
    header = _HEADER.pack(spec.d, spec.k, spec.master_seed % 2**64, job_key_id(spec.job_key), int(sample.centered))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(sample.values, dtype="<f8").tobytes())
    meta = dataclasses.asdict(spec) | {"centered": sample.centered, "job_key_id": job_key_id(spec.job_key)}
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_snapshot(path: str | Path) -> FieldSample:
    path = Path(path)
    raw = path.read_bytes()
    d, k, seed, key_id, centered = _HEADER.unpack_from(raw)
    meta_path = Path(f"{path}.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        meta.pop("job_key_id", None)
        meta.pop("centered", None)
        spec = FieldSpec(**meta)
    else:
        spec = FieldSpec(d=d, k=k, master_seed=seed, job_key=str(key_id))
    if (spec.d, spec.k) != (d, k):
        raise ValueError("snapshot header and metadata disagree")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(spec.shape)
    return FieldSample(spec, values.copy(), centered=bool(centered))
