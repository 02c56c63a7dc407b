"""Distribution and content fidelity: Frechet distance, k-NN precision, attribute agreement.

Features come from a deterministic pixel-PCA embedding (grayscale 16x16
thumbnails projected onto principal axes fit on the real set), so values are
only meaningful relative to each other within one basis.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats
from scipy.spatial.distance import cdist

from .data import CONTENT_KEYS, AttributeRecord
from .errors import InvalidInputError, InvalidStateError

THUMB_SIZE = 16
CONTINUOUS_TOL = 0.05
EIG_CLAMP = 1e-8


@dataclass
class FeatureSet:
    matrix: np.ndarray
    extractor_id: str = "raw"

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InvalidInputError(f"features must be a 2-D matrix, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise InvalidInputError("features contain non-finite values")

    def __len__(self) -> int:
        return len(self.matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def degenerate(self) -> bool:
        return len(self) < self.dim + 1


def _as_features(x) -> FeatureSet:
    return x if isinstance(x, FeatureSet) else FeatureSet(x)


# ---------------------------------------------------------------------------
# Frechet distance


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) * 0.5)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^(1/2)) for PSD A, B, via the symmetric form A^(1/2) B A^(1/2)."""
    ra = _psd_sqrt(a)
    vals = np.linalg.eigvalsh(ra @ b @ ra)
    vals[np.abs(vals) < EIG_CLAMP] = 0.0
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def gaussian_fit(feats: FeatureSet):
    x = feats.matrix
    if feats.degenerate:
        raise InvalidInputError(f"{len(x)} samples cannot estimate a {feats.dim}-dim covariance (need >= {feats.dim + 1})")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(feats.dim, feats.dim)


def fid(real, fake) -> float:
    real, fake = _as_features(real), _as_features(fake)
    if real.dim != fake.dim:
        raise InvalidInputError(f"feature dims differ: {real.dim} vs {fake.dim}")
    (mu_r, s_r), (mu_f, s_f) = gaussian_fit(real), gaussian_fit(fake)
    # canonical operand order keeps the result bitwise symmetric
    if (mu_f.tobytes(), s_f.tobytes()) < (mu_r.tobytes(), s_r.tobytes()):
        mu_r, s_r, mu_f, s_f = mu_f, s_f, mu_r, s_r
    diff = mu_r - mu_f
    value = float(diff @ diff) + float(np.trace(s_r) + np.trace(s_f)) - 2.0 * _trace_sqrt_product(s_r, s_f)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# k-NN precision


def knn_radii(real: np.ndarray, k: int) -> np.ndarray:
    d = cdist(real, real)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def knn_precision(real, fake, k: int = 3) -> float:
    """Fraction of fake features inside at least one real k-NN ball (radius to the
    k-th nearest other real feature). Exact pairwise distances, no approximation."""
    real, fake = _as_features(real), _as_features(fake)
    if k < 1 or k >= len(real):
        raise InvalidInputError(f"k must satisfy 1 <= k < n_real ({len(real)}), got {k}")
    if real.dim != fake.dim:
        raise InvalidInputError(f"feature dims differ: {real.dim} vs {fake.dim}")
    radii = knn_radii(real.matrix, k)
    inside = (cdist(fake.matrix, real.matrix) <= radii[None, :]).any(axis=1)
    return float(inside.mean())


# ---------------------------------------------------------------------------
# feature extraction


def thumbnails(images: torch.Tensor, luma=(0.299, 0.587, 0.114), size: int = THUMB_SIZE) -> np.ndarray:
    """(N, 3, H, W) in [-1, 1] -> (N, size*size) float64 grayscale thumbnails in [0, 1]."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    x = (images.detach().to(torch.float64).clamp(-1, 1) + 1.0) * 0.5
    gray = torch.einsum("nchw,c->nhw", x, torch.tensor(luma, dtype=torch.float64))[:, None]
    return F.adaptive_avg_pool2d(gray, size).flatten(1).numpy()


class PixelPCAExtractor:
    """Grayscale-thumbnail PCA embedding; ``fit`` once on the real set, then ``embed`` anything."""

    def __init__(self, dims: int = 64, size: int = THUMB_SIZE):
        if not 1 <= dims <= size * size:
            raise InvalidInputError(f"pixel-pca dims must lie in [1, {size * size}], got {dims}")
        self.dims = dims
        self.size = size
        self.mean: Optional[np.ndarray] = None
        self.basis: Optional[np.ndarray] = None

    @property
    def extractor_id(self) -> str:
        return f"pixel-pca-{self.dims}"

    def fit(self, images: torch.Tensor) -> "PixelPCAExtractor":
        x = thumbnails(images, size=self.size)
        if len(x) < self.dims:
            raise InvalidInputError(f"need at least {self.dims} images to fit a {self.dims}-dim basis")
        self.mean = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - self.mean, full_matrices=False)
        basis = vt[:self.dims]
        # fix each axis' sign so refits are reproducible
        signs = np.sign(basis[np.arange(self.dims), np.abs(basis).argmax(axis=1)])
        self.basis = basis * signs[:, None]
        return self

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.basis is None:
            raise InvalidStateError("PCA basis has not been fit")
        if x.shape[1] != self.basis.shape[1]:
            raise InvalidStateError(f"samples have {x.shape[1]} pixels but the basis expects {self.basis.shape[1]}")
        return (x - self.mean) @ self.basis.T

    def embed(self, images: torch.Tensor) -> FeatureSet:
        return FeatureSet(self.project(thumbnails(images, size=self.size)), self.extractor_id)


def make_extractor(extractor_id: str) -> PixelPCAExtractor:
    prefix = "pixel-pca-"
    if not extractor_id.startswith(prefix) or not extractor_id[len(prefix):].isdigit():
        raise InvalidInputError(f"unknown feature extractor {extractor_id!r}; expected 'pixel-pca-<dims>'")
    return PixelPCAExtractor(int(extractor_id[len(prefix):]))


def reconstruction_error(x: np.ndarray, mean: np.ndarray, basis: np.ndarray) -> float:
    """Mean squared residual after projecting centred rows of x onto an orthonormal basis."""
    c = x - mean
    return float(((c - (c @ basis.T) @ basis) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# attribute agreement


def _agree(a, b) -> bool:
    if a is None or b is None:
        return False
    if isinstance(a, float) or isinstance(b, float):
        return abs(float(a) - float(b)) <= CONTINUOUS_TOL
    return a == b


def attribute_match_rate(guide_attrs: Sequence[Optional[AttributeRecord]],
                         output_attrs: Sequence[Optional[AttributeRecord]],
                         content_keys: Sequence[str] = CONTENT_KEYS) -> Dict[str, float]:
    """Per-key agreement rate plus their mean under ``"mean"``. A failed extraction
    (None) never agrees; continuous attributes agree within CONTINUOUS_TOL."""
    if len(guide_attrs) != len(output_attrs):
        raise InvalidInputError(f"record counts differ: {len(guide_attrs)} vs {len(output_attrs)}")
    if not guide_attrs:
        raise InvalidInputError("no records to compare")
    fields = AttributeRecord.__dataclass_fields__
    for key in content_keys:
        if key not in fields:
            raise InvalidInputError(f"unknown attribute key {key!r}")
    rates = {}
    for key in content_keys:
        hits = sum(_agree(getattr(g, key) if g else None, getattr(o, key) if o else None)
                   for g, o in zip(guide_attrs, output_attrs))
        rates[key] = hits / len(guide_attrs)
    rates["mean"] = sum(rates[k] for k in content_keys) / len(content_keys)
    return rates


def above_chance_test(matches: int, n: int, chance: float = 1.0 / 3.0, confidence: float = 0.95) -> Dict[str, float]:
    """One-sided exact binomial test of a match rate against ``chance``, with a
    two-sided Clopper-Pearson interval."""
    if n < 1 or not 0 <= matches <= n:
        raise InvalidInputError(f"need 0 <= matches <= n and n >= 1, got {matches}/{n}")
    res = stats.binomtest(matches, n, chance, alternative="greater")
    ci = stats.binomtest(matches, n, chance).proportion_ci(confidence_level=confidence, method="exact")
    return {"matches": matches, "n": n, "rate": matches / n, "chance": chance, "p_value": float(res.pvalue),
            "ci_low": float(ci.low), "ci_high": float(ci.high), "confidence": confidence}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    extractor: str
    n_real: int
    n_fake: int
    fid: Optional[float] = None
    precision: Optional[float] = None
    k: Optional[int] = None
    match_rates: Dict[str, float] = field(default_factory=dict)
    content_test: Dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    extra: Dict[str, object] = field(default_factory=dict)

    def flat(self) -> Dict[str, object]:
        out = {k: v for k, v in asdict(self).items() if not isinstance(v, dict)}
        for group in ("match_rates", "content_test", "extra"):
            for k, v in getattr(self, group).items():
                out[f"{group}.{k}"] = v
        return out

    def to_text(self) -> str:
        return "".join(f"{k}: {_fmt(v)}\n" for k, v in self.flat().items())

    def csv_header(self) -> List[str]:
        return list(self.flat())

    def csv_row(self) -> List[str]:
        return [_fmt(v) for v in self.flat().values()]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)
