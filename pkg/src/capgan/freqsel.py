"""Frequency selection: RGB image -> band-limited, half-resolution intensity image.

Pipeline: luma weighting, 2x2 block-mean downsampling, 2-D DFT, DC-centering
roll, rectangular band mask around DC, inverse DFT. All spectral arithmetic is
float64; callers convert to model precision afterwards.

Every array function works on the trailing two axes (or trailing three for RGB
input), so a stack of images is processed in one call.
"""

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, InvalidStateError, NumericSymmetryWarning

DEFAULT_LUMA = (0.299, 0.587, 0.114)

FILTER_MODES = ("none", "low", "high")
COMBINERS = ("and", "or")

# idft2 warns when |imag| exceeds this fraction of the largest magnitude
IMAG_RESIDUE_TOL = 1e-6


@dataclass(frozen=True)
class FilterSpec:
    """Band mask configuration.

    ``mode="low"`` keeps offsets with |du| <= cutoff and |dv| <= cutoff.
    ``mode="high"`` keeps |du| >= cutoff and |dv| >= cutoff with the default
    ``and`` combiner, which zeroes a cross through DC and keeps only the
    corners. The ``or`` combiner zeroes just the central square instead, so
    high/or with cutoff b is the exact complement of low/and with b - 1.
    """

    mode: str = "none"
    cutoff: int = 0
    combiner: str = "and"

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise InvalidInputError(f"filter mode must be one of {FILTER_MODES}, got {self.mode!r}")
        if self.combiner not in COMBINERS:
            raise InvalidInputError(f"combiner must be one of {COMBINERS}, got {self.combiner!r}")
        if isinstance(self.cutoff, bool) or int(self.cutoff) != self.cutoff or self.cutoff < 0:
            raise InvalidInputError(f"cutoff must be a nonnegative integer, got {self.cutoff!r}")
        object.__setattr__(self, "cutoff", int(self.cutoff))

    def validate_for(self, shape: Tuple[int, int]) -> None:
        limit = math.ceil(max(shape) / 2)
        if self.cutoff > limit:
            raise InvalidInputError(
                f"cutoff {self.cutoff} exceeds ceil(max(M, N)/2) = {limit} for spectrum {shape}")

    @property
    def label(self) -> str:
        if self.mode == "none":
            return "none"
        suffix = "" if self.combiner == "and" else "-or"
        return f"{self.mode}{self.cutoff}{suffix}"


@dataclass
class Spectrum:
    data: np.ndarray
    centered: bool = False

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[-2:]


def _check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise InvalidInputError(f"{name} must be at least 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def _check_even(shape: Sequence[int]) -> None:
    m, n = shape[-2], shape[-1]
    if m % 2 or n % 2:
        raise InvalidInputError(f"image dimensions must be even, got {m}x{n}")


def to_intensity(img: np.ndarray, luma: Sequence[float] = DEFAULT_LUMA) -> np.ndarray:
    """Weighted channel sum of an (..., H, W, 3) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3 or img.shape[-1] != 3:
        raise InvalidInputError(f"expected an RGB image with trailing channel axis of 3, got {img.shape}")
    weights = np.asarray(luma, dtype=np.float64)
    if weights.shape != (3,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"luma weights must be 3 nonnegative values summing to 1, got {tuple(luma)}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    return img @ weights


def downsample_half(x: np.ndarray) -> np.ndarray:
    """Mean of each 2x2 block."""
    x = _check_image(x)
    _check_even(x.shape)
    m, n = x.shape[-2:]
    blocks = x.reshape(*x.shape[:-2], m // 2, 2, n // 2, 2)
    return blocks.mean(axis=(-3, -1))


def dft2(x: np.ndarray) -> Spectrum:
    x = _check_image(x)
    return Spectrum(np.fft.fft2(x, axes=(-2, -1)), centered=False)


def shift_center(s: Spectrum) -> Spectrum:
    """Roll the DC coefficient from (0, 0) to (M//2, N//2)."""
    if s.centered:
        raise InvalidStateError("spectrum is already centered")
    m, n = s.shape
    return Spectrum(np.roll(s.data, (m // 2, n // 2), axis=(-2, -1)), centered=True)


def unshift_center(s: Spectrum) -> Spectrum:
    if not s.centered:
        raise InvalidStateError("spectrum is not centered")
    m, n = s.shape
    return Spectrum(np.roll(s.data, (-(m // 2), -(n // 2)), axis=(-2, -1)), centered=False)


def band_mask(shape: Tuple[int, int], f: FilterSpec) -> np.ndarray:
    """Boolean keep-mask in centered coordinates."""
    f.validate_for(shape)
    m, n = shape
    du = np.abs(np.arange(m) - m // 2)[:, None]
    dv = np.abs(np.arange(n) - n // 2)[None, :]
    if f.mode == "none":
        return np.ones((m, n), dtype=bool)
    b = f.cutoff
    if f.mode == "low":
        a, c = du <= b, dv <= b
    else:
        a, c = du >= b, dv >= b
    return (a & c) if f.combiner == "and" else (a | c)


def band_filter(s: Spectrum, f: FilterSpec) -> Spectrum:
    if not s.centered:
        raise InvalidStateError("band_filter expects a centered spectrum")
    mask = band_mask(s.shape, f)
    return Spectrum(np.where(mask, s.data, 0), centered=True)


def idft2(s: Spectrum, return_residue: bool = False):
    """Inverse DFT, real part. Centered spectra are un-rolled first.

    With ``return_residue`` the max |imag| (relative to the largest output
    magnitude) is returned alongside the image.
    """
    if s.centered:
        s = unshift_center(s)
    out = np.fft.ifft2(s.data, axes=(-2, -1))
    scale = np.abs(out).max() if out.size else 0.0
    residue = float(np.abs(out.imag).max() / scale) if scale > 0 else 0.0
    if residue > IMAG_RESIDUE_TOL:
        warnings.warn(f"inverse DFT imaginary residue {residue:.3g} of max magnitude",
                      NumericSymmetryWarning, stacklevel=2)
    if return_residue:
        return out.real, residue
    return out.real


def frequency_refine(img: np.ndarray, f: Optional[FilterSpec] = None,
                     luma: Sequence[float] = DEFAULT_LUMA) -> np.ndarray:
    """(..., H, W, 3) RGB in [0, 1] -> (..., H/2, W/2) refined intensity."""
    f = f or FilterSpec()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3:
        raise InvalidInputError(f"expected an RGB image, got shape {img.shape}")
    _check_even(img.shape[:-1])
    small = downsample_half(to_intensity(img, luma))
    if f.mode == "none":
        f.validate_for(small.shape[-2:])
    spec = band_filter(shift_center(dft2(small)), f)
    return idft2(spec)


def refine_batch(images, f: Optional[FilterSpec] = None, luma: Sequence[float] = DEFAULT_LUMA):
    """Model-side wrapper: (B, 3, H, W) tensor in [-1, 1] -> (B, 1, H/2, W/2) float32 tensor."""
    import torch

    arr = images.detach().to("cpu", torch.float64).numpy()
    arr = (np.transpose(arr, (0, 2, 3, 1)) + 1.0) * 0.5
    refined = frequency_refine(np.clip(arr, 0.0, 1.0), f, luma)
    return torch.from_numpy(refined[:, None].astype(np.float32))


def magnitude_image(s: Spectrum) -> np.ndarray:
    """Log-scaled magnitude as uint8, DC centered for display."""
    if not s.centered:
        s = shift_center(s)
    mag = np.log1p(np.abs(s.data))
    top = mag.max()
    if top > 0:
        mag = mag / top
    return np.round(mag * 255).astype(np.uint8)
