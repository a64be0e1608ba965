"""2-D Fourier analysis of feature maps and band-limited noise injection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

LOG_EPS = 1e-12
PI = math.pi


# ---------------------------------------------------------------------------
# radix-2 transforms
# ---------------------------------------------------------------------------
def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"length {n} is not a power of two")
    lead = x.shape[:-1]
    y = x[..., _bitrev(n)].astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    m = 1
    while m < n:
        w = np.exp(sign * 1j * PI * np.arange(m) / m)
        y = y.reshape(lead + (n // (2 * m), 2, m))
        even, odd = y[..., 0, :], y[..., 1, :] * w
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return y / n if inverse else y


def fftshift(x) -> np.ndarray:
    return np.fft.fftshift(x, axes=(-2, -1))


def ifftshift(x) -> np.ndarray:
    return np.fft.ifftshift(x, axes=(-2, -1))


def pad_pow2(x: np.ndarray) -> tuple:
    """Reflection-pad the last two axes up to powers of two."""
    h, w = x.shape[-2:]
    ph = 1 << max(h - 1, 0).bit_length()
    pw = 1 << max(w - 1, 0).bit_length()
    if (ph, pw) == (h, w):
        return x, (0, 0)
    pads = [(0, 0)] * (x.ndim - 2) + [(0, ph - h), (0, pw - w)]
    mode = "reflect" if h > 1 and w > 1 and ph - h < h and pw - w < w else "symmetric"
    return np.pad(x, pads, mode=mode), (ph - h, pw - w)


def fft2(x, centered: bool = True, return_meta: bool = False):
    """2-D transform over the last two axes, rows then columns.

    Non-dyadic extents are reflection padded first; the padding is reported
    in the metadata when ``return_meta`` is set.
    """
    x = np.asarray(x)
    x, pad = pad_pow2(x)
    out = fft(fft(x).swapaxes(-1, -2)).swapaxes(-1, -2)
    if centered:
        out = fftshift(out)
    if return_meta:
        return out, {"padded": pad != (0, 0), "pad": pad, "centered": centered}
    return out


def ifft2(X, centered: bool = True) -> np.ndarray:
    X = np.asarray(X)
    if centered:
        X = ifftshift(X)
    return fft(fft(X, inverse=True).swapaxes(-1, -2), inverse=True).swapaxes(-1, -2)


def naive_dft2(x) -> np.ndarray:
    """Direct double-sum DFT (uncentered); O(N^4), for testing only."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for a in range(h):
                for b in range(w):
                    acc += x[a, b] * np.exp(-2j * PI * (u * a / h + v * b / w))
            out[u, v] = acc
    return out


@lru_cache(maxsize=None)
def radial_frequency(h: int, w: int) -> np.ndarray:
    """Normalized radius of each centered bin; the corner bin sits at pi."""
    fy = (np.arange(h) - h // 2) * (2 * PI / h)
    fx = (np.arange(w) - w // 2) * (2 * PI / w)
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    r = r * (PI / r.max()) if r.max() > 0 else r
    r.flags.writeable = False
    return r


# ---------------------------------------------------------------------------
# amplitude profiles
# ---------------------------------------------------------------------------
@dataclass
class FrequencyProfile:
    layer: str
    freqs: np.ndarray
    log_amplitude: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def delta(self) -> float:
        """Log amplitude at pi minus log amplitude at 0."""
        return float(self.log_amplitude[-1] - self.log_amplitude[0])

    def to_rows(self) -> list:
        return [(self.layer, float(f), float(a)) for f, a in zip(self.freqs, self.log_amplitude)]


def half_diagonal_profile(spectrum, layer: str = "", half: str = "lower", eps: float = LOG_EPS
                          ) -> FrequencyProfile:
    """Mean log amplitude along the diagonal from the center bin to the corner.

    ``spectrum`` is centered with shape (..., H, W); every leading axis
    (samples, channels) is averaged after the log.
    """
    X = np.asarray(spectrum)
    h, w = X.shape[-2:]
    if h != w or h % 2:
        raise ValueError(f"half-diagonal needs a square even grid, got {h}x{w}")
    c = h // 2
    steps = np.arange(c + 1)
    rows = (c - steps) if half == "lower" else (c + steps) % h
    logamp = np.log(np.maximum(np.abs(X[..., rows, rows]), eps))
    logamp = logamp.reshape(-1, c + 1).mean(axis=0)
    freqs = steps * (PI / c)
    return FrequencyProfile(layer, freqs, logamp, {"terminal_bin": "corner", "eps": eps, "half": half})


def map_profile(maps, layer: str = "", eps: float = LOG_EPS) -> FrequencyProfile:
    """Profile of real feature maps (..., H, W)."""
    X, meta = fft2(maps, return_meta=True)
    prof = half_diagonal_profile(X, layer, eps=eps)
    prof.meta.update(meta)
    return prof


def layerwise_fourier_report(model, images, paths=None, batch_size: int = 256) -> list:
    """One profile for the raw input and one per block output (post residual)."""
    acts = model.activations(images, paths, batch_size=batch_size)
    profiles = [map_profile(np.asarray(images), "input")]
    prefix = model.spec.stem.cls_token
    for path, maps in acts.items():
        prof = map_profile(maps, path)
        prof.meta["class_token_excluded"] = bool(prefix)
        profiles.append(prof)
    return profiles


def delta_changes(profiles) -> dict:
    """Per-layer change of the Δ log amplitude relative to the preceding layer."""
    return {b.layer: b.delta - a.delta for a, b in zip(profiles, profiles[1:])}


# ---------------------------------------------------------------------------
# band-limited noise
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSpec:
    center: float
    width: float = 0.1 * PI
    magnitude: float = 0.1
    seed: int = 0

    @property
    def band(self) -> tuple:
        lo = min(max(self.center - self.width / 2, 0.0), PI)
        hi = min(max(self.center + self.width / 2, 0.0), PI)
        return lo, hi


def band_mask(h: int, w: int, lo: float, hi: float) -> np.ndarray:
    """Radial indicator of lo <= r < hi on the centered grid (hi = pi is closed)."""
    r = radial_frequency(h, w)
    upper = r <= hi + 1e-12 if hi >= PI else r < hi
    return ((r >= lo) & upper).astype(np.float64)


def band_limit(x, lo: float, hi: float) -> np.ndarray:
    """Keep only the radial band [lo, hi) of real maps (..., H, W)."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if lo <= 0.0 and hi >= PI:
        return x.copy()
    if hi <= lo:
        return np.zeros_like(x)
    xp, (dh, dw) = pad_pow2(x)
    X = fft2(xp) * band_mask(*xp.shape[-2:], lo, hi)
    y = ifft2(X)
    if np.max(np.abs(y.imag), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(y.real), initial=0.0)):
        raise ArithmeticError("band-limited signal is not real; mask is not symmetric")
    return y.real[..., :h, :w]


def frequency_noise(x0, spec: NoiseSpec) -> np.ndarray:
    """x0 plus Gaussian noise restricted to the radial band of ``spec``."""
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.band
    if hi <= lo or spec.magnitude == 0:
        return x0.copy()
    xp_shape = pad_pow2(np.empty(x0.shape[-2:]))[0].shape
    delta = spec.magnitude * rng.standard_normal(x0.shape[:-2] + xp_shape)
    if lo <= 0.0 and hi >= PI:
        return x0 + delta[..., :x0.shape[-2], :x0.shape[-1]]
    noise = band_limit(delta, lo, hi)
    return x0 + noise[..., :x0.shape[-2], :x0.shape[-1]]


def default_bands(width: float = 0.1 * PI) -> np.ndarray:
    n = int(round(PI / width))
    return (np.arange(n) + 0.5) * width


def accuracy(model, images, labels, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(images, batch_size).argmax(axis=1) == labels))


def frequency_robustness_sweep(model, images, labels, magnitude: float, bands=None,
                               width: float = 0.1 * PI, seed: int = 0,
                               batch_size: int = 256) -> list:
    """(band_center, accuracy drop) per band; band k uses noise seed ``seed + k``."""
    bands = default_bands(width) if bands is None else np.asarray(bands, dtype=np.float64)
    clean = accuracy(model, images, labels, batch_size)
    out = []
    for k, fc in enumerate(bands):
        noisy = frequency_noise(images, NoiseSpec(float(fc), width, magnitude, seed + k))
        out.append((float(fc), clean - accuracy(model, noisy, labels, batch_size)))
    return out
