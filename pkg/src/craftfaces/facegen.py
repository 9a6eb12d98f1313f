"""Parametric face renderer, toy graffiti stylizer, and prompt embedder.

Images are (2, H, W) float64 tensors in [0, 1]: plane 0 is the geometry
channel, plane 1 the chroma channel. Six face attributes are drawn as
landmark splats in dedicated geometry rows; a splat places unit intensity
across two neighboring pixels with bilinear weights, so the intensity
centroid of the row recovers the continuous landmark position exactly.
That makes attribute extraction an exact inverse of rendering and keeps
it consistent across resolutions.

Landmark bands (fractions of image height):

    brow   0.22  eye size          single splat, x = (0.15 + 0.70 a) W
    eyes   0.36  eye spacing       two splats at 0.5 W +- (0.12 + 0.13 a) W
    nose   0.50  nose length       single splat
    mouth  0.64  mouth width       single splat
    curve  0.72  mouth curvature   single splat
    chin   0.86  face radius       single splat

Decorative geometry (face ring, pupils, nose line, mouth stroke) is drawn
first at intensity <= 0.5, then the band rows are cleared before splats
are placed, so nothing contaminates the measurement rows. Stylization
warps intensities, boosts chroma edges, quantizes chroma to the spray
palette, and shifts the landmark splats horizontally; every effect scales
with the style intensity and the landmark jitter is what perturbs the
attributes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .numerics import RngStream, tensor

__all__ = [
    "ATTRIBUTE_NAMES",
    "FaceParams",
    "RendererConfig",
    "DEFAULT_RENDERER",
    "StyleOp",
    "render_face",
    "graffiti_stylize",
    "embed_prompt",
    "face_grid",
    "band_rows",
    "draw_landmarks",
    "image_hash",
    "palette_mass",
    "chroma_histogram",
    "write_ppm",
    "read_ppm",
    "SPRAY_PALETTE",
]

ATTRIBUTE_NAMES = (
    "eye_spacing",
    "eye_size",
    "nose_length",
    "mouth_width",
    "mouth_curve",
    "face_radius",
)

# chroma base tones selectable per face
FACE_PALETTES = (0.30, 0.45, 0.60, 0.75)

# default spray-paint tone set used by the stylizer
SPRAY_PALETTE = (0.05, 0.25, 0.50, 0.75, 0.95)

MIN_SIZE = 32


@dataclass(frozen=True)
class FaceParams:
    """Six measured attributes in [0, 1] plus nuisance fields that the
    attribute extractor ignores (palette and background)."""

    eye_spacing: float = 0.5
    eye_size: float = 0.5
    nose_length: float = 0.5
    mouth_width: float = 0.5
    mouth_curve: float = 0.5
    face_radius: float = 0.5
    palette_id: int = 0
    background: float = 0.12

    def attributes(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in ATTRIBUTE_NAMES], dtype=np.float64)

    def validate(self) -> "FaceParams":
        for n in ATTRIBUTE_NAMES:
            v = getattr(self, n)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"attribute {n}={v} outside [0, 1]")
        if not 0.0 <= self.background <= 1.0:
            raise ConfigError(f"background {self.background} outside [0, 1]")
        if self.palette_id < 0:
            raise ConfigError(f"palette_id must be >= 0, got {self.palette_id}")
        return self


@dataclass(frozen=True)
class RendererConfig:
    """Layout constants shared by the renderer and the attribute extractor."""

    band_fractions: tuple[tuple[str, float], ...] = (
        ("eye_size", 0.22),
        ("eye_spacing", 0.36),
        ("nose_length", 0.50),
        ("mouth_width", 0.64),
        ("mouth_curve", 0.72),
        ("face_radius", 0.86),
    )
    x_margin: float = 0.15
    x_span: float = 0.70
    eye_offset: float = 0.12
    eye_span: float = 0.13


DEFAULT_RENDERER = RendererConfig()


def band_rows(cfg: RendererConfig, height: int) -> dict[str, int]:
    return {name: int(round(f * height)) for name, f in cfg.band_fractions}


def _splat(row: np.ndarray, u: float, amp: float = 1.0) -> None:
    """Deposit ``amp`` across the two pixels bracketing position ``u``."""
    x0 = int(np.floor(u))
    frac = u - x0
    row[x0] += amp * (1.0 - frac)
    if frac > 0.0:
        row[x0 + 1] += amp * frac


def draw_landmarks(geometry: np.ndarray, attrs: np.ndarray, cfg: RendererConfig) -> None:
    """Clear the landmark bands of a geometry plane and re-splat them at
    the given attribute values (in place)."""
    h, w = geometry.shape
    rows = band_rows(cfg, h)
    a = {name: float(v) for name, v in zip(ATTRIBUTE_NAMES, attrs)}
    for name, r in rows.items():
        geometry[r, :] = 0.0
    half = (cfg.eye_offset + cfg.eye_span * a["eye_spacing"]) * w
    _splat(geometry[rows["eye_spacing"]], 0.5 * w - half)
    _splat(geometry[rows["eye_spacing"]], 0.5 * w + half)
    for name in ("eye_size", "nose_length", "mouth_width", "mouth_curve", "face_radius"):
        _splat(geometry[rows[name]], (cfg.x_margin + cfg.x_span * a[name]) * w)


def _decorate(geometry: np.ndarray, p: FaceParams) -> None:
    """Low-intensity face drawing; purely cosmetic, never measured."""
    h, w = geometry.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 0.54 * h, 0.5 * w
    radius = (0.16 + 0.20 * p.face_radius) * min(h, w)
    ring = np.abs(np.hypot(yy - cy, xx - cx) - radius) < 0.9
    geometry[ring] = np.maximum(geometry[ring], 0.45)

    pupil_row = int(round(0.31 * h))
    half = (0.12 + 0.13 * p.eye_spacing) * w
    for x in (int(round(cx - half)), int(round(cx + half))):
        geometry[pupil_row, max(0, min(w - 1, x))] = 0.5

    nose_top = int(round(0.42 * h))
    nose_len = int(round((0.04 + 0.08 * p.nose_length) * h))
    geometry[nose_top : nose_top + nose_len, int(cx)] = np.maximum(
        geometry[nose_top : nose_top + nose_len, int(cx)], 0.35
    )

    stroke_row = int(round(0.68 * h))
    mouth_half = int(round((0.06 + 0.12 * p.mouth_width) * w))
    lo, hi = int(cx) - mouth_half, int(cx) + mouth_half + 1
    geometry[stroke_row, lo:hi] = np.maximum(
        geometry[stroke_row, lo:hi], 0.30 + 0.2 * p.mouth_curve
    )


def render_face(p: FaceParams, size: int = 64, cfg: RendererConfig = DEFAULT_RENDERER) -> np.ndarray:
    """Deterministic (2, size, size) face image; landmark rows encode the
    attributes exactly."""
    p.validate()
    if size < MIN_SIZE:
        raise ConfigError(f"size {size} below minimum {MIN_SIZE}")
    h = w = int(size)
    geometry = np.zeros((h, w), dtype=np.float64)
    _decorate(geometry, p)
    draw_landmarks(geometry, p.attributes(), cfg)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 0.54 * h, 0.5 * w
    radius = (0.16 + 0.20 * p.face_radius) * min(h, w)
    dist = np.hypot(yy - cy, xx - cx)
    base = FACE_PALETTES[p.palette_id % len(FACE_PALETTES)]
    chroma = np.full((h, w), p.background, dtype=np.float64)
    inside = dist <= radius
    chroma[inside] = base + 0.25 * (dist[inside] / max(radius, 1.0))
    np.clip(chroma, 0.0, 1.0, out=chroma)
    return np.stack([geometry, chroma])


def image_hash(img: np.ndarray) -> int:
    img = tensor(img)
    h = hashlib.blake2b(digest_size=8)
    h.update(str(img.shape).encode())
    h.update(img.tobytes())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class StyleOp:
    """Toy graffiti operator. intensity 0 is the identity map; jitter of
    the landmark rows grows with intensity, which is what makes the
    operator perturb attributes."""

    intensity: float = 0.7
    palette: tuple[float, ...] = SPRAY_PALETTE
    edge_gain: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError(f"style intensity {self.intensity} outside [0, 1]")
        if self.edge_gain < 0:
            raise ConfigError(f"edge_gain must be >= 0, got {self.edge_gain}")
        if len(self.palette) == 0:
            raise ConfigError("style palette must not be empty")


def _smooth_warp(g: np.ndarray) -> np.ndarray:
    # fixes 0 and 1, bends midtones
    return g * g * (3.0 - 2.0 * g)


def _shift_fractional(row: np.ndarray, delta: float) -> np.ndarray:
    """Shift a row by a continuous offset with linear resampling; moves
    the intensity centroid by exactly ``delta`` (mass stays inside)."""
    k = int(np.floor(delta))
    frac = delta - k

    def shift_int(r: np.ndarray, n: int) -> np.ndarray:
        out = np.zeros_like(r)
        if n >= 0:
            out[n:] = r[: r.size - n] if n else r
        else:
            out[:n] = r[-n:]
        return out

    if frac == 0.0:
        return shift_int(row, k)
    return (1.0 - frac) * shift_int(row, k) + frac * shift_int(row, k + 1)


JITTER_TRACKS = ("eye_left", "eye_right", "eye_size", "nose_length", "mouth_width", "mouth_curve", "face_radius")
JITTER_MIN_PX = 0.4
JITTER_MAX_PX = 1.6


def _jitter_units(img: np.ndarray) -> dict[str, float]:
    """Per-landmark shift units in pixels, seeded by the image content so
    stylization is a pure function of (image, op). Magnitudes stay in
    [JITTER_MIN_PX, JITTER_MAX_PX] so jitter dominates the small centroid
    drift the intensity warp induces; the two eye tracks get opposite
    signs so the eye-spacing drift never collapses to zero."""
    js = RngStream(seed=image_hash(img)).split("landmark-jitter")
    mags = js.uniform((len(JITTER_TRACKS),), JITTER_MIN_PX, JITTER_MAX_PX)
    signs = np.where(js.uniform((len(JITTER_TRACKS),)) < 0.5, -1.0, 1.0)
    units = {t: float(m * s) for t, m, s in zip(JITTER_TRACKS, mags, signs)}
    units["eye_left"] = -units["eye_right"] / abs(units["eye_right"]) * abs(units["eye_left"])
    return units


def graffiti_stylize(img: np.ndarray, op: StyleOp, rng: RngStream | None = None) -> np.ndarray:
    """Apply the graffiti surrogate: chroma edge boost + palette
    quantization, geometry contrast warp, and intensity-scaled landmark
    jitter.

    Output depends only on (img, op); the ``rng`` argument is accepted for
    call-site uniformity but unused, since the jitter stream is derived
    from the image content to keep repeated applications reproducible.
    """
    img = tensor(img)
    if img.ndim != 3 or img.shape[0] != 2:
        raise ConfigError(f"expected a (2, H, W) image, got shape {img.shape}")
    i = op.intensity
    if i == 0.0:
        return img.copy()

    h = img.shape[1]
    units = _jitter_units(img)
    geometry = (1.0 - i) * img[0] + i * _smooth_warp(img[0])

    rows = band_rows(DEFAULT_RENDERER, h)
    w = img.shape[2]
    mid = w // 2
    eye_row = geometry[rows["eye_spacing"]]
    left = _shift_fractional(np.where(np.arange(w) < mid, eye_row, 0.0), i * units["eye_left"])
    right = _shift_fractional(np.where(np.arange(w) >= mid, eye_row, 0.0), i * units["eye_right"])
    geometry[rows["eye_spacing"]] = left + right
    for name in ("eye_size", "nose_length", "mouth_width", "mouth_curve", "face_radius"):
        geometry[rows[name]] = _shift_fractional(geometry[rows[name]], i * units[name])

    chroma = img[1]
    lap = 4.0 * chroma - (
        np.roll(chroma, 1, axis=0)
        + np.roll(chroma, -1, axis=0)
        + np.roll(chroma, 1, axis=1)
        + np.roll(chroma, -1, axis=1)
    )
    boosted = np.clip(chroma + i * op.edge_gain * lap, 0.0, 1.0)
    palette = np.asarray(op.palette, dtype=np.float64)
    nearest = palette[np.argmin(np.abs(boosted[..., None] - palette), axis=-1)]
    chroma_out = (1.0 - i) * boosted + i * nearest

    return np.stack([geometry, chroma_out])


def embed_prompt(text: str, dim: int = 8) -> np.ndarray:
    """Deterministic unit-norm embedding from a bag of lowercased tokens."""
    if not text or not text.strip():
        raise InputError("prompt must be a nonempty string")
    if dim < 1:
        raise ConfigError(f"embedding dim must be >= 1, got {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        seed = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
        acc += RngStream(seed=seed).normal((dim,))
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:  # astronomically unlikely; guards the unit-norm contract
        acc[0] = 1.0
        norm = 1.0
    return acc / norm


def face_grid(n: int, seed: int = 0) -> list[FaceParams]:
    """Deterministic grid of ``n`` faces with attributes in [0.1, 0.9]."""
    if n < 1:
        raise ConfigError(f"face grid size must be >= 1, got {n}")
    stream = RngStream(seed=seed).split("face-grid")
    attrs = stream.uniform((n, len(ATTRIBUTE_NAMES)), 0.1, 0.9)
    shades = stream.uniform((n,), 0.05, 0.3)
    return [
        FaceParams(
            **dict(zip(ATTRIBUTE_NAMES, attrs[i])),
            palette_id=i % len(FACE_PALETTES),
            background=float(shades[i]),
        )
        for i in range(n)
    ]


def palette_mass(img: np.ndarray, palette, tol: float = 1e-9) -> float:
    """Fraction of chroma pixels lying on palette tones."""
    chroma = tensor(img)[1]
    palette = np.asarray(palette, dtype=np.float64)
    hits = np.min(np.abs(chroma[..., None] - palette), axis=-1) <= tol
    return float(np.mean(hits))


def chroma_histogram(img: np.ndarray, bins: int = 16) -> np.ndarray:
    """Normalized histogram of the chroma plane over [0, 1]."""
    chroma = tensor(img)[1]
    counts, _ = np.histogram(chroma, bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 export; geometry drives red, chroma drives green/blue."""
    img = tensor(img)
    if img.ndim != 3 or img.shape[0] != 2:
        raise ConfigError(f"expected a (2, H, W) image, got shape {img.shape}")
    g = np.clip(img[0], 0.0, 1.0)
    c = np.clip(img[1], 0.0, 1.0)
    rgb = np.stack(
        [g, 0.25 * g + 0.75 * c, 0.6 * (1.0 - c) + 0.4 * g], axis=-1
    )
    raw = np.round(255.0 * rgb).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back as (3, H, W) floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise InputError(f"{path}: not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    raw = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / maxval
