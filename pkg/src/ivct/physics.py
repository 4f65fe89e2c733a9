"""Fan-beam CT acquisition: geometry, projection, reconstruction, noise, phantoms.

Coordinates: the rotation centre is the origin, x grows to the right and y
upwards. For view angle ``b`` the source sits at ``R (cos b, sin b)`` and the
flat detector is centred at ``-D_det (cos b, sin b)`` with its axis along
``(-sin b, cos b)``. Pixel ``[i, j]`` of an ``N x N`` image covers the point
``x = (j - (N-1)/2) * dx``, ``y = ((N-1)/2 - i) * dx``.

Images hold normalised attenuation in [0, 1]; a value of 1 corresponds to
``mu_max`` per millimetre, so sinograms are dimensionless line integrals.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from numba import njit

from .autograd import RngState, Tensor
from .autograd.tensor import make_op

class GeometryError(ValueError):
    """Scan parameters are inconsistent or do not cover the image."""


@dataclass(frozen=True)
class ScanGeometry:
    n_full_views: int = 720
    n_detectors: int = 672
    dist_source_center: float = 1075.0
    dist_detector_center: float = 1075.0
    detector_pitch: float = 0.0
    image_size: int = 256
    pixel_spacing: float = 1.0
    angular_span: float = 360.0
    mu_max: float = 0.04

    @property
    def view_angles(self) -> np.ndarray:
        """Full-view angles in degrees."""
        return np.arange(self.n_full_views) * (self.angular_span / self.n_full_views)

    @property
    def angular_step(self) -> float:
        """Full-grid angular increment in radians."""
        return math.radians(self.angular_span) / self.n_full_views

    @property
    def fan_half_angle(self) -> float:
        half_width = self.n_detectors * self.detector_pitch / 2
        return math.atan(half_width / (self.dist_source_center + self.dist_detector_center))

    @property
    def fov_radius(self) -> float:
        return self.dist_source_center * math.sin(self.fan_half_angle)

    @property
    def half_diagonal(self) -> float:
        return self.image_size * self.pixel_spacing / math.sqrt(2)

    def summary(self) -> dict:
        return asdict(self)

    def key(self) -> tuple:
        return tuple(asdict(self).values())


def default_pitch(dist_source_center, dist_detector_center, n_detectors, image_size, pixel_spacing) -> float:
    r = image_size * pixel_spacing / math.sqrt(2) + 2 * pixel_spacing
    if r >= dist_source_center:
        raise GeometryError("image support reaches the source")
    half_angle = math.asin(r / dist_source_center)
    return 2 * (dist_source_center + dist_detector_center) * math.tan(half_angle) / n_detectors


def make_geometry(
    n_full_views: int = 720,
    n_detectors: int = 672,
    dist_source_center: float = 1075.0,
    dist_detector_center: float = 1075.0,
    detector_pitch: float | None = None,
    image_size: int = 256,
    pixel_spacing: float = 1.0,
    angular_span: float = 360.0,
    mu_max: float = 0.04,
) -> ScanGeometry:
    """Validated :class:`ScanGeometry`; the pitch defaults to full-diagonal coverage."""
    if n_detectors <= 0 or n_full_views <= 0 or image_size <= 0:
        raise GeometryError("view, detector and pixel counts must be positive")
    if min(dist_source_center, dist_detector_center, pixel_spacing, angular_span, mu_max) <= 0:
        raise GeometryError("distances, spacing, span and mu_max must be positive")
    if angular_span > 360:
        raise GeometryError("angular span cannot exceed 360 degrees")
    if detector_pitch is None or detector_pitch <= 0:
        detector_pitch = default_pitch(
            dist_source_center, dist_detector_center, n_detectors, image_size, pixel_spacing
        )
    geom = ScanGeometry(
        int(n_full_views),
        int(n_detectors),
        float(dist_source_center),
        float(dist_detector_center),
        float(detector_pitch),
        int(image_size),
        float(pixel_spacing),
        float(angular_span),
        float(mu_max),
    )
    if geom.fov_radius < geom.half_diagonal:
        raise GeometryError(
            f"field of view radius {geom.fov_radius:.1f} mm is smaller than the image half-diagonal "
            f"{geom.half_diagonal:.1f} mm; increase detector pitch or count"
        )
    return geom


def desk_geometry(image_size: int = 64, n_detectors: int = 96, pixel_spacing: float = 4.0) -> ScanGeometry:
    """Small geometry used by tests and desk-scale experiments (720 views kept)."""
    return make_geometry(n_detectors=n_detectors, image_size=image_size, pixel_spacing=pixel_spacing)


@dataclass
class Image:
    data: np.ndarray
    pixel_spacing: float = 1.0

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Sinogram:
    data: np.ndarray
    geometry: ScanGeometry
    view_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.view_indices is None:
            self.view_indices = np.arange(self.geometry.n_full_views)
        self.view_indices = np.asarray(self.view_indices, dtype=np.int64)
        if self.data.shape[0] != self.view_indices.size:
            raise GeometryError(f"{self.data.shape[0]} rows but {self.view_indices.size} view indices")
        if self.data.ndim != 2 or self.data.shape[1] != self.geometry.n_detectors:
            raise GeometryError(f"sinogram shape {self.data.shape} does not match {self.geometry.n_detectors} detectors")
        if np.any(np.diff(self.view_indices) <= 0):
            raise GeometryError("view indices must be strictly increasing")


# -- system operators -----------------------------------------------------
def _detector_coords(geom: ScanGeometry) -> np.ndarray:
    return (np.arange(geom.n_detectors) - (geom.n_detectors - 1) / 2) * geom.detector_pitch


@njit(cache=True)
def _ray_setup(beta, u, R, Dd, rc):
    cb, sb = math.cos(beta), math.sin(beta)
    sx, sy = R * cb, R * sb
    ex = -Dd * cb - u * sb - sx
    ey = -Dd * sb + u * cb - sy
    norm = math.sqrt(ex * ex + ey * ey)
    ex /= norm
    ey /= norm
    se = sx * ex + sy * ey
    disc = se * se - (R * R - rc * rc)
    return sx, sy, ex, ey, se, disc


@njit(cache=True)
def _ray_kernel(image, betas, u, R, Dd, dx, rc, n_samples, mu, sino, adjoint):
    """Ray-driven bilinear line integrals (``adjoint=False``) or their transpose.

    Each ray crossing the image's bounding circle is sampled at ``n_samples``
    midpoints, so the step never exceeds half a pixel.
    """
    N = image.shape[0]
    half = (N - 1) / 2.0
    for v in range(betas.shape[0]):
        for j in range(u.shape[0]):
            sx, sy, ex, ey, se, disc = _ray_setup(betas[v], u[j], R, Dd, rc)
            if disc <= 0.0:
                if not adjoint:
                    sino[v, j] = 0.0
                continue
            root = math.sqrt(disc)
            t0 = -se - root
            step = 2.0 * root / n_samples
            scale = step * mu
            acc = 0.0
            val = sino[v, j] * scale
            for k in range(n_samples):
                t = t0 + (k + 0.5) * step
                col = (sx + t * ex) / dx + half
                row = half - (sy + t * ey) / dx
                r0 = math.floor(row)
                c0 = math.floor(col)
                fr = row - r0
                fc = col - c0
                ir = int(r0)
                ic = int(c0)
                for dr in range(2):
                    rr = ir + dr
                    if rr < 0 or rr >= N:
                        continue
                    wr = fr if dr == 1 else 1.0 - fr
                    for dc in range(2):
                        cc = ic + dc
                        if cc < 0 or cc >= N:
                            continue
                        w = wr * (fc if dc == 1 else 1.0 - fc)
                        if adjoint:
                            image[rr, cc] += w * val
                        else:
                            acc += w * image[rr, cc]
            if not adjoint:
                sino[v, j] = acc * scale


@njit(cache=True)
def _pixel_kernel(image, rows, betas, weights, R, Dd, dx, pitch, mu, adjoint):
    """Pixel-driven, distance-weighted back-projection of filtered rows (or its transpose).

    Includes the R^2/L^2 weight and the 1/2 full-rotation factor.
    """
    N = image.shape[0]
    D = rows.shape[1]
    half = (N - 1) / 2.0
    dhalf = (D - 1) / 2.0
    for v in range(betas.shape[0]):
        cb, sb = math.cos(betas[v]), math.sin(betas[v])
        wv = 0.5 * weights[v] * R * R / mu
        for i in range(N):
            y = (half - i) * dx
            for j in range(N):
                x = (j - half) * dx
                L = R - (x * cb + y * sb)
                idx = (R + Dd) * (-x * sb + y * cb) / L / pitch + dhalf
                i0 = math.floor(idx)
                f = idx - i0
                k = int(i0)
                w = wv / (L * L)
                if adjoint:
                    g = image[i, j] * w
                    if 0 <= k < D:
                        rows[v, k] += (1.0 - f) * g
                    if 0 <= k + 1 < D:
                        rows[v, k + 1] += f * g
                else:
                    acc = 0.0
                    if 0 <= k < D:
                        acc += (1.0 - f) * rows[v, k]
                    if 0 <= k + 1 < D:
                        acc += f * rows[v, k + 1]
                    image[i, j] += w * acc


def _ray_args(geom: ScanGeometry, views: np.ndarray):
    rc = geom.half_diagonal + geom.pixel_spacing
    n_samples = int(math.ceil(2 * rc / (0.5 * geom.pixel_spacing)))
    return (
        np.deg2rad(geom.view_angles[views]),
        _detector_coords(geom),
        geom.dist_source_center,
        geom.dist_detector_center,
        geom.pixel_spacing,
        rc,
        n_samples,
        geom.mu_max,
    )


def _check_image(image: np.ndarray, geom: ScanGeometry) -> None:
    if image.shape != (geom.image_size, geom.image_size):
        raise GeometryError(f"image shape {image.shape} does not match geometry grid {geom.image_size}")


def _check_views(views, geom: ScanGeometry) -> np.ndarray:
    views = np.asarray(views, dtype=np.int64).reshape(-1)
    if views.size and (views.min() < 0 or views.max() >= geom.n_full_views):
        raise IndexError(f"view index out of range [0, {geom.n_full_views})")
    return views


def _project_array(image: np.ndarray, geom: ScanGeometry, views: np.ndarray) -> np.ndarray:
    out = np.zeros((views.size, geom.n_detectors))
    _ray_kernel(np.ascontiguousarray(image, dtype=np.float64), *_ray_args(geom, views), out, False)
    return out


def _backproject_array(rows: np.ndarray, geom: ScanGeometry, views: np.ndarray) -> np.ndarray:
    out = np.zeros((geom.image_size, geom.image_size))
    _ray_kernel(out, *_ray_args(geom, views), np.ascontiguousarray(rows, dtype=np.float64), True)
    return out


def forward_project(image: Image | np.ndarray, geom: ScanGeometry, view_indices=None) -> Sinogram:
    """Line integrals along every source-detector ray of the requested views."""
    data = image.data if isinstance(image, Image) else np.asarray(image)
    _check_image(data, geom)
    views = np.arange(geom.n_full_views) if view_indices is None else _check_views(view_indices, geom)
    return Sinogram(_project_array(data, geom, views), geom, views)


def back_project(sino: Sinogram, geom: ScanGeometry | None = None, angular_weight: bool = False) -> Image:
    """Exact transpose of :func:`forward_project`.

    With ``angular_weight`` every view is additionally multiplied by the
    full-grid angular increment.
    """
    geom = geom or sino.geometry
    if geom != sino.geometry:
        raise GeometryError("sinogram was acquired with a different geometry")
    rows = sino.data * geom.angular_step if angular_weight else sino.data
    return Image(_backproject_array(rows, geom, sino.view_indices), geom.pixel_spacing)


# -- filtered back-projection --------------------------------------------
@lru_cache(maxsize=16)
def _ramp_response(n_detectors: int, spacing: float) -> tuple[np.ndarray, int]:
    """Frequency response of the spatial Ram-Lak kernel on a zero-padded grid."""
    size = 1 << int(math.ceil(math.log2(2 * n_detectors)))
    n = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 1 / (4 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1 / (np.pi * n[odd] * spacing) ** 2
    return np.real(np.fft.fft(h)) * spacing, size


def view_weights(view_indices: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    """Angular weight of each measured view.

    A view represents ``min(gap to previous, gap to next)`` full-grid steps,
    so equidistant sparse views get their spacing and contiguous views keep
    the native increment.
    """
    idx = np.asarray(view_indices, dtype=np.int64)
    n = geom.n_full_views
    if idx.size == 1:
        return np.array([geom.angular_step * n])
    gaps = np.diff(idx).astype(float)
    if geom.angular_span >= 360:
        wrap = float(idx[0] + n - idx[-1])
        prev = np.concatenate([[wrap], gaps])
        nxt = np.concatenate([gaps, [wrap]])
    else:
        prev = np.concatenate([[gaps[0]], gaps])
        nxt = np.concatenate([gaps, [gaps[-1]]])
    return geom.angular_step * np.minimum(prev, nxt)


def _cosine_weight(geom: ScanGeometry) -> np.ndarray:
    R = geom.dist_source_center
    s = _detector_coords(geom) * (R / (R + geom.dist_detector_center))
    return R / np.sqrt(R**2 + s**2)


def _ramp(rows: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    """Ram-Lak filtering along detectors on the virtual isocentre detector.

    The padded kernel is even, so the filter is symmetric and is its own adjoint.
    """
    mag = geom.dist_source_center / (geom.dist_source_center + geom.dist_detector_center)
    response, size = _ramp_response(geom.n_detectors, geom.detector_pitch * mag)
    spec = np.fft.fft(rows, n=size, axis=-1) * response
    return np.real(np.fft.ifft(spec, axis=-1))[..., : geom.n_detectors]


def _filter_rows(rows: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    return _ramp(rows * _cosine_weight(geom), geom)


def _filter_rows_adjoint(rows: np.ndarray, geom: ScanGeometry) -> np.ndarray:
    return _ramp(rows, geom) * _cosine_weight(geom)


def _pixel_args(geom: ScanGeometry, views: np.ndarray, weights: np.ndarray):
    return (
        np.deg2rad(geom.view_angles[views]),
        np.asarray(weights, dtype=np.float64),
        geom.dist_source_center,
        geom.dist_detector_center,
        geom.pixel_spacing,
        geom.detector_pitch,
        geom.mu_max,
    )


def _weighted_backproject(filtered: np.ndarray, geom: ScanGeometry, views: np.ndarray, weights) -> np.ndarray:
    out = np.zeros((geom.image_size, geom.image_size))
    _pixel_kernel(out, np.ascontiguousarray(filtered, dtype=np.float64), *_pixel_args(geom, views, weights), False)
    return out


def _weighted_backproject_adjoint(image: np.ndarray, geom: ScanGeometry, views: np.ndarray, weights) -> np.ndarray:
    rows = np.zeros((views.size, geom.n_detectors))
    _pixel_kernel(np.ascontiguousarray(image, dtype=np.float64), rows, *_pixel_args(geom, views, weights), True)
    return rows


def fbp_array(rows: np.ndarray, geom: ScanGeometry, view_indices: np.ndarray) -> np.ndarray:
    views = _check_views(view_indices, geom)
    if rows.shape != (views.size, geom.n_detectors):
        raise GeometryError(f"sinogram rows {rows.shape} do not match {views.size} views x {geom.n_detectors} detectors")
    if views.size == 0:
        raise GeometryError("fbp needs at least one view")
    filtered = _filter_rows(np.asarray(rows, dtype=np.float64), geom)
    return _weighted_backproject(filtered, geom, views, view_weights(views, geom))


def fbp(sino: Sinogram, geom: ScanGeometry | None = None) -> Image:
    """Fan-beam filtered back-projection of the measured rows of ``sino``."""
    geom = geom or sino.geometry
    if geom != sino.geometry:
        raise GeometryError("sinogram was acquired with a different geometry")
    return Image(fbp_array(sino.data, geom, sino.view_indices), geom.pixel_spacing)


def fbp_tensor(sino: Tensor, geom: ScanGeometry, view_indices=None) -> Tensor:
    """Differentiable FBP of ``[N, 1, views, detectors]`` -> ``[N, 1, H, W]``."""
    views = np.arange(geom.n_full_views) if view_indices is None else _check_views(view_indices, geom)
    weights = view_weights(views, geom)
    data = sino.data
    out = np.stack([fbp_array(data[n, 0], geom, views) for n in range(data.shape[0])])[:, None]

    def bw(g):
        grads = []
        for n in range(g.shape[0]):
            back = _weighted_backproject_adjoint(g[n, 0], geom, views, weights)
            grads.append(_filter_rows_adjoint(back, geom))
        return (np.stack(grads)[:, None].astype(sino.dtype),)

    return make_op(out.astype(sino.dtype), (sino,), bw, "fbp")


# -- noise ---------------------------------------------------------------
@dataclass(frozen=True)
class NoiseModel:
    photon_intensity: float = 1e6
    gaussian_std: float = 0.01
    enabled: bool = True

    def __post_init__(self):
        if self.photon_intensity <= 0:
            raise ValueError("photon intensity must be positive")
        if self.gaussian_std < 0:
            raise ValueError("gaussian std must be non-negative")


def add_noise(sino: Sinogram, noise: NoiseModel, rng: RngState) -> Sinogram:
    """Poisson photon counting followed by additive Gaussian noise on line integrals."""
    if not noise.enabled:
        return sino
    gen = rng.generator()
    s = np.clip(sino.data, 0.0, None)
    counts = gen.poisson(noise.photon_intensity * np.exp(-s))
    noisy = -np.log(np.maximum(counts, 1) / noise.photon_intensity)
    noisy = noisy + gen.normal(0.0, noise.gaussian_std, size=noisy.shape)
    return Sinogram(noisy, sino.geometry, sino.view_indices.copy())


# -- phantoms ------------------------------------------------------------
# Modified Shepp-Logan (Toft): intensity, semi-axes a, b, centre x0, y0, angle in degrees.
_SHEPP_LOGAN = np.array(
    [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0],
    ]
)


def _render_ellipses(table: np.ndarray, size: int) -> np.ndarray:
    coords = (np.arange(size) - (size - 1) / 2) / (size / 2)
    x = coords[None, :]
    y = coords[::-1, None]
    img = np.zeros((size, size))
    for value, a, b, x0, y0, deg in table:
        th = math.radians(deg)
        xr = (x - x0) * math.cos(th) + (y - y0) * math.sin(th)
        yr = -(x - x0) * math.sin(th) + (y - y0) * math.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    return img


def shepp_logan(size: int) -> np.ndarray:
    return np.clip(_render_ellipses(_SHEPP_LOGAN, size), 0.0, 1.0)


def random_ellipses(size: int, rng: RngState) -> np.ndarray:
    """3-8 random ellipses fully inside the inscribed circle, clipped to [0, 1]."""
    gen = rng.generator()
    count = int(gen.integers(3, 9))
    rows = []
    for _ in range(count):
        a, b = gen.uniform(0.08, 0.45, size=2)
        reach = max(a, b)
        radius = gen.uniform(0.0, max(0.0, 0.9 - reach))
        phi = gen.uniform(0, 2 * np.pi)
        rows.append([gen.uniform(0.1, 0.6), a, b, radius * math.cos(phi), radius * math.sin(phi), gen.uniform(0, 180)])
    return np.clip(_render_ellipses(np.array(rows), size), 0.0, 1.0)


def make_phantom(kind: str, size: int, rng: RngState | None = None) -> Image:
    if size < 16:
        raise ValueError("phantom size must be at least 16")
    if kind == "shepp_logan":
        data = shepp_logan(size)
    elif kind == "random_ellipses":
        data = random_ellipses(size, rng or RngState())
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return Image(data)


def with_pixel_spacing(image: Image, geom: ScanGeometry) -> Image:
    return replace(image, pixel_spacing=geom.pixel_spacing)
