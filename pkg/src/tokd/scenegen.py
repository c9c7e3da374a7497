"""Procedural Lambertian scenes (spheres over a ground plane) and a synthetic-artifact injector.

The injector stands in for a multi-view diffusion generator: it degrades clean
renders with the kinds of defects such generators leave behind (blocky
decoding, local blur, colour shifts, high-frequency noise).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import Rng
from .errors import ValidationError
from .geometry import Intrinsics, Pose, camera_rays

AMBIENT = 0.1
ARTIFACT_COMPONENTS = ("block", "blur", "chroma", "noise")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"sphere radius must be positive, got {self.radius}")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValidationError(f"albedo {self.albedo} outside [0, 1]")


@dataclass(frozen=True)
class GroundPlane:
    height: float  # plane y = height; +y points down
    albedo: tuple
    checker: float = 0.0  # checkerboard period in world units; 0 disables

    def __post_init__(self):
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValidationError(f"albedo {self.albedo} outside [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    background: tuple = (0.55, 0.7, 0.9)
    spheres: tuple = ()
    ground: GroundPlane | None = None
    light: tuple = (0.0, -1.0, 0.0)  # unit vector pointing towards the light

    def __post_init__(self):
        n = float(np.linalg.norm(self.light))
        if abs(n - 1.0) > 1e-6:
            raise ValidationError(f"light direction must be unit norm, got |l|={n:.6f}")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValidationError("background colour outside [0, 1]")


def _shade(normal: np.ndarray, albedo: np.ndarray, light: np.ndarray) -> np.ndarray:
    lam = np.maximum(0.0, normal @ light)[..., None]
    return albedo * lam + AMBIENT * albedo


def render(scene: SceneSpec, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """One primary ray per pixel, nearest hit, Lambertian plus ambient shading."""
    origin, dirs = camera_rays(intr, pose)
    H, W = intr.height, intr.width
    light = np.asarray(scene.light, dtype=np.float64)
    img = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (H, W, 3)).copy()
    depth = np.full((H, W), np.inf)

    for sph in scene.spheres:
        c = np.asarray(sph.center, dtype=np.float64)
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - sph.radius ** 2)
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit &= (t > 1e-9) & (t < depth)
        if not hit.any():
            continue
        pts = origin + dirs[hit] * t[hit, None]
        normal = (pts - c) / sph.radius
        img[hit] = _shade(normal, np.asarray(sph.albedo, dtype=np.float64), light)
        depth[hit] = t[hit]

    if scene.ground is not None:
        g = scene.ground
        dy = dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (g.height - origin[1]) / dy
        hit = (np.abs(dy) > 1e-12) & (t > 1e-9) & (t < depth)
        if hit.any():
            pts = origin + dirs[hit] * t[hit, None]
            albedo = np.broadcast_to(np.asarray(g.albedo, dtype=np.float64), pts.shape).copy()
            if g.checker > 0:
                parity = (np.floor(pts[:, 0] / g.checker) + np.floor(pts[:, 2] / g.checker)) % 2
                albedo[parity == 1] *= 0.6
            normal = np.broadcast_to([0.0, -1.0, 0.0], pts.shape)
            img[hit] = _shade(normal, albedo, light)
            depth[hit] = t[hit]
    return np.clip(img, 0.0, 1.0)


def random_scene(rng: Rng, n_spheres: tuple = (2, 4), extent: float = 1.2) -> SceneSpec:
    """A few coloured spheres resting on a checkered ground plane around the origin."""
    count = int(rng.integers(n_spheres[0], n_spheres[1] + 1))
    ground_y = 0.6
    spheres = []
    for _ in range(count):
        r = float(rng.uniform(0.25, 0.55))
        x, z = rng.uniform(-extent, extent, 2)
        albedo = tuple(float(a) for a in rng.uniform(0.15, 0.95, 3))
        spheres.append(Sphere((float(x), ground_y - r, float(z)), r, albedo))
    light = np.array([rng.uniform(-0.6, 0.6), -1.0, rng.uniform(-0.8, 0.2)])
    light /= np.linalg.norm(light)
    bg = tuple(float(v) for v in rng.uniform(0.35, 0.9, 3))
    ground = GroundPlane(ground_y, tuple(float(a) for a in rng.uniform(0.3, 0.8, 3)), checker=0.5)
    return SceneSpec(background=bg, spheres=tuple(spheres), ground=ground, light=tuple(float(v) for v in light))


# ---------------------------------------------------------------- artifacts

@dataclass(frozen=True)
class ArtifactProfile:
    severity: float = 0.0
    components: tuple = field(default=ARTIFACT_COMPONENTS)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.severity <= 1.0:
            raise ValidationError(f"severity must lie in [0, 1], got {self.severity}")
        unknown = set(self.components) - set(ARTIFACT_COMPONENTS)
        if unknown:
            raise ValidationError(f"unknown artifact components {sorted(unknown)}")
        object.__setattr__(self, "components", tuple(c for c in ARTIFACT_COMPONENTS if c in self.components))


def _block_compress(img: np.ndarray, s: float, block: int = 4) -> np.ndarray:
    H, W, C = img.shape
    hb, wb = H // block * block, W // block * block
    out = img.copy()
    tiles = img[:hb, :wb].reshape(hb // block, block, wb // block, block, C)
    means = tiles.mean(axis=(1, 3), keepdims=True)
    # quantize block means the way a coarse codec drops low-order bits
    levels = 32.0
    means = np.round(means * levels) / levels
    mixed = (1.0 - s) * tiles + s * means
    out[:hb, :wb] = mixed.reshape(hb, wb, C)
    return out


def _blur_patches(img: np.ndarray, s: float, rng: Rng) -> np.ndarray:
    H, W, _ = img.shape
    out = img.copy()
    sigma = 3.0 * s
    blurred = np.stack([ndimage.gaussian_filter(img[..., c], sigma, mode="nearest") for c in range(3)], axis=-1)
    n_patches = 3
    ph, pw = max(2, H // 2), max(2, W // 2)
    for _ in range(n_patches):
        y = int(rng.integers(0, H - ph + 1))
        x = int(rng.integers(0, W - pw + 1))
        out[y:y + ph, x:x + pw] = blurred[y:y + ph, x:x + pw]
    return out


def _chroma_shift(img: np.ndarray, s: float, rng: Rng) -> np.ndarray:
    # colour cast in the chroma plane plus misregistration of the red/blue channels
    angle = rng.uniform(0.0, 2 * np.pi)
    cast = 0.25 * s * np.array([np.cos(angle), -0.5 * np.cos(angle) - 0.5 * np.sin(angle), np.sin(angle)])
    shift = 3.0 * s
    out = img + cast
    out[..., 0] = ndimage.shift(out[..., 0], (0.0, shift), order=1, mode="nearest")
    out[..., 2] = ndimage.shift(out[..., 2], (0.0, -shift), order=1, mode="nearest")
    return out


def _hf_noise(img: np.ndarray, s: float, rng: Rng) -> np.ndarray:
    return img + 0.2 * s * rng.normal(img.shape)


def inject_artifacts(img: np.ndarray, profile: ArtifactProfile) -> np.ndarray:
    """Degrade ``img`` with the profile's components scaled by severity; output in [0, 1]."""
    if profile.severity == 0.0 or not profile.components:
        return np.array(img, copy=True)
    dtype = np.asarray(img).dtype
    img = np.asarray(img, dtype=np.float64)
    s = profile.severity
    rng = Rng(profile.seed, 0xA27F)
    out = img
    for i, comp in enumerate(profile.components):
        sub = rng.derive(i)
        if comp == "block":
            out = _block_compress(out, s)
        elif comp == "blur":
            out = _blur_patches(out, s, sub)
        elif comp == "chroma":
            out = _chroma_shift(out, s, sub)
        elif comp == "noise":
            out = _hf_noise(out, s, sub)
    return np.clip(out, 0.0, 1.0).astype(dtype, copy=False)
