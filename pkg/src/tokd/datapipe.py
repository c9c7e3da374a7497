"""Scene records, source/target role assignment, dataset generation and the on-disk layout.

Dataset layout (one directory per scene)::

    <root>/scenes/<scene_id>/view_<k>.png   8-bit RGB, k = 0 .. n-1
    <root>/scenes/<scene_id>/cameras.txt    camera manifest, one block per view
    <root>/scenes/<scene_id>/meta.txt       key=value scene metadata

``cameras.txt`` grammar (blank lines and ``#`` comments ignored)::

    view <k>
    R <r00> <r01> <r02> <r10> <r11> <r12> <r20> <r21> <r22>
    t <t0> <t1> <t2>
    K <fx> <fy> <cx> <cy>
    size <width> <height>
    role clean|generated

Poses are world-to-camera. Floats are written with ``repr`` so they read back
exactly. ``meta.txt`` keys: ``scene_id``, ``split`` (train|test), ``synthetic``
(0|1), ``views``, ``conditioned`` (comma-separated view indices, may be
empty), ``artifacted`` (comma-separated 0/1 per view), ``artifact_severity``,
``artifact_components`` (comma-separated), ``artifact_seed``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Rng
from .errors import DataError, DatasetIOError, FormatError, ValidationError
from .geometry import Intrinsics, Pose, look_at, plucker_map, sample_spline_trajectory
from .scenegen import ArtifactProfile, inject_artifacts, random_scene, render

CLEAN = "clean"
GENERATED = "generated"
CAMERA_HEADER = "# tokd camera manifest v1"


@dataclass(eq=False)
class CameraView:
    intr: Intrinsics
    pose: Pose
    image: np.ndarray
    role: str = CLEAN
    artifacted: bool = False
    _rays: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in (CLEAN, GENERATED):
            raise ValidationError(f"unknown view role {self.role!r}")

    @property
    def rays(self) -> np.ndarray:
        if self._rays is None:
            self._rays = plucker_map(self.intr, self.pose)
        return self._rays


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    views: list
    conditioned: tuple = ()
    synthetic: bool = False
    split: str = "train"
    profile: ArtifactProfile | None = None

    def __post_init__(self):
        self.conditioned = tuple(int(i) for i in self.conditioned)
        if len(self.views) < 3:
            raise ValidationError(f"scene {self.scene_id} has {len(self.views)} views; at least 3 are required")
        if self.synthetic and not self.conditioned:
            raise ValidationError(f"synthetic scene {self.scene_id} has no conditioned view")
        for i in self.conditioned:
            if not 0 <= i < len(self.views):
                raise ValidationError(f"conditioned index {i} out of range in scene {self.scene_id}")

    @property
    def generated(self) -> list:
        return [i for i, v in enumerate(self.views) if v.role == GENERATED]


@dataclass
class TrainExample:
    scene_id: str
    sources: list
    target: CameraView
    source_index: tuple = ()
    target_index: int = -1

    def __post_init__(self):
        if any(s is self.target for s in self.sources):
            raise DataError("target view appears among the sources")


# ---------------------------------------------------------------- role assignment

def assign_roles_clean_target(rec: SceneRecord, k: int, rng: Rng) -> TrainExample:
    """Sources drawn from generated views only; the target is always a conditioned (clean) view."""
    gen = rec.generated
    if not rec.conditioned:
        raise DataError(f"scene {rec.scene_id} has no conditioned view to use as target")
    if len(gen) < k:
        raise DataError(f"scene {rec.scene_id} has {len(gen)} generated views, need {k}")
    picks = rng.choice(len(gen), k, replace=False)
    src = tuple(gen[i] for i in picks)
    tgt = rec.conditioned[int(rng.integers(0, len(rec.conditioned)))] if len(rec.conditioned) > 1 \
        else rec.conditioned[0]
    return TrainExample(rec.scene_id, [rec.views[i] for i in src], rec.views[tgt], src, tgt)


def assign_roles_naive(rec: SceneRecord, k: int, rng: Rng) -> TrainExample:
    """Sources and target drawn uniformly without replacement from all views."""
    n = len(rec.views)
    if k + 1 > n:
        raise DataError(f"scene {rec.scene_id} has {n} views, need {k + 1}")
    picks = rng.choice(n, k + 1, replace=False)
    src = tuple(int(i) for i in picks[:k])
    tgt = int(picks[k])
    return TrainExample(rec.scene_id, [rec.views[i] for i in src], rec.views[tgt], src, tgt)


SCHEMES = ("naive", "clean_target")


def assign_roles(rec: SceneRecord, k: int, rng: Rng, scheme: str) -> TrainExample:
    """Dispatch by scheme; real (non-synthetic) scenes always use uniform assignment."""
    if scheme not in SCHEMES:
        raise DataError(f"unknown role-assignment scheme {scheme!r}")
    if scheme == "clean_target" and rec.synthetic:
        return assign_roles_clean_target(rec, k, rng)
    return assign_roles_naive(rec, k, rng)


def eval_example(rec: SceneRecord, k: int) -> TrainExample:
    """Fixed held-out example: the middle view is the target, its nearest neighbours are sources."""
    n = len(rec.views)
    if k + 1 > n:
        raise DataError(f"scene {rec.scene_id} has {n} views, need {k + 1}")
    tgt = n // 2
    order = sorted((i for i in range(n) if i != tgt), key=lambda i: (abs(i - tgt), i))
    src = tuple(sorted(order[:k]))
    return TrainExample(rec.scene_id, [rec.views[i] for i in src], rec.views[tgt], src, tgt)


def assemble_batch(examples: list, dtype=np.float32) -> dict:
    """Stack examples into arrays for ``model.forward_batch``."""
    ks = {len(e.sources) for e in examples}
    if len(ks) != 1:
        raise DataError(f"examples in a batch disagree on source count: {sorted(ks)}")
    return {
        "src_images": np.stack([np.stack([v.image for v in e.sources]) for e in examples]).astype(dtype),
        "src_rays": np.stack([np.stack([v.rays for v in e.sources]) for e in examples]).astype(dtype),
        "tgt_rays": np.stack([e.target.rays for e in examples]).astype(dtype),
        "tgt_images": np.stack([e.target.image for e in examples]).astype(dtype),
        "scene_ids": [e.scene_id for e in examples],
    }


# ---------------------------------------------------------------- generation

def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so images survive a PNG round trip bitwise."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass(frozen=True)
class GenConfig:
    size: int = 64
    n_views: int = 8
    fov_deg: float = 50.0
    orbit_radius: float = 4.0
    orbit_height: float = -1.2
    spline_scale: float = 1.0
    severity: float = 0.5
    components: tuple = ("block", "blur", "chroma", "noise")


def _anchor_pose(rng: Rng, cfg: GenConfig) -> Pose:
    theta = rng.uniform(0.0, 2 * np.pi)
    center = np.array([cfg.orbit_radius * np.sin(theta), cfg.orbit_height, -cfg.orbit_radius * np.cos(theta)])
    return look_at(center, (0.0, 0.0, 0.0))


def make_scene(scene_id: str, rng: Rng, cfg: GenConfig, synthetic: bool = False, split: str = "train",
               n_conditioned: int = 1) -> SceneRecord:
    """Render one scene.

    Real scenes: ``n_views`` clean renders along a spline trajectory. Synthetic
    scenes: the first ``n_conditioned`` views are clean conditioning views;
    the remaining views are rendered and then artifact-injected.
    """
    spec = random_scene(rng.derive(1))
    intr = Intrinsics.from_fov(cfg.size, cfg.size, cfg.fov_deg)
    anchor = _anchor_pose(rng.derive(2), cfg)
    poses = sample_spline_trajectory(anchor, cfg.n_views, cfg.spline_scale, rng.derive(3))
    if synthetic:
        # the conditioning view sits at the anchor; generated views follow the spline around it
        poses = [anchor] + poses[: cfg.n_views - 1] if n_conditioned == 1 else poses
    profile = None
    if synthetic:
        profile = ArtifactProfile(cfg.severity, tuple(cfg.components), int(rng.derive(4).integers(0, 2 ** 31)))
    views = []
    for i, pose in enumerate(poses):
        img = quantize(render(spec, intr, pose))
        role, art = CLEAN, False
        if synthetic and i >= n_conditioned:
            role, art = GENERATED, profile.severity > 0
            view_profile = ArtifactProfile(profile.severity, profile.components, profile.seed + i)
            img = quantize(inject_artifacts(img, view_profile))
        views.append(CameraView(intr, pose, img, role, art))
    conditioned = tuple(range(n_conditioned)) if synthetic else ()
    return SceneRecord(scene_id, views, conditioned, synthetic, split, profile)


def generate_dataset(n_scenes: int, seed: int, cfg: GenConfig = GenConfig(), synthetic_frac: float = 0.0,
                     n_test: int = 0) -> list:
    """``n_scenes`` training scenes (a ``synthetic_frac`` share synthetic) plus ``n_test`` clean test scenes."""
    root = Rng(seed, 0x5CE7E)
    n_syn = int(round(n_scenes * synthetic_frac))
    records = []
    for i in range(n_scenes):
        synthetic = i >= n_scenes - n_syn
        records.append(make_scene(f"train_{i:04d}", root.derive(i), cfg, synthetic=synthetic))
    for i in range(n_test):
        records.append(make_scene(f"test_{i:04d}", root.derive(1_000_000 + i), cfg, split="test"))
    return records


# ---------------------------------------------------------------- disk format

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_scene(rec: SceneRecord, root) -> Path:
    d = Path(root) / "scenes" / rec.scene_id
    d.mkdir(parents=True, exist_ok=True)
    lines = [CAMERA_HEADER]
    for k, v in enumerate(rec.views):
        q = np.rint(np.clip(v.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(q).save(d / f"view_{k}.png", optimize=False)
        lines += [f"view {k}", f"R {_fmt(v.pose.R.reshape(-1))}", f"t {_fmt(v.pose.t)}",
                  f"K {_fmt([v.intr.fx, v.intr.fy, v.intr.cx, v.intr.cy])}",
                  f"size {v.intr.width} {v.intr.height}", f"role {v.role}", ""]
    (d / "cameras.txt").write_text("\n".join(lines))
    p = rec.profile
    meta = {
        "scene_id": rec.scene_id,
        "split": rec.split,
        "synthetic": int(rec.synthetic),
        "views": len(rec.views),
        "conditioned": ",".join(str(i) for i in rec.conditioned),
        "artifacted": ",".join(str(int(v.artifacted)) for v in rec.views),
        "artifact_severity": repr(float(p.severity)) if p else "0.0",
        "artifact_components": ",".join(p.components) if p else "",
        "artifact_seed": p.seed if p else 0,
    }
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return d


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path}: {exc.strerror or exc}") from exc


def parse_key_values(text: str, source: str = "<text>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_cameras(text: str, source: str = "cameras.txt") -> list:
    """Parse a camera manifest into a list of (Intrinsics, Pose, role)."""
    blocks, cur = [], None
    expected = {"R": 9, "t": 3, "K": 4, "size": 2, "role": 1}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key == "view":
            if len(vals) != 1 or not vals[0].isdigit() or int(vals[0]) != len(blocks):
                raise FormatError(f"{source}:{lineno}: views must be numbered 0, 1, ... in order")
            cur = {}
            blocks.append(cur)
            continue
        if cur is None:
            raise FormatError(f"{source}:{lineno}: entry before the first 'view' line")
        if key not in expected:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        if len(vals) != expected[key]:
            raise FormatError(f"{source}:{lineno}: {key} needs {expected[key]} values, got {len(vals)}")
        cur[key] = vals
    out = []
    for i, b in enumerate(blocks):
        missing = set(expected) - set(b)
        if missing:
            raise FormatError(f"{source}: view {i} is missing {sorted(missing)}")
        try:
            R = np.array([float(x) for x in b["R"]]).reshape(3, 3)
            t = np.array([float(x) for x in b["t"]])
            fx, fy, cx, cy = (float(x) for x in b["K"])
            w, h = (int(x) for x in b["size"])
        except ValueError as exc:
            raise FormatError(f"{source}: view {i}: {exc}") from exc
        try:
            pose = Pose(R, t)
        except ValidationError as exc:
            raise ValidationError(f"{source}: view {i}: {exc}") from exc
        out.append((Intrinsics(fx, fy, cx, cy, w, h), pose, b["role"][0]))
    return out


def load_scene(path) -> SceneRecord:
    d = Path(path)
    cams = parse_cameras(_read_text(d / "cameras.txt"), str(d / "cameras.txt"))
    meta = parse_key_values(_read_text(d / "meta.txt"), str(d / "meta.txt"))
    files = sorted(d.glob("view_*.png"))
    if len(files) != len(cams):
        raise FormatError(f"{d}: manifest lists {len(cams)} views but {len(files)} image files exist")
    if "views" in meta and int(meta["views"]) != len(cams):
        raise FormatError(f"{d / 'meta.txt'}: views={meta['views']} disagrees with {len(cams)} manifest entries")
    artifacted = [s == "1" for s in meta.get("artifacted", "").split(",") if s]
    if artifacted and len(artifacted) != len(cams):
        raise FormatError(f"{d / 'meta.txt'}: artifacted flags do not match the view count")
    views = []
    for k, (intr, pose, role) in enumerate(cams):
        f = d / f"view_{k}.png"
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as exc:
            raise DatasetIOError(f"cannot read image {f}: {exc}") from exc
        if arr.shape[:2] != (intr.height, intr.width):
            raise FormatError(f"{f}: image is {arr.shape[1]}x{arr.shape[0]}, manifest says {intr.width}x{intr.height}")
        views.append(CameraView(intr, pose, arr.astype(np.float64) / 255.0, role,
                                artifacted[k] if artifacted else False))
    conditioned = tuple(int(s) for s in meta.get("conditioned", "").split(",") if s)
    profile = None
    comps = tuple(c for c in meta.get("artifact_components", "").split(",") if c)
    if int(meta.get("synthetic", "0")):
        profile = ArtifactProfile(float(meta.get("artifact_severity", "0")), comps, int(meta.get("artifact_seed", "0")))
    return SceneRecord(meta.get("scene_id", d.name), views, conditioned, bool(int(meta.get("synthetic", "0"))),
                       meta.get("split", "train"), profile)


def save_dataset(records: list, root) -> Path:
    root = Path(root)
    for rec in records:
        save_scene(rec, root)
    return root


def load_dataset(root, split: str | None = None) -> list:
    base = Path(root) / "scenes"
    if not base.is_dir():
        raise DatasetIOError(f"no scenes directory under {root}")
    records = [load_scene(p) for p in sorted(base.iterdir()) if p.is_dir()]
    if split is not None:
        records = [r for r in records if r.split == split]
    return records
