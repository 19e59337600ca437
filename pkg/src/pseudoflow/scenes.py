"""Scene pairs: synthetic generation, label sampling and file formats.

Binary scene layout (little endian)::

    b"SSFL" | u16 version=1 | u8 flags | u32 n
    P  : n*3 f64
    Q  : n*3 f64
    F  : n*3 f64            (flags bit 0)
    m  : u32, idx : m*u32   (flags bit 1)
"""

from __future__ import annotations

import csv
import errno
import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .flowinit import LabelSet
from .geometry import as_points

SCENE_MAGIC = b"SSFL"
SCENE_VERSION = 1
HAS_FLOW = 1
HAS_LABELS = 2
CSV_COLUMNS = ["px", "py", "pz", "qx", "qy", "qz", "fx", "fy", "fz", "labeled"]


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named purpose ("data", "labels", "init", ...).

    Streams are keyed by name, so adding a consumer never shifts another.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key, *extra)))


@dataclass
class ScenePair:
    P: np.ndarray
    Q: np.ndarray
    flow: np.ndarray | None = None
    labels: LabelSet | None = None
    scene_id: str = ""

    def __post_init__(self):
        self.P = as_points(self.P, "P")
        self.Q = as_points(self.Q, "Q")
        if self.flow is not None:
            self.flow = np.ascontiguousarray(self.flow, dtype=np.float64)
            if self.flow.shape != self.P.shape:
                raise ContractError(f"flow shape {self.flow.shape} does not match P {self.P.shape}")
        if self.labels is not None:
            if self.flow is None:
                raise ContractError("a labeled scene needs a flow field")
            self.labels.validate(self.n)

    @property
    def n(self) -> int:
        return len(self.P)

    def with_labels(self, labels: LabelSet | None) -> "ScenePair":
        return ScenePair(self.P, self.Q, self.flow, labels, self.scene_id)

    def with_flow(self, flow) -> "ScenePair":
        return ScenePair(self.P, self.Q, flow, self.labels, self.scene_id)


# ---------------------------------------------------------------------------
# synthetic scenes


def rotation_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def _unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_box(rng, m, half):
    # faces chosen proportionally to area
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=m, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(m, 3)) * half
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(m), axis] = sign * half[axis]
    return pts


def _sample_shape(rng, kind, m):
    if kind == "sphere":
        return _unit(rng, m) * rng.uniform(0.3, 0.6)
    if kind == "plane":
        half = rng.uniform(0.3, 0.7, size=2)
        uv = rng.uniform(-1, 1, size=(m, 2)) * half
        return np.column_stack([uv, np.zeros(m)])
    return _sample_box(rng, m, rng.uniform(0.2, 0.5, size=3))


def generate_synthetic_scene(
    n_shapes: int = 4,
    n_points: int = 1024,
    noise: float = 0.0,
    seed: int = 0,
    max_rotation_deg: float = 15.0,
    max_translation: float = 1.0,
    translation=None,
    scene_id: str = "",
    spread: float = 1.5,
) -> ScenePair:
    """Rigid boxes, spheres and planes, each moved by its own rigid motion.

    ``n_points`` are split as evenly as possible across shapes.  Every shape
    rotates about its centroid by at most ``max_rotation_deg`` and translates
    by at most ``max_translation``.  A fixed ``translation`` vector overrides
    the random motions with one global translation.  ``noise`` adds Gaussian
    jitter to Q only; the flow stays exact.
    """
    if n_shapes < 1 or n_points < 1:
        raise ContractError("need at least one shape and one point")
    rng = stream(seed, "data")
    sizes = np.full(n_shapes, n_points // n_shapes)
    sizes[: n_points % n_shapes] += 1
    P_parts, F_parts = [], []
    for m in sizes:
        kind = ("box", "sphere", "plane")[rng.integers(3)]
        local = _sample_shape(rng, kind, int(m))
        orient = rotation_matrix(_unit(rng), rng.uniform(0, 2 * np.pi))
        center = rng.uniform(-spread, spread, size=3)
        pts = local @ orient.T + center
        angle = math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
        R = rotation_matrix(_unit(rng), angle)
        t = _unit(rng) * rng.uniform(0, max_translation)
        if translation is not None:
            motion = np.tile(np.asarray(translation, dtype=np.float64), (len(pts), 1))
        else:
            motion = (pts - center) @ R.T + center + t - pts
        P_parts.append(pts)
        F_parts.append(motion)
    P = np.concatenate(P_parts)
    flow = np.concatenate(F_parts)
    # Q is defined as P + flow so the identity holds to the last bit
    Qc = P + flow
    Q = Qc + rng.normal(scale=noise, size=Qc.shape) if noise > 0 else Qc
    return ScenePair(P, Q, flow, None, scene_id)


def generate_dataset(count: int, seed: int = 0, **kwargs) -> list[ScenePair]:
    """``count`` scenes; scene ``i`` uses its own data stream derived from ``seed``."""
    return [
        generate_synthetic_scene(seed=_child_seed(seed, i), scene_id=f"scene_{i:04d}", **kwargs)
        for i in range(count)
    ]


def _child_seed(seed: int, i: int) -> int:
    return int(stream(seed, "scene", i).integers(2**63))


# ---------------------------------------------------------------------------
# labels


def parse_ratio(value) -> Fraction:
    """``"1/16"``, ``0.0625`` or a Fraction."""
    if isinstance(value, Fraction):
        return value
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ContractError(f"bad label ratio {value!r}") from exc


def label_count(n: int, ratio) -> int:
    return math.floor(parse_ratio(ratio) * n)


def sample_labels(scene: ScenePair, ratio, seed: int = 0) -> LabelSet:
    """Uniformly sample ``floor(ratio * n)`` labeled points without replacement."""
    if scene.flow is None:
        raise ContractError("cannot sample labels from a scene without ground-truth flow")
    m = label_count(scene.n, ratio)
    if m < 1:
        raise ContractError(f"ratio {ratio} of {scene.n} points yields no labels")
    if m >= scene.n:
        raise ContractError(f"ratio {ratio} would label every point; need strictly fewer")
    idx = np.sort(stream(seed, "labels").choice(scene.n, size=m, replace=False))
    return LabelSet.from_flow(scene.flow, idx)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Normalization:
    """``x' = (x - center) * scale``; flows scale by ``scale`` only."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def flow_to_original(self, flow):
        return np.asarray(flow) / self.scale


def normalize_scene(scene: ScenePair, extent: float = 4.0) -> tuple[ScenePair, Normalization]:
    """Center the scene and scale it to fit a cube of side ``extent``."""
    both = np.concatenate([scene.P, scene.Q])
    lo, hi = both.min(axis=0), both.max(axis=0)
    center = (lo + hi) / 2
    size = float((hi - lo).max())
    scale = extent / size if size > 0 else 1.0
    labels = None
    if scene.labels is not None:
        labels = LabelSet(scene.labels.indices, scene.labels.flows * scale)
    flow = None if scene.flow is None else scene.flow * scale
    out = ScenePair((scene.P - center) * scale, (scene.Q - center) * scale, flow, labels, scene.scene_id)
    return out, Normalization(center, scale)


# ---------------------------------------------------------------------------
# binary format


def scene_to_bytes(scene: ScenePair) -> bytes:
    if len(scene.Q) != scene.n:
        raise FormatError("binary scene format needs P and Q of equal size")
    flags = (HAS_FLOW if scene.flow is not None else 0) | (HAS_LABELS if scene.labels is not None else 0)
    buf = io.BytesIO()
    buf.write(SCENE_MAGIC)
    buf.write(struct.pack("<HBI", SCENE_VERSION, flags, scene.n))
    buf.write(scene.P.astype("<f8").tobytes())
    buf.write(scene.Q.astype("<f8").tobytes())
    if scene.flow is not None:
        buf.write(scene.flow.astype("<f8").tobytes())
    if scene.labels is not None:
        buf.write(struct.pack("<I", len(scene.labels)))
        buf.write(scene.labels.indices.astype("<u4").tobytes())
    return buf.getvalue()


def scene_from_bytes(data: bytes, scene_id: str = "") -> ScenePair:
    if data[:4] != SCENE_MAGIC:
        raise FormatError("not a scene file (bad magic)")
    try:
        version, flags, n = struct.unpack_from("<HBI", data, 4)
        if version != SCENE_VERSION:
            raise FormatError(f"unsupported scene version {version}")
        pos = 4 + struct.calcsize("<HBI")

        def block(count, dtype, pos):
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            return arr, pos + arr.nbytes

        P, pos = block(3 * n, "<f8", pos)
        Q, pos = block(3 * n, "<f8", pos)
        flow = labels = None
        if flags & HAS_FLOW:
            flow, pos = block(3 * n, "<f8", pos)
            flow = flow.reshape(n, 3).astype(np.float64)
        if flags & HAS_LABELS:
            (m,) = struct.unpack_from("<I", data, pos)
            idx, pos = block(m, "<u4", pos + 4)
            if flow is None:
                raise FormatError("labels present without a flow field")
            labels = LabelSet.from_flow(flow, idx.astype(np.int64))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated scene file ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after scene payload")
    return ScenePair(P.reshape(n, 3).astype(np.float64), Q.reshape(n, 3).astype(np.float64),
                     flow, labels, scene_id)


def write_scene(scene: ScenePair, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def read_scene(path) -> ScenePair:
    path = Path(path)
    return scene_from_bytes(path.read_bytes(), scene_id=path.stem)


def scene_files(directory) -> list[Path]:
    return sorted(Path(directory).glob("*.ssfl"))


def read_dataset(directory) -> list[ScenePair]:
    if not Path(directory).is_dir():
        raise FileNotFoundError(errno.ENOENT, "no such scene directory", str(directory))
    files = scene_files(directory)
    if not files:
        raise FormatError(f"no .ssfl scene files in {directory}")
    return [read_scene(f) for f in files]


# ---------------------------------------------------------------------------
# CSV


def scene_to_csv(scene: ScenePair) -> str:
    if len(scene.Q) != scene.n:
        raise FormatError("CSV scenes need P and Q of equal size")
    labeled = np.zeros(scene.n, dtype=int)
    if scene.labels is not None:
        labeled[scene.labels.indices] = 1
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i in range(scene.n):
        f = [repr(float(v)) for v in scene.flow[i]] if scene.flow is not None else ["", "", ""]
        w.writerow([repr(float(v)) for v in scene.P[i]] + [repr(float(v)) for v in scene.Q[i]] + f + [labeled[i]])
    return out.getvalue()


def scene_from_csv(text: str, scene_id: str = "") -> ScenePair:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise FormatError("CSV scene has no rows")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise FormatError(f"CSV scene is missing columns {sorted(missing)}")
    try:
        P = np.array([[float(r[c]) for c in ("px", "py", "pz")] for r in rows])
        Q = np.array([[float(r[c]) for c in ("qx", "qy", "qz")] for r in rows])
        has_flow = all(r["fx"] != "" for r in rows)
        flow = np.array([[float(r[c]) for c in ("fx", "fy", "fz")] for r in rows]) if has_flow else None
        labeled = np.array([int(r["labeled"] or 0) for r in rows])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad CSV value ({exc}); P and Q rows must be complete") from exc
    labels = None
    if labeled.any():
        if flow is None:
            raise FormatError("labeled rows need flow values")
        labels = LabelSet.from_flow(flow, np.nonzero(labeled)[0])
    return ScenePair(P, Q, flow, labels, scene_id)
