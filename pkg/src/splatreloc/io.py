"""Binary and text persistence: map container, Netpbm images, feature maps,
scene JSON.

Byte layouts are documented in docs/formats.md. Every loader validates the
domain invariants of what it builds; nothing invalid leaves this module.
Readers may run concurrently; a writer needs exclusive use of its path.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .core import CameraIntrinsics, GeometryError, Pose
from .featurizer import FeatureDecoder, FeatureError, FeatureMap
from .splat import DatabaseEntry, SceneInvariantError, SceneMap

MAP_MAGIC = b"SPLM"
MAP_VERSION = 1
FMAP_MAGIC = b"FMAP1"
NO_PATH = 0xFFFF
QUAT_FILE_TOL = 1e-6


class MapFormatError(ValueError):
    """Structurally malformed map container."""


class TruncatedFileError(MapFormatError):
    """The file ended before a declared block was complete."""


class BadMagicError(MapFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(MapFormatError):
    """The container version is not one this reader understands."""


class MapInvariantError(MapFormatError):
    """A decoded value violates a domain-type invariant."""


class ImageFormatError(ValueError):
    """Malformed or truncated Netpbm image."""


class FeatureMapFormatError(ValueError):
    """Malformed feature-map file or unexpected dimensions."""


# --- map container ------------------------------------------------------------


PRIM_FIELDS = ("centers", "rotations", "scales", "opacities", "colors", "features")


def _prim_dtype(c_low: int, width: int = 4) -> np.dtype:
    f = f"<f{width}"
    return np.dtype([("x", f, 3), ("q", f, 4), ("s", f, 3), ("alpha", f), ("c", f, 3), ("f", f, c_low)])


def _float_width(scene: SceneMap) -> int:
    """4 when every primitive value survives a float32 round trip, else 8."""
    for name in PRIM_FIELDS:
        a = getattr(scene, name)
        with np.errstate(over="ignore"):
            if not np.array_equal(a.astype(np.float32).astype(np.float64), a):
                return 8
    return 4


def _pack_str(s: str | None) -> bytes:
    if s is None:
        return struct.pack("<H", NO_PATH)
    b = s.encode("utf-8")
    if len(b) >= NO_PATH:
        raise MapFormatError("string too long for the container")
    return struct.pack("<H", len(b)) + b


def map_to_bytes(scene: SceneMap) -> bytes:
    n = len(scene)
    c_low, c_high = scene.feature_dims
    d = scene.database[0].descriptor.shape[0] if scene.database else 0
    width = _float_width(scene)
    out = [MAP_MAGIC, struct.pack("<2H5I", MAP_VERSION, width, n, len(scene.database), c_low, c_high, d)]
    rec = np.zeros(n, dtype=_prim_dtype(c_low, width))
    rec["x"] = scene.centers
    rec["q"] = scene.rotations
    rec["s"] = scene.scales
    rec["alpha"] = scene.opacities
    rec["c"] = scene.colors
    rec["f"] = scene.features
    out.append(rec.tobytes())
    out.append(scene.decoder.weights.astype("<f4").tobytes())
    out.append(scene.decoder.bias.astype("<f4").tobytes())
    for e in scene.database:
        K = e.intrinsics
        out.append(_pack_str(e.id))
        out.append(np.concatenate([e.pose.rotation, e.pose.translation]).astype("<f8").tobytes())
        out.append(np.array([K.fx, K.fy, K.cx, K.cy], dtype="<f8").tobytes())
        out.append(struct.pack("<2I", K.width, K.height))
        out.append(e.descriptor.astype("<f4").tobytes())
        out.append(_pack_str(e.image_path))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count).copy()

    def string(self, what: str) -> str | None:
        (n,) = self.unpack("<H", what)
        if n == NO_PATH:
            return None
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MapFormatError(f"{what} is not valid UTF-8") from exc


def map_from_bytes(buf: bytes) -> SceneMap:
    r = _Reader(buf)
    if len(buf) < len(MAP_MAGIC) or buf[: len(MAP_MAGIC)] != MAP_MAGIC:
        raise BadMagicError("not a map container (bad magic)")
    r.take(len(MAP_MAGIC), "magic")
    (version,) = r.unpack("<H", "version")
    if version != MAP_VERSION:
        raise VersionMismatchError(f"container version {version}, expected {MAP_VERSION}")
    width, n, n_db, c_low, c_high, d = r.unpack("<H5I", "header")
    if width not in (4, 8):
        raise MapFormatError(f"primitive float width {width} is neither 4 nor 8")
    if c_low == 0 or c_high == 0:
        raise MapInvariantError("feature dimensions must be positive")
    rec = r.array(_prim_dtype(c_low, width), n, "primitive block")
    weights = r.array("<f4", c_high * c_low * 9, "decoder weights").reshape(c_high, c_low, 3, 3)
    bias = r.array("<f4", c_high, "decoder bias")
    entries = []
    try:
        decoder = FeatureDecoder(weights, bias)
        for k in range(n_db):
            eid = r.string(f"database entry {k} id")
            if eid is None:
                raise MapInvariantError(f"database entry {k} has no id")
            pv = r.array("<f8", 7, f"database entry {k} pose")
            q = pv[:4]
            if abs(float(np.linalg.norm(q)) - 1.0) > QUAT_FILE_TOL:
                raise MapInvariantError(f"database entry {eid!r} pose quaternion is not unit norm")
            kv = r.array("<f8", 4, f"database entry {k} intrinsics")
            w, h = r.unpack("<2I", f"database entry {k} image size")
            desc = r.array("<f4", d, f"database entry {k} descriptor")
            path = r.string(f"database entry {k} image path")
            K = CameraIntrinsics(float(kv[0]), float(kv[1]), float(kv[2]), float(kv[3]), w, h)
            entries.append(DatabaseEntry(eid, Pose(q, pv[4:]), K, desc, path))
        if r.pos != len(buf):
            raise MapFormatError(f"{len(buf) - r.pos} trailing bytes after the database block")
        if n == 0:
            return SceneMap.empty(decoder, entries)
        return SceneMap(rec["x"], rec["q"], rec["s"], rec["alpha"], rec["c"], rec["f"], decoder, entries)
    except (SceneInvariantError, GeometryError, FeatureError) as exc:
        raise MapInvariantError(str(exc)) from exc


def save_map(scene: SceneMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(scene))


def load_map(path) -> SceneMap:
    with open(path, "rb") as fh:
        return map_from_bytes(fh.read())


# --- Netpbm images -------------------------------------------------------------


def _parse_netpbm(buf: bytes) -> tuple[bytes, int, int, int, int]:
    """(magic, width, height, maxval, raster offset)."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError("not a binary PGM/PPM (expected P5 or P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1] in (b" ", b"\t", b"\n", b"\r", b"\x0b", b"\x0c", b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                if end < 0:
                    raise ImageFormatError("header ends inside a comment")
                pos = end
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header field")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ImageFormatError("missing whitespace after maxval")
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid header values {w}x{h} maxval {maxval}")
    return buf[:2], w, h, maxval, pos + 1


def read_netpbm(path) -> tuple[np.ndarray, int]:
    """Raw integer samples (H x W or H x W x 3) and maxval."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, w, h, maxval, off = _parse_netpbm(buf)
    ch = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * ch * dt.itemsize
    if len(buf) - off < need:
        raise ImageFormatError(f"truncated raster: {len(buf) - off} of {need} bytes")
    if len(buf) - off > need:
        raise ImageFormatError("trailing bytes after raster")
    a = np.frombuffer(buf, dtype=dt, count=w * h * ch, offset=off).astype(np.uint16 if maxval > 255 else np.uint8)
    a = a.reshape(h, w, ch) if ch == 3 else a.reshape(h, w)
    if np.any(a > maxval):
        raise ImageFormatError("sample exceeds maxval")
    return a, maxval


def write_netpbm(path, samples: np.ndarray, maxval: int = 255) -> None:
    a = np.asarray(samples)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot write array of shape {a.shape}")
    if not 0 < maxval < 65536:
        raise ImageFormatError("maxval must lie in [1, 65535]")
    if a.size and (a.min() < 0 or a.max() > maxval):
        raise ImageFormatError("samples outside [0, maxval]")
    dt = ">u2" if maxval > 255 else "u1"
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a.astype(dt)).tobytes())


def read_image(path) -> np.ndarray:
    """Float image in [0, 1]: H x W x 3 for PPM, H x W for PGM."""
    a, maxval = read_netpbm(path)
    return a.astype(np.float64) / maxval


def write_image(path, image: np.ndarray) -> None:
    """8-bit PPM (H x W x 3) or PGM (H x W) from values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    write_netpbm(path, np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), 255)


def write_depth_pgm16(path, depth: np.ndarray, scale: float = 1000.0) -> None:
    """16-bit PGM of round(depth * scale), saturating at 65535 (default: millimeters)."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or not np.all(np.isfinite(d)):
        raise ImageFormatError("depth must be a finite H x W array")
    write_netpbm(path, np.clip(np.rint(d * scale), 0, 65535).astype(np.uint16), 65535)


def read_depth_pgm16(path, scale: float = 1000.0) -> np.ndarray:
    a, _ = read_netpbm(path)
    if a.ndim != 2:
        raise ImageFormatError("depth file must be a PGM")
    return a.astype(np.float64) / scale


# --- feature maps --------------------------------------------------------------


def save_feature_map(fmap: FeatureMap, path) -> None:
    """FMAP1: magic, (C, H, W, stride) as little-endian int32, then float32 C x H x W."""
    d = np.asarray(fmap.data)
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC + struct.pack("<4i", *d.shape, fmap.stride))
        fh.write(np.ascontiguousarray(d.astype("<f4")).tobytes())


def load_feature_map(path, stride: int | None = None, dim: int | None = None) -> FeatureMap:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(FMAP_MAGIC)] != FMAP_MAGIC:
        raise FeatureMapFormatError("not a feature map (bad magic)")
    off = len(FMAP_MAGIC)
    if len(buf) < off + 16:
        raise FeatureMapFormatError("truncated feature-map header")
    C, H, W, s = struct.unpack_from("<4i", buf, off)
    if min(C, H, W, s) <= 0:
        raise FeatureMapFormatError(f"invalid header dims {(C, H, W, s)}")
    if stride is not None and s != stride:
        raise FeatureMapFormatError(f"stride {s} does not match expected {stride}")
    if dim is not None and C != dim:
        raise FeatureMapFormatError(f"dim {C} does not match expected {dim}")
    n = C * H * W
    if len(buf) - off - 16 != 4 * n:
        raise FeatureMapFormatError(f"payload is {len(buf) - off - 16} bytes, header implies {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off + 16).reshape(C, H, W).astype(np.float32)
    try:
        return FeatureMap(data, s)
    except FeatureError as exc:
        raise FeatureMapFormatError(str(exc)) from exc


# --- scene JSON ----------------------------------------------------------------


def scene_to_json(scene: SceneMap) -> str:
    gs = [
        {
            "x": scene.centers[i].tolist(), "q": scene.rotations[i].tolist(), "s": scene.scales[i].tolist(),
            "alpha": float(scene.opacities[i]), "c": scene.colors[i].tolist(), "f": scene.features[i].tolist(),
        }
        for i in range(len(scene))
    ]
    db = [
        {
            "id": e.id,
            "pose": e.pose.rotation.tolist() + e.pose.translation.tolist(),
            "intrinsics": [e.intrinsics.fx, e.intrinsics.fy, e.intrinsics.cx, e.intrinsics.cy,
                           e.intrinsics.width, e.intrinsics.height],
            "descriptor": e.descriptor.tolist(),
            "image_path": e.image_path,
        }
        for e in scene.database
    ]
    dec = {"weights": scene.decoder.weights.tolist(), "bias": scene.decoder.bias.tolist()}
    return json.dumps({"gaussians": gs, "decoder": dec, "database": db})


def scene_from_json(text: str) -> SceneMap:
    try:
        doc = json.loads(text)
        decoder = FeatureDecoder(np.array(doc["decoder"]["weights"]), np.array(doc["decoder"]["bias"]))
        db = []
        for e in doc.get("database", []):
            p = np.asarray(e["pose"], dtype=np.float64)
            fx, fy, cx, cy, w, h = e["intrinsics"]
            db.append(DatabaseEntry(e["id"], Pose(p[:4], p[4:]), CameraIntrinsics(fx, fy, cx, cy, w, h),
                                    np.asarray(e["descriptor"]), e.get("image_path")))
        gs = doc["gaussians"]
        if not gs:
            return SceneMap.empty(decoder, db)
        col = lambda k: np.array([g[k] for g in gs], dtype=np.float64)  # noqa: E731
        return SceneMap(col("x"), col("q"), col("s"), col("alpha"), col("c"), col("f"), decoder, db)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (SceneInvariantError, GeometryError, FeatureError)):
            raise MapInvariantError(str(exc)) from exc
        raise MapFormatError(f"malformed scene JSON: {exc}") from exc


def load_scene(path) -> SceneMap:
    """Container or JSON by extension (.json) or magic."""
    if os.fspath(path).endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return scene_from_json(fh.read())
    return load_map(path)
