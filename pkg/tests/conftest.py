from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from splatreloc.core import CameraIntrinsics, Pose, so3_exp
from splatreloc.featurizer import FeatureDecoder
from splatreloc.splat import SceneMap


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return Pose.from_rt(so3_exp(rng.standard_normal(3)), rng.standard_normal(3) * t_scale)


def random_scene(
    rng: np.random.Generator,
    n: int = 50,
    c_low: int = 4,
    c_high: int = 6,
    depth: tuple[float, float] = (2.0, 6.0),
    spread: float = 1.0,
    scale: tuple[float, float] = (0.02, 0.3),
    opacity: tuple[float, float] = (0.2, 1.0),
) -> SceneMap:
    """Random primitives in front of an identity camera (looking down +z)."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 3.0
    centers = np.column_stack([xy, z])
    feats = 1.0 + 0.5 * rng.standard_normal((n, c_low))
    dec = FeatureDecoder(rng.standard_normal((c_high, c_low, 3, 3)) * 0.3, rng.standard_normal(c_high) * 0.1)
    return SceneMap(
        centers, random_quats(rng, n), rng.uniform(*scale, (n, 3)), rng.uniform(*opacity, n),
        rng.uniform(0, 1, (n, 3)), feats, dec,
    )


def small_camera(size: int = 64, f: float | None = None) -> CameraIntrinsics:
    f = f if f is not None else size * 0.9
    return CameraIntrinsics(f, f, size / 2 - 0.5, size / 2 - 0.5, size, size)


def texture(rng: np.random.Generator, h: int = 96, w: int = 128, smooth: float = 1.5) -> np.ndarray:
    """Random smooth color texture in [0, 1]."""
    from scipy import ndimage

    x = rng.uniform(0, 1, (h, w, 3))
    x = ndimage.gaussian_filter(x, (smooth, smooth, 0), mode="wrap")
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room():
    """(scene, intrinsics, trajectory poses) of a small synthetic room without a database."""
    from splatreloc.synth import SynthConfig, make_synthetic, trajectory

    cfg = SynthConfig(n_gaussians=3000, n_database=0, n_queries=0, seed=3)
    data = make_synthetic(cfg)
    return data.scene, data.intrinsics, trajectory(cfg, 40)


@pytest.fixture(scope="session")
def small_db():
    """Synthetic room with a 24-view database and 6 queries."""
    from splatreloc.synth import SynthConfig, make_synthetic

    return make_synthetic(SynthConfig(n_gaussians=3000, n_database=24, n_queries=6, seed=5))


def grad_check_case(seed: int, n: int = 12):
    """(scene, view) for a finite-difference check on a 32 x 32 image.

    Targets sit 0.05 to 0.3 away from the render in every entry so the L1
    kink never falls inside the difference step.
    """
    from splatreloc.featurizer import FeatureMap, decode_features
    from splatreloc.mapfit import FitView
    from splatreloc.splat import render

    rng = np.random.default_rng(seed)
    centers = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(2.5, 4, n)])
    dec = FeatureDecoder(rng.normal(size=(6, 4, 3, 3)) * 0.3, rng.normal(size=6) * 0.1)
    scene = SceneMap(
        centers, random_quats(rng, n), rng.uniform(0.1, 0.35, (n, 3)), rng.uniform(0.4, 0.9, n),
        rng.uniform(0.1, 0.9, (n, 3)), 1.0 + 0.5 * rng.normal(size=(n, 4)), dec,
    )
    K = CameraIntrinsics(32.0, 32.0, 15.5, 15.5, 32, 32)
    v = render(scene, K, Pose.identity())
    F = decode_features(v.feature_low, dec, (4, 4)).data

    def away(x):
        return x + rng.choice([-1, 1], x.shape) * rng.uniform(0.05, 0.3, x.shape)

    return scene, FitView(away(v.color), FeatureMap(away(F), 8), Pose.identity(), K)


def random_map(rng: np.random.Generator, n: int | None = None, n_db: int | None = None, f32: bool = False) -> SceneMap:
    """Random scene with a database for container round trips.

    ``f32`` draws float32-representable primitive values (stored 4 bytes wide).
    """
    from splatreloc.splat import DatabaseEntry

    n = int(rng.integers(0, 40)) if n is None else n
    n_db = int(rng.integers(0, 5)) if n_db is None else n_db
    c_low, c_high, d = (int(v) for v in rng.integers(1, 9, 3))

    def vals(a):
        return a.astype(np.float32).astype(np.float64) if f32 else a

    scene = SceneMap(
        vals(rng.normal(0, 3, (n, 3))), vals(random_quats(rng, n)), vals(rng.uniform(0.01, 2, (n, 3))),
        vals(rng.uniform(0.01, 1, n)), vals(rng.uniform(0, 1, (n, 3))), vals(rng.normal(0, 1, (n, c_low))),
        FeatureDecoder(rng.normal(size=(c_high, c_low, 3, 3)), rng.normal(size=c_high)),
    ) if n else SceneMap.empty(FeatureDecoder(rng.normal(size=(c_high, c_low, 3, 3)), rng.normal(size=c_high)))
    db = []
    for k in range(n_db):
        desc = rng.normal(size=d)
        K = CameraIntrinsics(*rng.uniform(50, 500, 2), *rng.uniform(10, 60, 2), 64 + k, 64)
        path = None if rng.uniform() < 0.5 else f"images/é{k}.ppm"
        db.append(DatabaseEntry(f"db{k:03d}", random_pose(rng, 5.0), K, desc / np.linalg.norm(desc), path))
    return scene.replace(database=db)


def assert_scene_equal(a: SceneMap, b: SceneMap) -> None:
    for name in ("centers", "rotations", "scales", "opacities", "colors", "features"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.dtype == y.dtype and x.tobytes() == y.tobytes(), name
    assert a.decoder.weights.tobytes() == b.decoder.weights.tobytes()
    assert a.decoder.bias.tobytes() == b.decoder.bias.tobytes()
    assert len(a.database) == len(b.database)
    for e, f in zip(a.database, b.database):
        assert e.id == f.id and e.image_path == f.image_path
        assert e.pose.rotation.tobytes() == f.pose.rotation.tobytes()
        assert e.pose.translation.tobytes() == f.pose.translation.tobytes()
        assert e.intrinsics == f.intrinsics
        assert e.descriptor.dtype == f.descriptor.dtype and e.descriptor.tobytes() == f.descriptor.tobytes()


def corrupted_files(root) -> list[tuple[str, object, object, type]]:
    """(name, path, loader, expected error class) for every corrupted fixture."""
    import struct
    from pathlib import Path

    from splatreloc import io as sio
    from splatreloc.featurizer import FeatureMap

    root = Path(root)
    rng = np.random.default_rng(99)
    good = sio.map_to_bytes(random_map(rng, n=5, n_db=2, f32=True))
    hdr = len(sio.MAP_MAGIC) + struct.calcsize("<2H5I")
    cases: list[tuple[str, bytes, object, type]] = [
        ("map_bad_magic", b"XPLM" + good[4:], sio.load_map, sio.BadMagicError),
        ("map_empty", b"", sio.load_map, sio.BadMagicError),
        ("map_version", good[:4] + struct.pack("<H", 2) + good[6:], sio.load_map, sio.VersionMismatchError),
        ("map_header_cut", good[:hdr - 3], sio.load_map, sio.TruncatedFileError),
        ("map_prims_cut", good[: hdr + 20], sio.load_map, sio.TruncatedFileError),
        ("map_db_cut", good[:-5], sio.load_map, sio.TruncatedFileError),
        ("map_trailing", good + b"\0", sio.load_map, sio.MapFormatError),
        ("map_width", good[:6] + struct.pack("<H", 5) + good[8:], sio.load_map, sio.MapFormatError),
    ]
    # first primitive's quaternion w, then its first scale
    q_off = hdr + 3 * 4
    cases.append(("map_quat_norm", good[:q_off] + struct.pack("<f", 3.0) + good[q_off + 4:], sio.load_map,
                  sio.MapInvariantError))
    s_off = hdr + 7 * 4
    cases.append(("map_neg_scale", good[:s_off] + struct.pack("<f", -1.0) + good[s_off + 4:], sio.load_map,
                  sio.MapInvariantError))
    bad_db = random_map(rng, n=3, n_db=1, f32=True)
    bad_db = bad_db.with_database([dataclasses.replace(bad_db.database[0], image_path=None)])
    raw = sio.map_to_bytes(bad_db)
    d = bad_db.database[0].descriptor.shape[0]
    # entry tail: pose (7 f8), fx fy cx cy (4 f8), w h (2 u32), descriptor, empty path marker
    desc_off = len(raw) - 2 - 4 * d
    p_off = desc_off - 8 - 32 - 56
    cases.append(("map_pose_quat", raw[:p_off] + struct.pack("<d", 2.0) + raw[p_off + 8:], sio.load_map,
                  sio.MapInvariantError))
    cases.append(("map_descriptor", raw[:desc_off] + struct.pack("<f", 5.0) + raw[desc_off + 4:], sio.load_map,
                  sio.MapInvariantError))

    ppm = b"P6\n2 2\n255\n" + bytes(range(12))
    cases += [
        ("img_magic", b"P3\n2 2\n255\n" + bytes(12), sio.read_image, sio.ImageFormatError),
        ("img_truncated", ppm[:-1], sio.read_image, sio.ImageFormatError),
        ("img_trailing", ppm + b"\0", sio.read_image, sio.ImageFormatError),
        ("img_header", b"P6\n2 x\n255\n" + bytes(12), sio.read_image, sio.ImageFormatError),
        ("img_maxval", b"P5\n2 1\n0\n" + bytes(2), sio.read_image, sio.ImageFormatError),
        ("img_sample", b"P5\n2 1\n100\n" + bytes([50, 200]), sio.read_image, sio.ImageFormatError),
        ("img_comment", b"P5\n# open comment", sio.read_image, sio.ImageFormatError),
        ("depth_ppm", ppm, sio.read_depth_pgm16, sio.ImageFormatError),
    ]

    fm = root / "_good.fmap"
    sio.save_feature_map(FeatureMap(rng.normal(size=(3, 2, 4)), 8), fm)
    fgood = fm.read_bytes()
    nan = fgood[:21] + struct.pack("<f", float("nan")) + fgood[25:]
    cases += [
        ("fmap_magic", b"FMAP2" + fgood[5:], sio.load_feature_map, sio.FeatureMapFormatError),
        ("fmap_header", fgood[:12], sio.load_feature_map, sio.FeatureMapFormatError),
        ("fmap_payload", fgood[:-4], sio.load_feature_map, sio.FeatureMapFormatError),
        ("fmap_dims", fgood[:5] + struct.pack("<i", 0) + fgood[9:], sio.load_feature_map, sio.FeatureMapFormatError),
        ("fmap_nan", nan, sio.load_feature_map, sio.FeatureMapFormatError),
    ]

    good_json = sio.scene_to_json(random_map(rng, n=2, n_db=1))
    cases += [
        ("json_syntax", b"{", sio.load_scene, sio.MapFormatError),
        ("json_missing", b'{"gaussians": []}', sio.load_scene, sio.MapFormatError),
        ("json_invariant", good_json.replace('"alpha": ', '"alpha": -').encode(), sio.load_scene,
         sio.MapInvariantError),
    ]
    out = []
    for name, data, loader, exc in cases:
        path = root / (name + (".json" if name.startswith("json") else ".bin"))
        path.write_bytes(data)
        out.append((name, path, loader, exc))
    out.append(("fmap_stride", fm, lambda p: sio.load_feature_map(p, stride=2), sio.FeatureMapFormatError))
    out.append(("fmap_dim", fm, lambda p: sio.load_feature_map(p, dim=5), sio.FeatureMapFormatError))
    return out


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
