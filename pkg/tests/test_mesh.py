import numpy as np
import pytest

from avatarforge.body import Pose, PosedBody, Shape
from avatarforge.mesh import EmptySurfaceError, extract_mesh, read_obj, write_obj
from avatarforge.images import read_pfm, write_pfm, write_png, read_png, encode_normal_map


class TestMeshExtraction:
    def test_vertices_near_zero_set(self, default_params, rest_body):
        verts, faces, colors = extract_mesh(default_params, rest_body, 64)
        assert len(verts) > 100 and len(faces) > 100
        assert np.isfinite(verts).all()
        assert faces.min() >= 0 and faces.max() < len(verts)
        lo, hi = rest_body.bounds("full_body", margin=0.05)
        voxel_diag = np.linalg.norm((hi - lo) / 63)
        d = rest_body.signed_distance(verts)
        assert np.abs(d).max() <= 2 * voxel_diag

    def test_resolution_refines_surface(self, default_params, rest_body):
        # one-sided Hausdorff against the SDF zero set: max |d| shrinks
        errs = {}
        for res in (32, 64):
            verts, _, _ = extract_mesh(default_params, rest_body, res)
            errs[res] = np.abs(rest_body.signed_distance(verts)).max()
        assert errs[64] < errs[32]

    def test_colors_in_range(self, default_params, rest_body):
        _, _, colors = extract_mesh(default_params, rest_body, 48)
        assert colors.min() >= 0.0 and colors.max() <= 1.0

    def test_bad_resolution(self, default_params, rest_body):
        with pytest.raises(ValueError):
            extract_mesh(default_params, rest_body, 16)

    def test_empty_surface(self, default_params, rest_body):
        with pytest.raises(EmptySurfaceError):
            extract_mesh(default_params, rest_body, 32, iso=1e9)


class TestObjFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.normal(size=(20, 3))
        faces = rng.integers(0, 20, size=(30, 3)).astype(np.int64)
        colors = rng.random((20, 3))
        path = tmp_path / "m.obj"
        write_obj(path, verts, faces, colors)
        v2, f2, c2 = read_obj(path)
        assert v2.shape == verts.shape and f2.shape == faces.shape
        assert np.abs(v2 - verts).max() < 1e-5
        assert (f2 == faces).all()
        assert np.abs(c2 - colors).max() < 1e-3


class TestImageIO:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(1).random((16, 16, 3))
        p = tmp_path / "x.png"
        write_png(p, img)
        back = read_png(p)
        assert np.abs(back - img).max() < 1 / 255 + 1e-9

    def test_pfm_round_trip_scalar_and_rgb(self, tmp_path):
        rng = np.random.default_rng(2)
        for shape in ((8, 6), (6, 8, 3)):
            arr = rng.normal(size=shape).astype(np.float32)
            p = tmp_path / "x.pfm"
            write_pfm(p, arr)
            assert np.array_equal(read_pfm(p), arr)

    def test_normal_encoding_range(self):
        n = np.random.default_rng(3).normal(size=(10, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        enc = encode_normal_map(n)
        assert enc.min() >= 0.0 and enc.max() <= 1.0
