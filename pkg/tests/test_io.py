import numpy as np
import pytest

from veloform.errors import GeometryError
from veloform.geometry import PointCloud, TriMesh
from veloform.io import (
    file_digest,
    read_cloud,
    read_matches,
    read_obj,
    read_ply,
    write_matches,
    write_obj,
    write_ply,
    write_xyz,
)


def test_ply_roundtrip_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    write_ply(tmp_path / "a.ply", PointCloud(pts, nrm))
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(back.points, pts)
    np.testing.assert_allclose(back.normals, nrm, atol=1e-15)


def test_ply_without_normals(tmp_path):
    write_ply(tmp_path / "a.ply", PointCloud(np.eye(3)))
    assert read_ply(tmp_path / "a.ply").normals is None


def test_foreign_ply_header(tmp_path):
    (tmp_path / "b.ply").write_text(
        "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\nproperty uchar red\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
        "0 0 0 255\n1 2 3 0\n"
    )
    np.testing.assert_array_equal(read_ply(tmp_path / "b.ply").points, [[0, 0, 0], [1, 2, 3]])


def test_not_ply(tmp_path):
    (tmp_path / "c.ply").write_text("hello\n")
    with pytest.raises(GeometryError):
        read_ply(tmp_path / "c.ply")


def test_xyz_dispatch(tmp_path, rng):
    pts = rng.normal(size=(5, 3))
    write_xyz(tmp_path / "a.xyz", PointCloud(pts))
    np.testing.assert_array_equal(read_cloud(tmp_path / "a.xyz", frame_id=3).points, pts)
    assert read_cloud(tmp_path / "a.xyz", frame_id=3).frame_id == 3


def test_matches_roundtrip(tmp_path):
    m = np.array([[0, 4], [2, 1], [7, 7]])
    write_matches(tmp_path / "m.txt", m)
    np.testing.assert_array_equal(read_matches(tmp_path / "m.txt"), m)


def test_obj_roundtrip(tmp_path):
    mesh = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]),
                   np.array([[0, 1, 2], [0, 2, 3]]))
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.faces, mesh.faces)


def test_deterministic_bytes(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)))
    write_ply(tmp_path / "a.ply", cloud)
    write_ply(tmp_path / "b.ply", cloud)
    assert file_digest(tmp_path / "a.ply") == file_digest(tmp_path / "b.ply")
