import numpy as np
import pytest
from hypothesis import given, strategies as st

from semrecon.fusion import Mesh
from semrecon.plyio import PlyError, read_ply, write_ply


def tetra(classes=True, colors=False):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f, np.array([1, 2, 3, 40]) if classes else None,
                np.arange(12, dtype=np.uint8).reshape(4, 3) if colors else None)


@pytest.mark.parametrize("classes, colors", [(False, False), (True, False), (True, True), (False, True)])
def test_round_trip(tmp_path, classes, colors):
    m = tetra(classes, colors)
    write_ply(tmp_path / "m.ply", m)
    back = read_ply(tmp_path / "m.ply")
    assert np.array_equal(back.vertices, m.vertices.astype(np.float32))
    assert np.array_equal(back.faces, m.faces)
    assert (back.classes is None) == (not classes)
    assert (back.colors is None) == (not colors)
    if classes:
        assert np.array_equal(back.classes, m.classes)
    if colors:
        assert np.array_equal(back.colors, m.colors)


def test_header_layout(tmp_path):
    write_ply(tmp_path / "m.ply", tetra(True, True))
    head = (tmp_path / "m.ply").read_bytes().split(b"end_header\n")[0].decode()
    assert "format binary_little_endian 1.0" in head
    assert "property float x" in head and "property uchar red" in head
    assert "property ushort class" in head
    assert "property list uchar int vertex_indices" in head


def test_deterministic_bytes(tmp_path):
    write_ply(tmp_path / "a.ply", tetra())
    write_ply(tmp_path / "b.ply", tetra())
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


@given(st.integers(0, 50), st.integers(0, 1_000_000))
def test_random_meshes_round_trip(n, seed):
    import tempfile
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n + 3, 3))
    f = rng.integers(0, n + 3, (n, 3))
    m = Mesh(v, f, rng.integers(0, 41, n + 3))
    with tempfile.TemporaryDirectory() as d:
        write_ply(f"{d}/m.ply", m)
        back = read_ply(f"{d}/m.ply")
    assert np.array_equal(back.faces, f) and np.array_equal(back.classes, m.classes)


def test_truncated_file_reports_offset(tmp_path):
    write_ply(tmp_path / "m.ply", tetra())
    data = (tmp_path / "m.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(PlyError) as exc:
        read_ply(tmp_path / "t.ply")
    assert "truncated" in str(exc.value) and exc.value.offset == len(data) - 5


def test_trailing_bytes(tmp_path):
    write_ply(tmp_path / "m.ply", tetra())
    data = (tmp_path / "m.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data + b"xx")
    with pytest.raises(PlyError, match="2 trailing bytes") as exc:
        read_ply(tmp_path / "t.ply")
    assert exc.value.offset == len(data)


def test_bad_magic_and_format(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"nope")
    with pytest.raises(PlyError) as exc:
        read_ply(tmp_path / "a.ply")
    assert exc.value.offset == 0
    (tmp_path / "b.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(PlyError, match="unsupported format") as exc:
        read_ply(tmp_path / "b.ply")
    assert exc.value.offset == 4


def test_bad_face_index(tmp_path):
    m = tetra()
    m.faces[0, 0] = 9
    write_ply(tmp_path / "m.ply", m)
    with pytest.raises(PlyError, match="out of range"):
        read_ply(tmp_path / "m.ply")


def test_non_triangle_face(tmp_path):
    write_ply(tmp_path / "m.ply", tetra())
    data = bytearray((tmp_path / "m.ply").read_bytes())
    start = data.index(b"end_header\n") + len(b"end_header\n") + 4 * (12 + 2)
    data[start + 13] = 4  # count byte of the second face
    (tmp_path / "m.ply").write_bytes(bytes(data))
    with pytest.raises(PlyError, match="only triangles") as exc:
        read_ply(tmp_path / "m.ply")
    assert exc.value.offset == start + 13
