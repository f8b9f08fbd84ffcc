import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorbird.edges import (make_edges, read_edges, read_tsv, stream_edges,
                              write_edges)
from factorbird.model import ModelLayout, init_vector
from factorbird.store import (FormatError, GraphStats, allocate_partition, load_matrix,
                              load_stats, save_matrix, save_stats, vector_of)


def test_empty_partition():
    part = allocate_partition([], 4)
    assert part.backing.size == 0
    with pytest.raises(KeyError):
        vector_of(part, 1)


def test_offsets_follow_insertion_order():
    part = allocate_partition([7, 3], 6)
    assert part.backing.size == 12
    assert part.offset(7) == 0 and part.offset(3) == 6
    assert (part.backing == 0).all()


def test_large_allocation_is_compact():
    tracemalloc.start()
    try:
        part = allocate_partition(np.arange(100_000), 96)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    raw = 100_000 * 96 * 4
    assert part.backing.size == 9_600_000
    assert part.backing.nbytes == raw
    assert peak < 2 * raw


@pytest.mark.parametrize("ids,width", [([1, 2, 1], 4), ([1, 2], 1)])
def test_allocation_rejects_bad_arguments(ids, width):
    with pytest.raises(ValueError):
        allocate_partition(ids, width)


def test_views_write_through():
    part = allocate_partition([10, 20], 3)
    vector_of(part, 20)[1] = 1.5
    assert vector_of(part, 20)[1] == 1.5
    assert part.backing[1, 1] == 1.5
    assert np.shares_memory(vector_of(part, 10), part.backing)
    assert not np.shares_memory(vector_of(part, 10), vector_of(part, 20))


def test_init_through_view_matches_generator_replay():
    part = allocate_partition([4, 9], 3)
    init_vector(vector_of(part, 9), [11, 9], 0.1, ModelLayout(k=2, num_models=1))
    expected = np.random.default_rng([11, 9, 0]).normal(0.0, 0.1, 2).astype(np.float32)
    np.testing.assert_array_equal(vector_of(part, 9), np.r_[np.float32(0), expected])
    assert (vector_of(part, 4) == 0).all()


def test_gather_and_missing_fill():
    part = allocate_partition([5, 2, 8], 2)
    part.backing[:] = [[1, 1], [2, 2], [3, 3]]
    np.testing.assert_array_equal(part.gather([8, 5]), [[3, 3], [1, 1]])
    with pytest.raises(KeyError):
        part.gather([5, 6])
    out = part.gather([6, 2], missing=lambda vid, row: row.fill(vid))
    np.testing.assert_array_equal(out, [[6, 6], [2, 2]])


# -- stats -----------------------------------------------------------------------

def test_toy_graph_stats():
    edges = make_edges([1, 1, 2], [2, 1, 2], [1.0, 2.0, 4.0])
    stats = GraphStats.from_edges(edges)
    assert stats.out_degree == {1: 2, 2: 1}
    assert stats.in_degree == {1: 1, 2: 2}
    assert (stats.num_rows, stats.num_cols, stats.num_edges) == (2, 2, 3)
    assert stats.avg_strength == pytest.approx(7 / 3, rel=1e-6)
    np.testing.assert_array_equal(stats.out_degrees_of([2, 99]), [1, 1])
    np.testing.assert_array_equal(stats.in_degrees_of([2]), [2])


def test_empty_stats_round_trip(tmp_path):
    path = tmp_path / "s.fbst"
    save_stats(GraphStats(), path)
    back = load_stats(path)
    assert back == GraphStats()
    assert back.num_rows == back.num_cols == back.num_edges == 0


def test_million_vertex_stats_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    out_ids = rng.choice(2 ** 40, 600_000, replace=False).astype(np.uint64)
    in_ids = rng.choice(2 ** 40, 400_000, replace=False).astype(np.uint64)
    stats = GraphStats(600_000, 400_000, 5_000_000, 0.73,
                       out_ids, rng.integers(1, 50, 600_000),
                       in_ids, rng.integers(1, 50, 400_000))
    path = tmp_path / "big.fbst"
    save_stats(stats, path)
    assert load_stats(path) == stats


def test_stats_file_layout(tmp_path):
    stats = GraphStats.from_edges(make_edges([3], [4], [0.5]))
    path = tmp_path / "s.fbst"
    save_stats(stats, path)
    data = path.read_bytes()
    assert data[:4] == b"FBST"
    assert struct.unpack_from("<IQQQf", data, 4) == (1, 1, 1, 1, 0.5)
    assert struct.unpack_from("<QQI", data, 36) == (1, 3, 1)


@pytest.mark.parametrize("mutate,match", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d + b"\0", "trailing"),
    (lambda d: d[:10], "header"),
])
def test_malformed_stats_name_the_problem(tmp_path, mutate, match):
    path = tmp_path / "s.fbst"
    save_stats(GraphStats.from_edges(make_edges([1, 2], [1, 1], [1.0, 1.0])), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_stats(path)


@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=200))
def test_degree_sums_equal_edge_count(pairs):
    pairs = sorted(set(pairs))
    edges = make_edges([p[0] for p in pairs], [p[1] for p in pairs], np.ones(len(pairs)))
    stats = GraphStats.from_edges(edges)
    assert stats.out_deg.sum() == stats.in_deg.sum() == stats.num_edges == len(pairs)
    assert (stats.out_deg >= 1).all() and (stats.in_deg >= 1).all()


# -- matrices and edge files -------------------------------------------------------

def test_matrix_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    ids = np.array([5, 1, 2 ** 63], dtype=np.uint64)
    rows = rng.normal(size=(3, 6)).astype(np.float32)
    save_matrix(tmp_path / "m.fbmx", ids, rows)
    got_ids, got_rows = load_matrix(tmp_path / "m.fbmx")
    assert got_ids.tolist() == ids.tolist()
    assert got_rows.tobytes() == rows.tobytes()
    assert not (tmp_path / "m.fbmx.tmp").exists()


def test_empty_matrix_round_trip(tmp_path):
    save_matrix(tmp_path / "m.fbmx", [], np.zeros((0, 4), np.float32))
    ids, rows = load_matrix(tmp_path / "m.fbmx")
    assert len(ids) == 0 and rows.shape == (0, 4)


def test_truncated_matrix_is_rejected(tmp_path):
    path = tmp_path / "m.fbmx"
    save_matrix(path, [1], np.ones((1, 3), np.float32))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_matrix(path)


def test_edge_file_round_trip_and_streaming(tmp_path):
    edges = make_edges(np.arange(10), np.arange(10)[::-1], np.linspace(0, 1, 10))
    write_edges(tmp_path / "e.fbed", edges)
    chunks = list(stream_edges(tmp_path / "e.fbed", chunk_size=3))
    assert [len(c) for c in chunks] == [3, 3, 3, 1]
    assert np.concatenate(chunks).tobytes() == edges.tobytes()


def test_empty_edge_file(tmp_path):
    write_edges(tmp_path / "e.fbed", make_edges([], [], []))
    assert list(stream_edges(tmp_path / "e.fbed")) == []
    assert len(read_edges(tmp_path / "e.fbed")) == 0


def test_malformed_edge_record_reports_byte_offset(tmp_path):
    path = tmp_path / "e.fbed"
    edges = make_edges([1, 2, 3], [1, 2, 3], [1, 1, 1])
    edges["w"][1] = 0.0
    path.write_bytes(b"FBED" + struct.pack("<IQ", 1, 3) + edges.tobytes())
    with pytest.raises(FormatError, match="byte 40"):
        read_edges(path)
    path.write_bytes(b"FBED" + struct.pack("<IQ", 1, 3) + make_edges([1], [1], [1]).tobytes())
    with pytest.raises(FormatError, match="byte 40"):
        read_edges(path)


def test_tsv_errors_report_line_number(tmp_path):
    path = tmp_path / "e.tsv"
    path.write_text("# header\n1\t2\t0.5\n3\tx\t1\n")
    with pytest.raises(FormatError, match=":3:"):
        read_tsv(path)
    path.write_text("1\t2\t0.5\t2\n\n4\t5\t1\n")
    edges = read_tsv(path)
    assert edges["w"].tolist() == [2.0, 1.0]
