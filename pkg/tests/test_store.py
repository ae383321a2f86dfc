import json

import numpy as np
import pytest

import sketchgraphnet as sg
from sketchgraphnet import store
from sketchgraphnet.synth import make_record


def random_graphs(count, seed=0, classes=4):
    rng = np.random.default_rng(seed)
    graphs = []
    cats = ["circle", "square", "house", "ladder"]
    for i in range(count):
        sk = sg.parse_ndjson_line(json.dumps(make_record(cats[i % classes], rng)))
        graphs.append(sg.build_graph(sg.normalize_canvas(sk), i % classes))
    return graphs


class TestWriteRead:
    def test_empty_corpus(self, tmp_path):
        header = sg.write_corpus([], tmp_path / "empty.skgr", num_classes=3)
        assert header.num_records == 0
        reader = sg.open_corpus(tmp_path / "empty.skgr")
        assert len(reader) == 0

    def test_offsets_strictly_increasing(self, tmp_path):
        graphs = random_graphs(3)
        sg.write_corpus(graphs, tmp_path / "c.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "c.skgr")
        assert len(reader.offsets) == 3
        assert np.all(np.diff(reader.offsets.astype(np.int64)) > 0)

    def test_offset_gaps_equal_record_length_from_headers(self, tmp_path):
        graphs = random_graphs(5)
        sg.write_corpus(graphs, tmp_path / "c.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "c.skgr")
        for i in range(len(reader) - 1):
            g = reader.get(i)
            expected = store.record_size(g.num_nodes(), g.num_strokes())
            assert reader.offsets[i + 1] - reader.offsets[i] == expected

    def test_round_trip_1000_records_bit_exact(self, tmp_path):
        graphs = random_graphs(1000, seed=1)
        sg.write_corpus(graphs, tmp_path / "big.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "big.skgr")
        assert len(reader) == 1000
        rng = np.random.default_rng(2)
        for i in rng.choice(1000, size=200, replace=False):
            g = reader.get(int(i))
            orig = graphs[int(i)]
            assert g.node_features.tobytes() == orig.node_features.astype("<f4").tobytes()
            assert g.label_id == orig.label_id
            assert g.stroke_spans == orig.stroke_spans
            assert np.array_equal(np.sort(g.edges, axis=1), np.sort(orig.edges, axis=1))
            assert store.record_to_bytes(g) == reader.raw_record(int(i))

    def test_singleton_round_trip(self, tmp_path):
        g0 = random_graphs(1)[0]
        sg.write_corpus([g0], tmp_path / "one.skgr", num_classes=4)
        got = sg.open_corpus(tmp_path / "one.skgr").get(0)
        assert got.node_features.tobytes() == g0.node_features.astype("<f4").tobytes()

    def test_permutation_read_equals_sequential(self, tmp_path):
        graphs = random_graphs(64, seed=3)
        sg.write_corpus(graphs, tmp_path / "p.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "p.skgr")
        sequential = [reader.raw_record(i) for i in range(len(reader))]
        perm = np.random.default_rng(4).permutation(len(reader))
        permuted = {int(i): reader.raw_record(int(i)) for i in perm}
        assert sorted(sequential) == sorted(permuted.values())
        assert all(sequential[i] == permuted[i] for i in range(len(reader)))

    def test_edges_reconstructed_from_spans(self, tmp_path):
        graphs = random_graphs(10, seed=5)
        sg.write_corpus(graphs, tmp_path / "e.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "e.skgr")
        for i in range(10):
            got = reader.get(i)
            got.validate()
            assert np.array_equal(got.edges, got.derived_edges())


class TestIntegrity:
    def test_corrupted_byte_detected_on_open(self, tmp_path):
        graphs = random_graphs(4)
        sg.write_corpus(graphs, tmp_path / "x.skgr", num_classes=4)
        raw = bytearray((tmp_path / "x.skgr").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "x.skgr").write_bytes(bytes(raw))
        with pytest.raises(sg.ChecksumMismatch):
            sg.open_corpus(tmp_path / "x.skgr")

    def test_bad_magic(self, tmp_path):
        graphs = random_graphs(1)
        sg.write_corpus(graphs, tmp_path / "m.skgr", num_classes=4)
        raw = bytearray((tmp_path / "m.skgr").read_bytes())
        raw[0:4] = b"NOPE"
        (tmp_path / "m.skgr").write_bytes(bytes(raw))
        with pytest.raises((sg.VersionMismatch, sg.ChecksumMismatch)):
            sg.open_corpus(tmp_path / "m.skgr")

    def test_version_mismatch(self, tmp_path):
        import struct

        graphs = random_graphs(1)
        sg.write_corpus(graphs, tmp_path / "v.skgr", num_classes=4)
        raw = bytearray((tmp_path / "v.skgr").read_bytes())
        raw[4:6] = struct.pack("<H", 99)
        (tmp_path / "v.skgr").write_bytes(bytes(raw))
        # recompute the index CRC so only the version differs
        import zlib

        idx = bytearray((tmp_path / "v.skgr.idx").read_bytes())
        idx[-4:] = struct.pack("<I", zlib.crc32(bytes(raw)) & 0xFFFFFFFF)
        (tmp_path / "v.skgr.idx").write_bytes(bytes(idx))
        with pytest.raises(sg.VersionMismatch):
            sg.open_corpus(tmp_path / "v.skgr")

    def test_index_out_of_range(self, tmp_path):
        sg.write_corpus(random_graphs(2), tmp_path / "r.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "r.skgr")
        with pytest.raises(sg.IndexOutOfRange):
            reader.get(2)
        with pytest.raises(sg.IndexOutOfRange):
            reader.get(-1)

    def test_writer_refuses_invalid_graph(self, tmp_path):
        g = random_graphs(1)[0]
        bad = sg.SketchGraph(
            node_features=g.node_features[:50],
            edges=np.empty((0, 2), np.int32),
            label_id=0,
            stroke_spans=[(0, 50)],
        )
        with pytest.raises(sg.InvariantViolation):
            sg.write_corpus([bad], tmp_path / "bad.skgr", num_classes=4)

    def test_writer_refuses_out_of_range_label(self, tmp_path):
        g = random_graphs(1)[0]
        g.label_id = 9
        with pytest.raises(sg.InvariantViolation):
            sg.write_corpus([g], tmp_path / "lbl.skgr", num_classes=4)

    def test_labels_scan_matches_records(self, tmp_path):
        graphs = random_graphs(20, seed=6)
        sg.write_corpus(graphs, tmp_path / "s.skgr", num_classes=4)
        reader = sg.open_corpus(tmp_path / "s.skgr")
        assert np.array_equal(reader.labels(), [g.label_id for g in graphs])


class TestSplits:
    def _corpus_with_counts(self, tmp_path, counts, seed=0):
        rng = np.random.default_rng(seed)
        graphs = []
        for cls, count in enumerate(counts):
            for _ in range(count):
                sk = sg.parse_ndjson_line(json.dumps(make_record("circle", rng)))
                graphs.append(sg.build_graph(sg.normalize_canvas(sk), cls))
        path = tmp_path / "split.skgr"
        sg.write_corpus(graphs, path, num_classes=len(counts))
        return sg.open_corpus(path)

    def test_exact_arithmetic_single_class(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [200])
        tr, va, te = sg.split_corpus(reader, (0.9, 0.05, 0.05), seed=0)
        assert (len(tr), len(va), len(te)) == (180, 10, 10)

    def test_determinism(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [50, 30])
        a = sg.split_corpus(reader, (0.8, 0.1, 0.1), seed=7)
        b = sg.split_corpus(reader, (0.8, 0.1, 0.1), seed=7)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        c = sg.split_corpus(reader, (0.8, 0.1, 0.1), seed=8)
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_per_class_ratio_two_classes(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [1000, 1000])
        tr, va, te = sg.split_corpus(reader, (0.9, 0.05, 0.05), seed=1)
        labels = reader.labels()
        for cls in (0, 1):
            assert (labels[tr] == cls).sum() == 900
            assert (labels[va] == cls).sum() == 50
            assert (labels[te] == cls).sum() == 50

    def test_partition_for_any_seed(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [37, 11, 5])
        for seed in range(5):
            tr, va, te = sg.split_corpus(reader, (0.6, 0.2, 0.2), seed=seed)
            merged = np.concatenate([tr, va, te])
            assert len(merged) == len(reader)
            assert len(np.unique(merged)) == len(reader)

    def test_class_too_small_goes_to_train(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [2, 40])
        tr, va, te = sg.split_corpus(reader, (0.34, 0.33, 0.33), seed=0)
        labels = reader.labels()
        assert (labels[tr] == 0).sum() == 2
        assert (labels[va] == 0).sum() == 0 and (labels[te] == 0).sum() == 0

    def test_bad_ratios(self, tmp_path):
        reader = self._corpus_with_counts(tmp_path, [10])
        with pytest.raises(ValueError):
            sg.split_corpus(reader, (0.9, 0.1, 0.0), seed=0)
