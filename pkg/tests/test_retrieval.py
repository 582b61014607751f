"""Index construction, ADC search, exact oracle, recall, and file format tests."""

import numpy as np
import pytest

import mopq.encoder as enc
import mopq.quantization as q
import mopq.retrieval as rt
import mopq.training as tr
from mopq.errors import DataFormatError, UsageError


def make_model(rng, input_dim=6, dim=4, books=2, codewords=4):
    enc_cfg = enc.EncoderConfig(input_dim=input_dim, hidden_dim=0, output_dim=dim, depth=1)
    params = enc.init_encoder_params(enc_cfg, rng)
    for i in range(books):
        params[f"codebook_{i}"] = rng.normal(size=(codewords, dim // books))
    book_cfg = tr.CodebookConfig(num_books=books, num_codewords=codewords)
    return tr.Model(encoder=enc_cfg, codebooks=book_cfg, params=params)


def make_keys(rng, n, input_dim=6):
    return {f"key-{i:04d}": rng.normal(size=input_dim) for i in range(n)}


class TestBuildIndex:
    def test_single_key(self):
        rng = np.random.default_rng(0)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 1), model)
        assert len(index) == 1

    def test_duplicate_vectors_identical_codes(self):
        rng = np.random.default_rng(1)
        model = make_model(rng)
        vec = rng.normal(size=6)
        index = rt.build_index({"a": vec, "b": vec.copy()}, model)
        np.testing.assert_array_equal(index.codes[0], index.codes[1])

    def test_codes_roundtrip_through_reconstruction(self):
        rng = np.random.default_rng(2)
        model = make_model(rng)
        keys = make_keys(rng, 10)
        index = rt.build_index(keys, model)
        embedded = model.encode_values(np.asarray(list(keys.values())))
        expect = q.assign_codes_batch(embedded, model.books, model.variant)
        np.testing.assert_array_equal(index.codes, expect)

    def test_empty_keys_rejected(self):
        rng = np.random.default_rng(3)
        with pytest.raises(UsageError):
            rt.build_index({}, make_model(rng))


class TestSearch:
    def test_topn_larger_than_index_returns_all(self):
        rng = np.random.default_rng(4)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 5), model)
        results = rt.search(index, rng.normal(size=4), topn=50)
        assert len(results) == 5

    def test_matches_brute_force_quantized_ranking(self):
        rng = np.random.default_rng(5)
        model = make_model(rng)
        keys = make_keys(rng, 40)
        index = rt.build_index(keys, model)
        recon = q.reconstruct_batch(index.codes, index.books)
        for _ in range(100):
            qv = rng.normal(size=4)
            got = [kid for kid, _ in rt.search(index, qv, topn=40)]
            scores = recon @ qv
            order = np.lexsort((np.asarray(index.key_ids), -scores))
            expect = [index.key_ids[i] for i in order]
            assert got == expect

    def test_equal_scores_tie_break_by_key_id(self):
        books = q.CodebookSet(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        index = rt.QuantizedIndex(books=books,
                                  codes=np.zeros((3, 2), dtype=np.uint16),
                                  key_ids=["zebra", "apple", "mango"])
        results = rt.search(index, np.array([1.0, 1.0, 1.0, 1.0]), topn=3)
        assert [r[0] for r in results] == ["apple", "mango", "zebra"]

    def test_scores_equal_adc(self):
        rng = np.random.default_rng(6)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 12), model)
        qv = rng.normal(size=4)
        table = q.build_distance_table(qv, index.books)
        results = dict(rt.search(index, qv, topn=12))
        for kid, codes in zip(index.key_ids, index.codes):
            assert results[kid] == q.adc_score(table, codes)


class TestExactSearch:
    def test_orthonormal_keys_query_finds_itself(self):
        keys = {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}
        results = rt.exact_search(keys, np.array([0.0, 1.0]), topn=1)
        assert results[0][0] == "y"

    def test_hand_ranked_scores(self):
        keys = {"c": np.array([1.0]), "b": np.array([2.0]), "a": np.array([3.0])}
        results = rt.exact_search(keys, np.array([1.0]), topn=3)
        assert [r[0] for r in results] == ["a", "b", "c"]
        assert [r[1] for r in results] == [3.0, 2.0, 1.0]

    def test_agrees_with_adc_when_quantization_lossless(self):
        rng = np.random.default_rng(7)
        books = q.CodebookSet(rng.normal(size=(2, 4, 2)))
        cfg = enc.EncoderConfig(input_dim=4, hidden_dim=0, output_dim=4, depth=1)
        params = {"enc_w": np.eye(4), "enc_b": np.zeros(4)}
        model = tr.Model(encoder=cfg,
                         codebooks=tr.CodebookConfig(num_books=2, num_codewords=4),
                         params={**params,
                                 "codebook_0": books.codewords[0],
                                 "codebook_1": books.codewords[1]})
        # keys on the codeword grid quantize losslessly
        keys = {}
        for i in range(4):
            codes = np.array([i % 4, (i * 2 + 1) % 4], dtype=np.uint16)
            keys[f"k{i}"] = q.reconstruct(codes, books)
        index = rt.build_index(keys, model)
        qv = rng.normal(size=4)
        assert [r[0] for r in rt.search(index, qv, 4)] == \
            [r[0] for r in rt.exact_search(keys, qv, 4)]


class TestRecall:
    def test_ground_truth_first_gives_one(self):
        results = {"q1": ["a", "b"], "q2": ["c", "d"]}
        truth = {"q1": "a", "q2": "c"}
        out = rt.recall_at_n(results, truth, [1, 2])
        assert out.recall_at == {1: 1.0, 2: 1.0}

    def test_absent_truth_gives_zero(self):
        out = rt.recall_at_n({"q": ["a", "b"]}, {"q": "z"}, [1, 10])
        assert out.recall_at == {1: 0.0, 10: 0.0}

    def test_hand_counted_ranks(self):
        results = {
            "q1": [f"k{i}" for i in range(20)],          # truth k0 at rank 1
            "q2": [f"k{i}" for i in range(20)],          # truth k2 at rank 3
            "q3": [f"k{i}" for i in range(20)],          # truth k10 at rank 11
            "q4": [f"k{i}" for i in range(20)],          # truth k1 at rank 2
        }
        truth = {"q1": "k0", "q2": "k2", "q3": "k10", "q4": "k1"}
        out = rt.recall_at_n(results, truth, [10])
        assert out.recall_at[10] == 0.75

    def test_monotone_in_n(self):
        rng = np.random.default_rng(8)
        results = {f"q{i}": [f"k{j}" for j in rng.permutation(30)] for i in range(20)}
        truth = {f"q{i}": f"k{i}" for i in range(20)}
        out = rt.recall_at_n(results, truth, [1, 5, 10, 30])
        values = [out.recall_at[n] for n in (1, 5, 10, 30)]
        assert values == sorted(values)

    def test_paired_recall_matches_search_based_recall(self):
        rng = np.random.default_rng(9)
        model = make_model(rng)
        raw_keys = rng.normal(size=(30, 6))
        raw_queries = raw_keys + 0.01 * rng.normal(size=(30, 6))
        key_embs = model.encode_values(raw_keys)
        query_embs = model.encode_values(raw_queries)
        fast = rt.paired_recall(query_embs, key_embs, model.books, model.variant, (1, 10))
        keys_map = {f"{i:04d}": raw_keys[i] for i in range(30)}
        index = rt.build_index(keys_map, model)
        results = {f"q{i}": [kid for kid, _ in rt.search(index, query_embs[i], 10)]
                   for i in range(30)}
        truth = {f"q{i}": f"{i:04d}" for i in range(30)}
        slow = rt.recall_at_n(results, truth, [1, 10])
        assert fast[1] == slow.recall_at[1]
        assert fast[10] == slow.recall_at[10]


class TestIndexFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 17), model)
        path = tmp_path / "toy.idx"
        rt.save_index(index, path)
        loaded = rt.load_index(path)
        assert loaded.key_ids == index.key_ids
        np.testing.assert_array_equal(loaded.codes, index.codes)
        np.testing.assert_array_equal(
            loaded.books.codewords, index.books.codewords.astype(np.float32).astype(np.float64))
        # second save of the float32-narrowed data is byte-stable
        path2 = tmp_path / "toy2.idx"
        rt.save_index(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(DataFormatError, match="magic"):
            rt.load_index(path)

    def test_truncation_reports_offset(self, tmp_path):
        rng = np.random.default_rng(11)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 5), model)
        path = tmp_path / "trunc.idx"
        rt.save_index(index, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(DataFormatError, match="byte offset"):
            rt.load_index(path)

    def test_search_after_roundtrip_is_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        model = make_model(rng)
        index = rt.build_index(make_keys(rng, 20), model)
        path = tmp_path / "t.idx"
        rt.save_index(index, path)
        loaded = rt.load_index(path)
        qv = rng.normal(size=4)
        # codewords were narrowed to float32; scores may differ, ranking of
        # the same narrowed index must be deterministic
        first = rt.search(loaded, qv, 20)
        second = rt.search(rt.load_index(path), qv, 20)
        assert first == second
