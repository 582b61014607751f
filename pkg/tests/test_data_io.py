"""Synthetic data, feature hashing, binary formats, config parsing."""

import numpy as np
import pytest

import mopq.config as cfg_mod
import mopq.data as data
import mopq.encoder as enc
import mopq.retrieval as rt
import mopq.training as tr
from mopq.errors import ConfigError, DataFormatError, UsageError


class TestHashFeaturize:
    def test_empty_text_zero_vector(self):
        np.testing.assert_array_equal(data.hash_featurize("", 16), np.zeros(16))

    def test_deterministic(self):
        a = data.hash_featurize("the quick brown fox", 32)
        b = data.hash_featurize("the quick brown fox", 32)
        np.testing.assert_array_equal(a, b)

    def test_single_token_against_published_constants(self):
        # independent FNV-1a evaluation using the published offset and prime
        h = 0xCBF29CE484222325
        h ^= ord("a")
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        vec = data.hash_featurize("a", 16)
        expected = np.zeros(16)
        expected[h % 16] = 1.0 if (h >> 63) == 0 else -1.0
        np.testing.assert_array_equal(vec, expected)

    def test_norm_is_zero_or_one(self):
        for text in ("", "a", "a b c", "Hello HELLO hello", "x " * 100):
            norm = float(np.linalg.norm(data.hash_featurize(text, 8)))
            assert norm == 0.0 or norm == pytest.approx(1.0, abs=1e-12)

    def test_case_insensitive(self):
        np.testing.assert_array_equal(data.hash_featurize("Apple Pie", 64),
                                      data.hash_featurize("apple pie", 64))


class TestGenSynthetic:
    def test_zero_noise_query_equals_key(self):
        ds = data.gen_synthetic(50, input_dim=8, cluster_count=10,
                                noise_sigma=0.0, seed=3)
        for (qid, kid) in ds.pairs:
            np.testing.assert_array_equal(ds.queries[qid], ds.keys[kid])

    def test_zero_noise_exact_recall_is_one(self):
        # at input_dim=64 a foreign center outscoring <k, k> needs an 8-sigma
        # event, so self-retrieval under inner product is certain in practice
        ds = data.gen_synthetic(50, input_dim=64, cluster_count=50,
                                noise_sigma=0.0, seed=4)
        hits = 0
        for qid, kid in ds.pairs:
            top = rt.exact_search(ds.keys, ds.queries[qid], topn=1)
            hits += top[0][0] == kid
        assert hits == 50

    def test_same_seed_identical_dataset(self):
        a = data.gen_synthetic(30, 8, 5, 0.2, seed=9)
        b = data.gen_synthetic(30, 8, 5, 0.2, seed=9)
        assert a.pairs == b.pairs and a.splits == b.splits
        for k in a.queries:
            np.testing.assert_array_equal(a.queries[k], b.queries[k])

    def test_low_noise_exact_recall_at_10(self):
        ds = data.gen_synthetic(1000, input_dim=64, cluster_count=100,
                                noise_sigma=0.1, seed=5)
        hits = 0
        for qid, kid in ds.pairs[:200]:
            top = [k for k, _ in rt.exact_search(ds.keys, ds.queries[qid], topn=10)]
            hits += kid in top
        assert hits / 200 >= 0.9

    def test_splits_cover_and_disjoint(self):
        ds = data.gen_synthetic(100, 4, 10, 0.1, seed=6)
        all_indices = sorted(ds.splits["train"] + ds.splits["valid"] + ds.splits["test"])
        assert all_indices == list(range(100))
        assert len(ds.splits["train"]) == 80
        assert len(ds.splits["valid"]) == 10

    def test_cluster_count_validation(self):
        with pytest.raises(UsageError):
            data.gen_synthetic(5, 4, 10, 0.1, seed=0)


class TestEmbeddingFile:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(7)
        vectors = {f"id-{i}": rng.normal(size=16).astype(np.float32).astype(np.float64)
                   for i in range(100)}
        path = tmp_path / "v.emb"
        data.write_embeddings(path, vectors)
        loaded = data.read_embeddings(path)
        assert list(loaded.keys()) == list(vectors.keys())
        for k in vectors:
            np.testing.assert_array_equal(loaded[k], vectors[k])
        # writing the loaded mapping again is byte-identical
        path2 = tmp_path / "v2.emb"
        data.write_embeddings(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.emb"
        path.write_bytes(b"")
        with pytest.raises(DataFormatError, match="empty"):
            data.read_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 16)
        with pytest.raises(DataFormatError, match="magic"):
            data.read_embeddings(path)

    def test_count_mismatch_names_expected_and_actual(self, tmp_path):
        path = tmp_path / "short.emb"
        data.write_embeddings(path, {"a": np.ones(4), "b": np.zeros(4)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])  # drop half of the final vector
        with pytest.raises(DataFormatError, match="expected .* have"):
            data.read_embeddings(path)

    def test_unicode_ids(self, tmp_path):
        path = tmp_path / "u.emb"
        data.write_embeddings(path, {"ключ-1": np.ones(2), "键-2": np.zeros(2)})
        assert set(data.read_embeddings(path)) == {"ключ-1", "键-2"}


class TestDatasetDirectory:
    def test_roundtrip(self, tmp_path):
        ds = data.gen_synthetic(40, 6, 8, 0.1, seed=8)
        data.save_dataset(ds, tmp_path / "d")
        loaded = data.load_dataset(tmp_path / "d")
        assert loaded.pairs == ds.pairs
        assert loaded.splits == ds.splits
        for k in ds.keys:
            np.testing.assert_array_equal(
                loaded.keys[k], ds.keys[k].astype(np.float32).astype(np.float64))

    def test_missing_file_reported(self, tmp_path):
        (tmp_path / "broken").mkdir()
        with pytest.raises(DataFormatError, match="missing"):
            data.load_dataset(tmp_path / "broken")

    def test_duplicate_query_pair_rejected(self):
        with pytest.raises(UsageError, match="more than one"):
            data.PairedDataset(queries={"q": np.ones(2)},
                               keys={"k1": np.ones(2), "k2": np.ones(2)},
                               pairs=[("q", "k1"), ("q", "k2")])


class TestCheckpoint:
    def _model(self):
        rng = np.random.default_rng(9)
        enc_cfg = enc.EncoderConfig(input_dim=4, hidden_dim=3, output_dim=4, depth=2)
        params = enc.init_encoder_params(enc_cfg, rng)
        params["codebook_0"] = rng.normal(size=(3, 2))
        params["codebook_1"] = rng.normal(size=(3, 2))
        return tr.Model(encoder=enc_cfg,
                        codebooks=tr.CodebookConfig(num_books=2, num_codewords=3),
                        params=params)

    def test_roundtrip_exact_float64(self, tmp_path):
        model = self._model()
        path = tmp_path / "m.ckpt"
        data.save_model(path, model, meta={"objective": "mopq-inbatch", "seed": 1})
        loaded, meta = data.load_model(path)
        assert meta["seed"] == 1
        assert loaded.encoder == model.encoder
        assert loaded.codebooks == model.codebooks
        assert list(loaded.params) == list(model.params)
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])

    def test_deterministic_bytes(self, tmp_path):
        model = self._model()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        data.save_model(a, model)
        data.save_model(b, model)
        assert a.read_bytes() == b.read_bytes()

    def test_truncation_detected(self, tmp_path):
        model = self._model()
        path = tmp_path / "t.ckpt"
        data.save_model(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(DataFormatError):
            data.load_model(path)


class TestRunConfig:
    def test_defaults_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# a comment\nobjective=mopq-dcs\ndevices = 4\nseed=7\n")
        config = cfg_mod.load_config(path)
        assert config["objective"] == "mopq-dcs"
        assert config["devices"] == 4
        assert config["epochs"] == 20  # default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("learning=fast\n")
        with pytest.raises(ConfigError, match="unknown key"):
            cfg_mod.load_config(path)

    def test_bad_value_type(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("epochs=three\n")
        with pytest.raises(ConfigError, match="epochs"):
            cfg_mod.load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            cfg_mod.load_config(tmp_path / "nope.cfg")

    def test_to_train_config(self):
        config = cfg_mod.default_config()
        config.update(objective="dqn", recon_weight=0.1, epochs=3)
        train_cfg = cfg_mod.train_config_from(config)
        assert train_cfg.objective == "dqn"
        assert train_cfg.recon_weight == 0.1
        assert train_cfg.adam_betas == (0.9, 0.999)

    def test_topn_parsing(self):
        config = cfg_mod.default_config()
        config["topn"] = "1, 10,100"
        assert cfg_mod.parse_topn(config) == [1, 10, 100]
        config["topn"] = "0"
        with pytest.raises(ConfigError):
            cfg_mod.parse_topn(config)
