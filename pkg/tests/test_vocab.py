import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timerag.errors import ConflictError, FormatError
from timerag.vocab import (
    EmbeddingTable,
    PrototypePool,
    build_prototypes,
    build_synthetic_table,
    decode_greedy,
    decode_greedy_batch,
    load_embedding_table,
    save_embedding_table,
)

# recorded at first build of the seed-0 desk-scale table
SYNTHETIC_TABLE_SHA256 = "8e0dd6971b291ab329ba720e41c3fa286cd2b0b0a33d8645c5063bc94afbb58c"


class TestEmbeddingTable:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        table = EmbeddingTable([f"t{i}" for i in range(100)], rng.standard_normal((100, 16)))
        path = tmp_path / "table.txt"
        save_embedding_table(table, path)
        loaded = load_embedding_table(path)
        assert loaded.tokens == table.tokens
        np.testing.assert_array_equal(loaded.vectors, table.vectors)

    def test_row_width_mismatch(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text('{"v": 2, "d": 3}\na\t1 2 3\nb\t1 2\n')
        with pytest.raises(FormatError, match="line 3"):
            load_embedding_table(path)

    def test_duplicate_token(self):
        with pytest.raises(ConflictError):
            EmbeddingTable(["a", "a"], np.eye(2))

    def test_header_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text('{"v": 3, "d": 1}\na\t1\nb\t2\n')
        with pytest.raises(FormatError):
            load_embedding_table(path)

    def test_vectors_frozen(self):
        table = build_synthetic_table(16, 4, seed=0)
        with pytest.raises(ValueError):
            table.vectors[0, 0] = 1.0

    def test_synthetic_checksum_stable(self):
        assert build_synthetic_table(64, 32, seed=0).content_hash() == SYNTHETIC_TABLE_SHA256
        assert build_synthetic_table(64, 32, seed=0).content_hash() == SYNTHETIC_TABLE_SHA256

    def test_label_tokens_present(self):
        from timerag.abstraction import DEFAULT_LABEL_TOKENS

        table = build_synthetic_table(32, 8, seed=1)
        for token in DEFAULT_LABEL_TOKENS:
            assert table.id_of(token) >= 0


class TestPrototypePool:
    def test_shape_contract(self):
        table = build_synthetic_table(16, 8, seed=0)
        pool = build_prototypes(table, 15, init_seed=0)
        assert pool.prototypes.shape == (15, 8)

    def test_identity_rows_select_table_rows(self):
        table = build_synthetic_table(16, 8, seed=0)
        projection = np.zeros((4, 16))
        for row, token_id in enumerate([3, 7, 11, 15]):
            projection[row, token_id] = 1.0
        pool = PrototypePool(projection, table)
        np.testing.assert_array_equal(pool.prototypes, table.vectors[[3, 7, 11, 15]])

    def test_s_bounds(self):
        table = build_synthetic_table(16, 8, seed=0)
        with pytest.raises(ValueError):
            build_prototypes(table, 16)
        with pytest.raises(ValueError):
            build_prototypes(table, 1)

    def test_init_is_seeded_uniform(self):
        table = build_synthetic_table(16, 8, seed=0)
        a = build_prototypes(table, 4, init_seed=5)
        b = build_prototypes(table, 4, init_seed=5)
        np.testing.assert_array_equal(a.projection, b.projection)
        assert np.abs(a.projection).max() <= 1.0 / table.size

    def test_projection_gradient_nonzero(self):
        # finite differences of a scalar loss through the prototype map
        table = build_synthetic_table(16, 4, seed=0)
        pool = build_prototypes(table, 3, init_seed=0)
        weights = np.random.default_rng(1).standard_normal((3, 4))

        def loss(projection):
            return float(((projection @ table.vectors) * weights).sum())

        eps = 1e-5
        for i, j in [(0, 0), (1, 3), (2, 7)]:
            p = pool.projection.copy()
            p[i, j] += eps
            up = loss(p)
            p[i, j] -= 2 * eps
            down = loss(p)
            assert abs((up - down) / (2 * eps)) > 1e-8

    def test_cache_invalidated_on_update(self):
        table = build_synthetic_table(16, 4, seed=0)
        pool = build_prototypes(table, 3, init_seed=0)
        _ = pool.prototypes
        new_projection = pool.projection * 2.0
        pool.set_projection(new_projection)
        np.testing.assert_allclose(pool.prototypes, new_projection @ table.vectors, atol=1e-12)


class TestDecodeGreedy:
    def test_one_hot_identity_table(self):
        table = EmbeddingTable([f"t{i}" for i in range(5)], np.eye(5))
        h = np.zeros(5)
        h[3] = 1.0
        token, token_id = decode_greedy(h, table)
        assert (token, token_id) == ("t3", 3)

    def test_zero_vector_ties_to_lowest_index(self):
        table = EmbeddingTable([f"t{i}" for i in range(5)], np.eye(5))
        assert decode_greedy(np.zeros(5), table)[1] == 0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        table = EmbeddingTable([f"t{i}" for i in range(50)], rng.standard_normal((50, 8)))
        for _ in range(100):
            h = rng.standard_normal(8)
            expected = max(range(50), key=lambda v: (float(table.vectors[v] @ h), -v))
            assert decode_greedy(h, table)[1] == expected

    @settings(max_examples=30, deadline=None)
    @given(st.floats(1e-6, 1e6), st.integers(0, 2**31 - 1))
    def test_scale_equivariance(self, c, seed):
        rng = np.random.default_rng(seed)
        table = EmbeddingTable([f"t{i}" for i in range(12)], rng.standard_normal((12, 6)))
        h = rng.standard_normal(6)
        assert decode_greedy(h, table)[1] == decode_greedy(c * h, table)[1]

    def test_batch_decode_agrees(self):
        rng = np.random.default_rng(8)
        table = EmbeddingTable([f"t{i}" for i in range(20)], rng.standard_normal((20, 4)))
        h = rng.standard_normal((3, 5, 4))
        ids = decode_greedy_batch(h, table)
        for b in range(3):
            for l in range(5):
                assert ids[b, l] == decode_greedy(h[b, l], table)[1]
