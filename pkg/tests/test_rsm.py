import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amekd.errors import InvalidArgumentError
from amekd.numerics import finite_diff_grad, relative_error
from amekd.rsm import (
    ProjectionPair,
    apply_projections,
    assemble_manifold,
    circular_conv,
    entropy_and_grad,
    manifold_entropy_grad,
    resample_matrix,
)
from amekd.synthgen import ClassGeometry, generate


def identity_pair(d, kernel=(0.0, 1.0, 0.0)):
    return ProjectionPair(np.array(kernel), 0.0, np.eye(d), np.zeros(d), activation="identity")


class TestProjections:
    def test_identity_mlp(self):
        rng = np.random.default_rng(0)
        texts, images = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        w, _ = apply_projections(identity_pair(5), texts, images)
        np.testing.assert_array_equal(w, texts)

    def test_delta_kernel(self):
        rng = np.random.default_rng(1)
        texts, images = rng.normal(size=(2, 6)), rng.normal(size=(4, 6))
        _, v = apply_projections(identity_pair(6), texts, images)
        np.testing.assert_array_equal(v, images)

    def test_box_kernel_wraparound(self):
        # hand convolution with circular padding
        out = circular_conv(np.array([[1.0, 0.0, 0.0, 0.0]]), np.full(3, 1 / 3))
        np.testing.assert_allclose(out[0], [1 / 3, 1 / 3, 0.0, 1 / 3], atol=1e-15)

    def test_conv_matches_loop(self):
        rng = np.random.default_rng(2)
        x, k = rng.normal(size=(3, 7)), rng.normal(size=5)
        expected = np.array([[sum(k[i] * row[(m + i - 2) % 7] for i in range(5)) for m in range(7)]
                             for row in x])
        np.testing.assert_allclose(circular_conv(x, k), expected, atol=1e-13)

    def test_output_width(self):
        p = ProjectionPair.init_random(16, 8, seed=3)
        w, v = apply_projections(p, np.ones((4, 16)), np.ones((5, 16)))
        assert w.shape == (4, 8) and v.shape == (5, 8)

    def test_dimension_mismatch(self):
        p = ProjectionPair.init_random(16, 8, seed=3)
        with pytest.raises(InvalidArgumentError):
            apply_projections(p, np.ones((4, 15)), np.ones((5, 16)))
        with pytest.raises(InvalidArgumentError):
            apply_projections(p, np.ones((4, 16)), np.ones((5, 12)))

    def test_even_kernel_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ProjectionPair(np.ones(2), 0.0, np.eye(3), np.zeros(3))

    @pytest.mark.parametrize("d,r", [(16, 8), (8, 4), (6, 4), (4, 6), (5, 5)])
    def test_resample_columns_average(self, d, r):
        a = resample_matrix(d, r)
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.ones(d) @ a, np.ones(r), atol=1e-12)

    def test_resample_identity_when_equal(self):
        np.testing.assert_array_equal(resample_matrix(4, 4), np.eye(4))

    def test_tanh_bounds_scores(self):
        p = ProjectionPair.init_random(8, 4, seed=0, scale=5.0)
        w, v = apply_projections(p, np.ones((3, 8)) * 10, np.ones((3, 8)) * 10)
        assert np.all(np.abs(w) <= 1) and np.all(np.abs(v) <= 1)

    def test_checkpoint_round_trip(self, tmp_path):
        p = ProjectionPair.init_random(16, 8, kernel_size=5, seed=4)
        p.save(tmp_path / "proj.json")
        back = ProjectionPair.load(tmp_path / "proj.json")
        assert np.array_equal(back.flat(), p.flat())
        assert back.kernel_size == 5 and back.manifold_dim == 8

    def test_init_range_and_determinism(self):
        a = ProjectionPair.init_random(16, 8, seed=7)
        b = ProjectionPair.init_random(16, 8, seed=7)
        assert np.array_equal(a.flat(), b.flat())
        assert np.all(np.abs(a.flat()) <= 0.1)


class TestManifold:
    def test_shapes(self):
        m = assemble_manifold(np.zeros((2, 4)), np.ones((3, 4)))
        assert m.M.shape == (5, 4)
        assert m.scores.shape == (5,) and m.probs.shape == (5,)

    def test_text_rows_first(self):
        w, v = np.full((2, 3), 7.0), np.full((3, 3), -1.0)
        m = assemble_manifold(w, v)
        np.testing.assert_array_equal(m.M[:2], w)
        np.testing.assert_array_equal(m.M[2:], v)

    def test_identical_rows_uniform(self):
        m = assemble_manifold(np.ones((2, 4)), np.ones((3, 4)))
        np.testing.assert_allclose(m.probs, 0.2, atol=1e-15)
        assert m.entropy_value == pytest.approx(math.log(5), abs=1e-12)

    def test_scalar_example(self):
        m = assemble_manifold(np.array([[2.0, 2.0]]), np.zeros((2, 2)))
        z = math.exp(2) + 2
        p = [math.exp(2) / z, 1 / z, 1 / z]
        h = -sum(q * math.log(q) for q in p)
        np.testing.assert_allclose(m.probs, p, atol=1e-14)
        np.testing.assert_allclose(m.probs, [0.78699, 0.10650, 0.10650], atol=1e-5)
        assert m.entropy_value == pytest.approx(h, abs=1e-14)
        assert m.entropy_value == pytest.approx(0.665573, abs=1e-6)

    def test_column_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            assemble_manifold(np.ones((2, 3)), np.ones((2, 4)))

    def test_row_permutation_invariant(self):
        rng = np.random.default_rng(5)
        w, v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
        h = assemble_manifold(w, v).entropy_value
        perm = rng.permutation(9)
        allrows = np.vstack([w, v])[perm]
        assert assemble_manifold(allrows[:3], allrows[3:]).entropy_value == pytest.approx(h, abs=1e-12)


class TestEntropyGrad:
    def test_uniform_zero(self):
        g_s, g_m = manifold_entropy_grad(assemble_manifold(np.ones((2, 3)), np.ones((2, 3))))
        np.testing.assert_allclose(g_s, 0.0, atol=1e-15)
        np.testing.assert_allclose(g_m, 0.0, atol=1e-15)

    def test_scalar_example(self):
        m = assemble_manifold(np.array([[2.0, 2.0]]), np.zeros((2, 2)))
        g_s, g_m = manifold_entropy_grad(m)
        # -p_j (ln p_j + H) evaluated by hand, cross-checked by central differences on s
        np.testing.assert_allclose(g_s, [-0.335278, 0.167639, 0.167639], atol=1e-6)
        assert abs(g_s.sum()) <= 1e-10
        np.testing.assert_allclose(g_m, np.repeat(g_s[:, None] / 2, 2, axis=1))

    def test_matches_finite_differences_on_scores(self):
        rng = np.random.default_rng(3)
        M = rng.normal(size=(7, 4))
        g_s, g_m = manifold_entropy_grad(assemble_manifold(M[:2], M[2:]))

        def h_of_m(flat):
            x = flat.reshape(7, 4)
            return assemble_manifold(x[:2], x[2:]).entropy_value

        assert relative_error(g_m.ravel(), finite_diff_grad(h_of_m, M.ravel())) <= 1e-5

    @given(arrays(np.float64, (6, 3), elements=st.floats(-4, 4)))
    def test_zero_sum(self, M):
        g_s, _ = manifold_entropy_grad(assemble_manifold(M[:2], M[2:]))
        assert abs(g_s.sum()) <= 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_parameter_gradient(self, seed):
        rng = np.random.default_rng(seed)
        d, r = int(rng.choice([8, 16])), int(rng.choice([4, 8]))
        texts = rng.normal(size=(3, d))
        images = rng.normal(size=(5, d))
        p = ProjectionPair.init_random(d, r, seed=seed, scale=0.5)
        _, g, g_texts = entropy_and_grad(p, texts, images)
        fd = finite_diff_grad(lambda x: entropy_and_grad(p.with_flat(x), texts, images)[0].entropy_value,
                              p.flat())
        assert relative_error(g, fd) <= 1e-5
        fd_t = finite_diff_grad(
            lambda x: entropy_and_grad(p, x.reshape(texts.shape), images)[0].entropy_value, texts.ravel())
        assert relative_error(g_texts.ravel(), fd_t) <= 1e-5


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_entropy_only_descent_collapses_rows(seed):
    data = generate(ClassGeometry(), 4, seed)
    texts, images = data.texts, data.images[:8]
    p = ProjectionPair.init_random(16, 8, seed=seed)
    medians, max_p = [], []
    for _ in range(500):
        m, g, _ = entropy_and_grad(p, texts, images)
        dists = np.linalg.norm(m.M[:, None] - m.M[None], axis=2)[np.triu_indices(m.M.shape[0], 1)]
        medians.append(float(np.median(dists)))
        max_p.append(float(m.probs.max()))
        p = p.with_flat(p.flat() - 0.25 * g)
    tail = np.diff(medians[-101:])
    assert max_p[-1] >= 0.9 or np.all(tail < 0)
    assert medians[-1] < medians[0]
