import numpy as np
import pytest

from phgcn import autograd as ag
from phgcn.attention import (
    HeadParams,
    euclidean_logits,
    global_aggregate_exact,
    global_aggregate_lattice,
    structural_aggregate,
    structural_attention,
)
from phgcn.autograd import Tensor
from phgcn.calibration import clustered_instance, cosine_rows
from phgcn.gradcheck import aggregation_checks, check_tensors, random_graph
from phgcn.graph import Graph, from_edges
from phgcn.permutohedral import BlurKernel


def dense_structural(graph, emb, proj, lam):
    A = graph.dense_adjacency()
    dist = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
    z = np.where(A, -lam * dist, -np.inf)
    w = np.exp(z - z.max(axis=1, keepdims=True))
    return (w / w.sum(axis=1, keepdims=True)) @ proj


def dense_global(emb, proj, lam):
    dist = np.linalg.norm(emb[:, None] - emb[None], axis=-1)
    w = np.exp(-lam * dist)
    return (w / w.sum(axis=1, keepdims=True)) @ proj


class TestLogits:
    def test_coincident(self):
        emb = Tensor(np.ones((2, 4)))
        assert euclidean_logits(emb, [0], [1], 10.0).values[0] == 0.0

    def test_three_four_five(self):
        emb = Tensor([[0.0, 0, 0, 0], [3.0, 4.0, 0, 0]])
        assert euclidean_logits(emb, [1], [0], 1.0).values[0] == pytest.approx(-5.0)

    def test_homogeneous_and_symmetric(self, rng):
        emb = Tensor(rng.normal(size=(6, 4)))
        src, dst = rng.integers(6, size=10), rng.integers(6, size=10)
        one = euclidean_logits(emb, src, dst, 1.0).values
        np.testing.assert_allclose(euclidean_logits(emb, src, dst, 10.0).values, 10 * one, rtol=1e-14)
        np.testing.assert_array_equal(euclidean_logits(emb, dst, src, 1.0).values, one)


class TestStructural:
    def test_self_only(self, rng):
        g = from_edges(1, [], [], np.ones((1, 3)), [0])
        proj = Tensor(rng.normal(size=(1, 2)))
        out = structural_aggregate(g, Tensor(rng.normal(size=(1, 4))), proj, 1.0)
        np.testing.assert_allclose(out.values, ag.elu(proj).values)

    def test_identical_embeddings_uniform(self):
        g = from_edges(4, [1, 2, 3], [0, 0, 0], np.zeros((4, 1)), np.zeros(4), symmetrize=False)
        alpha = structural_attention(g, Tensor(np.ones((4, 2))), 1.0).values
        np.testing.assert_allclose(alpha[: g.indptr[1]], 0.25)

    def test_dense_reference(self, rng):
        g = random_graph(rng, 15, 40, 3)
        emb, proj = rng.normal(size=(15, 4)), rng.normal(size=(15, 5))
        out = structural_aggregate(g, Tensor(emb), Tensor(proj), 1.0, activation=None).values
        np.testing.assert_allclose(out, dense_structural(g, emb, proj, 1.0), rtol=0, atol=1e-10)

    def test_rows_sum_to_one(self, rng):
        g = random_graph(rng, 30, 90, 2)
        alpha = structural_attention(g, Tensor(5 * rng.normal(size=(30, 4))), 1.0).values
        sums = np.add.reduceat(alpha, g.indptr[:-1])
        np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)

    def test_convex_bounds(self, rng):
        g = random_graph(rng, 20, 60, 2)
        proj = rng.normal(size=(20, 3))
        out = structural_aggregate(g, Tensor(rng.normal(size=(20, 4))), Tensor(proj), 1.0,
                                   activation=None).values
        assert np.all(out >= proj.min(axis=0) - 1e-12) and np.all(out <= proj.max(axis=0) + 1e-12)

    def test_missing_self_loop(self):
        g = Graph(np.array([0, 1, 1]), np.array([0]), np.zeros((2, 1)), np.zeros(2, dtype=int))
        with pytest.raises(ValueError):
            structural_attention(g, Tensor(np.zeros((2, 2))), 1.0)


class TestGlobalExact:
    def test_single_node(self, rng):
        proj = Tensor(rng.normal(size=(1, 3)))
        out = global_aggregate_exact(Tensor(rng.normal(size=(1, 4))), proj, 10.0)
        np.testing.assert_allclose(out.values, ag.elu(proj).values)

    def test_two_nodes_closed_form(self, rng):
        emb, f = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
        w = np.exp(-10.0 * np.linalg.norm(emb[0] - emb[1]))
        out = global_aggregate_exact(Tensor(emb), Tensor(f), 10.0, activation=None).values
        np.testing.assert_allclose(out[0], (f[0] + w * f[1]) / (1 + w), rtol=1e-12)

    def test_small_decay_gives_mean(self, rng):
        emb, f = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
        out = global_aggregate_exact(Tensor(emb), Tensor(f), 1e-9, activation=None).values
        np.testing.assert_allclose(out, np.tile(f.mean(axis=0), (8, 1)), atol=1e-7)

    def test_dense_reference_and_bounds(self, rng):
        emb, f = rng.normal(size=(12, 4)), rng.normal(size=(12, 5))
        out = global_aggregate_exact(Tensor(emb), Tensor(f), 10.0, activation=None).values
        np.testing.assert_allclose(out, dense_global(emb, f, 10.0), atol=1e-12)
        assert np.all(out >= f.min(axis=0) - 1e-12) and np.all(out <= f.max(axis=0) + 1e-12)

    def test_weight_decreases_with_distance(self, rng):
        emb = rng.normal(size=(5, 4))
        f = np.zeros((5, 5))
        f[1, 1] = 1.0  # output channel 1 of node 0 reads off alpha_01
        before = global_aggregate_exact(Tensor(emb), Tensor(f), 1.0, activation=None).values[0, 1]
        emb[1] += 0.5 * (emb[1] - emb[0])
        after = global_aggregate_exact(Tensor(emb), Tensor(f), 1.0, activation=None).values[0, 1]
        assert after < before

    def test_swap_equivariance(self, rng):
        emb, f = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        perm = np.array([3, 1, 2, 0, 4, 5])
        a = global_aggregate_exact(Tensor(emb), Tensor(f), 10.0).values
        b = global_aggregate_exact(Tensor(emb[perm]), Tensor(f[perm]), 10.0).values
        np.testing.assert_allclose(b, a[perm], atol=1e-12)


class TestGlobalLattice:
    def test_identical_embeddings_give_mean(self, rng):
        emb = np.tile(rng.normal(size=(1, 4)), (30, 1))
        f = rng.normal(size=(30, 6))
        out = global_aggregate_lattice(Tensor(emb), Tensor(f), 10.0, activation=None).values
        exact = global_aggregate_exact(Tensor(emb), Tensor(f), 10.0, activation=None).values
        np.testing.assert_allclose(out, np.tile(f.mean(axis=0), (30, 1)), atol=1e-6)
        np.testing.assert_allclose(out, exact, atol=1e-6)

    def test_single_node(self, rng):
        proj = Tensor(rng.normal(size=(1, 3)))
        out = global_aggregate_lattice(Tensor(rng.normal(size=(1, 4))), proj, 10.0)
        np.testing.assert_allclose(out.values, ag.elu(proj).values, atol=1e-6)

    def test_clustered_cosine(self):
        rng = np.random.default_rng(7)
        p, f = clustered_instance(rng)
        lat = global_aggregate_lattice(Tensor(p), Tensor(f), 10.0, activation=None).values
        ex = global_aggregate_exact(Tensor(p), Tensor(f), 10.0, activation=None).values
        assert np.median(cosine_rows(lat, ex)) >= 0.95

    def test_convex_bounds(self, rng):
        p, f = 0.5 * rng.normal(size=(80, 4)), rng.normal(size=(80, 3))
        out = global_aggregate_lattice(Tensor(p), Tensor(f), 10.0, activation=None).values
        assert np.all(out >= f.min(axis=0) - 1e-12) and np.all(out <= f.max(axis=0) + 1e-12)

    def test_swap_equivariance(self, rng):
        p, f = rng.normal(size=(20, 4)), rng.normal(size=(20, 2))
        perm = rng.permutation(20)
        a = global_aggregate_lattice(Tensor(p), Tensor(f), 10.0).values
        b = global_aggregate_lattice(Tensor(p[perm]), Tensor(f[perm]), 10.0).values
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_vanishing_normalizer(self, rng):
        with pytest.raises(FloatingPointError):
            global_aggregate_lattice(Tensor(rng.normal(size=(3, 2))), Tensor(np.ones((3, 2))), 1.0,
                                     kernel=BlurKernel(np.zeros(7)))


class TestGradients:
    def test_pathways_wrt_W_and_phi(self):
        for r in aggregation_checks(np.random.default_rng(3)):
            assert r.passed, (r.name, r.max_rel_error)

    @pytest.mark.parametrize("kind, tol", [("structural", 1e-4), ("exact", 1e-4), ("lattice", 1e-3)])
    def test_pathways_wrt_inputs(self, rng, kind, tol):
        g = random_graph(rng, 8, 20, 4)
        h = Tensor(g.features, requires_grad=True)
        head = HeadParams(Tensor(0.3 * rng.normal(size=(3, 4))), Tensor(0.3 * rng.normal(size=(4, 3))))
        wo = rng.normal(size=(8, 3))

        def loss():
            proj = head.project(h)
            emb = head.embed(proj)
            if kind == "structural":
                out = structural_aggregate(g, emb, proj, 1.0)
            elif kind == "exact":
                out = global_aggregate_exact(emb, proj, 10.0)
            else:
                out = global_aggregate_lattice(emb, proj, 10.0)
            return (out * wo).sum()

        r = check_tensors(kind, loss, [h], tol)
        assert r.passed, r.max_rel_error


def test_head_params_validation(rng):
    with pytest.raises(ValueError):
        HeadParams(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError):
        HeadParams(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 3))), lam_struct=0.0)
