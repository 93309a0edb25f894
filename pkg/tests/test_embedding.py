import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mflab.core import make_rng
from mflab.embedding import (LatentCodes, LatentSpace, build_embedding, evaluate_weights, gram_ratio,
                             instantiate_coupled, instantiate_tracked, moment_proxy, sample_codes,
                             sample_weights)
from mflab.errors import ConfigurationError, StructuralError
from mflab.finite import NetworkArch

ARCH = NetworkArch(2, (5, 4, 3, 1))
SCHEMES = ["bidiverse", "pseudo-iid"]


@pytest.mark.parametrize("scheme", SCHEMES)
def test_deterministic_construction(scheme):
    a, b = build_embedding(scheme, ARCH, seed=3), build_embedding(scheme, ARCH, seed=3)
    codes = sample_codes(a, ARCH.widths, 1)
    for x, y in zip(evaluate_weights(a, codes), evaluate_weights(b, codes)):
        assert x.tobytes() == y.tobytes()


@pytest.mark.parametrize("scheme", SCHEMES)
def test_seed_changes_functions(scheme):
    codes = sample_codes(build_embedding(scheme, ARCH, seed=0), ARCH.widths, 1)
    w0 = evaluate_weights(build_embedding(scheme, ARCH, seed=0), codes)
    w1 = evaluate_weights(build_embedding(scheme, ARCH, seed=1), codes)
    assert not np.allclose(w0[1], w1[1])


def test_zero_series_gives_zero_weights():
    emb = build_embedding("bidiverse", ARCH, seed=0)
    emb.series = [dataclasses.replace(s, a=np.zeros_like(s.a), offset=0.0) for s in emb.series]
    codes = sample_codes(emb, ARCH.widths, 0)
    for w in evaluate_weights(emb, codes)[1:]:
        assert np.all(w == 0)


def test_pseudo_iid_gaussian_fourth_moment():
    emb = build_embedding("pseudo-iid", ARCH, seed=0, gammas=(1.0,) * ARCH.L)
    w = sample_weights(emb, 2, 100_000, make_rng(0))
    assert 2.6 <= np.mean(w ** 4) <= 3.4
    assert abs(np.mean(w)) < 0.02 and abs(np.std(w) - 1) < 0.02


def test_pseudo_iid_hash_depends_only_on_codes():
    emb = build_embedding("pseudo-iid", ARCH, seed=0)
    lat = emb.latent
    g = make_rng(1)
    P, N = lat.sample(1, 4, g), lat.sample(2, 3, g)
    full = emb.wi(2, P, N)
    again = emb.wi(2, P[[2, 0]], N[[1]])
    np.testing.assert_array_equal(again, full[np.ix_([2, 0], [1])])


@pytest.mark.parametrize("scheme", SCHEMES)
@given(seed=st.integers(0, 1000))
def test_pairs_match_grid(scheme, seed):
    emb = build_embedding(scheme, ARCH, seed=2)
    g = make_rng(seed)
    P, N = emb.latent.sample(2, 6, g), emb.latent.sample(3, 6, g)
    np.testing.assert_allclose(emb.wi(3, P, N, pairs=True), np.diag(emb.wi(3, P, N)), atol=1e-13)


class TestBuildErrors:
    def test_nonpositive_features(self):
        with pytest.raises(ConfigurationError):
            build_embedding("bidiverse", ARCH, n_features=0)

    def test_latent_smaller_than_input(self):
        with pytest.raises(ConfigurationError):
            build_embedding("bidiverse", NetworkArch(5, (3, 1)), latent_dims=3)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationError):
            build_embedding("orthogonal", ARCH)


class TestCodes:
    def test_unit_widths(self):
        emb = build_embedding("bidiverse", ARCH)
        codes = sample_codes(emb, (1, 1, 1, 1), 0)
        assert codes.widths == (1, 1, 1, 1)

    def test_same_seed_same_codes(self):
        emb = build_embedding("bidiverse", ARCH)
        a, b = sample_codes(emb, ARCH.widths, 9), sample_codes(emb, ARCH.widths, 9)
        for x, y in zip(a.codes, b.codes):
            np.testing.assert_array_equal(x, y)

    def test_gaussian_code_mean(self):
        lat = LatentSpace((8,), "gaussian")
        C = lat.sample(1, 10_000, make_rng(0))
        assert np.all(np.abs(C.mean(axis=0)) <= 0.05)

    def test_uniform_law_in_cube(self):
        lat = LatentSpace((3, 3), "uniform-cube")
        C = lat.sample(1, 1000, make_rng(0))
        assert np.all(np.abs(C) <= 1) and abs(C.mean()) < 0.05

    def test_wider_draws_extend_narrower(self):
        emb = build_embedding("bidiverse", ARCH)
        small = sample_codes(emb, (3, 2, 2, 1), 4)
        big = sample_codes(emb, (7, 6, 5, 1), 4)
        for s, b in zip(small.codes, big.codes):
            np.testing.assert_array_equal(b[:len(s)], s)

    def test_width_shape_mismatch(self):
        with pytest.raises(StructuralError):
            sample_codes(build_embedding("bidiverse", ARCH), (3, 1), 0)


class TestInstantiation:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_single_neuron_layers(self, scheme):
        emb = build_embedding(scheme, ARCH, seed=1)
        codes = sample_codes(emb, (1, 1, 1, 1), 2)
        pair = instantiate_coupled(emb, codes)
        np.testing.assert_array_equal(pair.finite.layers[0], emb.w1(codes.codes[0]))
        for i in range(2, 5):
            np.testing.assert_array_equal(pair.finite.layers[i - 1],
                                          emb.wi(i, codes.codes[i - 2], codes.codes[i - 1]))

    def test_coupled_pair_shares_values(self):
        emb = build_embedding("bidiverse", ARCH, seed=1)
        pair = instantiate_coupled(emb, sample_codes(emb, ARCH.widths, 2))
        for a, b in zip(pair.finite.layers, pair.particles.layers):
            np.testing.assert_array_equal(a, b)
        assert pair.arch.widths == ARCH.widths

    def test_tracked_pair(self):
        emb = build_embedding("bidiverse", ARCH, seed=1)
        codes = sample_codes(emb, ARCH.widths, 2)
        tp = instantiate_tracked(emb, codes, 16, rng=3)
        ps = tp.particles
        assert ps.widths == (16 + 5, 16 + 4, 16 + 3, 1)
        for m, n in zip(ps.masses, ARCH.widths):
            assert np.all(m[16:] == 0) and m[:16].sum() == pytest.approx(1.0)
            assert len(m) == 16 + n
        from mflab.diagnostics import _restrict
        for a, b in zip(_restrict(ps.layers, tp.index), tp.finite.layers):
            np.testing.assert_array_equal(a, b)

    def test_codes_with_wrong_layer_count(self):
        emb = build_embedding("bidiverse", ARCH)
        with pytest.raises(StructuralError):
            evaluate_weights(emb, LatentCodes([np.zeros((2, 8)), np.zeros((1, 8))]))


class TestConformanceProxies:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_moment_proxy_finite(self, scheme):
        K = moment_proxy(build_embedding(scheme, ARCH, seed=0), n_samples=20_000)
        assert len(K) == ARCH.L and all(np.isfinite(k) and k > 0 for k in K)

    @pytest.mark.parametrize("scheme", SCHEMES)
    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_gram_ratio_nondegenerate(self, scheme, direction):
        emb = build_embedding(scheme, ARCH, seed=0)
        assert gram_ratio(emb, 2, direction) >= 1e-6

    def test_gram_ratio_layer_range(self):
        with pytest.raises(StructuralError):
            gram_ratio(build_embedding("bidiverse", ARCH), 4)
