"""Neuronal embeddings: initialization functions over latent code spaces.

Two schemes are provided.

``bidiverse``
    ``w_1(c_1) = A c_1[:d]`` with a fixed orthogonal ``A`` (scaled by
    ``gain``), and for ``i >= 2`` a random tanh series jointly continuous in
    both codes::

        w_i(c_{i-1}, c_i) = R^{-1/2} sum_r a_r tanh(<u_r, c_{i-1}> + <v_r, c_i> + b_r)

    Its span is rich as a function of either argument, which is what the
    two-sided diversity requirement asks of a correlated initialization.

``pseudo-iid``
    ``w_i = gamma_i Phi^{-1}(hash(quantized codes, seed))``: a deterministic
    measurable function whose values on distinct code pairs look like
    independent standard gaussians. Negative control for depth >= 3.

The output layer's code space is a singleton, represented by codes with zero
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .core import ActivationSpec, as_seed_sequence, make_rng, split_seed, tree_sum
from .errors import ConfigurationError, StructuralError
from .finite import FiniteWeights, NetworkArch
from .mf import ParticleSystem

SCHEMES = ("bidiverse", "pseudo-iid")
LAWS = ("gaussian", "uniform-cube")
QUANTUM = 1e-9

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class LatentSpace:
    """Latent dimensions ``m_1..m_{L-1}`` and a common law; ``Omega_L`` is a singleton."""

    dims: tuple[int, ...]
    law: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(m) for m in self.dims))
        if any(m < 1 for m in self.dims):
            raise ConfigurationError("latent dimensions must be at least 1")
        if self.law not in LAWS:
            raise ConfigurationError(f"unknown latent law {self.law!r}")

    @property
    def L(self) -> int:
        return len(self.dims) + 1

    def dim(self, i: int) -> int:
        return 0 if i == self.L else self.dims[i - 1]

    def sample(self, i: int, n: int, rng: np.random.Generator) -> np.ndarray:
        m = self.dim(i)
        if m == 0:
            return np.zeros((n, 0))
        if self.law == "gaussian":
            return rng.standard_normal((n, m))
        return rng.uniform(-1.0, 1.0, (n, m))


@dataclass
class SeriesLayer:
    """Coefficients of one random tanh series: ``U (R, m_prev)``, ``V (R, m_next)``, ``b``, ``a``.

    ``offset`` is subtracted from every value so the layer is centered.
    """

    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    a: np.ndarray
    offset: float = 0.0


@dataclass
class NeuronalEmbedding:
    """Latent space plus evaluable initialization functions ``w_1^0 .. w_L^0``."""

    latent: LatentSpace
    d: int
    scheme: str
    seed: int
    first: np.ndarray                       # A for bidiverse; unused for pseudo-iid
    series: list[SeriesLayer] = field(default_factory=list)
    gammas: tuple[float, ...] = ()
    build_args: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return self.latent.L

    def w1(self, C1) -> np.ndarray:
        """``(n_1, d)`` first-layer weights."""
        C1 = np.asarray(C1, dtype=float)
        if self.scheme == "bidiverse":
            return _rowdot(C1[:, :self.d], self.first)
        hp = _hash_codes(C1, self._salt(1))
        with np.errstate(over="ignore"):
            cols = [_mix(hp + np.uint64(k + 1) * _GOLDEN) for k in range(self.d)]
        return self.gammas[0] * _gauss(np.stack(cols, axis=1))

    def wi(self, i: int, C_prev, C_next, pairs: bool = False) -> np.ndarray:
        """Layer ``i >= 2`` weights on all code pairs ``(n_prev, n_next)``.

        With ``pairs=True`` the two code arrays are matched row by row and a
        vector is returned.
        """
        C_prev = np.asarray(C_prev, dtype=float)
        C_next = np.asarray(C_next, dtype=float)
        if self.scheme == "pseudo-iid":
            hp = _hash_codes(C_prev, self._salt(i))
            hn = _mix(_hash_codes(C_next, self._salt(-i)))
            h = _mix(hp ^ hn) if pairs else _mix(hp[:, None] ^ hn[None, :])
            return self.gammas[i - 1] * _gauss(h)
        s = self.series[i - 2]
        p = _rowdot(C_prev, s.U) + s.b
        q = _rowdot(C_next, s.V)
        scale = 1.0 / np.sqrt(len(s.a))
        if pairs:
            return tree_sum(np.tanh(p + q) * s.a, axis=-1) * scale - s.offset
        out = np.empty((len(p), len(q)))
        rows = max(1, 2_000_000 // max(1, len(q) * len(s.a)))
        for r in range(0, len(p), rows):
            out[r:r + rows] = tree_sum(np.tanh(p[r:r + rows, None, :] + q[None, :, :]) * s.a, axis=-1) * scale - s.offset
        return out

    def _salt(self, i):
        return np.uint64((self.seed * 1_000_003 + 7919 * (i + 64)) % (1 << 64))


def _rowdot(A, B):
    """``A @ B.T`` with a fixed summation order, so every entry is independent of the batch."""
    return tree_sum(A[:, None, :] * B[None, :, :], axis=-1)


def _mix(z):
    """splitmix64 finalizer on uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z ^ (z >> np.uint64(30))
        z = z * _MIX1
        z = z ^ (z >> np.uint64(27))
        z = z * _MIX2
        return z ^ (z >> np.uint64(31))


def _hash_codes(C, salt):
    q = np.round(C / QUANTUM).astype(np.int64).view(np.uint64)
    h = np.full(C.shape[0], salt, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in range(C.shape[1]):
            h = _mix((h ^ q[:, k]) + _GOLDEN)
    return h


def _gauss(h):
    u = ((h >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53
    return ndtri(u)


def build_embedding(scheme: str, arch: NetworkArch, latent_dims=8, seed: int = 0,
                    n_features: int = 64, law: str = "gaussian", gain: float = 1.0,
                    frequency: float = 2.0, gammas=None) -> NeuronalEmbedding:
    """Construct an embedding for ``arch``.

    ``latent_dims`` is one int for every hidden layer or a sequence of
    ``L-1`` ints. Each bidiverse series layer is centered and rescaled so
    that its values over random code pairs have mean 0 and standard
    deviation ``gain``; the first-layer
    map is ``gain`` times an orthogonal matrix. ``frequency`` is the standard
    deviation of the inner products inside the tanh features. ``gammas``
    (default all ones) scale the pseudo-iid layers.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown embedding scheme {scheme!r}")
    L = arch.L
    dims = (latent_dims,) * (L - 1) if np.isscalar(latent_dims) else tuple(latent_dims)
    if len(dims) != L - 1:
        raise ConfigurationError(f"need {L - 1} latent dimensions, got {len(dims)}")
    latent = LatentSpace(dims, law)
    rng = make_rng([seed, 0x5EED])
    if scheme == "pseudo-iid":
        g = (1.0,) * L if gammas is None else tuple(float(x) for x in gammas)
        if len(g) != L:
            raise ConfigurationError(f"need {L} gammas")
        return NeuronalEmbedding(latent, arch.d, scheme, seed, np.zeros((0, 0)), [], g,
                                 {"gammas": list(g)})

    if n_features <= 0:
        raise ConfigurationError("the series needs at least one feature")
    if dims[0] < arch.d:
        raise ConfigurationError(f"first latent dimension {dims[0]} is smaller than d={arch.d}")
    Q, R = np.linalg.qr(rng.standard_normal((arch.d, arch.d)))
    A = gain * Q * np.sign(np.diag(R))
    if np.linalg.cond(A) > 1e12 or gain == 0:
        raise ConfigurationError("first-layer map is degenerate")
    series = []
    for i in range(2, L + 1):
        m_prev, m_next = latent.dim(i - 1), latent.dim(i)
        U = frequency * rng.standard_normal((n_features, m_prev)) / np.sqrt(m_prev)
        V = frequency * rng.standard_normal((n_features, m_next)) / np.sqrt(max(m_next, 1))
        b = rng.standard_normal(n_features)
        a = rng.standard_normal(n_features)
        series.append(SeriesLayer(U, V, b, a))
    emb = NeuronalEmbedding(latent, arch.d, scheme, seed, A, series, (),
                            {"n_features": n_features, "gain": gain, "frequency": frequency})
    probe = make_rng([seed, 0xA11])
    for i, s in enumerate(series, start=2):
        values = emb.wi(i, latent.sample(i - 1, 8192, probe), latent.sample(i, 8192, probe), pairs=True)
        s.a = s.a * (gain / np.std(values))
        s.offset = gain * float(np.mean(values) / np.std(values))
    return emb


@dataclass
class LatentCodes:
    """Codes per layer: ``codes[i-1]`` has shape ``(n_i, m_i)``; the last layer is ``(1, 0)``."""

    codes: list[np.ndarray]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.codes)


def sample_codes(embedding: NeuronalEmbedding, widths, rng=0) -> LatentCodes:
    """Draw ``n_i`` i.i.d. codes per layer, with an independent stream per layer."""
    widths = tuple(int(n) for n in widths)
    if len(widths) != embedding.L or widths[-1] != 1:
        raise StructuralError(f"widths {widths} do not fit an {embedding.L}-layer embedding")
    if isinstance(rng, np.random.Generator):
        gens = [rng] * embedding.L
    else:
        gens = [make_rng(s) for s in split_seed(rng, embedding.L)]
    return LatentCodes([embedding.latent.sample(i + 1, n, g) for i, (n, g) in enumerate(zip(widths, gens))])


def evaluate_weights(embedding: NeuronalEmbedding, codes: LatentCodes) -> list[np.ndarray]:
    if len(codes.codes) != embedding.L:
        raise StructuralError("codes do not match the embedding depth")
    for i, c in enumerate(codes.codes):
        if c.ndim != 2 or c.shape[1] != embedding.latent.dim(i + 1):
            raise StructuralError(f"codes of layer {i + 1} have shape {c.shape}")
    C = codes.codes
    return [embedding.w1(C[0])] + [embedding.wi(i, C[i - 2], C[i - 1]) for i in range(2, embedding.L + 1)]


@dataclass
class CoupledPair:
    """A finite network and a particle system read off the same codes."""

    arch: NetworkArch
    finite: FiniteWeights
    particles: ParticleSystem
    codes: LatentCodes


def instantiate_coupled(embedding: NeuronalEmbedding, codes: LatentCodes,
                        activations: tuple[ActivationSpec, ...] | None = None) -> CoupledPair:
    layers = evaluate_weights(embedding, codes)
    arch = NetworkArch(embedding.d, codes.widths, activations)
    finite = FiniteWeights([w.copy() for w in layers])
    finite.check(arch)
    return CoupledPair(arch, finite, ParticleSystem(layers, 0.0, arch.activations), codes)


@dataclass
class TrackedPair:
    """A finite network plus a larger MF reference that carries its codes as tracers.

    The reference has ``reference_size`` background particles per hidden
    layer that define every expectation, followed by the finite network's
    codes as zero-mass tracers. ``index[i-1]`` locates the finite neurons of
    layer ``i`` inside the reference.
    """

    arch: NetworkArch
    finite: FiniteWeights
    particles: ParticleSystem
    codes: LatentCodes
    background: LatentCodes
    index: list[np.ndarray]


def instantiate_tracked(embedding: NeuronalEmbedding, codes: LatentCodes, reference_size: int,
                        rng=0, activations=None) -> TrackedPair:
    pair = instantiate_coupled(embedding, codes, activations)
    L = embedding.L
    bg = sample_codes(embedding, (reference_size,) * (L - 1) + (1,), rng)
    joint = LatentCodes([np.concatenate([b, c]) for b, c in zip(bg.codes[:-1], codes.codes[:-1])]
                        + [codes.codes[-1]])
    layers = evaluate_weights(embedding, joint)
    masses = []
    index = []
    for n in codes.widths[:-1]:
        m = np.zeros(reference_size + n)
        m[:reference_size] = 1.0 / reference_size
        masses.append(m)
        index.append(np.arange(reference_size, reference_size + n))
    index.append(np.zeros(1, dtype=int))
    ps = ParticleSystem(layers, 0.0, pair.arch.activations, masses)
    return TrackedPair(pair.arch, pair.finite, ps, codes, bg, index)


# ---------------------------------------------------------------------------
# conformance proxies
# ---------------------------------------------------------------------------

def sample_weights(embedding: NeuronalEmbedding, i: int, n: int, rng) -> np.ndarray:
    """``n`` initial weights of layer ``i`` at i.i.d. codes (layer 1: row norms of ``w_1``)."""
    lat = embedding.latent
    if i == 1:
        return np.linalg.norm(embedding.w1(lat.sample(1, n, rng)), axis=1)
    return embedding.wi(i, lat.sample(i - 1, n, rng), lat.sample(i, n, rng), pairs=True)


def moment_proxy(embedding: NeuronalEmbedding, n_samples: int = 100_000, kmax: int = 8,
                 rng=0) -> list[float]:
    """Per layer ``max_{k <= kmax} k^{-1/2} (mean |w|^k)^{1/k}`` over i.i.d. code draws."""
    gen = make_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = []
    for i in range(1, embedding.L + 1):
        a = np.abs(sample_weights(embedding, i, n_samples, gen))
        out.append(max(k ** -0.5 * np.mean(a ** k) ** (1.0 / k) for k in range(1, kmax + 1)))
    return out


def gram_ratio(embedding: NeuronalEmbedding, i: int, direction: str = "forward",
               n_functions: int = 64, n_quadrature: int = 512, rng=0) -> float:
    """Smallest over largest eigenvalue of an empirical Gram matrix at layer ``i``.

    ``forward``: the functions ``c_{i-1} -> w_i(c_{i-1}, C_i(j))``;
    ``backward``: ``c_i -> w_i(C_{i-1}(j), c_i)``. Inner products are
    averages over ``n_quadrature`` fresh codes.
    """
    if not 2 <= i <= embedding.L - 1:
        raise StructuralError(f"Gram proxies are defined for layers 2..{embedding.L - 1}")
    gen = make_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lat = embedding.latent
    if direction == "forward":
        F = embedding.wi(i, lat.sample(i - 1, n_quadrature, gen), lat.sample(i, n_functions, gen))
    elif direction == "backward":
        F = embedding.wi(i, lat.sample(i - 1, n_functions, gen), lat.sample(i, n_quadrature, gen)).T
    else:
        raise ConfigurationError(f"unknown direction {direction!r}")
    eig = np.linalg.eigvalsh(F.T @ F / n_quadrature)
    return float(eig[0] / eig[-1]) if eig[-1] > 0 else 0.0


def embedding_meta(embedding: NeuronalEmbedding) -> dict:
    """Header fields from which :func:`embedding_from_meta` rebuilds the embedding."""
    meta = {"scheme": embedding.scheme, "seed": embedding.seed, "d": embedding.d,
            "L": embedding.L, "latent_dims": list(embedding.latent.dims),
            "law": embedding.latent.law}
    meta.update(embedding.build_args)
    return meta


def embedding_from_meta(meta: dict) -> NeuronalEmbedding:
    arch = NetworkArch(meta["d"], (1,) * meta["L"])
    kwargs = {k: meta[k] for k in ("n_features", "gain", "frequency", "gammas") if k in meta}
    return build_embedding(meta["scheme"], arch, meta["latent_dims"], meta["seed"],
                           law=meta["law"], **kwargs)
