"""scikit-learn compatible facade over the finite network and the MF particle system."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .core import ActivationSpec, DataModel, LossSpec, Schedule, ScheduleSpec, split_seed
from .embedding import build_embedding, instantiate_coupled, sample_codes
from .finite import FiniteWeights, NetworkArch, hidden_features, predict_finite, train_finite
from .mf import integrate_mf

SOLVERS = ("sgd", "full-batch", "mf-rk4", "mf-euler")


class MeanFieldNetRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Mean-field-scaled multilayer regressor.

    Weights are drawn from a neuronal embedding and trained by SGD, full-batch
    gradient descent, or by integrating the MF ODEs with the neurons as
    particles (``solver="mf-rk4"`` / ``"mf-euler"``). Either way the fitted
    weights define the same network, so ``predict`` and ``transform`` do not
    depend on the solver.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths ``n_1 .. n_{L-1}``; the output width is always 1.
    activation : {"tanh", "logistic"}
        Hidden activation. The output activation is the identity.
    loss : {"huber", "logistic", "half-squared"}
    learning_rate : float
        ``eps`` for the discrete solvers, ``h`` for the MF solvers.
    n_steps : int
        Number of updates; MF solvers integrate up to ``T = n_steps * h``.
    lr_scale : float or sequence of float
        Constant per-layer schedule ``xi_i``; a scalar applies to every layer.
    init : {"bidiverse", "pseudo-iid"}
    random_state : int or None
    """

    def __init__(self, hidden_layer_sizes=(32, 32), activation="tanh", loss="huber", huber_delta=1.0,
                 solver="sgd", learning_rate=0.01, n_steps=1000, lr_scale=1.0, init="bidiverse",
                 latent_dim=8, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.loss = loss
        self.huber_delta = huber_delta
        self.solver = solver
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.lr_scale = lr_scale
        self.init = init
        self.latent_dim = latent_dim
        self.random_state = random_state

    def _validate_params(self, d):
        sizes = tuple(int(n) for n in np.atleast_1d(self.hidden_layer_sizes))
        if not sizes or min(sizes) < 1:
            raise ValueError("hidden_layer_sizes must be positive integers")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not isinstance(self.n_steps, numbers.Integral) or self.n_steps < 0:
            raise ValueError("n_steps must be a nonnegative integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        L = len(sizes) + 1
        acts = tuple(ActivationSpec(self.activation) for _ in sizes) + (ActivationSpec("identity", role="output"),)
        arch = NetworkArch(d, sizes + (1,), acts)
        scale = np.broadcast_to(np.asarray(self.lr_scale, dtype=float), (L,))
        sched = ScheduleSpec(tuple(Schedule("constant", float(c)) for c in scale))
        return arch, LossSpec(self.loss, float(self.huber_delta)), sched

    def fit(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=True, dtype=float)
        arch, loss, sched = self._validate_params(X.shape[1])
        seed = 0 if self.random_state is None else self.random_state
        if not isinstance(seed, numbers.Integral):
            raise ValueError("random_state must be an int or None")
        s = split_seed(int(seed), 2)
        emb = build_embedding(self.init, arch, latent_dims=max(self.latent_dim, X.shape[1]), seed=int(seed))
        pair = instantiate_coupled(emb, sample_codes(emb, arch.widths, s[0]), arch.activations)
        data = DataModel.finite(X, y)
        every = max(1, self.n_steps // 100)
        if self.solver.startswith("mf-"):
            traj = integrate_mf(pair.particles, data, loss, sched, self.learning_rate,
                                self.n_steps * self.learning_rate, self.solver[3:], checkpoint_every=every)
            weights = traj.final.to_finite()
            snapshots = [ps.to_finite() for ps in traj.states]
        else:
            weights, traj = train_finite(arch, pair.finite, data, loss, sched, self.learning_rate,
                                         self.n_steps, rng=s[1], log_every=every, mode=self.solver)
            snapshots = traj.snapshots
        self.arch_ = arch
        self.coefs_ = [w.copy() for w in weights.layers]
        self.loss_curve_ = np.array([float(np.mean(loss.value(y, predict_finite(arch, w, X))))
                                     for w in snapshots])
        self.loss_times_ = np.asarray(traj.times, dtype=float)
        return self

    def _weights(self, X):
        check_is_fitted(self, "coefs_")
        X = validate_data(self, X, dtype=float, reset=False)
        return X, FiniteWeights([w.copy() for w in self.coefs_])

    def predict(self, X):
        X, w = self._weights(X)
        return predict_finite(self.arch_, w, X)

    def transform(self, X):
        """Last hidden layer activations, shape ``(n_samples, n_{L-1})``."""
        X, w = self._weights(X)
        return hidden_features(self.arch_, w, X)

    def fit_transform(self, X, y=None, **fit_params):
        if y is None:
            raise ValueError("MeanFieldNetRegressor.fit_transform needs targets y")
        return self.fit(X, y).transform(X)
