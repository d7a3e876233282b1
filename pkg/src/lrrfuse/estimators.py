"""scikit-learn style front ends.

``LLRRDecomposer`` is a transformer over patch vectors (rows of ``X``), in
the spirit of ``sklearn.decomposition.SparseCoder``: ``transform`` returns
the stacked coefficients, ``decompose`` the base and salient parts, and
``decompose_image`` works on whole images through overlapping patches.

``LRRNetFusion`` wraps the fusion network: ``fit`` trains on paired images
and ``transform``/``predict`` fuse them.  Pairs are passed as an array of
shape ``(n_pairs, 2, H, W)`` holding infrared in slot 0 and visible in
slot 1, all intensities in [0, 1].
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_extraction.image import extract_patches_2d, reconstruct_from_patches_2d
from sklearn.utils.validation import check_array, check_is_fitted

from . import lista
from . import network as net
from .errors import ContractError, ShapeError
from .loss import LossConfig
from .trainer import ArrayDataset, TrainConfig, train


class LLRRDecomposer(TransformerMixin, BaseEstimator):
    """Low-rank plus sparse coding of patch vectors with a fixed dictionary pair.

    Parameters
    ----------
    patch_size : int
        Side of the square patches; rows of ``X`` have ``patch_size**2`` entries.
    n_low : int or None
        Number of base atoms when no dictionary is given (DCT default).
    dictionary : DictionaryPair or None
        Fixed ``(D1, D2)``; ``None`` uses the frequency-split DCT basis.
    lam1, lam2, lam3 : float
        Low-rank, sparse and dictionary penalties.
    mu : float or None
        Step size; ``None`` uses ``0.9 / ||D^T D||_2``.
    n_iter : int
        Number of shrinkage steps ``T``.
    """

    def __init__(self, patch_size=8, n_low=None, dictionary=None, lam1=0.1, lam2=0.1, lam3=0.1, mu=None, n_iter=10):
        self.patch_size = patch_size
        self.n_low = n_low
        self.dictionary = dictionary
        self.lam1 = lam1
        self.lam2 = lam2
        self.lam3 = lam3
        self.mu = mu
        self.n_iter = n_iter

    def fit(self, X=None, y=None):
        """Resolve the dictionary and step size; no learning happens here."""
        d = self.dictionary if self.dictionary is not None else lista.dct_dictionary(self.patch_size, self.n_low)
        if d.n != self.patch_size**2:
            raise ShapeError(f"dictionary rows {d.n} do not match patch_size {self.patch_size}")
        self.dictionary_ = d
        self.mu_ = self.mu if self.mu is not None else lista.default_step(d.D)
        self.n_features_in_ = d.n
        if X is not None:
            self._validate(X)
        return self

    def _validate(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _solve(self, X, history=None):
        check_is_fitted(self, "dictionary_")
        X = self._validate(X)
        prob = lista.LlrrProblem(X.T, self.lam1, self.lam2, self.lam3, self.mu_, self.n_iter)
        return lista.llrr_decompose_matrix(prob, self.dictionary_, history)

    def transform(self, X):
        """Coefficients ``(L; S)`` transposed to shape ``(n_samples, m1 + m2)``."""
        return self._solve(X)[2].Z.T

    def decompose(self, X, history=None):
        """``(P_l, P_s)`` as row matrices shaped like ``X``."""
        P_l, P_s, _ = self._solve(X, history)
        return P_l.T, P_s.T

    def inverse_transform(self, codes):
        check_is_fitted(self, "dictionary_")
        codes = check_array(codes, dtype=np.float64)
        return codes @ self.dictionary_.D.T

    def decompose_image(self, image, history=None):
        """Base and salient images from all overlapping patches, averaged back."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ShapeError(f"expected a 2-D gray image, got shape {image.shape}")
        p = self.patch_size
        if min(image.shape) < p:
            raise ShapeError(f"image {image.shape} is smaller than the {p}x{p} patch")
        patches = extract_patches_2d(image, (p, p)).reshape(-1, p * p)
        P_l, P_s = self.decompose(patches, history)
        base = reconstruct_from_patches_2d(P_l.reshape(-1, p, p), image.shape)
        salient = reconstruct_from_patches_2d(P_s.reshape(-1, p, p), image.shape)
        return base, salient


def _pairs(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ShapeError(f"expected pairs shaped (n, 2, H, W), got {X.shape}")
    return X


class LRRNetFusion(BaseEstimator):
    """Infrared/visible fusion network.

    Hyperparameters mirror :class:`TrainConfig`; loss weights go in
    ``loss`` (a :class:`LossConfig` or ``None`` for the defaults).  With
    ``warm_start=True`` a second ``fit`` continues from ``params_``.
    """

    def __init__(
        self,
        N=net.DEFAULT_CHANNELS,
        k=net.DEFAULT_KERNEL,
        T=net.DEFAULT_BLOCKS,
        learning_rate=1e-5,
        epochs=4,
        batch_size=8,
        max_iterations=None,
        optimizer="adam",
        dtype="float64",
        loss=None,
        random_state=0,
        threads=None,
        warm_start=False,
    ):
        self.N = N
        self.k = k
        self.T = T
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_iterations = max_iterations
        self.optimizer = optimizer
        self.dtype = dtype
        self.loss = loss
        self.random_state = random_state
        self.threads = threads
        self.warm_start = warm_start

    @classmethod
    def from_params(cls, params: net.LrrNetParams, **kwargs) -> "LRRNetFusion":
        est = cls(N=params.N, k=params.k, T=params.T, **kwargs)
        est.params_ = params
        est.trace_ = []
        return est

    @classmethod
    def load(cls, path, **kwargs) -> "LRRNetFusion":
        return cls.from_params(net.load_params(path), **kwargs)

    def save(self, path):
        check_is_fitted(self, "params_")
        net.save_params(self.params_, path)

    def _config(self, image_size) -> TrainConfig:
        if not isinstance(self.random_state, (int, np.integer)):
            raise ContractError("random_state must be an int")
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            image_size=image_size,
            optimizer=self.optimizer,
            seed=int(self.random_state),
            max_iterations=self.max_iterations,
            dtype=self.dtype,
            N=self.N,
            k=self.k,
            T=self.T,
            loss=self.loss if self.loss is not None else LossConfig(),
        )

    def fit(self, X, y=None):
        X = _pairs(X)
        H, W = X.shape[2:]
        # arrays are used as given; image_size only has to satisfy the config check
        size = H if H == W and H % 16 == 0 else 16 * max(1, min(H, W) // 16)
        cfg = self._config(size)
        if self.warm_start and hasattr(self, "params_"):
            init = self.params_
        else:
            init = net.init_params(cfg.seed, cfg.N, cfg.k, cfg.T)
        data = ArrayDataset([x[0][None] for x in X], [x[1][None] for x in X])
        self.params_, self.trace_ = train(cfg, data, init, threads=self.threads)
        return self

    def transform(self, X):
        """Unclamped fused images, shape ``(n_pairs, H, W)``."""
        check_is_fitted(self, "params_")
        X = _pairs(X)
        return np.stack([net.fuse_image(x[0], x[1], self.params_) for x in X]) if len(X) else np.zeros((0,) + X.shape[2:])

    def predict(self, X):
        return self.transform(X)

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    def decompose(self, X):
        """Per-pair ``(L_f, S_f)`` parts of the fused images."""
        check_is_fitted(self, "params_")
        X = _pairs(X)
        outs = [net.fuse_forward(x[0][None], x[1][None], self.params_) for x in X]
        return np.stack([o.L_f.data[0] for o in outs]), np.stack([o.S_f.data[0] for o in outs])
