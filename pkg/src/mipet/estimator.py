"""scikit-learn style wrapper around the model and training loop."""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import DTYPE
from .config import ModelConfig, OptimizerConfig
from .model import decode_latent, mipet_forward
from .training import build_model, encode_means, fit


class MIPETVAE(TransformerMixin, BaseEstimator):
    """VAE with ``k`` invertible latent units, fit by Adam on rows of ``X``.

    ``X`` may be 2-D (flattened features) or N-D (images); ``transform``
    returns encoder means and ``inverse_transform`` decodes latents, averaging
    the decoded outputs over units.

    ``k=0`` gives a plain beta-VAE.
    """

    def __init__(self, latent_dim=10, k=1, mode="symmetric", encoder="mlp", hidden=None,
                 beta=1.0, w_el=1.0, w_cali=1.0, mask_lambda=math.inf, recon="bernoulli",
                 recon_sigma=1.0, heads="learned", kl="ef", lr=4e-4, weight_decay=1e-4,
                 epochs=20, batch_size=256, max_steps=None, seed=0):
        self.latent_dim = latent_dim
        self.k = k
        self.mode = mode
        self.encoder = encoder
        self.hidden = hidden
        self.beta = beta
        self.w_el = w_el
        self.w_cali = w_cali
        self.mask_lambda = mask_lambda
        self.recon = recon
        self.recon_sigma = recon_sigma
        self.heads = heads
        self.kl = kl
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed

    def _validate(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
        if reset:
            self.input_shape_ = tuple(X.shape[1:])
            self.n_features_in_ = int(np.prod(self.input_shape_))
        elif tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, fitted on {self.input_shape_}")
        return X

    def model_config(self) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, latent_dim=self.latent_dim, k=self.k,
                           mode=self.mode, beta=self.beta, w_el=self.w_el, w_cali=self.w_cali,
                           mask_lambda=self.mask_lambda, recon=self.recon,
                           recon_sigma=self.recon_sigma, heads=self.heads, kl=self.kl,
                           hidden=self.hidden)

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        self.model_ = build_model(self.model_config(), self.input_shape_, self.seed)
        opt = OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay)
        result = fit(self.model_, X, self.epochs, self.batch_size, self.seed, opt,
                     max_steps=self.max_steps)
        self.store_ = result.store
        self.losses_ = result.losses
        self.n_steps_ = result.steps
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return encode_means(self.model_, self._validate(X, reset=False))

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"Z has {Z.shape[1]} columns, expected {self.latent_dim}")
        out = decode_latent(self.model_, torch.as_tensor(Z, dtype=DTYPE))
        return out.numpy().reshape((-1, *self.input_shape_))

    def score(self, X, y=None, seed: int = 0) -> float:
        """Negative training objective on ``X`` (higher is better)."""
        check_is_fitted(self, "model_")
        X = self._validate(X, reset=False)
        losses = mipet_forward(self.model_, torch.as_tensor(X, dtype=DTYPE), seed, measure_aux=False)
        return -float(losses.total.detach())
