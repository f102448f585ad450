"""Retrodictive MAP inference over (y, z).

For an observed past x the objective is

    -log p(x | y, z) + lambda_prior * (-log p(y)) + lambda_y * |y - y_fic|^2 - log N(z; 0, I)

minimized by K restarts of Adam. All windows and restarts of a batch are
stacked as rows of one array and descended together; rows never interact
(per-row clipping, per-row Adam moments), so a batch gives the same answer
as running each window on its own.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .diffcore import AdamConfig, Tape, Var, adam_update, backward, gaussian_logpdf
from .errors import ModelError, NonFiniteError, ShapeError
from .models import FlowPrior, ForwardCvae, ModelBundle, StandardNormalPrior
from .rng import make_rng, standard_normal

logger = logging.getLogger(__name__)

_RESTART_STREAM = 50

Method = Literal["inv-flow", "inv-gauss"]


class MapConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    restarts: int = Field(5, ge=1)
    steps: int = Field(200, ge=0)
    lr: float = Field(5e-2, gt=0.0)
    clip_norm: float = Field(5.0, gt=0.0)
    lambda_prior: float = Field(2.0, ge=0.0)
    lambda_y: float = Field(0.0, ge=0.0)
    seed: int = 42
    use_fic: bool = True
    chunk: int = Field(256, ge=1)


class InverseModel(Protocol):
    past_len: int
    horizon: int
    latent_dim: int

    def recon_logprob(self, tape: Tape, x, y, z) -> Var: ...


class FuturePrior(Protocol):
    def logprob(self, tape: Tape, y) -> Var: ...

    def inverse(self, u: np.ndarray) -> np.ndarray: ...


@dataclass
class MapModels:
    """What the objective needs: inverse decoder, future prior, optional FIC model."""

    inverse: InverseModel
    prior: FuturePrior
    cvae: Optional[ForwardCvae] = None
    seed: int = 42

    @classmethod
    def from_bundle(cls, bundle: ModelBundle, method: Method, seed: int) -> "MapModels":
        bundle.require("inverse")
        if method == "inv-flow":
            bundle.require("flow")
            prior = bundle.flow
        elif method == "inv-gauss":
            prior = StandardNormalPrior(bundle.window.horizon)
        else:
            raise ModelError(f"unknown inverse method '{method}'")
        return cls(inverse=bundle.inverse, prior=prior, cvae=bundle.cvae, seed=seed)

    def check(self) -> None:
        for model in (self.inverse, self.prior, self.cvae):
            if model is not None and hasattr(model, "check_params"):
                model.check_params()


@dataclass
class ForecastResult:
    window_index: int
    y_hat: np.ndarray
    z_hat: np.ndarray
    map_loss_best: float
    map_losses_all: np.ndarray
    initial_losses: np.ndarray
    retro_nll: float
    dispersion: float
    used_fic: bool
    best_restart: int = 0
    y_restarts: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "y_hat": self.y_hat.tolist(),
            "z_hat": self.z_hat.tolist(),
            "map_loss_best": self.map_loss_best,
            "map_losses_all": self.map_losses_all.tolist(),
            "initial_losses": self.initial_losses.tolist(),
            "retro_nll": self.retro_nll,
            "dispersion": self.dispersion,
            "used_fic": self.used_fic,
            "best_restart": self.best_restart,
        }


def _objective_rows(models: MapModels, tape: Tape, x: np.ndarray, y: Var, z: Var, y_fic: Optional[np.ndarray], config: MapConfig):
    """Per-row objective and per-row retrodictive NLL."""
    nll = -models.inverse.recon_logprob(tape, x, y, z)
    obj = nll - gaussian_logpdf(z, 0.0, 0.0)
    if config.lambda_prior > 0:
        obj = obj - models.prior.logprob(tape, y) * config.lambda_prior
    if config.lambda_y > 0 and y_fic is not None:
        obj = obj + (y - y_fic).square().sum(axis=1) * config.lambda_y
    return obj, nll


def map_objective(
    models: MapModels, x_obs, y, z, config: MapConfig = MapConfig(), y_fic=None, with_grad: bool = False
):
    """Objective at one (or a batch of) (y, z); optionally with d/dy and d/dz."""
    models.check()
    tape = Tape(frozen=True)
    x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    yv = tape.input(np.atleast_2d(y), name="y", requires_grad=with_grad)
    zv = tape.input(np.atleast_2d(z), name="z", requires_grad=with_grad)
    fic = None if y_fic is None else np.atleast_2d(y_fic)
    obj, _ = _objective_rows(models, tape, x, yv, zv, fic, config)
    scalar = np.ndim(y) == 1
    if not with_grad:
        return float(obj.value[0]) if scalar else obj.value
    backward(tape, obj)
    gy = yv.grad if yv.grad is not None else np.zeros_like(yv.value)
    gz = zv.grad if zv.grad is not None else np.zeros_like(zv.value)
    if scalar:
        return float(obj.value[0]), gy[0], gz[0]
    return obj.value, gy, gz


def objective_gradients(models: MapModels, x_obs, y, z, config: MapConfig = MapConfig()) -> Dict[str, np.ndarray]:
    """Per-row gradient norms of the objective's terms at (y, z).

    ``recon_y`` and ``recon_z`` are |d(-log p(x | y, z))/dy| and /dz;
    ``prior_y`` is |d(-lambda_prior log p(y))/dy|. A ``recon_y`` that is
    zero or tiny next to ``prior_y`` means the forecast ignores the past.
    """
    x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    Y, Z = np.atleast_2d(y), np.atleast_2d(z)

    def norm(grad, like):
        return np.zeros(like.shape[0]) if grad is None else np.linalg.norm(grad, axis=1)

    tape = Tape(frozen=True)
    yv, zv = tape.input(Y, name="y"), tape.input(Z, name="z")
    backward(tape, -models.inverse.recon_logprob(tape, x, yv, zv))
    out = {"recon_y": norm(yv.grad, Y), "recon_z": norm(zv.grad, Z)}
    tape = Tape(frozen=True)
    yv = tape.input(Y, name="y")
    backward(tape, -models.prior.logprob(tape, yv) * config.lambda_prior)
    out["prior_y"] = norm(yv.grad, Y)
    return out


def fic_warmstart(models: MapModels, x_obs, keys: Optional[Sequence[int]] = None) -> np.ndarray:
    """Forward-CVAE averaged prediction used to seed restart 0."""
    if models.cvae is None:
        raise ModelError("FIC warm start needs a trained forward CVAE")
    models.cvae.check_params()
    x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    return models.cvae.predict(x, models.seed, keys)


def _initial_points(models: MapModels, x: np.ndarray, keys: Sequence[int], config: MapConfig):
    W, K = x.shape[0], config.restarts
    m, L = models.inverse.horizon, models.inverse.latent_dim
    use_fic = config.use_fic and models.cvae is not None
    base = np.empty((W * K, m))
    Z = np.empty((W * K, L))
    for i, key in enumerate(keys):
        for k in range(K):
            rng = make_rng(config.seed, _RESTART_STREAM, int(key), k)
            base[i * K + k] = standard_normal(rng, m)
            Z[i * K + k] = 0.0 if k == 0 else standard_normal(rng, L)
    Y = models.prior.inverse(base)
    y_fic = None
    if use_fic:
        y_fic = fic_warmstart(models, x, keys)
        Y[0::K] = y_fic
    return Y, Z, y_fic, use_fic


def _descend(models: MapModels, x: np.ndarray, keys: Sequence[int], config: MapConfig) -> List[ForecastResult]:
    W, K = x.shape[0], config.restarts
    Y, Z, y_fic, used_fic = _initial_points(models, x, keys, config)
    X = np.repeat(x, K, axis=0)
    if logger.isEnabledFor(logging.DEBUG):
        g = objective_gradients(models, X, Y, Z, config)
        logger.debug(
            "  [MAP] start gradients (median): recon/y %.3g prior/y %.3g recon/z %.3g",
            *(float(np.median(g[k])) for k in ("recon_y", "prior_y", "recon_z")),
        )
    fic_rows = None if y_fic is None else np.repeat(y_fic, K, axis=0)
    adam = AdamConfig(lr=config.lr)
    my, vy = np.zeros_like(Y), np.zeros_like(Y)
    mz, vz = np.zeros_like(Z), np.zeros_like(Z)

    def evaluate(Y, Z, grad: bool, step: int):
        tape = Tape(frozen=True)
        yv = tape.input(Y, name="y", requires_grad=grad)
        zv = tape.input(Z, name="z", requires_grad=grad)
        obj, nll = _objective_rows(models, tape, X, yv, zv, fic_rows, config)
        bad = np.flatnonzero(~np.isfinite(obj.value))
        if bad.size:
            row = int(bad[0])
            raise NonFiniteError(
                f"MAP objective non-finite for window {keys[row // K]} restart {row % K} at step {step}"
            )
        if grad:
            backward(tape, obj)
        return obj.value, nll.value, yv.grad, zv.grad

    initial, nll, gy, gz = evaluate(Y, Z, config.steps > 0, 0)
    final = initial
    for step in range(1, config.steps + 1):
        if step > 1:
            final, nll, gy, gz = evaluate(Y, Z, True, step - 1)
        gy = np.zeros_like(Y) if gy is None else gy
        gz = np.zeros_like(Z) if gz is None else gz
        norm = np.sqrt(np.sum(gy * gy, axis=1) + np.sum(gz * gz, axis=1))
        scale = np.minimum(1.0, config.clip_norm / np.maximum(norm, 1e-300))[:, None]
        Y, my, vy = adam_update(Y, gy * scale, my, vy, step, adam)
        Z, mz, vz = adam_update(Z, gz * scale, mz, vz, step, adam)
    if config.steps > 0:
        final, nll, _, _ = evaluate(Y, Z, False, config.steps)

    results = []
    for i, key in enumerate(keys):
        rows = slice(i * K, (i + 1) * K)
        losses = final[rows]
        best = int(np.argmin(losses))
        y_restarts = Y[rows]
        results.append(ForecastResult(
            window_index=int(key),
            y_hat=y_restarts[best].copy(),
            z_hat=Z[rows][best].copy(),
            map_loss_best=float(losses[best]),
            map_losses_all=losses.copy(),
            initial_losses=initial[rows].copy(),
            retro_nll=float(nll[rows][best]),
            dispersion=float(np.mean(np.std(y_restarts, axis=0))),
            used_fic=used_fic,
            best_restart=best,
            y_restarts=y_restarts.copy(),
        ))
    return results


def map_optimize_batch(
    models: MapModels,
    x_obs: np.ndarray,
    config: MapConfig = MapConfig(),
    window_index: Optional[Sequence[int]] = None,
    progress: bool = False,
) -> List[ForecastResult]:
    """MAP forecasts for many windows; row i uses streams keyed by ``window_index[i]``."""
    models.check()
    x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    if x.shape[1] != models.inverse.past_len:
        raise ShapeError(f"x_obs has width {x.shape[1]}, decoder reconstructs {models.inverse.past_len}")
    keys = list(range(x.shape[0])) if window_index is None else [int(k) for k in window_index]
    if len(keys) != x.shape[0]:
        raise ShapeError(f"{len(keys)} window indices for {x.shape[0]} windows")

    results: List[ForecastResult] = []
    chunks = range(0, x.shape[0], config.chunk)
    for lo in tqdm(chunks, desc="MAP", disable=not progress, leave=False):
        hi = lo + config.chunk
        results.extend(_descend(models, x[lo:hi], keys[lo:hi], config))
    if results:
        logger.info(
            "  [MAP] %d windows x %d restarts, median best loss %.4f",
            len(results), config.restarts, float(np.median([r.map_loss_best for r in results])),
        )
    return results


def map_optimize(models: MapModels, x_obs, config: MapConfig = MapConfig(), window_index: int = 0) -> ForecastResult:
    return map_optimize_batch(models, np.atleast_2d(x_obs), config, [window_index])[0]
