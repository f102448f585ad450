"""Method backbones: naive mean, forward MLP, forward CVAE, inverse CVAE and
the affine-coupling flow prior over futures.

All networks are built on ``diffcore`` and trained by one loop (``_fit``)
that shuffles with a seeded stream, keeps the best-validation parameters
and records a per-epoch loss history.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from . import storage
from .diffcore import (
    AdamConfig,
    NetworkSpec,
    ParamStore,
    Tape,
    Var,
    adam_step,
    backward,
    concat,
    forward,
    gaussian_kl,
    gaussian_logpdf,
    init_network,
)
from .errors import DivergenceError, ModelError, NonFiniteError
from .ingest import Scaler, WindowConfig, WindowedDataset
from .rng import make_rng, standard_normal

logger = logging.getLogger(__name__)

HIDDEN = 128
LATENT_DIM = 8
FLOW_HIDDEN = 64
FLOW_LAYERS = 8
CVAE_SAMPLES = 64
LOG_STD_MIN, LOG_STD_MAX = -7.0, 2.0

# Stream tags for make_rng(seed, tag, ...)
_INIT_STREAM = 30
_SHUFFLE_STREAM = 31
_VAL_STREAM = 32
PREDICT_STREAM = 40

METHODS = ("naive", "mlp", "cvae", "inverse", "flow")
_MODEL_CODE = {name: i for i, name in enumerate(METHODS)}


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(2e-3, gt=0.0)
    epochs: int = Field(80, ge=1)
    beta_kl: float = Field(1.0, ge=0.0)
    batch: int = Field(128, ge=1)
    seed: int = 42
    clip_norm: Optional[float] = Field(5.0, gt=0.0)
    hidden: int = Field(HIDDEN, ge=1)
    flow_hidden: int = Field(FLOW_HIDDEN, ge=1)
    flow_layers: int = Field(FLOW_LAYERS, ge=1)
    latent_dim: int = Field(LATENT_DIM, ge=1)
    n_samples: int = Field(CVAE_SAMPLES, ge=1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


def _const(tape: Tape, a) -> Var:
    return a if isinstance(a, Var) else tape.constant(np.atleast_2d(np.asarray(a, dtype=np.float64)))


def _gaussian_heads(tape: Tape, net: NetworkSpec, params: ParamStore, inp: Var) -> Tuple[Var, Var]:
    (mean, raw_log_std), _ = forward(net, params, inp, tape)
    return mean, raw_log_std.clip(LOG_STD_MIN, LOG_STD_MAX)


class _Model:
    """Shared plumbing: a ParamStore plus the networks that live in it."""

    name = ""

    def __init__(self, params: Optional[ParamStore] = None) -> None:
        self.params = params if params is not None else ParamStore()
        self.history: List[EpochRecord] = []

    def networks(self) -> Sequence[NetworkSpec]:
        raise NotImplementedError

    def extra_params(self) -> Tuple[str, ...]:
        """Parameters that live outside the networks."""
        return ()

    def init_params(self, rng: np.random.Generator) -> None:
        for net in self.networks():
            init_network(net, self.params, rng)

    def check_params(self) -> None:
        expected = {n for net in self.networks() for i in range(net.n_layers) for n in (net.weight(i), net.bias(i))}
        expected.update(self.extra_params())
        missing = sorted(expected - set(self.params.names()))
        if missing:
            raise ModelError(f"{self.name}: untrained or incomplete parameters (missing {', '.join(missing[:3])})")

    def loss(self, tape: Tape, x: np.ndarray, y: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> Var:
        raise NotImplementedError


class ForwardMlp(_Model):
    """Forward baseline: x -> y, two ReLU hidden layers, MSE."""

    name = "mlp"

    def __init__(self, past_len: int, horizon: int, hidden: int = HIDDEN, params: Optional[ParamStore] = None) -> None:
        super().__init__(params)
        self.past_len, self.horizon = past_len, horizon
        self.net = NetworkSpec("mlp", (past_len, hidden, hidden, horizon), "relu")

    def networks(self):
        return (self.net,)

    def loss(self, tape, x, y, rng, config):
        pred, _ = forward(self.net, self.params, _const(tape, x), tape)
        return (pred - y).square().mean()

    def predict(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward(self.net, self.params, np.atleast_2d(x), Tape(frozen=True))
        return out.value


class InverseCvae(_Model):
    """Encoder q(z | x, y) and decoder p(x | y, z): the past reconstructed from the future.

    The decoder predicts only the mean of x. Its log-std is one learned
    scalar shared by every timestep and every window, so the
    reconstruction term at MAP time is a scaled squared error in x and
    (y, z) cannot lower it by moving to regions of small predicted noise.
    """

    name = "inverse"
    LOG_STD = "inv.dec.log_std"

    def __init__(
        self, past_len: int, horizon: int, hidden: int = HIDDEN, latent_dim: int = LATENT_DIM,
        params: Optional[ParamStore] = None,
    ) -> None:
        super().__init__(params)
        self.past_len, self.horizon, self.latent_dim = past_len, horizon, latent_dim
        self.encoder = NetworkSpec("inv.enc", (past_len + horizon, hidden, hidden, 2 * latent_dim), "relu", (latent_dim, latent_dim))
        self.decoder = NetworkSpec("inv.dec", (horizon + latent_dim, hidden, hidden, past_len), "relu")

    def networks(self):
        return (self.encoder, self.decoder)

    def extra_params(self) -> Tuple[str, ...]:
        return (self.LOG_STD,)

    def init_params(self, rng: np.random.Generator) -> None:
        super().init_params(rng)
        self.params.add(self.LOG_STD, np.zeros(1))

    def encode(self, tape: Tape, x, y) -> Tuple[Var, Var]:
        return _gaussian_heads(tape, self.encoder, self.params, concat([_const(tape, x), _const(tape, y)], axis=1))

    def decode(self, tape: Tape, y, z) -> Tuple[Var, Var]:
        mean, _ = forward(self.decoder, self.params, concat([_const(tape, y), _const(tape, z)], axis=1), tape)
        return mean, tape.param(self.params, self.LOG_STD).clip(LOG_STD_MIN, LOG_STD_MAX)

    @property
    def recon_std(self) -> float:
        return float(np.exp(np.clip(self.params[self.LOG_STD][0], LOG_STD_MIN, LOG_STD_MAX)))

    def recon_logprob(self, tape: Tape, x, y, z) -> Var:
        """log p(x | y, z) per row."""
        mean, log_std = self.decode(tape, y, z)
        return gaussian_logpdf(_const(tape, x), mean, log_std)

    def loss(self, tape, x, y, rng, config):
        mu_z, ls_z = self.encode(tape, x, y)
        z = mu_z + ls_z.exp() * standard_normal(rng, mu_z.shape)
        rec = self.recon_logprob(tape, x, y, z)
        return (gaussian_kl(mu_z, ls_z) * config.beta_kl - rec).mean()

    def mean_recon_logprob(self, x: np.ndarray, y: np.ndarray) -> float:
        """Average log p(x | y, mu_z) at the encoder mean."""
        tape = Tape(frozen=True)
        mu_z, _ = self.encode(tape, x, y)
        return float(self.recon_logprob(tape, x, y, mu_z).value.mean())


class ForwardCvae(_Model):
    """Forward CVAE: prior p(z | x), encoder q(z | x, y), decoder p(y | x, z)."""

    name = "cvae"

    def __init__(
        self, past_len: int, horizon: int, hidden: int = HIDDEN, latent_dim: int = LATENT_DIM,
        n_samples: int = CVAE_SAMPLES, params: Optional[ParamStore] = None,
    ) -> None:
        super().__init__(params)
        self.past_len, self.horizon, self.latent_dim, self.n_samples = past_len, horizon, latent_dim, n_samples
        self.prior = NetworkSpec("fwd.prior", (past_len, hidden, hidden, 2 * latent_dim), "relu", (latent_dim, latent_dim))
        self.encoder = NetworkSpec("fwd.enc", (past_len + horizon, hidden, hidden, 2 * latent_dim), "relu", (latent_dim, latent_dim))
        self.decoder = NetworkSpec("fwd.dec", (past_len + latent_dim, hidden, hidden, 2 * horizon), "relu", (horizon, horizon))

    def networks(self):
        return (self.prior, self.encoder, self.decoder)

    def loss(self, tape, x, y, rng, config):
        xv, yv = _const(tape, x), _const(tape, y)
        mu_p, ls_p = _gaussian_heads(tape, self.prior, self.params, xv)
        mu_q, ls_q = _gaussian_heads(tape, self.encoder, self.params, concat([xv, yv], axis=1))
        z = mu_q + ls_q.exp() * standard_normal(rng, mu_q.shape)
        mu_y, ls_y = _gaussian_heads(tape, self.decoder, self.params, concat([xv, z], axis=1))
        rec = gaussian_logpdf(yv, mu_y, ls_y)
        return (gaussian_kl(mu_q, ls_q, mu_p, ls_p) * config.beta_kl - rec).mean()

    def predict(self, x: np.ndarray, seed: int, keys: Optional[Sequence[int]] = None, n_samples: Optional[int] = None) -> np.ndarray:
        """Mean of decoder means over z ~ p(z | x).

        Row i draws its latents from stream ``keys[i]`` (default: row index),
        so a window's prediction does not depend on its batch.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        S = n_samples or self.n_samples
        keys = range(x.shape[0]) if keys is None else keys
        eps = np.stack([standard_normal(make_rng(seed, PREDICT_STREAM, int(k)), (S, self.latent_dim)) for k in keys])
        tape = Tape(frozen=True)
        mu_p, ls_p = _gaussian_heads(tape, self.prior, self.params, tape.constant(x))
        z = (mu_p.value[:, None, :] + np.exp(ls_p.value)[:, None, :] * eps).reshape(-1, self.latent_dim)
        x_rep = np.repeat(x, S, axis=0)
        mu_y, _ = _gaussian_heads(tape, self.decoder, self.params, tape.constant(np.hstack([x_rep, z])))
        return mu_y.value.reshape(x.shape[0], S, self.horizon).mean(axis=1)


class FlowPrior(_Model):
    """Stack of affine couplings with alternating even/odd masks over R^m.

    Coupling l keeps the coordinates where ``masks[l] == 1`` and maps the
    rest as y * exp(s) + t, s = 2 tanh(s_net(kept)). Output layers start at
    zero, so an untrained flow is the identity.
    """

    name = "flow"

    def __init__(self, dim: int, hidden: int = FLOW_HIDDEN, n_layers: int = FLOW_LAYERS, params: Optional[ParamStore] = None) -> None:
        super().__init__(params)
        self.dim = dim
        parity = np.arange(dim) % 2
        self.masks = [(parity == (l % 2)).astype(np.float64) for l in range(n_layers)]
        self.s_nets = [NetworkSpec(f"flow.{l}.s", (dim, hidden, hidden, dim), "tanh", zero_last=True) for l in range(n_layers)]
        self.t_nets = [NetworkSpec(f"flow.{l}.t", (dim, hidden, hidden, dim), "tanh", zero_last=True) for l in range(n_layers)]

    def networks(self):
        return [net for pair in zip(self.s_nets, self.t_nets) for net in pair]

    def _scale_shift(self, tape: Tape, layer: int, kept: Var) -> Tuple[Var, Var]:
        free = 1.0 - self.masks[layer]
        raw, _ = forward(self.s_nets[layer], self.params, kept, tape)
        shift, _ = forward(self.t_nets[layer], self.params, kept, tape)
        return raw.tanh() * (2.0 * free), shift * free

    def to_base(self, tape: Tape, y) -> Tuple[Var, Var]:
        """Data -> base. Returns (u, log|det J|) per row."""
        h = _const(tape, y)
        log_det = None
        for l, mask in enumerate(self.masks):
            kept = h * mask
            s, t = self._scale_shift(tape, l, kept)
            h = kept + (h * s.exp() + t) * (1.0 - mask)
            term = s.sum(axis=1)
            log_det = term if log_det is None else log_det + term
        return h, log_det

    def logprob(self, tape: Tape, y) -> Var:
        u, log_det = self.to_base(tape, y)
        return gaussian_logpdf(u, 0.0, 0.0) + log_det

    def transform(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        u, log_det = self.to_base(Tape(frozen=True), np.atleast_2d(y))
        return u.value, log_det.value

    def inverse(self, u: np.ndarray) -> np.ndarray:
        """Base -> data."""
        tape = Tape(frozen=True)
        h = np.atleast_2d(np.asarray(u, dtype=np.float64))
        for l in reversed(range(len(self.masks))):
            mask = self.masks[l]
            kept = h * mask
            s, t = self._scale_shift(tape, l, tape.constant(kept))
            h = kept + (1.0 - mask) * (h - t.value) * np.exp(-s.value)
        return h

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.inverse(standard_normal(rng, (n, self.dim)))

    def loss(self, tape, x, y, rng, config):
        return -self.logprob(tape, y).mean()


class StandardNormalPrior:
    """N(0, I) over futures; the prior of the inv-gauss ablation."""

    name = "gauss"

    def __init__(self, dim: int) -> None:
        self.dim = dim

    def logprob(self, tape: Tape, y) -> Var:
        return gaussian_logpdf(_const(tape, y), 0.0, 0.0)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(u, dtype=np.float64))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.inverse(standard_normal(rng, (n, self.dim)))


def flow_logprob(flow, y: np.ndarray, with_grad: bool = False):
    """Exact log density per row; with ``with_grad`` also d logp / dy."""
    tape = Tape(frozen=True)
    yv = tape.input(np.atleast_2d(y), name="y", requires_grad=with_grad)
    logp = flow.logprob(tape, yv)
    if not with_grad:
        return logp.value
    backward(tape, logp)
    return logp.value, yv.grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_loss(model: _Model, x, y, rng, config: TrainConfig, train: bool) -> float:
    tape = Tape(frozen=not train)
    loss = model.loss(tape, x, y, rng, config)
    value = float(loss.value)
    if not math.isfinite(value):
        raise DivergenceError(f"{model.name}: non-finite loss")
    if train:
        backward(tape, loss)
    return value


def _fit(model: _Model, train: Tuple[np.ndarray, np.ndarray], val: Tuple[np.ndarray, np.ndarray], config: TrainConfig, progress: bool = False) -> _Model:
    code = _MODEL_CODE[model.name]
    model.init_params(make_rng(config.seed, _INIT_STREAM, code))
    shuffle = make_rng(config.seed, _SHUFFLE_STREAM, code)
    adam = AdamConfig(lr=config.lr, clip_norm=config.clip_norm)
    x_tr, y_tr = train
    n = x_tr.shape[0]
    if n == 0:
        raise ModelError(f"{model.name}: empty training split")

    best_val, best = math.inf, model.params.snapshot()
    model.history = []
    bar = tqdm(range(1, config.epochs + 1), desc=f"train {model.name}", disable=not progress, leave=False)
    for epoch in bar:
        order = shuffle.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch):
            idx = order[lo:lo + config.batch]
            model.params.zero_grad()
            try:
                total += _batch_loss(model, x_tr[idx], y_tr[idx], shuffle, config, train=True) * idx.size
                adam_step(model.params, adam)
            except NonFiniteError as ex:
                raise DivergenceError(f"{model.name} diverged at epoch {epoch}: {ex}") from ex
        val_loss = _batch_loss(model, val[0], val[1], make_rng(config.seed, _VAL_STREAM, code), config, train=False)
        model.history.append(EpochRecord(epoch, total / n, val_loss))
        if val_loss < best_val:
            best_val, best = val_loss, model.params.snapshot()
        bar.set_postfix(train=f"{total / n:.4f}", val=f"{val_loss:.4f}")

    model.params.load_snapshot(best)
    logger.info("  [Train] %s: best val loss %.4f over %d epochs", model.name, best_val, config.epochs)
    return model


def fit_naive(dataset: WindowedDataset) -> np.ndarray:
    _, y = dataset.split("train")
    if y.shape[0] == 0:
        raise ModelError("naive: empty training split")
    return y.mean(axis=0)


def train_forward_mlp(dataset: WindowedDataset, config: TrainConfig = TrainConfig(), progress: bool = False) -> ForwardMlp:
    cfg = dataset.config
    model = ForwardMlp(cfg.past_len, cfg.horizon, config.hidden)
    return _fit(model, dataset.split("train"), dataset.split("val"), config, progress)


def train_forward_cvae(dataset: WindowedDataset, config: TrainConfig = TrainConfig(), progress: bool = False) -> ForwardCvae:
    cfg = dataset.config
    model = ForwardCvae(cfg.past_len, cfg.horizon, config.hidden, config.latent_dim, config.n_samples)
    return _fit(model, dataset.split("train"), dataset.split("val"), config, progress)


def train_inverse_cvae(dataset: WindowedDataset, config: TrainConfig = TrainConfig(), progress: bool = False) -> InverseCvae:
    cfg = dataset.config
    model = InverseCvae(cfg.past_len, cfg.horizon, config.hidden, config.latent_dim)
    _fit(model, dataset.split("train"), dataset.split("val"), config, progress)
    logger.info("  [Train] inverse: reconstruction std %.4f", model.recon_std)
    return model


def train_flow(
    y_train: np.ndarray, config: TrainConfig = TrainConfig(), y_val: Optional[np.ndarray] = None, progress: bool = False
) -> FlowPrior:
    y_train = np.atleast_2d(y_train)
    y_val = y_train if y_val is None else np.atleast_2d(y_val)
    model = FlowPrior(y_train.shape[1], config.flow_hidden, config.flow_layers)
    empty_tr = np.zeros((y_train.shape[0], 0))
    empty_val = np.zeros((y_val.shape[0], 0))
    return _fit(model, (empty_tr, y_train), (empty_val, y_val), config, progress)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ModelBundle:
    naive_mean: np.ndarray
    scaler: Scaler
    window: WindowConfig
    train_config: TrainConfig
    mlp: Optional[ForwardMlp] = None
    cvae: Optional[ForwardCvae] = None
    inverse: Optional[InverseCvae] = None
    flow: Optional[FlowPrior] = None
    dataset: str = ""
    histories: Dict[str, List[EpochRecord]] = field(default_factory=dict)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n, None) is None]
        if missing:
            raise ModelError(f"bundle lacks trained model(s): {', '.join(missing)}")

    def save(self, directory) -> Dict[str, str]:
        """Write per-model parameter files and ``bundle.json``. Returns written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written: Dict[str, str] = {}
        for name in ("mlp", "cvae", "inverse", "flow"):
            model = getattr(self, name)
            if model is not None:
                written.update(storage.write_params(model.params, directory / name))
        meta = {
            "dataset": self.dataset,
            "naive_mean": [float(v) for v in self.naive_mean],
            "scaler": {"mean": self.scaler.mean, "std": self.scaler.std},
            "window": self.window.model_dump(),
            "train_config": self.train_config.model_dump(),
            "models": [n for n in ("mlp", "cvae", "inverse", "flow") if getattr(self, n) is not None],
            "histories": {
                k: [[r.epoch, r.train_loss, r.val_loss] for r in v] for k, v in sorted(self.histories.items())
            },
        }
        written["bundle.json"] = str(storage.write_json(directory / "bundle.json", meta))
        return written

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        meta = storage.read_json(directory / "bundle.json")
        window = WindowConfig(**meta["window"])
        tc = TrainConfig(**meta["train_config"])
        n, m = window.past_len, window.horizon
        builders = {
            "mlp": lambda p: ForwardMlp(n, m, tc.hidden, params=p),
            "cvae": lambda p: ForwardCvae(n, m, tc.hidden, tc.latent_dim, tc.n_samples, params=p),
            "inverse": lambda p: InverseCvae(n, m, tc.hidden, tc.latent_dim, params=p),
            "flow": lambda p: FlowPrior(m, tc.flow_hidden, tc.flow_layers, params=p),
        }
        models = {}
        for name in meta["models"]:
            model = builders[name](storage.read_params(directory / name))
            model.check_params()
            models[name] = model
        histories = {k: [EpochRecord(int(e), float(a), float(b)) for e, a, b in v] for k, v in meta.get("histories", {}).items()}
        return cls(
            naive_mean=np.asarray(meta["naive_mean"], dtype=np.float64),
            scaler=Scaler(**meta["scaler"]),
            window=window,
            train_config=tc,
            dataset=meta.get("dataset", ""),
            histories=histories,
            **models,
        )


def train_all(
    dataset: WindowedDataset, config: TrainConfig = TrainConfig(), methods: Sequence[str] = METHODS, progress: bool = False
) -> ModelBundle:
    unknown = sorted(set(methods) - set(METHODS))
    if unknown:
        raise ModelError(f"unknown method(s): {', '.join(unknown)}")
    bundle = ModelBundle(
        naive_mean=fit_naive(dataset), scaler=dataset.scaler, window=dataset.config, train_config=config, dataset=dataset.name,
    )
    if "mlp" in methods:
        bundle.mlp = train_forward_mlp(dataset, config, progress)
    if "cvae" in methods:
        bundle.cvae = train_forward_cvae(dataset, config, progress)
    if "inverse" in methods:
        bundle.inverse = train_inverse_cvae(dataset, config, progress)
    if "flow" in methods:
        bundle.flow = train_flow(dataset.split("train")[1], config, dataset.split("val")[1], progress)
    for name in ("mlp", "cvae", "inverse", "flow"):
        model = getattr(bundle, name)
        if model is not None:
            bundle.histories[name] = model.history
    return bundle
