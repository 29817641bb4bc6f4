"""The two learned nonconformity backbones.

A variational autoencoder scores inputs by reconstruction error; a one-class
deep SVDD scores them by squared distance of the learned representation to a
fixed center. Both train with the same two-phase Adam schedule. The SVDD
mapper is constrained at construction: no bias terms, no bounded (sigmoid)
activations, and the center is frozen the moment it is initialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .neural import AdamState, Array, Mlp, adam_step, backward, forward, init_mlp


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Two-phase schedule: a searching phase followed by a fine-tuning phase."""

    epochs: tuple[int, int] = (300, 100)
    learning_rates: tuple[float, float] = (1e-3, 1e-4)
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs[0] < 1 or self.epochs[1] < 0:
            raise ValueError("first-phase epochs must be >= 1 and second-phase >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if min(self.learning_rates) <= 0.0:
            raise ValueError("learning rates must be positive")


class VaeModel:
    """Encoder producing (mean, log-variance) over the latent space, plus decoder."""

    def __init__(self, encoder: Mlp, decoder: Mlp, latent_dim: int):
        if latent_dim < 1:
            raise ValueError("latent dimension must be positive")
        if encoder.output_dim != 2 * latent_dim:
            raise ValueError(
                f"encoder output dim {encoder.output_dim} must be 2*latent_dim={2 * latent_dim}"
            )
        if decoder.input_dim != latent_dim:
            raise ValueError("decoder input dim must equal the latent dimension")
        if decoder.output_dim != encoder.input_dim:
            raise ValueError("decoder output dim must equal the encoder input dim")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @classmethod
    def build(
        cls,
        input_dim: int,
        latent_dim: int = 8,
        hidden: Sequence[int] = (64, 32),
        seed: int = 0,
    ) -> "VaeModel":
        rng = np.random.default_rng(seed)
        hidden = tuple(hidden)
        enc_dims = (input_dim, *hidden, 2 * latent_dim)
        dec_dims = (latent_dim, *reversed(hidden), input_dim)
        acts = ["elu"] * len(hidden) + ["identity"]
        encoder = init_mlp(enc_dims, acts, bias=True, rng=rng)
        decoder = init_mlp(dec_dims, acts, bias=True, rng=rng)
        return cls(encoder, decoder, latent_dim)

    def encode(self, z: Array) -> tuple[Array, Array]:
        out, _ = forward(self.encoder, z)
        d = self.latent_dim
        return out[..., :d], out[..., d:]


def _vae_batch_loss_grads(model: VaeModel, batch: Array, noise: Array):
    """Mean loss over the batch, gradients for encoder+decoder parameters.

    Loss per example: squared reconstruction error of the reparameterized
    sample plus the closed-form KL of the diagonal-Gaussian posterior
    against a standard normal.
    """
    d = model.latent_dim
    enc_out, enc_cache = forward(model.encoder, batch)
    mu, logvar = enc_out[:, :d], enc_out[:, d:]
    if not np.all(np.isfinite(logvar)):
        raise ValueError("encoder produced non-finite log-variance")
    sigma = np.exp(0.5 * logvar)
    x = mu + sigma * noise
    dec_out, dec_cache = forward(model.decoder, x)
    diff = dec_out - batch
    recon = (diff * diff).sum(axis=1)
    kl = 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar).sum(axis=1)
    n = batch.shape[0]
    loss = float(np.mean(recon + kl))
    dec_grads, g_x = backward(model.decoder, dec_cache, 2.0 * diff / n)
    g_mu = g_x + mu / n
    g_logvar = g_x * noise * 0.5 * sigma + 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grads, _ = backward(model.encoder, enc_cache, np.concatenate([g_mu, g_logvar], axis=1))
    parts = (float(recon.mean()), float(kl.mean()))
    return loss, enc_grads + dec_grads, parts


def vae_loss(model: VaeModel, z: Array, noise: Array) -> tuple[float, float, float]:
    """Loss for one example with an explicit latent noise draw.

    Returns ``(loss, reconstruction, kl)``.
    """
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z.shape != (model.input_dim,):
        raise ValueError(f"example shape {z.shape} does not match input dim {model.input_dim}")
    if noise.shape != (model.latent_dim,):
        raise ValueError("noise must be one standard-normal draw in latent space")
    loss, _, (recon, kl) = _vae_batch_loss_grads(model, z[None, :], noise[None, :])
    return loss, recon, kl


def vae_loss_grads(model: VaeModel, z: Array, noise: Array):
    """Single-example loss plus gradients aligned with encoder+decoder parameters."""
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    loss, grads, _ = _vae_batch_loss_grads(model, z[None, :], noise[None, :])
    return loss, grads


def kl_standard_normal(mu: Array, logvar: Array) -> float:
    """Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))


def mean_reconstruction(model: VaeModel, z: Array) -> Array:
    """Noise-free reconstruction: decode the posterior mean."""
    mu, _ = model.encode(np.asarray(z, dtype=np.float64))
    out, _ = forward(model.decoder, mu)
    return out


def sample_reconstructions(
    model: VaeModel, z: Array, count: int, rng: np.random.Generator | int
) -> Array:
    """Decode ``count`` independent posterior samples of ``z``.

    Samples are drawn and decoded one at a time; each costs one decoder pass.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    z = np.asarray(z, dtype=np.float64)
    mu, logvar = model.encode(z)
    if not np.all(np.isfinite(logvar)):
        raise ValueError("encoder produced non-finite log-variance")
    sigma = np.exp(0.5 * logvar)
    out = np.empty((count, model.input_dim))
    for k in range(count):
        noise = rng.standard_normal(model.latent_dim)
        decoded, _ = forward(model.decoder, mu + sigma * noise)
        out[k] = decoded
    return out


class SvddModel:
    """Bias-free mapper plus a frozen center in representation space."""

    def __init__(self, mapper: Mlp, weight_decay: float = 1e-4):
        for i, layer in enumerate(mapper.layers):
            if layer.bias is not None:
                raise ValueError(f"SVDD mapper layer {i} has a bias term")
            if layer.activation == "sigmoid":
                raise ValueError(f"SVDD mapper layer {i} uses a bounded activation")
        if weight_decay < 0.0:
            raise ValueError("weight decay must be nonnegative")
        self.mapper = mapper
        self.weight_decay = weight_decay
        self.center: Array | None = None

    @property
    def input_dim(self) -> int:
        return self.mapper.input_dim

    @property
    def output_dim(self) -> int:
        return self.mapper.output_dim

    @classmethod
    def build(
        cls,
        input_dim: int,
        output_dim: int = 8,
        hidden: Sequence[int] = (64, 32),
        weight_decay: float = 1e-4,
        seed: int = 0,
    ) -> "SvddModel":
        rng = np.random.default_rng(seed)
        dims = (input_dim, *hidden, output_dim)
        acts = ["elu"] * len(hidden) + ["identity"]
        mapper = init_mlp(dims, acts, bias=False, rng=rng)
        return cls(mapper, weight_decay)

    def represent(self, z: Array) -> Array:
        out, _ = forward(self.mapper, z)
        return out


def svdd_init_center(model: SvddModel, data: Array) -> Array:
    """Set the center to the mean representation of ``data`` and freeze it.

    A near-zero mean would admit the trivial solution that maps everything
    to the origin, so it is nudged off zero.
    """
    if model.center is not None:
        raise RuntimeError("center is already initialized and frozen")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("need a nonempty 2-D data array")
    reps, _ = forward(model.mapper, data)
    c = reps.mean(axis=0)
    if np.linalg.norm(c) < 1e-6:
        offset = np.zeros_like(c)
        offset[0] = 0.1
        c = c + offset
    c.setflags(write=False)
    model.center = c
    return c.copy()


def _svdd_batch_loss_grads(model: SvddModel, batch: Array):
    """Mean squared distance to center plus the Frobenius weight regularizer.

    The gradient flows through the mapper only; the regularizer's gradient
    is included analytically so the full loss is finite-difference checkable.
    """
    if model.center is None:
        raise RuntimeError("SVDD center is not initialized")
    reps, cache = forward(model.mapper, batch)
    diff = reps - model.center
    sq = (diff * diff).sum(axis=1)
    data_term = float(sq.mean())
    reg = 0.5 * model.weight_decay * sum(
        float((layer.weights * layer.weights).sum()) for layer in model.mapper.layers
    )
    n = batch.shape[0]
    grads, _ = backward(model.mapper, cache, 2.0 * diff / n)
    if model.weight_decay > 0.0:
        grads = [g + model.weight_decay * layer.weights for g, layer in zip(grads, model.mapper.layers)]
    return data_term + reg, grads, data_term


def svdd_loss(model: SvddModel, batch: Array) -> float:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    loss, _, _ = _svdd_batch_loss_grads(model, batch)
    return loss


def svdd_loss_grads(model: SvddModel, batch: Array):
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    loss, grads, _ = _svdd_batch_loss_grads(model, batch)
    return loss, grads


def _train_two_phase(
    nets: Sequence[Mlp],
    batch_fn: Callable[[Array, np.random.Generator], tuple[float, list[Array], float]],
    data: Array,
    cfg: TrainConfig,
    what: str,
) -> tuple[list[float], list[float]]:
    """Shared minibatch loop. ``batch_fn`` returns (loss, grads, aux)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ValueError("need a nonempty 2-D training array")
    rng = np.random.default_rng(cfg.seed)
    names: list[str] = []
    for i, net in enumerate(nets):
        names.extend(f"net{i}.{n}" for n in net.parameter_names())
    state = AdamState(learning_rate=cfg.learning_rates[0])
    curve: list[float] = []
    aux_curve: list[float] = []
    for phase in range(2):
        state.learning_rate = cfg.learning_rates[phase]
        for _ in range(cfg.epochs[phase]):
            epoch = len(curve)
            perm = rng.permutation(data.shape[0])
            losses: list[float] = []
            auxes: list[float] = []
            for start in range(0, data.shape[0], cfg.batch_size):
                batch = data[perm[start : start + cfg.batch_size]]
                loss, grads, aux = batch_fn(batch, rng)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, f"{what} training loss diverged")
                params: list[Array] = []
                for net in nets:
                    params.extend(net.parameters())
                new_params = adam_step(state, params, grads, names)
                offset = 0
                for net in nets:
                    k = len(net.parameters())
                    net.set_parameters(new_params[offset : offset + k])
                    offset += k
                losses.append(loss)
                auxes.append(aux)
            curve.append(float(np.mean(losses)))
            aux_curve.append(float(np.mean(auxes)))
    return curve, aux_curve


def train_vae(model: VaeModel, data: Array, cfg: TrainConfig) -> list[float]:
    """Train in place; returns the per-epoch mean loss curve."""

    def batch_fn(batch: Array, rng: np.random.Generator):
        noise = rng.standard_normal((batch.shape[0], model.latent_dim))
        loss, grads, parts = _vae_batch_loss_grads(model, batch, noise)
        return loss, grads, parts[0]

    curve, _ = _train_two_phase([model.encoder, model.decoder], batch_fn, data, cfg, "VAE")
    return curve


def train_svdd(model: SvddModel, data: Array, cfg: TrainConfig) -> tuple[list[float], list[float]]:
    """Train in place; returns (loss curve, mean squared distance-to-center curve)."""
    if model.center is None:
        raise RuntimeError("initialize the SVDD center before training")

    def batch_fn(batch: Array, rng: np.random.Generator):
        return _svdd_batch_loss_grads(model, batch)

    return _train_two_phase([model.mapper], batch_fn, data, cfg, "SVDD")


def _clone_architecture(net: Mlp, rng: np.random.Generator) -> Mlp:
    dims = [net.input_dim] + [layer.out_dim for layer in net.layers]
    acts = [layer.activation for layer in net.layers]
    bias = [layer.bias is not None for layer in net.layers]
    return init_mlp(dims, acts, bias, rng)


def pretrain_with_autoencoder(
    model: SvddModel,
    data: Array,
    cfg: TrainConfig,
    encoder: Mlp | None = None,
) -> list[float]:
    """Autoencoder pretraining: train, copy encoder weights into the mapper,
    then initialize the center.

    The encoder must mirror the mapper (same dimensions, bias-free); pass
    ``encoder=None`` to have one built. Returns the autoencoder loss curve.
    """
    rng = np.random.default_rng(cfg.seed)
    if encoder is None:
        encoder = _clone_architecture(model.mapper, rng)
    mapper = model.mapper
    if [l.out_dim for l in encoder.layers] != [l.out_dim for l in mapper.layers] or (
        encoder.input_dim != mapper.input_dim
    ):
        raise ValueError("encoder architecture does not mirror the SVDD mapper")
    if encoder.has_bias():
        raise ValueError("pretraining encoder must be bias-free like the mapper")
    hidden_rev = [l.out_dim for l in reversed(encoder.layers)][1:]
    dec_dims = [encoder.output_dim, *hidden_rev, encoder.input_dim]
    dec_acts = ["elu"] * (len(dec_dims) - 2) + ["identity"]
    decoder = init_mlp(dec_dims, dec_acts, bias=True, rng=rng)

    def batch_fn(batch: Array, _rng: np.random.Generator):
        code, enc_cache = forward(encoder, batch)
        recon, dec_cache = forward(decoder, code)
        diff = recon - batch
        n = batch.shape[0]
        loss = float((diff * diff).sum(axis=1).mean())
        dec_grads, g_code = backward(decoder, dec_cache, 2.0 * diff / n)
        enc_grads, _ = backward(encoder, enc_cache, g_code)
        return loss, enc_grads + dec_grads, loss

    curve, _ = _train_two_phase([encoder, decoder], batch_fn, data, cfg, "autoencoder")
    mapper.set_parameters([p.copy() for p in encoder.parameters()])
    svdd_init_center(model, data)
    return curve
