"""
Style-transfer pipeline.

reference encoder -> Gaussian posterior (PI-controlled KL) -> vector
quantizer -> acoustic decoder (coarse mel) -> diffusion refiner, plus the
diffusion bridge that learns the distribution of posterior latents so a
style can be sampled without a reference.

Training alternates two optimizer steps per iteration: train_step updates
encoder/decoder/refiner from L_rec + beta KL + L_Q + L_R, then
bridge_train_step updates only the bridge on detached latents.

Modes:
    vaefs         encoder/decoder only, no refiner
    one_stage     decoder and refiner trained jointly, refiner conditioned
                  on the decoder output (gradient flows into the decoder)
    two_stage_s1  same objective as vaefs
    two_stage_s2  refiner only; everything upstream frozen
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from config import StyleConfig
from constants import (
    CONTENT_EMBED_DIM,
    N_BANDS,
    N_CONTENTS,
    N_FRAMES,
    REFERENCE_DIM,
    StyleSource,
    SystemMode,
    TrainMode,
)
from data.toydata import ToyDataset

from .diffusion import DiffusionSchedule, Denoiser, ddpm_loss, default_schedule, sample
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    IndexRangeError,
    StateError,
)
from .numerics import (
    AdamState,
    FeedForwardNet,
    Params,
    RngStream,
    adam_step,
    check_finite,
    to_storage_precision,
)
from .quantizer import (
    Codebook,
    code_perplexity,
    codebook_gradient,
    ema_update,
    nearest_code,
    straight_through,
    straight_through_grad,
    vq_gradients,
    vq_loss,
)
from .vae import (
    AnnealSchedule,
    ControllerState,
    GaussianPosterior,
    PosteriorHead,
    anneal_weight,
    encode_gaussian,
    kl_gradients,
    kl_to_standard_normal,
    pi_beta_update,
    reparameterize,
    smooth_kl,
)

logger = logging.getLogger(__name__)

ALL_TERMS = ("rec", "kl", "vq", "refine")
REFINER_MODES = (TrainMode.ONE_STAGE, TrainMode.TWO_STAGE_S2)

# System mode -> the per-step training modes run in sequence
STAGES = {
    SystemMode.VAEFS: (TrainMode.VAEFS,),
    SystemMode.ONE_STAGE: (TrainMode.ONE_STAGE,),
    SystemMode.TWO_STAGE: (TrainMode.TWO_STAGE_S1, TrainMode.TWO_STAGE_S2),
}


# ==================== Model components ====================

class ReferenceEncoder:
    """Per-frame linear projection + tanh, mean-pooled over frames."""

    def __init__(self, n_bands: int, out_dim: int, rng: Optional[RngStream] = None):
        self.proj = FeedForwardNet([n_bands, out_dim], rng)

    def parameters(self, prefix: str = "encoder.") -> Params:
        return self.proj.parameters(f"{prefix}proj.")

    def activations(self, mels: np.ndarray) -> np.ndarray:
        """tanh(W frame + b) for every frame, shape (B, L, H)."""
        return np.tanh(self.proj.forward(np.transpose(mels, (0, 2, 1))))

    def backward(
        self, mels: np.ndarray, activations: np.ndarray, activation_grad: np.ndarray, prefix: str = "encoder."
    ) -> Params:
        pre_grad = activation_grad * (1.0 - activations ** 2)
        grads, _ = self.proj.backward(np.transpose(mels, (0, 2, 1)), pre_grad, f"{prefix}proj.")
        return grads


class AcousticModel:
    """Content embeddings + frame-wise decoder (+ refiner unless mode is vaefs)."""

    def __init__(self, latent_dim: int, hidden: int, mode: str, rng: Optional[RngStream] = None):
        if mode not in SystemMode.ALL:
            raise ConfigurationError(f"Unknown mode '{mode}'", key="mode")
        self.mode = mode
        self.latent_dim = latent_dim
        embed = rng.normal((N_CONTENTS, CONTENT_EMBED_DIM)) if rng is not None else np.zeros((N_CONTENTS, CONTENT_EMBED_DIM))
        self.content_embed = to_storage_precision(embed)
        self.decoder = FeedForwardNet([CONTENT_EMBED_DIM + latent_dim, hidden, N_BANDS], rng)
        self.refiner = None
        if mode != SystemMode.VAEFS:
            self.refiner = Denoiser(N_BANDS, hidden, rng, cond_dim=N_BANDS)

    def parameters(self, prefix: str = "acoustic.", include_refiner: bool = True) -> Params:
        params = {f"{prefix}content_embed": self.content_embed}
        params.update(self.decoder.parameters(f"{prefix}decoder."))
        if include_refiner and self.refiner is not None:
            params.update(self.refiner.parameters(f"{prefix}refiner."))
        return params

    def refiner_parameters(self, prefix: str = "acoustic.") -> Params:
        if self.refiner is None:
            return {}
        return self.refiner.parameters(f"{prefix}refiner.")

    def decoder_inputs(self, contents: np.ndarray, q: np.ndarray) -> np.ndarray:
        """(B, L, E + D): content embedding of each frame ++ the style code."""
        contents = np.asarray(contents)
        if np.any(contents < 0) or np.any(contents >= N_CONTENTS) or not np.issubdtype(contents.dtype, np.integer):
            raise ConfigurationError(f"Unknown content id in {np.unique(contents)}", key="content")
        if q.shape != (contents.shape[0], self.latent_dim):
            raise DimensionError(f"Style code shape {q.shape} != ({contents.shape[0]}, {self.latent_dim})")
        embedded = self.content_embed[contents]
        styles = np.broadcast_to(q[:, None, :], contents.shape + (self.latent_dim,))
        return np.concatenate([embedded, styles], axis=-1)


class BridgeModel:
    """Unconditional denoiser over style latents with its own schedule."""

    def __init__(self, latent_dim: int, hidden: int, T: int, rng: Optional[RngStream] = None):
        self.denoiser = Denoiser(latent_dim, hidden, rng)
        self.schedule = default_schedule(T)

    def parameters(self, prefix: str = "bridge.") -> Params:
        return self.denoiser.parameters(prefix)


def reference_encode(encoder: ReferenceEncoder, mel: np.ndarray) -> np.ndarray:
    """Style summary h of one mel (F, L) or a batch (B, F, L)."""
    mel = np.asarray(mel, dtype=np.float64)
    single = mel.ndim == 2
    mels = mel[None] if single else mel
    if mels.ndim != 3 or mels.shape[1] != encoder.proj.widths[0]:
        raise DimensionError(f"Expected mel with {encoder.proj.widths[0]} bands, got shape {mel.shape}")
    h = encoder.activations(mels).mean(axis=1)
    return h[0] if single else h


def acoustic_decode(model: AcousticModel, contents: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Coarse mel (F, L) per sample from frame contents (L,) and a style code (D,); batches allowed."""
    contents = np.asarray(contents)
    q = np.asarray(q, dtype=np.float64)
    single = contents.ndim == 1
    contents2 = contents[None] if single else contents
    q2 = q[None] if q.ndim == 1 else q
    if contents2.shape[1] != N_FRAMES:
        raise DimensionError(f"Content length {contents2.shape[1]} != {N_FRAMES} frames")
    frames = model.decoder.forward(model.decoder_inputs(contents2, q2))
    mels = np.transpose(frames, (0, 2, 1))
    return mels[0] if single else mels


# ==================== Training state ====================

class LossRecord(BaseModel):
    step: int
    l_rec: float
    kl: float
    beta: float
    l_q: float
    l_r: float
    l_b: float
    l_all: float

    @classmethod
    def compose(
        cls, step: int, l_rec: float, kl: float, beta: float, l_q: float, l_r: float, l_b: float = 0.0
    ) -> "LossRecord":
        l_c = l_rec + beta * kl
        return cls(step=step, l_rec=l_rec, kl=kl, beta=beta, l_q=l_q, l_r=l_r, l_b=l_b,
                   l_all=l_c + l_r + l_q + l_b)

    def with_bridge_loss(self, l_b: float) -> "LossRecord":
        return LossRecord.compose(self.step, self.l_rec, self.kl, self.beta, self.l_q, self.l_r, l_b)


@dataclass
class LatentState:
    posterior: Optional[GaussianPosterior]
    z: np.ndarray
    q: np.ndarray
    index: Optional[np.ndarray]
    beta: float


@dataclass(eq=False)
class TrainState:
    config: StyleConfig
    encoder: ReferenceEncoder
    posterior: PosteriorHead
    codebook: Codebook
    acoustic: AcousticModel
    bridge: BridgeModel
    refiner_schedule: DiffusionSchedule
    adam: AdamState
    refiner_adam: AdamState
    bridge_adam: AdamState
    controller: ControllerState
    anneal: AnnealSchedule
    rng: RngStream
    step: int = 0
    history: List[LossRecord] = field(default_factory=list)
    last_bridge_loss: float = 0.0
    last_latents: Optional[np.ndarray] = None
    latent_mean: Optional[np.ndarray] = None
    latent_scale: Optional[np.ndarray] = None
    trained: bool = False

    def front_parameters(self) -> Params:
        """Encoder, posterior heads, content embeddings, decoder (+ codebook outside EMA mode)."""
        params = self.encoder.parameters()
        params.update(self.posterior.parameters("posterior."))
        params.update(self.acoustic.parameters(include_refiner=False))
        if self.config.use_vq and not self.config.quantizer_ema:
            params.update(self.codebook.parameters())
        return params

    def refiner_parameters(self) -> Params:
        return self.acoustic.refiner_parameters()

    def model_parameters(self) -> Params:
        """Every learned tensor except optimizer state; codebook included in both VQ modes."""
        params = self.encoder.parameters()
        params.update(self.posterior.parameters("posterior."))
        params.update(self.acoustic.parameters())
        params.update(self.codebook.parameters())
        params.update(self.bridge.parameters())
        return params


def build_train_state(config: StyleConfig) -> TrainState:
    """Fresh state; parameter initialisation is a pure function of config.seed."""
    rng = RngStream(config.seed)
    encoder = ReferenceEncoder(N_BANDS, REFERENCE_DIM, rng)
    posterior = PosteriorHead(REFERENCE_DIM, config.latent_dim, rng)
    codebook = Codebook.create(config.codebook_size, config.latent_dim, rng, decay=config.ema_decay)
    acoustic = AcousticModel(config.latent_dim, config.hidden, config.mode, rng)
    bridge = BridgeModel(config.latent_dim, config.hidden, config.T_bridge, rng)
    controller = ControllerState(
        kp=config.kp,
        ki=config.ki,
        beta_min=config.beta_min,
        beta_max=config.beta_max,
        setpoint=config.kl_target,
        smoothing=config.kl_smoothing,
    )
    return TrainState(
        config=config,
        encoder=encoder,
        posterior=posterior,
        codebook=codebook,
        acoustic=acoustic,
        bridge=bridge,
        refiner_schedule=default_schedule(config.T_refiner),
        adam=AdamState(lr=config.lr),
        refiner_adam=AdamState(lr=config.lr),
        bridge_adam=AdamState(lr=config.lr),
        controller=controller,
        anneal=AnnealSchedule(ramp=config.ramp),
        rng=rng,
    )


@dataclass
class Batch:
    mels: np.ndarray  # (B, F, L)
    contents: np.ndarray  # (B, L)

    def __len__(self) -> int:
        return len(self.mels)


def sample_batch(dataset: ToyDataset, indices: np.ndarray, size: int, rng: RngStream) -> Batch:
    rows = indices[rng.integers(0, len(indices), size)]
    return Batch(mels=dataset.mels[rows], contents=dataset.contents[rows])


@dataclass
class StepNoise:
    latent: np.ndarray  # (B, D) reparameterization noise
    refiner_t: np.ndarray  # (B,) timesteps in 1..T
    refiner_eps: np.ndarray  # (B, F, L)


def draw_step_noise(state: TrainState, batch_size: int) -> StepNoise:
    rng = state.rng
    return StepNoise(
        latent=rng.normal((batch_size, state.config.latent_dim)),
        refiner_t=rng.integers(1, state.refiner_schedule.T + 1, batch_size),
        refiner_eps=rng.normal((batch_size, N_BANDS, N_FRAMES)),
    )


def current_beta(state: TrainState) -> float:
    """KL weight in effect for the next step: controller output, or cost annealing when disabled."""
    if state.config.use_controlvae:
        return state.controller.beta
    return anneal_weight(state.step, state.anneal)


# ==================== Losses ====================

@dataclass
class ForwardResult:
    l_rec: float
    kl: float
    l_q: float
    l_r: float
    objective: float
    grads: Params
    posterior: GaussianPosterior
    z: np.ndarray
    q: np.ndarray
    indices: Optional[np.ndarray]
    coarse: np.ndarray  # (B, F, L)


def compute_losses(
    state: TrainState,
    batch: Batch,
    noise: StepNoise,
    beta: float,
    mode: str,
    terms: Sequence[str] = ALL_TERMS,
) -> ForwardResult:
    """
    Forward pass and hand-derived backward pass for one batch with fixed noise.

    `terms` selects which of L_rec, beta*KL, L_Q, L_R enter the objective
    and its gradient. In two_stage_s2 only refiner gradients are produced.
    The path from the quantizer back to the encoder uses the
    straight-through copy rule.
    """
    cfg = state.config
    mels = np.asarray(batch.mels, dtype=np.float64)
    n_batch, n_frames = mels.shape[0], mels.shape[2]
    refine = mode in REFINER_MODES

    # --- forward ---
    activations = state.encoder.activations(mels)
    h = activations.mean(axis=1)
    post = encode_gaussian(state.posterior, h)
    z = reparameterize(post, noise.latent)
    if cfg.use_vq:
        q, indices = nearest_code(z, state.codebook)
        z_q = straight_through(z, q)
    else:
        q, indices, z_q = z, None, z

    decoder_in = state.acoustic.decoder_inputs(batch.contents, z_q)
    coarse_frames = state.acoustic.decoder.forward(decoder_in)  # (B, L, F)
    target_frames = np.transpose(mels, (0, 2, 1))
    residual = coarse_frames - target_frames
    l_rec = float(np.mean(residual ** 2))
    kl = kl_to_standard_normal(post)
    l_q = vq_loss(z, q, cfg.gamma, cfg.quantizer_ema) if cfg.use_vq else 0.0

    l_r, refined = 0.0, None
    if refine:
        if state.acoustic.refiner is None:
            raise ConfigurationError(f"Mode '{mode}' needs a refiner but the model was built as vaefs")
        refined = ddpm_loss(
            state.acoustic.refiner,
            target_frames.reshape(-1, N_BANDS),
            np.repeat(noise.refiner_t, n_frames),
            np.transpose(noise.refiner_eps, (0, 2, 1)).reshape(-1, N_BANDS),
            state.refiner_schedule,
            cond=coarse_frames.reshape(-1, N_BANDS),
            prefix="acoustic.refiner.",
        )
        l_r = refined.value

    objective = (
        (l_rec if "rec" in terms else 0.0)
        + (beta * kl if "kl" in terms else 0.0)
        + (l_q if "vq" in terms else 0.0)
        + (l_r if refine and "refine" in terms else 0.0)
    )
    check_finite("objective", objective)

    # --- backward ---
    grads: Params = {}
    if refine and "refine" in terms:
        grads.update(refined.param_grads)

    if mode != TrainMode.TWO_STAGE_S2:
        coarse_grad = np.zeros_like(coarse_frames)
        if "rec" in terms:
            coarse_grad += 2.0 * residual / residual.size
        if refine and "refine" in terms:
            coarse_grad += refined.cond_grad.reshape(coarse_frames.shape)

        decoder_grads, input_grad = state.acoustic.decoder.backward(
            decoder_in, coarse_grad, "acoustic.decoder."
        )
        grads.update(decoder_grads)
        embed_grad = np.zeros_like(state.acoustic.content_embed)
        np.add.at(embed_grad, batch.contents, input_grad[..., :CONTENT_EMBED_DIM])
        grads["acoustic.content_embed"] = embed_grad

        style_grad = input_grad[..., CONTENT_EMBED_DIM:].sum(axis=1)  # (B, D)
        z_grad = straight_through_grad(style_grad) if cfg.use_vq else style_grad
        if cfg.use_vq:
            q_grad = None
            if "vq" in terms:
                commit_grad, q_grad = vq_gradients(z, q, cfg.gamma, cfg.quantizer_ema)
                z_grad = z_grad + commit_grad
            if not cfg.quantizer_ema:
                grads["codebook.embeddings"] = (
                    codebook_gradient(state.codebook, indices, q_grad)
                    if q_grad is not None else np.zeros_like(state.codebook.embeddings)
                )

        mu_grad = z_grad.copy()
        log_sigma_grad = z_grad * post.sigma * noise.latent
        if "kl" in terms:
            kl_mu, kl_log_sigma = kl_gradients(post)
            mu_grad += beta * kl_mu
            log_sigma_grad += beta * kl_log_sigma

        head_grads, h_grad = state.posterior.backward(h, mu_grad, log_sigma_grad, "posterior.")
        grads.update(head_grads)
        activation_grad = np.repeat(h_grad[:, None, :] / n_frames, n_frames, axis=1)
        grads.update(state.encoder.backward(mels, activations, activation_grad))

    return ForwardResult(
        l_rec=l_rec,
        kl=kl,
        l_q=l_q,
        l_r=l_r,
        objective=objective,
        grads=grads,
        posterior=post,
        z=z,
        q=q,
        indices=indices,
        coarse=np.transpose(coarse_frames, (0, 2, 1)),
    )


def _scoped_gradients(grads: Params, trainable: Params, mode: str) -> Params:
    """Restrict grads to `trainable`; any gradient on a frozen tensor is a contract violation."""
    leaked = sorted(name for name in grads if name not in trainable)
    if leaked:
        raise ContractViolationError(f"Gradients reached frozen parameters in mode '{mode}': {leaked[:5]}")
    return {name: grads.get(name, np.zeros_like(param)) for name, param in trainable.items()}


def train_step(state: TrainState, batch: Batch, mode: str) -> LossRecord:
    """
    One optimizer step of L_C + L_Q (+ L_R); updates the KL controller exactly once.

    Args:
        state: Training state, mutated in place (parameters, optimizers, controller, history)
        batch: Mels and frame-aligned content ids
        mode: One of TrainMode.ALL; decides which parameter groups move

    Returns:
        LossRecord for this step (L_B is filled in later by the bridge step)
    """
    cfg = state.config
    if mode not in TrainMode.ALL:
        raise ConfigurationError(f"Unknown training mode '{mode}'", key="mode")

    beta = current_beta(state)
    noise = draw_step_noise(state, len(batch))
    result = compute_losses(state, batch, noise, beta, mode)

    front = {} if mode == TrainMode.TWO_STAGE_S2 else state.front_parameters()
    refiner = state.refiner_parameters() if mode in REFINER_MODES else {}
    grads = _scoped_gradients(result.grads, {**front, **refiner}, mode)
    if front:
        adam_step(state.adam, front, {k: grads[k] for k in front}, storage_precision=True)
    if refiner:
        adam_step(state.refiner_adam, refiner, {k: grads[k] for k in refiner}, storage_precision=True)

    if cfg.use_vq and cfg.quantizer_ema and mode != TrainMode.TWO_STAGE_S2:
        ema_update(state.codebook, result.z, result.indices, storage_precision=True)
    if cfg.use_controlvae:
        pi_beta_update(state.controller, smooth_kl(state.controller, result.kl))

    state.step += 1
    state.last_latents = result.z.copy()
    record = LossRecord.compose(state.step, result.l_rec, result.kl, beta, result.l_q, result.l_r)
    state.history.append(record)
    return record


def bridge_train_step(state: TrainState, z_batch: np.ndarray) -> float:
    """One DDPM step of the bridge on detached latents; touches only bridge parameters."""
    z = np.array(z_batch, dtype=np.float64, copy=True)
    if z.ndim != 2 or z.shape[1] != state.config.latent_dim:
        raise DimensionError(f"Expected latents of shape (B, {state.config.latent_dim}), got {z.shape}")

    schedule = state.bridge.schedule
    t = state.rng.integers(1, schedule.T + 1, len(z))
    eps = state.rng.normal(z.shape)
    loss = ddpm_loss(state.bridge.denoiser, z, t, eps, schedule, prefix="bridge.")

    params = state.bridge.parameters()
    leaked = sorted(name for name in loss.param_grads if name not in params)
    if leaked:
        raise ContractViolationError(f"Bridge gradients leaked outside the bridge: {leaked[:5]}")
    adam_step(state.bridge_adam, params, loss.param_grads, storage_precision=True)
    state.last_bridge_loss = loss.value
    return loss.value


def train(
    state: TrainState,
    dataset: ToyDataset,
    mode: str,
    steps: int,
    on_step: Optional[Callable[[LossRecord], None]] = None,
) -> List[LossRecord]:
    """Alternate train_step and (when enabled) bridge_train_step for `steps` iterations."""
    cfg = state.config
    train_rows = dataset.split("train")
    records = []
    for _ in range(steps):
        batch = sample_batch(dataset, train_rows, cfg.batch, state.rng)
        record = train_step(state, batch, mode)
        if cfg.use_bridge:
            record = record.with_bridge_loss(bridge_train_step(state, state.last_latents))
            state.history[-1] = record
        records.append(record)
        if on_step is not None:
            on_step(record)
        if cfg.log_every and state.step % cfg.log_every == 0:
            perplexity = (
                code_perplexity(nearest_code(state.last_latents, state.codebook)[1], state.codebook.size)
                if cfg.use_vq else float("nan")
            )
            logger.info(
                f"[{mode}] step {state.step}: L_rec={record.l_rec:.5f} KL={record.kl:.3f} "
                f"beta={record.beta:.5f} L_Q={record.l_q:.5f} L_R={record.l_r:.4f} "
                f"L_B={record.l_b:.4f} perplexity={perplexity:.1f}"
            )
    return records


def train_system(
    state: TrainState,
    dataset: ToyDataset,
    steps: int,
    on_step: Optional[Callable[[LossRecord], None]] = None,
) -> List[LossRecord]:
    """
    Run every stage of the configured system mode for `steps` steps each,
    then finalize latent statistics. A resumed state picks up inside the
    stage its step counter points to.
    """
    records = []
    for i, mode in enumerate(STAGES[state.config.mode]):
        remaining = (i + 1) * steps - state.step
        if remaining <= 0:
            continue
        logger.info(f"Training stage '{mode}' for {remaining} steps (from step {state.step})")
        records.extend(train(state, dataset, mode, remaining, on_step))
    finalize_training(state, dataset)
    return records


def train_bridge(
    state: TrainState,
    dataset: ToyDataset,
    steps: int,
    on_step: Optional[Callable[[LossRecord], None]] = None,
) -> List[LossRecord]:
    """Bridge-only training on posterior samples from the (frozen) encoder."""
    cfg = state.config
    train_rows = dataset.split("train")
    records = []
    for i in range(1, steps + 1):
        batch = sample_batch(dataset, train_rows, cfg.batch, state.rng)
        post = encode_posterior(state, batch.mels)
        z = reparameterize(post, state.rng.normal(post.mu.shape))
        l_b = bridge_train_step(state, z)
        record = LossRecord.compose(i, 0.0, 0.0, current_beta(state), 0.0, 0.0, l_b)
        records.append(record)
        if on_step is not None:
            on_step(record)
        if cfg.log_every and i % cfg.log_every == 0:
            logger.info(f"[bridge] step {i}/{steps}: L_B={l_b:.4f}")
    return records


def encode_posterior(state: TrainState, mels: np.ndarray) -> GaussianPosterior:
    h = reference_encode(state.encoder, np.asarray(mels, dtype=np.float64))
    return encode_gaussian(state.posterior, np.atleast_2d(h))


def finalize_training(state: TrainState, dataset: ToyDataset) -> None:
    """Record the dataset-mean latent and mean posterior sigma; mark the state as trained."""
    post = encode_posterior(state, dataset.mels[dataset.split("train")])
    state.latent_mean = to_storage_precision(post.mu.mean(axis=0))
    state.latent_scale = to_storage_precision(post.sigma.mean(axis=0))
    state.trained = True


# ==================== Inference ====================

@dataclass
class SynthesisResult:
    refined: np.ndarray  # (B, F, L)
    coarse: np.ndarray  # (B, F, L)
    latent: LatentState


def _require_trained(state: TrainState) -> None:
    if not state.trained:
        raise StateError("Model has not been trained (or finalized); run training first")


def quantize_latent(state: TrainState, z: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if not state.config.use_vq:
        return np.array(z, dtype=np.float64, copy=True), None
    return nearest_code(np.atleast_2d(z), state.codebook)


def sample_bridge_latents(state: TrainState, count: int, rng: RngStream) -> np.ndarray:
    return sample(state.bridge.denoiser, (count, state.config.latent_dim), state.bridge.schedule, rng)


def sample_prior_latent(state: TrainState, count: int, rng: RngStream) -> np.ndarray:
    return rng.normal((count, state.config.latent_dim))


def refine_mels(state: TrainState, coarse: np.ndarray, rng: RngStream) -> np.ndarray:
    """Refiner ancestral sampling conditioned frame-wise on the coarse mels (B, F, L)."""
    if state.acoustic.refiner is None:
        return coarse.copy()
    n_batch, n_bands, n_frames = coarse.shape
    cond = np.transpose(coarse, (0, 2, 1)).reshape(-1, n_bands)
    frames = sample(state.acoustic.refiner, cond.shape, state.refiner_schedule, rng, cond=cond)
    return np.transpose(frames.reshape(n_batch, n_frames, n_bands), (0, 2, 1))


def decode_latents(
    state: TrainState, contents: np.ndarray, z: np.ndarray, rng: RngStream, refine: bool = True
) -> SynthesisResult:
    q, index = quantize_latent(state, z)
    coarse = acoustic_decode(state.acoustic, contents, q)
    refined = refine_mels(state, coarse, rng) if refine else coarse.copy()
    latent = LatentState(posterior=None, z=np.atleast_2d(z), q=q, index=index, beta=state.controller.beta)
    return SynthesisResult(refined=refined, coarse=coarse, latent=latent)


def synthesize(
    state: TrainState,
    contents: np.ndarray,
    style_source: str,
    rng: RngStream,
    reference: Optional[np.ndarray] = None,
    refine: bool = True,
) -> SynthesisResult:
    """
    Generate mels for frame-aligned contents (B, L) or (L,).

    Args:
        state: Trained (finalized) state
        contents: Content ids, one row per output
        style_source: StyleSource.REFERENCE (posterior mean of `reference`, or a
            posterior sample with posterior_sampling), BRIDGE or PRIOR (z ~ N(0, I))
        rng: Stream for latent sampling and refiner noise
        reference: Reference mels (B, F, L) or (F, L); required for REFERENCE
        refine: Run the refiner; when False, refined is a copy of coarse

    Returns:
        SynthesisResult with batched refined and coarse mels and the latent used
    """
    _require_trained(state)
    contents = np.atleast_2d(np.asarray(contents))
    count = contents.shape[0]

    if style_source == StyleSource.REFERENCE:
        if reference is None:
            raise ConfigurationError("Reference style transfer needs a reference mel")
        reference = np.asarray(reference, dtype=np.float64)
        post = encode_posterior(state, reference if reference.ndim == 3 else reference[None])
        if post.mu.shape[0] != count:
            raise DimensionError(f"{post.mu.shape[0]} references for {count} content sequences")
        z = post.mu
        if state.config.posterior_sampling:
            z = reparameterize(post, rng.normal(post.mu.shape))
        result = decode_latents(state, contents, z, rng, refine)
        result.latent.posterior = post
        return result
    if style_source == StyleSource.BRIDGE:
        if not state.config.use_bridge:
            raise StateError("Bridge disabled (use_bridge=false); only reference inference is available")
        return decode_latents(state, contents, sample_bridge_latents(state, count, rng), rng, refine)
    if style_source == StyleSource.PRIOR:
        return decode_latents(state, contents, sample_prior_latent(state, count, rng), rng, refine)
    raise ConfigurationError(f"Unknown style source '{style_source}'")


def traverse_latent(
    state: TrainState,
    dim: int,
    values: Sequence[float],
    contents: np.ndarray,
    rng: RngStream,
    base: Optional[np.ndarray] = None,
    refine: bool = True,
) -> List[np.ndarray]:
    """
    One mel per traversal value: the base latent (default: dataset-mean
    posterior mean) with coordinate `dim` overwritten, quantized, decoded
    and refined. Every value reuses the same refiner noise.
    """
    if not 0 <= dim < state.config.latent_dim:
        raise IndexRangeError(f"Latent dim {dim} outside 0..{state.config.latent_dim - 1}")
    values = [float(v) for v in values]
    if not values:
        return []
    check_finite("traversal values", values)
    if base is None:
        _require_trained(state)
        base = state.latent_mean
    contents = np.asarray(contents).reshape(1, -1)

    start = rng.get_state()
    mels = []
    for value in values:
        rng.set_state(start)
        z = np.array(base, dtype=np.float64, copy=True)
        z[dim] = value
        mels.append(decode_latents(state, contents, z[None], rng, refine).refined[0])
    return mels


class PipelineTraverser:
    """Adapter exposing a trained state to evalmetrics.exclusivity_score."""

    def __init__(self, state: TrainState, seed: int = 0, refine: bool = True):
        _require_trained(state)
        self.state = state
        self.seed = seed
        self.refine = refine

    @property
    def latent_dim(self) -> int:
        return self.state.config.latent_dim

    @property
    def latent_mean(self) -> np.ndarray:
        return self.state.latent_mean

    @property
    def latent_scale(self) -> np.ndarray:
        return self.state.latent_scale

    def traverse(self, dim: int, values: Sequence[float], contents: np.ndarray) -> List[np.ndarray]:
        return traverse_latent(self.state, dim, values, contents, RngStream(self.seed), refine=self.refine)
