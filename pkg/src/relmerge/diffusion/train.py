from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import NumericError
from ..numkit import Rng, mse, mse_backward
from .model import Conditions, DenoiserConfig, backward, forward, make_conditions
from .schedule import DiffusionSchedule, add_noise

log = logging.getLogger(__name__)

P_DROP = 0.05


@dataclass
class TrainBatch:
    x0: np.ndarray                  # (B, N, C)
    t: np.ndarray                   # (B,) int in [1, T]
    eps: np.ndarray                 # (B, N, C)
    prompt_tokens: list             # per sample token ids
    object_texts: list              # per sample list of object token lists
    ref_embeddings: list            # per sample list of vectors, one per object
    drop_text: np.ndarray = None
    drop_image: np.ndarray = None

    def __post_init__(self):
        B = len(self.prompt_tokens)
        if self.drop_text is None:
            self.drop_text = np.zeros(B, bool)
        if self.drop_image is None:
            self.drop_image = np.zeros(B, bool)
        for ot, re in zip(self.object_texts, self.ref_embeddings):
            if len(ot) != len(re):
                raise ValueError("every object text needs exactly one reference embedding")

    def conditions(self, cfg: DenoiserConfig) -> Conditions:
        return make_conditions(self.prompt_tokens, self.object_texts, self.ref_embeddings, cfg,
                               self.drop_text, self.drop_image)


def condition_dropout(batch: TrainBatch, rng: Rng, p_text: float = P_DROP, p_image: float = P_DROP,
                      p_both: float = P_DROP) -> TrainBatch:
    """Drop text only, images only, or both, each with its own probability.

    One uniform draw per sample picks among the three mutually exclusive
    events; flags are OR-ed with any already set.
    """
    if p_text + p_image + p_both > 1:
        raise ValueError("dropout probabilities sum to more than 1")
    u = rng.uniform(len(batch.prompt_tokens))
    text = u < p_text
    image = (u >= p_text) & (u < p_text + p_image)
    both = (u >= p_text + p_image) & (u < p_text + p_image + p_both)
    return replace(batch, drop_text=batch.drop_text | text | both,
                   drop_image=batch.drop_image | image | both)


def training_loss(batch: TrainBatch, params, sched: DiffusionSchedule, cfg: DenoiserConfig,
                  *, grads: bool = False):
    """Mean squared error between the sampled noise and the denoiser prediction."""
    x_t = add_noise(batch.x0, batch.eps, batch.t, sched)
    eps_hat, cache = forward(params, cfg, x_t, batch.t, batch.conditions(cfg), keep=grads)
    eps = batch.eps.astype(eps_hat.dtype)
    loss = mse(eps_hat, eps)
    if not grads:
        return loss
    return loss, backward(params, cfg, cache, mse_backward(eps_hat, eps))


class DenoiserLoss:
    """Adapter exposing the training loss to :func:`relmerge.numkit.grad_check`.

    Tensors passed to ``loss``/``loss_and_grads`` override the matching entries
    of ``params``.
    """

    def __init__(self, params, cfg, batch, sched):
        self.params, self.cfg, self.batch, self.sched = params, cfg, batch, sched

    def _merged(self, inputs):
        p = dict(self.params)
        p.update(inputs)
        return p

    def loss(self, inputs):
        return training_loss(self.batch, self._merged(inputs), self.sched, self.cfg)

    def loss_and_grads(self, inputs):
        loss, g = training_loss(self.batch, self._merged(inputs), self.sched, self.cfg, grads=True)
        return loss, {k: g[k] for k in inputs}


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def init(self, params, names) -> dict:
        return {"step": 0,
                "m": {k: np.zeros_like(params[k]) for k in names},
                "v": {k: np.zeros_like(params[k]) for k in names}}

    def update(self, params, grads, state, lr: float):
        """Returns new (params, state); tensors outside ``state['m']`` are passed through untouched."""
        step = state["step"] + 1
        new_params = dict(params)
        new_m, new_v = {}, {}
        bc1 = 1 - self.beta1 ** step
        bc2 = 1 - self.beta2 ** step
        for k in state["m"]:
            g = grads[k]
            m = self.beta1 * state["m"][k] + (1 - self.beta1) * g
            v = self.beta2 * state["v"][k] + (1 - self.beta2) * g * g
            new_m[k], new_v[k] = m, v
            if lr == 0:
                continue
            p = params[k]
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new_params[k] = (p - lr * (self.weight_decay * p + upd)).astype(p.dtype)
        return new_params, {"step": step, "m": new_m, "v": new_v}


def train_step(params, batch: TrainBatch, opt_state: dict, lr: float, *, cfg: DenoiserConfig,
               sched: DiffusionSchedule, optimizer: AdamW | None = None):
    """One AdamW step on the tensors tracked by ``opt_state``. Returns (params, state, loss)."""
    optimizer = optimizer or AdamW()
    loss, grads = training_loss(batch, params, sched, cfg, grads=True)
    if not np.isfinite(loss):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise NumericError(f"non-finite loss {loss} at optimizer step {opt_state['step'] + 1}; "
                           f"t={batch.t.tolist()}; non-finite grads in {bad[:5]}")
    new_params, new_state = optimizer.update(params, grads, opt_state, lr)
    bad = sorted(k for k in new_state["m"] if not np.all(np.isfinite(new_params[k])))
    if bad:
        raise NumericError(f"optimizer step {new_state['step']} produced non-finite values in {bad[:5]}")
    return new_params, new_state, loss


@dataclass
class TrainData:
    """In-memory corpus: latents plus per-record prompt/object tokens and references."""

    latents: np.ndarray             # (n, N, C)
    prompts: list
    objects: list
    refs: list
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.latents.shape[0]


def sample_batch(data: TrainData, batch_size: int, rng: Rng, sched: DiffusionSchedule,
                 dtype=np.float32) -> TrainBatch:
    idx = rng.integers(0, len(data), size=batch_size)
    t = rng.integers(1, sched.T + 1, size=batch_size)
    eps = rng.normal((batch_size,) + data.latents.shape[1:]).astype(dtype)
    return TrainBatch(
        x0=data.latents[idx].astype(dtype), t=t, eps=eps,
        prompt_tokens=[data.prompts[i] for i in idx],
        object_texts=[data.objects[i] for i in idx],
        ref_embeddings=[data.refs[i] for i in idx],
    )


@dataclass
class TrainSettings:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    p_drop_text: float = P_DROP
    p_drop_image: float = P_DROP
    p_drop_both: float = P_DROP
    seed: int = 0
    mode: str = "pretrain"


def train(params, cfg: DenoiserConfig, sched: DiffusionSchedule, data: TrainData,
          settings: TrainSettings, trainable: list[str], callback=None):
    """Run ``settings.steps`` optimizer steps. ``callback(step, params, loss)`` runs after each.

    Returns the final params and the list of per-step losses.
    """
    opt = AdamW(weight_decay=settings.weight_decay)
    state = opt.init(params, trainable)
    rng = Rng(settings.seed)
    batch_rng, drop_rng = rng.derive("batches"), rng.derive("dropout")
    losses = []
    for step in range(1, settings.steps + 1):
        batch = sample_batch(data, settings.batch_size, batch_rng, sched, params["in_w"].dtype)
        batch = condition_dropout(batch, drop_rng, settings.p_drop_text, settings.p_drop_image,
                                  settings.p_drop_both)
        params, state, loss = train_step(params, batch, state, settings.lr, cfg=cfg, sched=sched,
                                         optimizer=opt)
        losses.append(loss)
        if callback is not None:
            callback(step, params, loss)
    return params, losses
