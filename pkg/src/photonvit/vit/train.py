"""AdamW training, noise-variance refresh for NALN and noisy evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core_math import SeedContext
from ..noise_model import NoiseParams
from ..robust_training import CCTConfig, RunningSquareMean, sigma_n_proxy_for_layer, tau_at
from .data import Dataset
from .model import NoiseInjectionPolicy, NoiseRuntime, TinyViT, default_bank_stats

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noisy_forward: bool = False
    noise: NoiseParams = field(default_factory=NoiseParams.noiseless)
    policy: NoiseInjectionPolicy = field(default_factory=NoiseInjectionPolicy)
    cct: CCTConfig = None
    eval_trials: int = 0
    lut_bits: int = 32


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            p = params[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if self.wd and p.ndim == 2 and name != "pos":
                p -= self.lr * self.wd * p
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    ce: float
    cct: float
    tau: float
    clean_acc: float
    noisy_acc_mean: float = float("nan")
    noisy_acc_best: float = float("nan")

    def row(self):
        return [self.epoch, self.loss, self.ce, self.cct, self.tau, self.clean_acc,
                self.noisy_acc_mean, self.noisy_acc_best]

    header = ["epoch", "loss", "ce", "cct", "tau", "clean_acc", "noisy_acc_mean", "noisy_acc_best"]


@dataclass
class TrainState:
    model: TinyViT
    optimizer: AdamW
    epoch: int
    ctx: SeedContext
    history: list = field(default_factory=list)


def accuracy(model: TinyViT, ds: Dataset, noise: NoiseRuntime = None):
    return float(np.mean(model.predict(ds.images, noise) == ds.labels))


@dataclass(frozen=True)
class NoisyEval:
    mean: float
    best: float
    std: float
    per_trial: tuple


def evaluate_noisy(model: TinyViT, ds: Dataset, params: NoiseParams, trials=10, ctx: SeedContext = None,
                   lut_bits=32, policy: NoiseInjectionPolicy = None, kind="emulated") -> NoisyEval:
    """Top-1 accuracy over ``trials`` independent chips (``ctx/trial<i>``)."""
    ctx = SeedContext(0, (("eval", 0),)) if ctx is None else ctx
    policy = NoiseInjectionPolicy() if policy is None else policy
    accs = []
    for t in range(trials):
        rt = NoiseRuntime(params, ctx.child("trial", t), kind=kind, policy=policy, lut_bits=lut_bits)
        accs.append(accuracy(model, ds, rt))
    accs = np.array(accs)
    return NoisyEval(float(accs.mean()), float(accs.max()), float(accs.std()), tuple(accs.tolist()))


def refresh_sigma_n(model: TinyViT, ds: Dataset, params: NoiseParams, batch_size=128):
    """Set each norm's noise-variance proxy from running input statistics.

    Every linear that writes into the residual stream (patch embedding,
    attention output, second FFN layer) contributes its proxy to all norms
    downstream of it. The class token skips the patch embedding, so its
    proxy leaves that contribution out.
    """
    cfg = model.cfg
    writers = ["embed"] + [f"block{i}.{op}" for i in range(cfg.n_layers) for op in ("o", "ffn2")]
    stats = {}
    for start in range(0, len(ds), batch_size):
        _, cache = model.forward(ds.images[start:start + batch_size])
        for name in writers:
            x_eff, _ = cache[name]
            stats.setdefault(name, RunningSquareMean(x_eff.shape[-1])).update(x_eff)
    proxy = {name: sigma_n_proxy_for_layer(stats[name].value, model.params[name + ".W"], params)
             for name in writers}
    acc, acc_cls = proxy["embed"], 0.0
    out, out_cls = {}, {}
    for i in range(cfg.n_layers):
        for norm, op in ((f"block{i}.norm1", f"block{i}.o"), (f"block{i}.norm2", f"block{i}.ffn2")):
            out[norm], out_cls[norm] = acc, acc_cls
            acc += proxy[op]
            acc_cls += proxy[op]
    out["normf"], out_cls["normf"] = acc, acc_cls
    model.sigma_n.update(out)
    model.sigma_n_cls.update(out_cls)
    return out


def train(model: TinyViT, train_ds: Dataset, cfg: TrainConfig, ctx: SeedContext,
          eval_ds: Dataset = None, state: TrainState = None, on_epoch=None) -> TrainState:
    """Minibatch AdamW on ``CE + lambda * CCT``.

    With ``cfg.noisy_forward`` every step samples a fresh chip and injects the
    configured multiplicative noise into the forward pass. Pass ``state`` to
    resume; all randomness is keyed by ``(ctx, epoch, step)``.
    """
    if state is None:
        opt = AdamW(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        state = TrainState(model, opt, 0, ctx)
    bank_stats = default_bank_stats(cfg.noise, model.cfg.d_k)
    eval_ds = train_ds if eval_ds is None else eval_ds
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        ectx = ctx.child("epoch", epoch)
        if model.cfg.norm_kind == "NALN":
            refresh_sigma_n(model, train_ds, cfg.noise)
        order = ectx.child("shuffle").generator().permutation(len(train_ds))
        losses, ces, ccts = [], [], []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            noise = None
            if cfg.noisy_forward:
                noise = NoiseRuntime(cfg.noise, ectx.child("chip", step), kind="injected", policy=cfg.policy)
            loss, grads, info = model.loss_and_grads(train_ds.images[idx], train_ds.labels[idx], noise,
                                                     cfg.cct, epoch, bank_stats)
            state.optimizer.step(model.params, grads)
            losses.append(loss)
            ces.append(info["ce"])
            ccts.append(info["cct"])
        metrics = EpochMetrics(epoch, float(np.mean(losses)), float(np.mean(ces)), float(np.mean(ccts)),
                               tau_at(cfg.cct, epoch) if cfg.cct else float("nan"),
                               accuracy(model, eval_ds))
        if cfg.eval_trials:
            ev = evaluate_noisy(model, eval_ds, cfg.noise, cfg.eval_trials, ectx.child("eval"), cfg.lut_bits)
            metrics.noisy_acc_mean, metrics.noisy_acc_best = ev.mean, ev.best
        state.history.append(metrics)
        state.epoch += 1
        log.info("epoch %d loss %.4f acc %.3f", epoch, metrics.loss, metrics.clean_acc)
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state
