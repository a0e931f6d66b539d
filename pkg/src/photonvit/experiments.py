"""Training and evaluation flows shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .config import ExperimentConfig
from .core_math import SeedContext
from .errors import ParameterError
from .noise_model import NoiseParams
from .robust_training import CCTConfig
from .vit.data import Dataset, load_dataset_csv, make_split
from .vit.model import TinyViT
from .vit.train import NoisyEval, TrainConfig, TrainState, accuracy, evaluate_noisy, train

# fine-tuning modes; each starts from the clean pretrained weights
MODES = ("normal-ft", "cct", "cct-naln")


def load_data(cfg: ExperimentConfig):
    d = cfg["data"]
    n_classes = cfg.vit.n_classes
    if d["train_csv"] or d["test_csv"]:
        if not (d["train_csv"] and d["test_csv"]):
            raise ParameterError("train_csv and test_csv must be given together")
        return load_dataset_csv(d["train_csv"], n_classes), load_dataset_csv(d["test_csv"], n_classes)
    v = cfg.vit
    return make_split(SeedContext(cfg.seed).child("data"), n_classes, d["n_train_per_class"],
                      d["n_test_per_class"], v.image_size, d["separation"])


def pretrain_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], weight_decay=t["weight_decay"],
                       beta1=t["beta1"], beta2=t["beta2"], lut_bits=cfg["device"]["lut_bits"])


def finetune_config(cfg: ExperimentConfig, mode, noise: NoiseParams) -> TrainConfig:
    """Every mode trains on noise-injected forward passes; the CCT modes add the hinge term."""
    if mode not in MODES:
        raise ParameterError(f"unknown fine-tuning mode {mode!r}; expected one of {MODES}")
    f = cfg["finetune"]
    cct: CCTConfig = cfg.cct if mode in ("cct", "cct-naln") else None
    return replace(pretrain_config(cfg), epochs=f["epochs"], lr=f["lr"], noisy_forward=True, noise=noise, cct=cct)


def pretrain(cfg: ExperimentConfig, train_ds: Dataset, on_epoch=None) -> TrainState:
    root = SeedContext(cfg.seed)
    model = TinyViT(cfg.vit, ctx=root.child("init"), naln_eps=cfg["naln"]["eps"])
    return train(model, train_ds, pretrain_config(cfg), root.child("pretrain"), on_epoch=on_epoch)


def finetune(cfg: ExperimentConfig, base: TinyViT, train_ds: Dataset, mode, noise: NoiseParams,
             on_epoch=None) -> TrainState:
    model = base.copy(norm_kind="NALN" if mode == "cct-naln" else "LN")
    return train(model, train_ds, finetune_config(cfg, mode, noise), finetune_ctx(cfg, noise), on_epoch=on_epoch)


def finetune_ctx(cfg: ExperimentConfig, noise: NoiseParams) -> SeedContext:
    # same stream for every mode so the comparison is paired
    return SeedContext(cfg.seed).child("finetune").child("sigma", int(round(noise.sigma_fab * 1e6)))


def evaluate(cfg: ExperimentConfig, model: TinyViT, ds: Dataset, noise: NoiseParams) -> NoisyEval:
    """Noisy accuracy over ``[eval] trials`` chips, identical chips for every model."""
    e = cfg["eval"]
    ctx = SeedContext(cfg.seed).child("evaluate").child("sigma", int(round(noise.sigma_fab * 1e6)))
    return evaluate_noisy(model, ds, noise, e["trials"], ctx, cfg["device"]["lut_bits"], kind=e["kind"])


@dataclass(frozen=True)
class RobustnessResult:
    sigma_fab: float
    clean: float
    direct: NoisyEval
    finetuned: dict
    finetuned_clean: dict

    def rows(self):
        yield "clean", self.clean, self.clean, 0.0
        yield "direct-noisy", self.direct.mean, self.direct.best, self.direct.std
        for mode, ev in self.finetuned.items():
            yield mode, ev.mean, ev.best, ev.std

    @property
    def gap_recovered(self):
        """Fraction of the clean-vs-direct-noisy gap closed by CCT+NALN (nan without it)."""
        gap = self.clean - self.direct.mean
        ev = self.finetuned.get("cct-naln")
        if ev is None or gap <= 0:
            return float("nan")
        return (ev.mean - self.direct.mean) / gap


def robustness_at(cfg: ExperimentConfig, base: TinyViT, train_ds: Dataset, test_ds: Dataset, sigma_fab,
                  modes=MODES) -> RobustnessResult:
    noise = cfg.noise.with_sigma_fab(sigma_fab)
    clean = accuracy(base, test_ds)
    direct = evaluate(cfg, base, test_ds, noise)
    finetuned, finetuned_clean = {}, {}
    for mode in modes:
        model = finetune(cfg, base, train_ds, mode, noise).model
        finetuned[mode] = evaluate(cfg, model, test_ds, noise)
        finetuned_clean[mode] = accuracy(model, test_ds)
    return RobustnessResult(sigma_fab, clean, direct, finetuned, finetuned_clean)
