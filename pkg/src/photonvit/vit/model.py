"""A small Vision Transformer with explicit per-operator backward rules.

Graph (pre-norm)::

    patches -> embed (+cls, +pos)
    repeat L:  x += Wo . MHSA(norm1(x));  x += W2 . gelu(W1 . norm2(x))
    norm_f(x[:, 0]) -> head

Every matrix product can run three ways: exactly (numpy), through the tiled
optical emulator, or with multiplicative Gaussian noise injected into its
operands (the cheap, differentiable stand-in used for noise-aware
fine-tuning).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..core_math import SeedContext
from ..errors import ParameterError, ShapeError
from ..noise_model import NoiseParams
from ..optical_matmul import CoreGeometry, noisy_matmul
from ..robust_training import CCTConfig, cct_loss, naln_backward, naln_forward
from ..variance_proxy import BANK_SIZE, BankStats, variance_map_diag, variance_map_diag_backward

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

LINEAR_OPS = ("embed", "q", "k", "v", "o", "ffn1", "ffn2", "head")
ATTENTION_OPS = ("scores", "context")
ALL_OPS = LINEAR_OPS + ATTENTION_OPS


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffn_mult: int = 4
    n_classes: int = 4
    norm_kind: str = "LN"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size={self.image_size} is not a multiple of patch_size={self.patch_size}")
        if self.norm_kind not in ("LN", "NALN"):
            raise ParameterError(f"norm_kind must be LN or NALN, got {self.norm_kind!r}")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self):
        return self.n_patches + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2

    @property
    def d_ffn(self):
        return self.ffn_mult * self.d_model


@dataclass(frozen=True)
class NoiseInjectionPolicy:
    """Which operands of each product carry noise.

    ``weight_ops`` get ``(1 + eps + eta)`` on the operand held in the rings,
    ``input_ops`` get ``(1 + zeta)`` on the operand launched by the lasers.
    For ``scores`` the keys sit in the rings; for ``context`` the values do.
    """

    weight_ops: frozenset = frozenset(ALL_OPS)
    input_ops: frozenset = frozenset(ALL_OPS)

    @classmethod
    def paper_default(cls):
        return cls()

    @classmethod
    def split(cls):
        """Weight noise on Q/V/output/FFN, input noise on K and the attention products."""
        return cls(weight_ops=frozenset({"embed", "q", "v", "o", "ffn1", "ffn2", "head"}),
                   input_ops=frozenset({"k", "scores", "context"}))

    @classmethod
    def none(cls):
        return cls(frozenset(), frozenset())


@dataclass(frozen=True)
class NoiseRuntime:
    """How noise enters one forward pass.

    ``kind`` is ``"emulated"`` (optical emulator, inference only) or
    ``"injected"`` (Gaussian multipliers, differentiable). ``ctx`` addresses
    the chip; ``pass_index`` selects the thermal/laser draws.
    """

    params: NoiseParams
    ctx: SeedContext
    kind: str = "emulated"
    pass_index: int = 0
    policy: NoiseInjectionPolicy = field(default_factory=NoiseInjectionPolicy)
    lut_bits: int = 32
    geometry: CoreGeometry = field(default_factory=CoreGeometry)

    def __post_init__(self):
        if self.kind not in ("emulated", "injected"):
            raise ParameterError(f"noise kind must be 'emulated' or 'injected', got {self.kind!r}")


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))


def gelu_grad(x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def softmax(s):
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(da, a):
    return a * (da - np.sum(da * a, axis=-1, keepdims=True))


def patchify(images, patch_size):
    """``(B, C, H, W)`` or ``(B, H, W)`` -> ``(B, n_patches, C*p*p)`` in row-major patch order."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    B, C, H, W = x.shape
    p = patch_size
    x = x.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


def init_params(cfg: ViTConfig, ctx: SeedContext):
    rng = ctx.generator()
    d, f = cfg.d_model, cfg.d_ffn

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

    p = {
        "embed.W": dense(cfg.patch_dim, d), "embed.b": np.zeros(d),
        "cls": 0.02 * rng.standard_normal(d), "pos": 0.02 * rng.standard_normal((cfg.n_tokens, d)),
    }
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        p.update({
            pre + "norm1.g": np.ones(d), pre + "norm1.b": np.zeros(d),
            pre + "q.W": dense(d, d), pre + "q.b": np.zeros(d),
            pre + "k.W": dense(d, d), pre + "k.b": np.zeros(d),
            pre + "v.W": dense(d, d), pre + "v.b": np.zeros(d),
            pre + "o.W": dense(d, d) / math.sqrt(2 * cfg.n_layers), pre + "o.b": np.zeros(d),
            pre + "norm2.g": np.ones(d), pre + "norm2.b": np.zeros(d),
            pre + "ffn1.W": dense(d, f), pre + "ffn1.b": np.zeros(f),
            pre + "ffn2.W": dense(f, d) / math.sqrt(2 * cfg.n_layers), pre + "ffn2.b": np.zeros(d),
        })
    p.update({"normf.g": np.ones(d), "normf.b": np.zeros(d),
              "head.W": dense(d, cfg.n_classes) * 0.1, "head.b": np.zeros(cfg.n_classes)})
    return p


def norm_names(cfg: ViTConfig):
    names = []
    for i in range(cfg.n_layers):
        names += [f"block{i}.norm1", f"block{i}.norm2"]
    return names + ["normf"]


class _Noise:
    """Draws and applies multipliers for one forward pass."""

    def __init__(self, runtime: NoiseRuntime):
        self.rt = runtime
        self._op_counter = {}

    def _ctx(self, site):
        return self.rt.ctx.child(site, 0)

    def injected(self, site, op, x, w, w_shape_for_noise):
        """Return the perturbed ``(x, w)`` multipliers for an injected-noise product."""
        p = self.rt.params
        pass_ctx = self._ctx(site).child("pass", self.rt.pass_index)
        x_mult = w_mult = None
        if op in self.rt.policy.input_ops and p.sigma_laser > 0:
            x_mult = 1.0 + p.sigma_laser * pass_ctx.child("laser").generator().standard_normal(x.shape)
        if op in self.rt.policy.weight_ops and (p.multiplicative_sigma_fab > 0 or p.sigma_thermal > 0):
            eps = p.multiplicative_sigma_fab * self._ctx(site).child("fab").generator().standard_normal(w_shape_for_noise)
            eta = p.sigma_thermal * pass_ctx.child("thermal").generator().standard_normal(w_shape_for_noise)
            w_mult = 1.0 + eps + eta
        return x_mult, w_mult

    def emulated(self, site, op, x, w):
        rt = self.rt
        y, _ = noisy_matmul(x, w, rt.geometry, rt.params, rt.lut_bits, self._ctx(site), rt.pass_index,
                            weight_noise=op in rt.policy.weight_ops, input_noise=op in rt.policy.input_ops)
        return y


class TinyViT:
    """Parameters plus forward/backward for :class:`ViTConfig`.

    ``sigma_n`` maps every norm name to its noise-variance proxy for patch
    tokens and ``sigma_n_cls`` to the proxy for the class token, which never
    passes through the patch embedding. Both are only used when
    ``cfg.norm_kind == "NALN"``.
    """

    def __init__(self, cfg: ViTConfig, params=None, ctx: SeedContext = None, naln_eps=1e-5):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, ctx or SeedContext(0, (("init", 0),)))
        self.sigma_n = {name: 0.0 for name in norm_names(cfg)}
        self.sigma_n_cls = {name: 0.0 for name in norm_names(cfg)}
        self.naln_eps = naln_eps

    def copy(self, norm_kind=None):
        cfg = self.cfg if norm_kind is None else replace(self.cfg, norm_kind=norm_kind)
        other = TinyViT(cfg, {k: v.copy() for k, v in self.params.items()}, naln_eps=self.naln_eps)
        other.sigma_n = dict(self.sigma_n)
        other.sigma_n_cls = dict(self.sigma_n_cls)
        return other

    # -- building blocks -------------------------------------------------
    def _norm(self, x, name, cache):
        s = 0.0
        if self.cfg.norm_kind == "NALN":
            if x.ndim == 3:
                s = np.full((1, x.shape[1], 1), self.sigma_n[name])
                s[0, 0, 0] = self.sigma_n_cls[name]
            else:
                s = self.sigma_n_cls[name]
        y, c = naln_forward(x, s, self.naln_eps, self.params[name + ".g"], self.params[name + ".b"])
        cache[name] = c
        return y

    def _linear(self, x, name, op, cache, noise):
        W = self.params[name + ".W"]
        b = self.params[name + ".b"]
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        x_eff, w_eff = x2, W
        if noise is None:
            y = x2 @ W
        elif noise.rt.kind == "emulated":
            y = noise.emulated(name, op, x2, W)
        else:
            xm, wm = noise.injected(name, op, x2, W, W.shape)
            x_eff = x2 if xm is None else x2 * xm
            w_eff = W if wm is None else W * wm
            cache[name + ".mult"] = (xm, wm)
            y = x_eff @ w_eff
        cache[name] = (x_eff, w_eff)
        return (y + b).reshape(lead + (W.shape[1],))

    def _bmm(self, a, b, site, op, cache, noise):
        """Batched product ``a @ b`` where ``b`` is the ring-held operand."""
        if noise is None:
            a_eff, b_eff = a, b
            y = a @ b
        elif noise.rt.kind == "emulated":
            lead = a.shape[:-2]
            y = noise.emulated(site, op, a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-2:]))
            return y.reshape(lead + y.shape[-2:])
        else:
            # ring positions are shared by every sequence in the batch
            am, bm = noise.injected(site, op, a, b, b.shape[-2:])
            a_eff = a if am is None else a * am
            b_eff = b if bm is None else b * bm
            cache[site + ".mult"] = (am, bm)
            y = a_eff @ b_eff
        cache[site] = (a_eff, b_eff)
        return y

    # -- forward -----------------------------------------------------------
    def forward(self, images, noise: NoiseRuntime = None):
        """Class logits and the activation cache for :meth:`backward`."""
        cfg = self.cfg
        p = self.params
        nz = _Noise(noise) if noise is not None else None
        patches = patchify(images, cfg.patch_size)
        if patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
            raise ShapeError(f"images give patches {patches.shape[1:]}, expected {(cfg.n_patches, cfg.patch_dim)}")
        B = patches.shape[0]
        T, h, dk = cfg.n_tokens, cfg.n_heads, cfg.d_k
        cache = {"B": B, "noise": noise}
        emb = self._linear(patches, "embed", "embed", cache, nz)
        x = np.concatenate([np.broadcast_to(p["cls"], (B, 1, cfg.d_model)), emb], axis=1) + p["pos"]
        cache["attn"] = {}
        for i in range(cfg.n_layers):
            pre = f"block{i}."
            hn = self._norm(x, pre + "norm1", cache)
            q = self._linear(hn, pre + "q", "q", cache, nz)
            k = self._linear(hn, pre + "k", "k", cache, nz)
            v = self._linear(hn, pre + "v", "v", cache, nz)
            qh = q.reshape(B, T, h, dk).transpose(0, 2, 1, 3)
            kh = k.reshape(B, T, h, dk).transpose(0, 2, 1, 3)
            vh = v.reshape(B, T, h, dk).transpose(0, 2, 1, 3)
            s = self._bmm(qh, kh.transpose(0, 1, 3, 2), pre + "scores", "scores", cache, nz) / math.sqrt(dk)
            a = softmax(s)
            ctx_h = self._bmm(a, vh, pre + "context", "context", cache, nz)
            merged = ctx_h.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + self._linear(merged, pre + "o", "o", cache, nz)
            cache["attn"][i] = {"q": qh, "k": kh, "s": s, "a": a}
            hn2 = self._norm(x, pre + "norm2", cache)
            u = self._linear(hn2, pre + "ffn1", "ffn1", cache, nz)
            cache[pre + "u"] = u
            x = x + self._linear(gelu(u), pre + "ffn2", "ffn2", cache, nz)
        cache["x_final"] = x
        hf = self._norm(x[:, 0], "normf", cache)
        logits = self._linear(hf, "head", "head", cache, nz)
        return logits, cache

    def predict(self, images, noise: NoiseRuntime = None, batch_size=256):
        out = []
        for start in range(0, len(images), batch_size):
            logits, _ = self.forward(images[start:start + batch_size], noise)
            out.append(np.argmax(logits, axis=-1))
        return np.concatenate(out)

    # -- backward ----------------------------------------------------------
    def _linear_back(self, dy, name, cache, grads):
        x_eff, w_eff = cache[name]
        lead = dy.shape[:-1]
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads[name + ".b"] = grads.get(name + ".b", 0) + dy2.sum(axis=0)
        dw = x_eff.T @ dy2
        dx = dy2 @ w_eff.T
        mult = cache.get(name + ".mult")
        if mult is not None:
            xm, wm = mult
            if wm is not None:
                dw = dw * wm
            if xm is not None:
                dx = dx * xm
        grads[name + ".W"] = grads.get(name + ".W", 0) + dw
        return dx.reshape(lead + (x_eff.shape[-1],))

    def _bmm_back(self, dy, site, cache):
        a_eff, b_eff = cache[site]
        da = dy @ np.swapaxes(b_eff, -1, -2)
        db = np.swapaxes(a_eff, -1, -2) @ dy
        mult = cache.get(site + ".mult")
        if mult is not None:
            am, bm = mult
            if am is not None:
                da = da * am
            if bm is not None:
                db = db * bm
        return da, db

    def _norm_back(self, dy, name, cache, grads):
        dx, dg, db = naln_backward(dy, cache[name])
        grads[name + ".g"] = grads.get(name + ".g", 0) + dg
        grads[name + ".b"] = grads.get(name + ".b", 0) + db
        return dx

    def loss_and_grads(self, images, labels, noise: NoiseRuntime = None, cct: CCTConfig = None,
                       epoch=0, bank_stats: BankStats = None, z_tau=None):
        """Total loss ``CE + lambda * CCT`` and its gradient for every parameter.

        Returns ``(loss, grads, info)`` where ``info`` carries the separate
        loss terms and the logits.
        """
        logits, cache = self.forward(images, noise)
        if noise is not None and noise.kind == "emulated":
            raise ParameterError("emulated forward passes are inference-only; use injected noise to train")
        return self.backward(cache, logits, labels, cct, epoch, bank_stats, z_tau)

    def backward(self, cache, logits, labels, cct: CCTConfig = None, epoch=0,
                 bank_stats: BankStats = None, z_tau=None):
        cfg = self.cfg
        B, T, h, dk = cache["B"], cfg.n_tokens, cfg.n_heads, cfg.d_k
        labels = np.asarray(labels)
        prob = softmax(logits)
        ce = float(-np.mean(np.log(prob[np.arange(B), labels] + 1e-300)))
        dlogits = prob.copy()
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B

        use_cct = cct is not None and cct.lambda_cct > 0
        cct_grads = {}
        cct_value = 0.0
        if use_cct:
            cct_value, cct_grads = self._cct_terms(cache, cct, epoch, bank_stats, z_tau)

        grads = {}
        dhf = self._linear_back(dlogits, "head", cache, grads)
        dx = np.zeros_like(cache["x_final"])
        dx[:, 0] = self._norm_back(dhf, "normf", cache, grads)
        for i in reversed(range(cfg.n_layers)):
            pre = f"block{i}."
            dg = self._linear_back(dx, pre + "ffn2", cache, grads)
            du = dg * gelu_grad(cache[pre + "u"])
            dhn2 = self._linear_back(du, pre + "ffn1", cache, grads)
            dx = dx + self._norm_back(dhn2, pre + "norm2", cache, grads)

            dmerged = self._linear_back(dx, pre + "o", cache, grads)
            dctx = dmerged.reshape(B, T, h, dk).transpose(0, 2, 1, 3)
            att = cache["attn"][i]
            da, dvh = self._bmm_back(dctx, pre + "context", cache)
            ds = softmax_backward(da, att["a"])
            dq_extra = dk_extra = 0.0
            if i in cct_grads:
                g_s, dq_extra, dk_extra = cct_grads[i]
                ds = ds + g_s
            ds = ds / math.sqrt(dk)
            dqh, dkt = self._bmm_back(ds, pre + "scores", cache)
            dqh = dqh + dq_extra
            dkh = dkt.transpose(0, 1, 3, 2) + dk_extra
            merge = lambda g: g.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            dhn = (self._linear_back(merge(dqh), pre + "q", cache, grads)
                   + self._linear_back(merge(dkh), pre + "k", cache, grads)
                   + self._linear_back(merge(dvh), pre + "v", cache, grads))
            dx = dx + self._norm_back(dhn, pre + "norm1", cache, grads)

        grads["pos"] = dx.sum(axis=0)
        grads["cls"] = dx[:, 0].sum(axis=0)
        self._linear_back(dx[:, 1:], "embed", cache, grads)
        total = ce + (cct.lambda_cct * cct_value if use_cct else 0.0)
        return total, grads, {"ce": ce, "cct": cct_value, "logits": logits}

    def _cct_terms(self, cache, cct: CCTConfig, epoch, bank_stats, z_tau):
        """CCT loss over the active layers/heads and its gradients.

        Gradients are returned per layer as ``(d_scores, d_q, d_k)`` already
        multiplied by ``lambda``; ``d_scores`` is with respect to the scaled
        logits ``s = q.k / sqrt(d_k)``.
        """
        cfg = self.cfg
        dk = cfg.d_k
        layers = cct.layers_for(cfg.n_layers)
        heads = list(cct.heads_for(cfg.n_heads))
        if bank_stats is None:
            bank_stats = BankStats.for_width(dk, 0.0)
        results = []
        for i in layers:
            att = cache["attn"][i]
            q = att["q"][:, heads]
            k = att["k"][:, heads]
            v = variance_map_diag(q, k, bank_stats, dk)
            res = cct_loss(att["s"][:, heads], v, cct, epoch, z_tau)
            results.append((i, q, k, res))
        n_total = sum(r.n_terms for *_, r in results)
        value = sum(r.loss * r.n_terms for *_, r in results) / n_total
        out = {}
        for i, q, k, res in results:
            w = cct.lambda_cct * res.n_terms / n_total
            g_s = np.zeros_like(cache["attn"][i]["s"])
            g_s[:, heads] = w * res.grad_logits
            dq_v, dk_v = variance_map_diag_backward(w * res.grad_variances, q, k, bank_stats, dk)
            dq = np.zeros_like(cache["attn"][i]["q"])
            dkk = np.zeros_like(dq)
            dq[:, heads] = dq_v
            dkk[:, heads] = dk_v
            out[i] = (g_s, dq, dkk)
        return value, out

    def scalar_loss(self, images, labels, noise=None, cct=None, epoch=0, bank_stats=None, z_tau=None):
        """Loss only (for finite-difference checks)."""
        logits, cache = self.forward(images, noise)
        ce_loss = float(-np.mean(np.log(softmax(logits)[np.arange(len(labels)), labels] + 1e-300)))
        if cct is None or cct.lambda_cct == 0:
            return ce_loss
        value, _ = self._cct_terms(cache, cct, epoch, bank_stats, z_tau)
        return ce_loss + cct.lambda_cct * value


def default_bank_stats(params: NoiseParams, d_k, bank_size=BANK_SIZE):
    """Per-bank variance taken from the same noise triple used at inference."""
    return BankStats.for_width(d_k, params.total_variance, bank_size)
