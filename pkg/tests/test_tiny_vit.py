import numpy as np
import pytest

from photonvit.core_math import SeedContext
from photonvit.errors import ParameterError, ShapeError
from photonvit.noise_model import NoiseParams
from photonvit.robust_training import CCTConfig
from photonvit.variance_proxy import BankStats
from photonvit.vit.checkpoint import load_checkpoint, save_checkpoint
from photonvit.vit.data import (
    class_templates, load_dataset_csv, make_split, make_synthetic_dataset, save_dataset_csv,
)
from photonvit.vit.model import (
    NoiseInjectionPolicy, NoiseRuntime, TinyViT, ViTConfig, gelu, gelu_grad, softmax,
)
from photonvit.vit.train import TrainConfig, evaluate_noisy, refresh_sigma_n, train

SMALL = ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=2, n_classes=3)


def small_batch(seed=0, n=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 8, 8)), rng.integers(0, 3, n)


def test_config_validation():
    with pytest.raises(ParameterError):
        ViTConfig(d_model=10, n_heads=3)
    with pytest.raises(ParameterError):
        ViTConfig(image_size=10, patch_size=4)
    with pytest.raises(ParameterError):
        ViTConfig(norm_kind="BN")
    assert (SMALL.d_k, SMALL.n_tokens, SMALL.patch_dim, SMALL.d_ffn) == (8, 5, 16, 64)


def test_elementwise_pieces():
    assert gelu(np.array(0.0)) == 0.0
    x = np.linspace(-3, 3, 13)
    num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    assert np.allclose(gelu_grad(x), num, atol=1e-8)
    a = softmax(np.random.default_rng(0).standard_normal((4, 7)) * 30)
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_forward_deterministic_and_shapes():
    images, _ = small_batch()
    m1 = TinyViT(SMALL, ctx=SeedContext(1))
    m2 = TinyViT(SMALL, ctx=SeedContext(1))
    l1, cache = m1.forward(images)
    l2, _ = m2.forward(images)
    assert l1.shape == (3, 3) and np.array_equal(l1, l2)
    for att in cache["attn"].values():
        assert np.allclose(att["a"].sum(axis=-1), 1.0, atol=1e-12)
    assert cache["x_final"].shape == (3, SMALL.n_tokens, SMALL.d_model)
    with pytest.raises(ShapeError):
        m1.forward(np.zeros((2, 12, 12)))


@pytest.mark.parametrize("kind", ["emulated", "injected"])
def test_noiseless_runtime_equals_exact(kind):
    images, _ = small_batch(1)
    model = TinyViT(SMALL, ctx=SeedContext(2))
    exact, _ = model.forward(images)
    rt = NoiseRuntime(NoiseParams.noiseless(), SeedContext(3), kind=kind)
    noisy, _ = model.forward(images, rt)
    # each emulated product is within 1e-9; the 32-bit LUT grid (2.3e-10 per weight)
    # compounds through the blocks to roughly 1e-9 at the logits
    tol = 1e-8 if kind == "emulated" else 1e-12
    assert np.max(np.abs(noisy - exact)) <= tol * np.max(np.abs(exact))


def test_noisy_runtime_perturbs_and_replays():
    images, _ = small_batch(2)
    model = TinyViT(SMALL, ctx=SeedContext(2))
    exact, _ = model.forward(images)
    rt = NoiseRuntime(NoiseParams.pre_trim(0.4), SeedContext(5))
    a, _ = model.forward(images, rt)
    b, _ = model.forward(images, rt)
    assert np.array_equal(a, b) and not np.allclose(a, exact)
    none, _ = model.forward(images, NoiseRuntime(NoiseParams.pre_trim(0.4), SeedContext(5),
                                                 policy=NoiseInjectionPolicy.none()))
    assert np.allclose(none, exact, atol=1e-12)


def grad_check(model, images, labels, noise=None, cct=None, bank_stats=None):
    loss, grads, _ = model.loss_and_grads(images, labels, noise, cct, 3, bank_stats)
    assert loss == pytest.approx(model.scalar_loss(images, labels, noise, cct, 3, bank_stats), rel=1e-12)
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in model.params.items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(flat.size, 6), replace=False)
        num = np.zeros(picks.size)
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + 1e-6
            up = model.scalar_loss(images, labels, noise, cct, 3, bank_stats)
            flat[i] = old - 1e-6
            dn = model.scalar_loss(images, labels, noise, cct, 3, bank_stats)
            flat[i] = old
            num[j] = (up - dn) / 2e-6
        ana = grads[name].reshape(-1)[picks]
        # denominator floor keeps round-off (~1e-10) on near-zero groups from dominating
        worst = max(worst, np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-3))
    return worst


def test_gradients_match_finite_differences_plain():
    images, labels = small_batch(3)
    assert grad_check(TinyViT(SMALL, ctx=SeedContext(4)), images, labels) < 1e-4


def test_gradients_with_injected_noise_cct_and_naln():
    images, labels = small_batch(4)
    model = TinyViT(SMALL.__class__(**{**SMALL.__dict__, "norm_kind": "NALN"}), ctx=SeedContext(5))
    model.sigma_n.update({k: 0.05 for k in model.sigma_n})
    noise = NoiseRuntime(NoiseParams.pre_trim(0.2), SeedContext(6), kind="injected")
    cct = CCTConfig(lambda_cct=0.5, k=2, anneal_epochs=4)
    assert grad_check(model, images, labels, noise, cct, BankStats.for_width(SMALL.d_k, 0.3)) < 1e-4


def test_lambda_zero_reduces_to_cross_entropy():
    images, labels = small_batch(5)
    model = TinyViT(SMALL, ctx=SeedContext(7))
    l0, g0, _ = model.loss_and_grads(images, labels)
    l1, g1, info = model.loss_and_grads(images, labels, cct=CCTConfig(lambda_cct=0.0))
    assert l0 == l1 and info["cct"] == 0.0
    assert all(np.array_equal(g0[k], g1[k]) for k in g0)


def test_proxy_gradient_path_active():
    images, labels = small_batch(6, n=4)
    model = TinyViT(SMALL, ctx=SeedContext(8))
    cct = CCTConfig(lambda_cct=1.0, k=2)
    _, ga, _ = model.loss_and_grads(images, labels, cct=cct, bank_stats=BankStats.for_width(8, 0.1))
    _, gb, _ = model.loss_and_grads(images, labels, cct=cct, bank_stats=BankStats(variances=[0.5]))
    assert not np.allclose(ga["block0.q.W"], gb["block0.q.W"])


def test_emulated_noise_cannot_train():
    images, labels = small_batch(7)
    with pytest.raises(ParameterError):
        TinyViT(SMALL).loss_and_grads(images, labels, NoiseRuntime(NoiseParams(), SeedContext(0)))


def two_class_set(seed=0, n=40, separation=2.5):
    return make_synthetic_dataset(SeedContext(seed), 2, n, 8, separation)


def test_zero_learning_rate_keeps_parameters():
    ds = two_class_set()
    cfg2 = ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=1, n_classes=2)
    model = TinyViT(cfg2, ctx=SeedContext(1))
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, ds, TrainConfig(epochs=2, lr=0.0, weight_decay=0.0), SeedContext(2))
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_smoke_training_reaches_95_percent():
    ds = two_class_set()
    cfg2 = ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=1, n_classes=2)
    model = TinyViT(cfg2, ctx=SeedContext(1))
    state = train(model, ds, TrainConfig(epochs=50, lr=3e-3, batch_size=16), SeedContext(2),
                  on_epoch=lambda s, m: None)
    accs = [m.clean_acc for m in state.history]
    reached = [i for i, a in enumerate(accs) if a >= 0.95]
    assert reached and reached[0] < 50
    losses = [m.loss for m in state.history]
    ema, trace = losses[0], []
    for value in losses:
        ema = 0.8 * ema + 0.2 * value
        trace.append(ema)
    assert trace[-1] < trace[len(trace) // 2] < trace[0]


def test_evaluate_noisy_properties():
    ds = two_class_set(n=10)
    cfg2 = ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=1, n_classes=2)
    model = TinyViT(cfg2, ctx=SeedContext(3))
    clean = float(np.mean(model.predict(ds.images) == ds.labels))
    one = evaluate_noisy(model, ds, NoiseParams.noiseless(), trials=1)
    assert one.mean == clean and one.per_trial == (clean,)
    ev = evaluate_noisy(model, ds, NoiseParams.pre_trim(0.8))
    assert len(ev.per_trial) == 10
    assert ev.mean <= ev.best
    again = evaluate_noisy(model, ds, NoiseParams.pre_trim(0.8))
    assert again == ev


def test_refresh_sigma_n_structure():
    ds = two_class_set(n=8)
    model = TinyViT(ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=2,
                              n_classes=2, norm_kind="NALN"), ctx=SeedContext(4))
    refresh_sigma_n(model, ds, NoiseParams.pre_trim(0.4))
    order = ["block0.norm1", "block0.norm2", "block1.norm1", "block1.norm2", "normf"]
    patch = [model.sigma_n[n] for n in order]
    cls = [model.sigma_n_cls[n] for n in order]
    assert patch[0] > 0 and cls[0] == 0.0
    assert all(a < b for a, b in zip(patch, patch[1:]))
    # the class token misses only the embedding contribution
    assert np.allclose(np.array(patch) - np.array(cls), patch[0])
    refresh_sigma_n(model, ds, NoiseParams.noiseless())
    assert all(v == 0.0 for v in model.sigma_n.values())


def test_dataset_separation_controls_signal():
    ctx = SeedContext(5)
    flat = make_synthetic_dataset(ctx, 3, 20, 8, separation=0.0)
    sharp = make_synthetic_dataset(ctx, 3, 20, 8, separation=20.0)
    templates = class_templates(ctx.child("templates"), 3, 8)
    assert np.array_equal(flat.labels, sharp.labels)
    assert np.allclose(sharp.images - flat.images, 20.0 * templates[sharp.labels])
    # noise-only images carry no label information; large separation is linearly separable
    scores = np.einsum("nij,cij->nc", sharp.images, templates) - 10.0 * np.sum(templates ** 2, axis=(1, 2))
    assert np.mean(np.argmax(scores, axis=1) == sharp.labels) == 1.0
    with pytest.raises(ParameterError):
        make_synthetic_dataset(ctx, 1, 5)


def test_split_shares_templates():
    train_ds, test_ds = make_split(SeedContext(6), 2, 5, 7, 8, separation=0.0)
    assert len(train_ds) == 10 and len(test_ds) == 14
    assert not np.array_equal(train_ds.images[:5], test_ds.images[:5])


def test_dataset_csv_round_trip(tmp_path):
    ds = make_synthetic_dataset(SeedContext(7), 3, 4, 8)
    save_dataset_csv(tmp_path / "d.csv", ds)
    back = load_dataset_csv(tmp_path / "d.csv", 3)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    (tmp_path / "bad.csv").write_text("0,2,2,1,2,3\n")
    with pytest.raises(ParameterError):
        load_dataset_csv(tmp_path / "bad.csv")


def test_checkpoint_resume_is_bit_exact(tmp_path):
    ds = two_class_set(n=12)
    cfg2 = ViTConfig(image_size=8, patch_size=4, d_model=16, n_heads=2, n_layers=1, n_classes=2,
                     norm_kind="NALN")
    tcfg = TrainConfig(epochs=3, batch_size=8, noisy_forward=True, noise=NoiseParams.pre_trim(0.3),
                       cct=CCTConfig(lambda_cct=0.2, k=2, anneal_epochs=2))
    straight = train(TinyViT(cfg2, ctx=SeedContext(8)), ds, tcfg, SeedContext(9))

    first = train(TinyViT(cfg2, ctx=SeedContext(8)), ds, TrainConfig(**{**tcfg.__dict__, "epochs": 2}),
                  SeedContext(9))
    save_checkpoint(tmp_path / "ck", first, {"note": "x"})
    state, extra = load_checkpoint(tmp_path / "ck")
    assert extra == {"note": "x"} and state.epoch == 2
    resumed = train(state.model, ds, tcfg, state.ctx, state=state)
    assert resumed.history[-1].row() == straight.history[-1].row()
    for k in straight.model.params:
        assert np.array_equal(resumed.model.params[k], straight.model.params[k])
    (tmp_path / "ck" / "checkpoint.json").write_text("{}")
    with pytest.raises(ParameterError):
        load_checkpoint(tmp_path / "ck")
