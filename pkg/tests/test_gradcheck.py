import numpy as np
import pytest

from udaqa.gradcheck import analytic_gradients, check_model_gradients, reference_loss
from udaqa.model import ModelConfig, ModelParams

TINY = dict(M=8, N=6, K=4, D=3, regressor_hidden=(8,), map_hidden=(4,))

VARIANTS = [
    ({}, {}),
    ({"wa": False}, {}),
    ({"use_video_feature": False}, {}),
    ({"cvae": False}, {}),
    ({"wa_hidden": (5,), "prior_hidden": (5,)}, {}),
    ({}, {"squared": True}),
    ({}, {"reweight": False, "alpha": 0.3}),
    ({}, {"beta": 2.5}),
]


def _batch(cfg, rng, B=3):
    return (rng.normal(size=(B, cfg.K, cfg.M)), rng.normal(size=(B, cfg.N)),
            rng.uniform(size=B), rng.normal(size=(B, cfg.D)))


@pytest.mark.parametrize("cfg_kw,loss_kw", VARIANTS)
def test_reference_forward_matches_engine(cfg_kw, loss_kw):
    cfg = ModelConfig(**TINY, **cfg_kw)
    p = ModelParams.initialize(cfg, seed=5)
    clips, video, y, noise = _batch(cfg, np.random.default_rng(0))
    ref, _ = reference_loss({k: v[None] for k, v in p.named_arrays()}, cfg, clips, video, y, noise, **loss_kw)
    eng, _ = analytic_gradients(p, clips, video, y, noise, **loss_kw)
    assert ref.shape == (1,)
    assert ref[0] == pytest.approx(eng, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("cfg_kw,loss_kw", VARIANTS)
def test_model_gradients_agree(cfg_kw, loss_kw):
    cfg = ModelConfig(**TINY, **cfg_kw)
    p = ModelParams.initialize(cfg, seed=11)
    clips, video, y, noise = _batch(cfg, np.random.default_rng(1))
    res, per = check_model_gradients(p, clips, video, y, noise, **loss_kw)
    assert res.max_rel_error <= 1e-6
    assert res.checked > 0.9 * (res.checked + res.excluded)
    assert set(per) == {name for name, _ in p.named_arrays()}


def test_copy_axis_evaluates_each_copy_independently():
    cfg = ModelConfig(**TINY)
    a, b = ModelParams.initialize(cfg, 1), ModelParams.initialize(cfg, 2)
    clips, video, y, noise = _batch(cfg, np.random.default_rng(2))
    stacked = {k: np.stack([va, dict(b.named_arrays())[k]]) for k, va in a.named_arrays()}
    both, _ = reference_loss(stacked, cfg, clips, video, y, noise)
    for i, p in enumerate((a, b)):
        one, _ = reference_loss({k: v[None] for k, v in p.named_arrays()}, cfg, clips, video, y, noise)
        assert both[i] == pytest.approx(one[0], rel=1e-13)


def test_check_detects_a_wrong_gradient(monkeypatch):
    import udaqa.gradcheck as gc
    cfg = ModelConfig(**TINY)
    p = ModelParams.initialize(cfg, 3)
    clips, video, y, noise = _batch(cfg, np.random.default_rng(3))
    real = gc.analytic_gradients

    def skewed(*a, **k):
        loss, grads = real(*a, **k)
        grads["regressor.0.bias"] = grads["regressor.0.bias"] * 1.01 + 0.01
        return loss, grads

    monkeypatch.setattr(gc, "analytic_gradients", skewed)
    res, per = gc.check_model_gradients(p, clips, video, y, noise)
    assert res.max_rel_error > 1e-3
    assert max(per, key=per.get) == "regressor.0.bias"
