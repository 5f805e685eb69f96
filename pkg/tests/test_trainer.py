import io
import json
import math

import numpy as np
import pytest

from udaqa.data import SyntheticSpec, generate_synthetic, load_dataset, select_split
from udaqa.model import ModelParams
from udaqa.trainer import (CurriculumState, TrainConfig, TrainingDivergedError, active_count, curriculum_subset,
                           evaluate, sample_judge_label, train)

FAST = dict(epochs=4, regressor_hidden=(32, 16), batch_size=8)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    dest = tmp_path_factory.mktemp("tiny") / "d"
    generate_synthetic(SyntheticSpec(n_samples=20, split_fractions=(("train", 0.5), ("val", 0.5)), seed=5), dest)
    samples, m = load_dataset(dest)
    return select_split(samples, "train"), select_split(samples, "val"), m


def test_single_score_and_identical_scores():
    rng = np.random.default_rng(0)
    assert all(sample_judge_label([0.3], rng) == 0.3 for _ in range(20))
    assert all(sample_judge_label([7.0, 7.0, 7.0], rng) == 7.0 for _ in range(20))
    with pytest.raises(ValueError):
        sample_judge_label([], rng)


def test_judge_draws_are_uniform():
    rng = np.random.default_rng(17)
    draws = [sample_judge_label([6.0, 7.0, 8.0], rng) for _ in range(3000)]
    counts = [draws.count(v) for v in (6.0, 7.0, 8.0)]
    assert all(abs(c - 1000) <= 100 for c in counts)
    chi2 = sum((c - 1000) ** 2 / 1000 for c in counts)
    assert chi2 < 13.8  # 0.999 quantile with two degrees of freedom


@pytest.mark.parametrize("percent, size, expected", [(40, 10, 4), (60, 10, 6), (100, 10, 10), (40, 600, 240),
                                                     (40, 7, 3), (1, 10, 1)])
def test_active_count(percent, size, expected):
    assert active_count(percent, size) == expected


def test_subset_before_any_u_is_everything_in_order():
    assert curriculum_subset(CurriculumState(n=5, percent=40), 5) == [0, 1, 2, 3, 4]


def test_subset_is_the_ascending_u_prefix():
    st = CurriculumState(n=10, percent=40, u=np.array([5.0, 1.0, 9.0, 0.5, 3.0, 3.0, 8.0, 7.0, 6.0, 2.0]))
    assert curriculum_subset(st, 10) == [3, 1, 9, 4]
    st.percent = 60
    assert curriculum_subset(st, 10) == [3, 1, 9, 4, 5, 0]


def test_equal_u_falls_back_to_id_order():
    st = CurriculumState(n=10, percent=40, u=np.zeros(10))
    assert curriculum_subset(st, 10) == [0, 1, 2, 3]


def test_partial_records_do_not_count_as_an_order():
    st = CurriculumState(n=4, percent=50)
    st.record(np.array([0, 1]), np.array([0.1, 0.2]))
    assert not st.has_order
    st.record(np.array([2, 3]), np.array([0.0, 0.3]))
    assert st.has_order and curriculum_subset(st, 4) == [2, 0]


@pytest.mark.parametrize("kw", [dict(start_percent=0), dict(step_percent=120), dict(patience=0), dict(epochs=0),
                                dict(learning_rate=0.0), dict(alpha=-1.0), dict(t_eval=-1)])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


def test_switch_dependencies():
    cfg = TrainConfig(cvae=False).effective()
    assert not cfg.reweight and not cfg.curriculum
    cfg = TrainConfig(reweight=False).effective()
    assert cfg.cvae and not cfg.curriculum
    assert TrainConfig().effective() == TrainConfig()


def test_curriculum_schedule_on_ten_samples(tiny):
    tr, va, m = tiny
    res = train(tr, va, m, TrainConfig(epochs=300, log_subsets=True, regressor_hidden=(32, 16)))
    log = res.log
    assert log[0]["phase"] == "warmup" and log[0]["active_size"] == 10
    sizes = [r["active_size"] for r in log[1:]]
    stages = [s for i, s in enumerate(sizes) if i == 0 or s != sizes[i - 1]]
    assert stages == [4, 6, 8, 10]
    assert log[-1]["converged"]
    for r in log[1:]:
        u = np.array(r["u_before"])
        prefix = list(np.lexsort((np.arange(10), u))[: r["active_size"]])
        assert r["subset"] == prefix
        if r["advanced"] or r["converged"]:
            assert r["epochs_since_improvement"] == 3
    # a stage only moves on from an epoch that closes a 3-epoch plateau
    for prev, cur in zip(log[1:], log[2:]):
        if cur["active_size"] != prev["active_size"]:
            assert prev["advanced"]


def test_curriculum_off_uses_all_data_each_epoch(tiny):
    tr, va, m = tiny
    res = train(tr, va, m, TrainConfig(curriculum=False, log_subsets=True, **FAST))
    assert {r["active_size"] for r in res.log} == {10}
    assert all(r["subset"] == list(range(10)) for r in res.log)
    assert {r["phase"] for r in res.log} == {"full"}


def test_epoch_log_records(tiny):
    tr, va, m = tiny
    buf = io.StringIO()
    res = train(tr, va, m, TrainConfig(**FAST), log_file=buf)
    lines = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert lines == res.log
    for key in ("epoch", "active_percent", "loss_total", "loss_raqa", "loss_latent", "loss_u", "val_spearman",
                "mean_u"):
        assert key in lines[0]
    assert res.best_val == max(r["val_spearman"] for r in res.log)
    assert res.log[res.best_epoch - 1]["val_spearman"] == res.best_val


def test_training_is_bitwise_reproducible(tiny):
    tr, va, m = tiny
    a = train(tr, va, m, TrainConfig(**FAST))
    b = train(list(reversed(tr)), va, m, TrainConfig(**FAST))
    assert json.dumps(a.log) == json.dumps(b.log)
    for (_, x), (_, y) in zip(a.params.named_arrays(), b.params.named_arrays()):
        assert x.tobytes() == y.tobytes()


def test_baseline_degenerates_to_plain_regression(tiny):
    tr, va, m = tiny
    res = train(tr, va, m, TrainConfig(wa=False, cvae=False, reweight=False, curriculum=False, **FAST))
    assert set(res.params.nets) == {"regressor"}
    assert all(r["loss_latent"] == 0 and r["loss_u"] == 0 and r["loss_total"] == r["loss_raqa"] for r in res.log)
    assert all(r["mean_u"] is None for r in res.log)


def test_non_finite_loss_aborts_with_diagnostics(tiny, monkeypatch):
    tr, va, m = tiny
    import udaqa.trainer as trainer_mod
    real = trainer_mod.training_loss

    def poisoned(*a, **k):
        terms = real(*a, **k)
        terms.total.data = np.array(np.nan)
        return terms

    monkeypatch.setattr(trainer_mod, "training_loss", poisoned)
    with pytest.raises(TrainingDivergedError, match=r"epoch 1, samples \['s"):
        train(tr, va, m, TrainConfig(**FAST))


def test_evaluate_contract(tiny):
    tr, va, m = tiny
    res = train(tr, va, m, TrainConfig(**FAST))
    a = evaluate(va, m, res.params, t=5, seed=2)
    b = evaluate(va, m, res.params, t=5, seed=2)
    assert a.summary() == b.summary()
    assert [p.sampled_scores for p in a.predictions] == [p.sampled_scores for p in b.predictions]
    assert all(len(p.sampled_scores) == 5 for p in a.predictions)
    lo, hi = m.range_for("diving")
    y = np.array([s.final_score for s in va])
    y_hat = np.array([p.deterministic_score for p in a.predictions])
    assert a.relative_l2 == pytest.approx(np.mean(((y - y_hat) / (hi - lo)) ** 2), rel=1e-12)
    assert a.r_l2_x100 == pytest.approx(100 * a.relative_l2)
    assert a.fisher_z is None


def test_evaluate_perfect_ranking_and_undefined(tiny, monkeypatch):
    tr, va, m = tiny
    import udaqa.trainer as trainer_mod
    from udaqa.model import PredictionSet
    lo, hi = m.range_for("diving")

    def oracle(samples, params, t, seed=0):
        return [PredictionSet(s.id, (s.final_score - lo) / (hi - lo), (), 0.0) for s in samples]

    monkeypatch.setattr(trainer_mod, "predict_batch", oracle)
    res = evaluate(va, m, None)
    assert res.spearman == 1.0 and res.relative_l2 == pytest.approx(0.0, abs=1e-24)
    single = evaluate(va[:1], m, None)
    assert single.spearman is None and "at least 2" in single.spearman_error


def test_fisher_z_over_actions(tmp_path):
    dest = tmp_path / "two"
    generate_synthetic(SyntheticSpec(n_samples=60, actions=("diving", "vault"), seed=1), dest)
    samples, m = load_dataset(dest)
    res = train(select_split(samples, "train"), select_split(samples, "val"), m, TrainConfig(**FAST))
    ev = evaluate(select_split(samples, "test"), m, res.params, t=2)
    rhos = [v["spearman"] for v in ev.per_action.values()]
    assert ev.fisher_z == pytest.approx(math.tanh(np.mean(np.arctanh(rhos))), abs=1e-12)
    assert set(ev.per_action) == {"diving", "vault"}


def test_untrained_model_ranks_poorly(small_dataset):
    samples, m = small_dataset
    test = select_split(samples, "test")
    cfg = TrainConfig().model_config(m)
    rhos = [evaluate(test, m, ModelParams.initialize(cfg, seed), t=0).spearman for seed in range(3)]
    print("untrained test rho by seed:", [round(r, 3) for r in rhos])
