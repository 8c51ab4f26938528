import json
from dataclasses import replace

import numpy as np
import pytest

from tabcascade import cascade as cc
from tabcascade.cascade import (CascadeModel, FHLabel, StagePlan, Superclass, cascade_from_dict,
                                cascade_predict, cascade_to_dict, compose_label,
                                derive_stage_labels, explain, group_importance, predict,
                                train_cascade, train_single_stage)
from tabcascade.data import one_hot_encode
from tabcascade.encoder import EncoderConfig
from tabcascade.errors import ConfigError, InputError, SchemaError, TrainingDataError
from tabcascade.synthetic import separable_fixture

TINY = EncoderConfig(n_classes=2, n_steps=2, n_a=6, n_d=6, virtual_batch_size=16)
FAST = StagePlan(stage1=TINY, stage2p=TINY, stage2h=TINY, epochs=8, batch_size=32, seed=5)


@pytest.fixture(scope="module")
def fixture_data():
    t = separable_fixture()
    fm = one_hot_encode(t)
    return fm.values, t.class_labels(), fm.columns


@pytest.fixture(scope="module")
def fast_model(fixture_data):
    x, y, cols = fixture_data
    return train_cascade(x, y, FAST, columns=cols)


def test_stage_labels():
    assert derive_stage_labels(FHLabel.DEFINITE) == (Superclass.PATIENT, FHLabel.DEFINITE)
    assert derive_stage_labels(FHLabel.UNLIKELY) == (Superclass.HEALTHY, FHLabel.UNLIKELY)
    pairs = {(derive_stage_labels(y)[0], y % 2) for y in FHLabel}
    assert len(pairs) == 4
    for y in FHLabel:
        sup, _ = derive_stage_labels(y)
        assert compose_label(sup, y % 2) is y
    assert FHLabel.parse(" probable ") is FHLabel.PROBABLE
    with pytest.raises(ValueError):
        FHLabel.parse("maybe")


def test_default_plan_snapshot():
    p = StagePlan()
    assert (p.stage1.n_steps, p.stage1.n_a, p.stage1.n_d, p.stage1.n_classes) == (5, 40, 40, 2)
    for s in (p.stage2p, p.stage2h):
        assert (s.n_steps, s.n_a, s.n_d, s.n_classes) == (2, 50, 50, 2)
    assert (p.epochs, p.base_lr, p.lr_step, p.lr_factor) == (250, 0.09, 50, 0.9)
    assert (p.batch_size, p.class_weights, p.patience, p.stage2_routing) == \
        (256, False, None, "ground_truth")
    single = p.single_stage_config()
    assert (single.n_steps, single.n_a, single.n_classes) == (5, 40, 4)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(base_lr=0.0), dict(lr_factor=1.5),
                                    dict(stage2_routing="oracle"), dict(patience=0),
                                    dict(stage1=replace(TINY, n_features=3),
                                         stage2p=replace(TINY, n_features=4))])
def test_plan_validation(kwargs):
    with pytest.raises(ConfigError):
        StagePlan(**kwargs)


def test_stage_training_sets_partition_the_rows(fixture_data, monkeypatch):
    x, y, cols = fixture_data
    seen = {}
    real = cc.fit_encoder

    def spy(xs, ys, cfg, plan, rng, log=None):
        seen[len(seen)] = (xs.copy(), np.asarray(ys).copy())
        return real(xs, ys, cfg, replace(plan, epochs=1), rng, log)

    monkeypatch.setattr(cc, "fit_encoder", spy)
    train_cascade(x, y, FAST, columns=cols)
    (x1, y1), (xp, yp), (xh, yh) = seen[0], seen[1], seen[2]
    assert x1.shape[0] == 64 and np.array_equal(y1, y // 2)
    assert xp.shape[0] == np.isin(y, [2, 3]).sum() == 32
    assert xh.shape[0] == np.isin(y, [0, 1]).sum() == 32
    np.testing.assert_array_equal(yp, y[y >= 2] - 2)
    rows = {tuple(r) for r in xp} | {tuple(r) for r in xh}
    assert len(rows) == 64 and not ({tuple(r) for r in xp} & {tuple(r) for r in xh})


def test_training_is_deterministic(fixture_data, fast_model):
    x, y, cols = fixture_data
    again = train_cascade(x, y, FAST, columns=cols)
    for name, stage in fast_model.stages.items():
        for (n1, a1), (n2, a2) in zip(stage.state.named_tensors(),
                                      again.stages[name].state.named_tensors()):
            assert n1 == n2
            np.testing.assert_array_equal(a1, a2)
    assert again.training_log == fast_model.training_log
    other = train_cascade(x, y, replace(FAST, seed=6), columns=cols)
    assert other.training_log != fast_model.training_log


def test_threaded_stage_training_matches_sequential(fixture_data, fast_model):
    x, y, cols = fixture_data
    par = train_cascade(x, y, FAST, columns=cols, jobs=3)
    np.testing.assert_array_equal(cascade_predict(par, x).stage1_proba,
                                  cascade_predict(fast_model, x).stage1_proba)
    assert par.training_log == fast_model.training_log


def test_training_log_and_schedule(fast_model):
    for losses in fast_model.training_log.values():
        assert len(losses) == FAST.epochs and np.isfinite(losses).all()


def test_missing_class_is_rejected(fixture_data):
    x, y, _ = fixture_data
    keep = y != 3
    with pytest.raises(TrainingDataError):
        train_cascade(x[keep], y[keep], FAST)
    with pytest.raises(TrainingDataError):
        train_single_stage(x[keep], y[keep], FAST, cfg=replace(TINY, n_classes=4))
    with pytest.raises(TrainingDataError):
        train_cascade(x, np.where(y == 3, 7, y), FAST)


def _force(stage, winner):
    stage.state.head_weight.value[:] = 0.0
    stage.state.head_bias.value[:] = -20.0
    stage.state.head_bias.value[0, winner] = 20.0


@pytest.mark.parametrize("route,within,final", [
    (Superclass.HEALTHY, 0, FHLabel.UNLIKELY), (Superclass.HEALTHY, 1, FHLabel.POSSIBLE),
    (Superclass.PATIENT, 0, FHLabel.PROBABLE), (Superclass.PATIENT, 1, FHLabel.DEFINITE)])
def test_prediction_composes_route_and_stage_two(fixture_data, route, within, final):
    x, y, cols = fixture_data
    model = cascade_from_dict(cascade_to_dict(train_cascade(x, y, replace(FAST, epochs=1),
                                                            columns=cols)))
    _force(model.stage1, int(route))
    _force(model.stage2p if route else model.stage2h, within)
    p = predict(model, x[0])
    assert p.route is route and p.label is final
    assert p.stage1_proba.sum() == pytest.approx(1.0, abs=1e-9)
    assert p.stage2_proba.sum() == pytest.approx(1.0, abs=1e-9)
    assert set(p.traces) == {"stage1", "stage2p" if route else "stage2h"}
    assert cascade_predict(model, x).labels.tolist() == [int(final)] * len(x)


def test_predict_is_pure_and_matches_batch(fixture_data, fast_model):
    x, _, _ = fixture_data
    a, b = predict(fast_model, x[3]), predict(fast_model, x[3])
    np.testing.assert_array_equal(a.stage1_proba, b.stage1_proba)
    batch = cascade_predict(fast_model, x)
    np.testing.assert_allclose(batch.stage1_proba[3], a.stage1_proba, rtol=0, atol=1e-12)
    assert batch.labels[3] == a.label
    assert batch.final_proba[3] == pytest.approx(a.final_proba, abs=1e-12)


def test_width_and_row_checks(fixture_data, fast_model):
    x, _, _ = fixture_data
    with pytest.raises(SchemaError):
        predict(fast_model, x[0, :-1])
    with pytest.raises(InputError):
        predict(fast_model, x[:2])
    with pytest.raises(InputError):
        explain(fast_model, x[:0])


def test_explain_sums_to_one_and_groups_one_hot(fast_model, fixture_data):
    x, _, _ = fixture_data
    ranked = explain(fast_model, x)
    assert set(ranked) == {"stage1", "stage2p", "stage2h"}
    for entries in ranked.values():
        assert sum(w for _, w in entries) == pytest.approx(1.0, abs=1e-9)
        assert [w for _, w in entries] == sorted((w for _, w in entries), reverse=True)
    grouped = dict(group_importance([0.1, 0.2, 0.3, 0.4], ["c=a", "c=b", "c=z", "v"]))
    assert grouped["c"] == pytest.approx(0.6) and grouped["v"] == 0.4


def test_checkpoint_round_trip_is_exact(fast_model, fixture_data):
    x, _, _ = fixture_data
    doc = json.loads(json.dumps(cascade_to_dict(fast_model)))
    back = cascade_from_dict(doc)
    assert back.plan == fast_model.plan and back.columns == fast_model.columns
    b1, b2 = cascade_predict(fast_model, x), cascade_predict(back, x)
    for attr in ("stage1_proba", "stage2p_proba", "stage2h_proba"):
        np.testing.assert_array_equal(getattr(b1, attr), getattr(b2, attr))
    with pytest.raises(SchemaError):
        cascade_from_dict({**doc, "format_version": 2})


def test_predicted_routing_trains_on_stage_one_output(fixture_data):
    x, y, cols = fixture_data
    model = train_cascade(x, y, replace(FAST, stage2_routing="predicted", epochs=30), columns=cols)
    assert isinstance(model, CascadeModel)


def test_single_stage_shapes_and_determinism(fixture_data):
    x, y, _ = fixture_data
    cfg = replace(TINY, n_classes=4)
    a = train_single_stage(x, y, FAST, cfg=cfg)
    b = train_single_stage(x, y, FAST, cfg=cfg)
    assert a.forward(x).logits.shape == (64, 4)
    np.testing.assert_array_equal(a.predict_proba(x), b.predict_proba(x))
    with pytest.raises(ConfigError):
        train_single_stage(x, y, FAST, cfg=TINY)


def test_class_weights_and_patience_options(fixture_data):
    x, y, cols = fixture_data
    plan = replace(FAST, class_weights=True, patience=1, epochs=50)
    model = train_cascade(x, y, plan, columns=cols)
    assert all(len(v) <= 50 for v in model.training_log.values())


def test_stage_one_ranks_generator_drivers_first():
    # the generator's latent score reads only its first three columns
    from tabcascade.encoder import aggregate_feature_importance
    from tabcascade.synthetic import SyntheticSpec, generate_synthetic_cohort, informative_columns

    spec = SyntheticSpec(seed=0)
    t = generate_synthetic_cohort(spec)
    fm = one_hot_encode(t)
    plan = StagePlan(seed=0).bind(fm.values.shape[1])
    y = cc.superclass_of(t.class_labels())
    enc = cc.fit_encoder(fm.values, y, plan.stage1, plan, cc._stage_rngs(0)["stage1"])
    weights, _ = aggregate_feature_importance(enc.forward(fm.values).traces)
    ranked = group_importance(weights, fm.columns)
    top = {name for name, _ in ranked[:3]}
    assert top == set(informative_columns(spec)), ranked[:6]
