"""One-step lookahead rollout, meta-gradients, and data-parameter updates."""

import numpy as np
import pytest

from metasched import datagen, meta, nn, optim
from metasched.errors import ShapeError
from metasched.losses import cross_entropy_batch
from metasched.meta import DataParamState, MetaStepReport
from metasched.nn import Batch, LayerSpec, ParamVector


def scalar_model(value):
    manifest = (LayerSpec(1, 1, "identity"),)
    # weight carries the value; bias pinned by the caller through grads
    return ParamVector(np.array([value, 0.0]), manifest)


def toy_problem(seed, n=24, b=4, k=2):
    rng = np.random.default_rng(seed)
    manifest = nn.build_manifest(2, (4,), k, "tanh")
    model = nn.init_params(manifest, seed=seed + 1)
    feats = rng.standard_normal((n, 2))
    labels = rng.integers(0, k, size=n)
    train = Batch(feats[:b], labels[:b], np.arange(b))
    meta_batch = Batch(feats[b : 2 * b], labels[b : 2 * b], np.arange(b, 2 * b))
    return model, train, meta_batch, n


def test_rollout_scalar_example():
    # theta=1, lr=0.5, B=1, w=2, g=0.2, no decay -> 0.8
    manifest = (LayerSpec(1, 1, "identity"),)
    theta = ParamVector(np.array([1.0, 0.5]), manifest)
    grads = np.array([[0.2, 0.0]])
    batch = Batch(np.ones((1, 1)), np.zeros(1, dtype=int), np.array([0]))
    dps = DataParamState.initial(1, 1, mode="instance")
    dps.w_inst[0] = 2.0
    dps.lam_wd = 0.0
    out = meta.rollout_one_step(theta, grads, batch, dps, lr=0.5)
    assert out.values[0] == 0.8
    assert out.values[1] == 0.5


def test_rollout_decay_only():
    manifest = (LayerSpec(1, 2, "identity"),)
    theta = ParamVector(np.array([1.0, -2.0, 0.0, 0.0]), manifest)
    grads = np.zeros((1, 4))
    batch = Batch(np.ones((1, 1)), np.zeros(1, dtype=int), np.array([0]))
    dps = DataParamState.initial(1, 2, mode="none")
    dps.lam_wd = 0.1
    out = meta.rollout_one_step(theta, grads, batch, dps, lr=0.5)
    assert np.allclose(out.values[:2], [0.95, -1.9], rtol=1e-12, atol=0)


def test_rollout_unit_weights_is_sgd_on_regularized_loss():
    rng = np.random.default_rng(0)
    model, train, _, n = toy_problem(3)
    dps = DataParamState.initial(n, 2, mode="instance")
    dps.lam_wd = 3e-3
    _, grads = nn.per_sample_backward(model, train)
    rolled = meta.rollout_one_step(model, grads, train, dps, lr=0.2)
    state = optim.make_optimizer("sgd", 0.2, model.values.size)
    reg_grad = grads.mean(axis=0) + dps.lam_wd * model.values
    stepped = optim.step(state, model.values, reg_grad)
    assert np.allclose(rolled.values, stepped, rtol=1e-12, atol=1e-15)


def test_instance_metagrad_example():
    grads = np.array([[1.0, 2.0], [7.0, 7.0]])
    mg = np.array([3.0, -1.0])
    out = meta.instance_metagrad(grads, np.array([5, 9]), mg, lr=0.1)
    assert np.isclose(out[5], -0.05, rtol=1e-12, atol=0)
    assert set(out) == {5, 9}


def test_instance_metagrad_orthogonal_and_aligned():
    g = np.array([[0.0, 1.0]])
    assert meta.instance_metagrad(g, np.array([0]), np.array([1.0, 0.0]), 0.3)[0] == 0.0
    g2 = np.array([[1.5, -2.0]])
    out = meta.instance_metagrad(g2, np.array([0]), g2[0], lr=1.0)
    assert np.isclose(out[0], -(1.5**2 + 2.0**2), rtol=1e-12)
    assert out[0] < 0  # aligned samples gain weight under descent


def test_class_metagrad_is_sum_of_member_instance_metagrads():
    rng = np.random.default_rng(11)
    for _ in range(20):
        b, p, k = 8, 5, 3
        grads = rng.standard_normal((b, p))
        labels = rng.integers(0, k, size=b)
        mg = rng.standard_normal(p)
        lr = float(rng.uniform(0.05, 1.0))
        inst = meta.instance_metagrad(grads, np.arange(b), mg, lr)
        cls = meta.class_metagrad(grads, labels, mg, lr, n_classes=k)
        for c in range(k):
            members = [i for i in range(b) if labels[i] == c]
            if not members:
                assert c not in cls
                continue
            assert abs(cls[c] - sum(inst[i] for i in members)) <= 1e-12


def test_class_metagrad_singleton_reduction():
    grads = np.array([[1.0, 2.0]])
    mg = np.array([3.0, -1.0])
    inst = meta.instance_metagrad(grads, np.array([0]), mg, 0.1)
    cls = meta.class_metagrad(grads, np.array([2]), mg, 0.1, n_classes=4)
    assert cls == {2: inst[0]}


def test_class_metagrad_label_out_of_range():
    with pytest.raises(ValueError):
        meta.class_metagrad(np.ones((1, 2)), np.array([5]), np.ones(2), 0.1, n_classes=3)


def test_wd_metagrad_examples():
    manifest = (LayerSpec(1, 2, "identity"),)
    theta = ParamVector(np.array([1.0, -2.0, 0.0, 0.0]), manifest)
    mg = np.array([0.2, 0.3, 0.0, 0.0])
    assert np.isclose(meta.wd_metagrad(theta, mg, 0.5), 0.2, rtol=1e-12)
    perp = np.array([2.0, 1.0, 0.0, 0.0])
    assert meta.wd_metagrad(theta, perp, 0.5) == 0.0
    zero = theta.with_values(np.zeros(4))
    assert meta.wd_metagrad(zero, mg, 0.5) == 0.0


def test_apply_update_arithmetic_and_clamp():
    dps = DataParamState.initial(3, 2, mode="instance")
    dps.w_inst[1] = 0.02
    report = MetaStepReport(
        rollout_theta=None,
        meta_loss=0.0,
        per_instance_metagrad={0: -0.05, 1: 0.5},
        per_class_metagrad={},
        wd_metagrad=0.0,
    )
    before_untouched = dps.w_inst[2]
    out = meta.apply_data_param_update(dps, report, data_lr=0.1, wd_lr=0.0)
    assert np.isclose(out.w_inst[0], 1.005, rtol=1e-12)
    assert out.w_inst[1] == 0.0
    assert report.clamp_count == 1
    assert out.w_inst[2] == before_untouched


def test_update_keeps_everything_non_negative():
    rng = np.random.default_rng(23)
    for _ in range(50):
        dps = DataParamState.initial(6, 4, mode="class", wd_learnable=True)
        dps.w_class[:] = rng.uniform(0, 0.2, size=4)
        dps.lam_wd = float(rng.uniform(0, 1e-3))
        report = MetaStepReport(
            rollout_theta=None,
            meta_loss=0.0,
            per_instance_metagrad={},
            per_class_metagrad={c: float(rng.normal(0, 2)) for c in range(4)},
            wd_metagrad=float(rng.normal(0, 2)),
        )
        out = meta.apply_data_param_update(dps, report, data_lr=0.5, wd_lr=0.5)
        assert out.w_class.min() >= 0
        assert out.lam_wd >= 0


def test_meta_step_requires_equal_batch_sizes():
    model, train, meta_batch, n = toy_problem(5)
    short = Batch(meta_batch.features[:2], meta_batch.labels[:2], meta_batch.indices[:2])
    dps = DataParamState.initial(n, 2, mode="instance")
    with pytest.raises(ShapeError):
        meta.meta_train_step(model, dps, train, short, 0.1, 1.0, 1e-3)


def test_meta_step_mode_none_is_plain_sgd_step():
    model, train, meta_batch, n = toy_problem(7)
    dps = DataParamState.initial(n, 2, mode="none")
    dps.lam_wd = 0.0
    theta_next, dps_next, report = meta.meta_train_step(
        model, dps, train, meta_batch, 0.1, 1.0, 1e-3
    )
    _, grads = nn.per_sample_backward(model, train)
    expected = model.values - 0.1 * grads.mean(axis=0)
    assert np.allclose(theta_next.values, expected, rtol=1e-12, atol=1e-15)
    assert np.array_equal(dps_next.w_inst, np.ones(n))
    assert np.array_equal(dps_next.w_class, np.ones(2))


def test_meta_step_commit_is_rollout_bit_exact():
    model, train, meta_batch, n = toy_problem(9)
    dps = DataParamState.initial(n, 2, mode="instance")
    _, grads = nn.per_sample_backward(model, train)
    rolled = meta.rollout_one_step(model, grads, train, dps, lr=0.3)
    theta_next, _, report = meta.meta_train_step(
        model, dps, train, meta_batch, 0.3, 1.0, 1e-3
    )
    assert np.array_equal(theta_next.values, rolled.values)
    assert report.rollout_theta is theta_next


def test_meta_step_deterministic():
    model, train, meta_batch, n = toy_problem(13)
    runs = []
    for _ in range(2):
        dps = DataParamState.initial(n, 2, mode="instance")
        theta_next, dps_next, report = meta.meta_train_step(
            model, dps, train, meta_batch, 0.2, 2.0, 1e-3
        )
        runs.append((theta_next.values, dps_next.w_inst, report.meta_loss))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert np.array_equal(runs[0][1], runs[1][1])
    assert runs[0][2] == runs[1][2]
    assert np.isfinite(runs[0][2])


def test_meta_step_touches_only_batch_instances():
    model, train, meta_batch, n = toy_problem(15)
    dps = DataParamState.initial(n, 2, mode="instance")
    _, dps_next, report = meta.meta_train_step(
        model, dps, train, meta_batch, 0.2, 2.0, 1e-3
    )
    touched = set(train.indices.tolist())
    assert set(report.per_instance_metagrad) == touched
    for i in range(n):
        if i not in touched:
            assert dps_next.w_inst[i] == 1.0


def test_hundred_step_baseline_recovery():
    # mode=none with fixed decay walks exactly the optimizer trajectory
    rng = np.random.default_rng(31)
    model, _, _, n = toy_problem(17)
    feats = rng.standard_normal((n, 2))
    labels = rng.integers(0, 2, size=n)
    dps = DataParamState.initial(n, 2, mode="none")
    dps.lam_wd = 1e-3
    state = optim.make_optimizer("sgd", 0.15, model.values.size)
    theta_meta = model
    ref = model.values.copy()
    for step in range(100):
        pick = rng.integers(0, n, size=4)
        batch = Batch(feats[pick], labels[pick], pick)
        mpick = rng.integers(0, n, size=4)
        mbatch = Batch(feats[mpick], labels[mpick], mpick)
        theta_meta, dps, _ = meta.meta_train_step(
            theta_meta, dps, batch, mbatch, 0.15, 1.0, 0.0
        )
        _, grads = nn.per_sample_backward(model.with_values(ref), batch)
        ref = optim.step(state, ref, grads.mean(axis=0) + 1e-3 * ref)
        assert np.allclose(theta_meta.values, ref, rtol=1e-12, atol=1e-14)


def test_history_reset_discards_learned_weights():
    model, train, meta_batch, n = toy_problem(19)
    # under reset the committed trajectory ignores data_lr entirely
    paths = []
    for data_lr in (2.0, 50.0):
        theta = model
        dps = DataParamState.initial(n, 2, mode="instance", history_reset=True)
        seen = []
        for _ in range(5):
            assert np.array_equal(dps.w_inst, np.ones(n))
            theta, dps, _ = meta.meta_train_step(
                theta, dps, train, meta_batch, 0.2, data_lr, 0.0
            )
            seen.append(theta.values.copy())
        paths.append(seen)
    for a, b in zip(*paths):
        assert np.array_equal(a, b)


def test_history_reset_permutation_invariance():
    model, train, meta_batch, n = toy_problem(21)
    rng = np.random.default_rng(2)
    theta_a = theta_b = model
    dps_a = DataParamState.initial(n, 2, mode="instance", history_reset=True)
    dps_b = dps_a.copy()
    for step in range(6):
        if step == 3:
            perm = rng.permutation(n)
            dps_b.w_inst[:] = dps_b.w_inst[perm]
        theta_a, dps_a, _ = meta.meta_train_step(
            theta_a, dps_a, train, meta_batch, 0.2, 5.0, 0.0
        )
        theta_b, dps_b, _ = meta.meta_train_step(
            theta_b, dps_b, train, meta_batch, 0.2, 5.0, 0.0
        )
        assert np.array_equal(theta_a.values, theta_b.values)


def test_train_loss_objective_degenerates_weights_to_zero():
    # ablation: descending the weighted train loss in w sends w to 0;
    # the meta objective instead grows weights of aligned samples
    model, train, meta_batch, n = toy_problem(25)
    w = np.ones(train.size)
    for _ in range(400):
        logits = nn.forward(model, train.features)
        sample_losses, _ = cross_entropy_batch(logits, train.labels)
        w = np.maximum(0.0, w - 1.0 * sample_losses / train.size)
    assert w.max() == 0.0

    dps = DataParamState.initial(n, 2, mode="instance")
    theta = model
    clean_meta = Batch(train.features, train.labels, train.indices)
    for _ in range(50):
        theta, dps, _ = meta.meta_train_step(
            theta, dps, train, clean_meta, 0.2, 2.0, 0.0
        )
    assert dps.w_inst[train.indices].mean() > 0.5


def test_two_hundred_steps_separate_corrupt_from_clean():
    ds = datagen.make_blobs(3, 40, 4, 0.8, seed=6)
    corrupted, manifest = datagen.corrupt_labels(ds, 0.3, seed=7)
    rng = np.random.default_rng(8)
    manifest_net = nn.build_manifest(4, (16,), 3, "relu")
    theta = nn.init_params(manifest_net, seed=9)
    dps = DataParamState.initial(ds.n, 3, mode="instance")
    dps.lam_wd = 0.0
    b = 16
    for _ in range(200):
        pick = rng.integers(0, ds.n, size=b)
        batch = Batch(corrupted.features[pick], corrupted.labels[pick], pick)
        mpick = rng.integers(0, ds.n, size=b)
        mbatch = Batch(ds.features[mpick], ds.true_labels[mpick], mpick)
        theta, dps, _ = meta.meta_train_step(theta, dps, batch, mbatch, 0.2, 2.0, 0.0)
    corrupt = manifest.corrupt_indices
    clean = np.setdiff1d(np.arange(ds.n), corrupt)
    assert dps.w_inst[corrupt].mean() < dps.w_inst[clean].mean()


def test_replay_schedule_range_check():
    from metasched.trajectory import TrajectoryLog

    log = TrajectoryLog(n_instances=4, n_classes=2)
    dps = DataParamState.initial(4, 2, mode="instance")
    dps.w_inst[1] = 0.5
    log.record(dps)
    tables = meta.replay_schedule(log, 0)
    assert tables["w_inst"][1] == 0.5
    assert tables["w_inst"][0] == 1.0
    with pytest.raises(ValueError):
        meta.replay_schedule(log, 1)


def test_effective_weights_by_mode():
    dps = DataParamState.initial(6, 3, mode="instance")
    dps.w_inst[:] = np.arange(6) * 0.1
    dps.w_class[:] = [5.0, 6.0, 7.0]
    batch = Batch(np.zeros((2, 1)), np.array([2, 0]), np.array([4, 1]))
    inst = meta.effective_weights(dps, batch)
    assert np.allclose(inst, [0.4, 0.1], rtol=1e-12)
    dps.mode = "class"
    assert np.allclose(meta.effective_weights(dps, batch), [7.0, 5.0], rtol=1e-12)
    dps.mode = "none"
    assert np.array_equal(meta.effective_weights(dps, batch), [1.0, 1.0])
