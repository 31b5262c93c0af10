import math

import numpy as np
import pytest

from oracles import adam_scalar
from ultraupconvnet import training
from ultraupconvnet.data import gen_synthetic
from ultraupconvnet.formats import FormatError
from ultraupconvnet.losses import LossWeights
from ultraupconvnet.model import ModelConfig
from ultraupconvnet.tensor import Tensor
from ultraupconvnet.training import (
    BatchLoader,
    TrainConfig,
    TrainState,
    adamw_step,
    build_loaders,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    clip_grad_norm,
    evaluate,
    fit,
    init_state,
    learning_rate_at,
    load_samples,
    train_epoch,
)

TOY = ModelConfig.toy()


@pytest.fixture(scope="module")
def samples(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_data")
    manifest, _ = gen_synthetic(root, n_seg=3, n_cls=4, size=64, seed=11)
    return load_samples(manifest, TOY)


def scalar_state(p0, **cfg):
    params = {"w": Tensor(np.array([p0]), requires_grad=True)}
    config = TrainConfig(**cfg)
    state = TrainState(TOY, config, params, {"w": np.zeros(1)}, {"w": np.zeros(1)}, {"w": 0})
    return state, config


def heads(state):
    return {k: p.data.copy() for k, p in state.params.items() if k.startswith("heads.")}


def snapshot(state):
    return {k: p.data.copy() for k, p in state.params.items()}


# -- optimizer ---------------------------------------------------------------------------


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.learning_rate, c.beta1, c.beta2, c.eps, c.weight_decay) == (200, 2e-5, 0.9, 0.999, 1e-8, 0.01)
    assert c.grad_clip is None and c.lr_schedule == "constant"
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="batch sizes"):
        TrainConfig(batch_size_cls=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})


def test_single_step_hand_value():
    state, cfg = scalar_state(1.0, learning_rate=0.1, weight_decay=0.0)
    adamw_step(state, {"w": np.array([1.0])}, cfg)
    assert abs(state.params["w"].data[0] - (1 - 0.1 / (1 + 1e-8))) < 1e-15
    assert abs(state.params["w"].data[0] - 0.9) < 1e-8
    assert state.param_steps["w"] == 1 and state.global_step == 1


def test_matches_adam_oracle_without_decay():
    grads = [0.3, -1.2, 2.0, 0.0, 0.7, -0.05, 1e-3, 4.0, -2.5, 0.9]
    state, cfg = scalar_state(0.5, learning_rate=0.01, weight_decay=0.0)
    traj = []
    for g in grads:
        adamw_step(state, {"w": np.array([g])}, cfg)
        traj.append(state.params["w"].data[0])
    assert np.max(np.abs(np.array(traj) - adam_scalar(0.5, grads, 0.01))) < 1e-12


def test_decay_is_decoupled():
    state, cfg = scalar_state(2.0, learning_rate=0.1, weight_decay=0.0)
    adamw_step(state, {"w": np.array([0.0])}, cfg)
    assert state.params["w"].data[0] == 2.0
    state, cfg = scalar_state(2.0, learning_rate=0.1, weight_decay=0.01)
    adamw_step(state, {"w": np.array([0.0])}, cfg)
    assert state.params["w"].data[0] == 2.0 - 0.1 * 0.01 * 2.0


def test_none_gradient_skips_and_shape_mismatch_raises():
    state, cfg = scalar_state(1.0, learning_rate=0.1)
    adamw_step(state, {"w": None}, cfg)
    assert state.params["w"].data[0] == 1.0 and state.param_steps["w"] == 0
    with pytest.raises(ValueError, match="shape"):
        adamw_step(state, {"w": np.zeros(2)}, cfg)


def test_grad_clip_and_schedule():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    clipped = clip_grad_norm(g, 1.0)
    assert abs(np.hypot(clipped["a"][0], clipped["b"][0]) - 1.0) < 1e-9 and clipped["c"] is None
    assert clip_grad_norm(g, 10.0)["a"] is g["a"]
    assert learning_rate_at(TrainConfig(), 150) == 2e-5
    cos = TrainConfig(lr_schedule="cosine", epochs=10, learning_rate=1.0)
    assert learning_rate_at(cos, 0) == 1.0 and abs(learning_rate_at(cos, 5) - 0.5) < 1e-15
    assert abs(learning_rate_at(cos, 10)) < 1e-15


# -- epoch loop -------------------------------------------------------------------------


def small_config(**kw):
    base = dict(learning_rate=1e-3, batch_size_seg=2, batch_size_cls=3, augment=False, weight_decay=0.0, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_step_count_per_epoch(samples):
    cfg = small_config()
    state = init_state(TOY, cfg)
    seg, cls = build_loaders(samples, cfg)
    state, report = train_epoch(state, seg, cls)
    want = math.ceil(3 / 2) + math.ceil(4 / 3)
    assert state.global_step == want == report.seg_batches + report.cls_batches
    assert state.task_steps == {"seg": 2, "cls": 2} and state.epoch == 1
    assert report.seg_loss > 0 and report.cls_loss > 0


def test_one_batch_each_gives_two_steps(samples):
    cfg = small_config(batch_size_seg=8, batch_size_cls=8)
    state = init_state(TOY, cfg)
    state, _ = train_epoch(state, *build_loaders(samples, cfg))
    assert state.global_step == 2


def test_empty_loaders_rejected(samples):
    cfg = small_config()
    state = init_state(TOY, cfg)
    with pytest.raises(ValueError, match="empty"):
        train_epoch(state, BatchLoader([], 2, "seg"), BatchLoader([], 2, "cls"))


def test_seg_epoch_leaves_heads_untouched(samples):
    cfg = small_config()
    state = init_state(TOY, cfg)
    seg, _ = build_loaders(samples, cfg)
    before, enc = heads(state), state.params["encoder.stem.conv.weight"].data.copy()
    train_epoch(state, seg, None)
    after = heads(state)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not np.array_equal(enc, state.params["encoder.stem.conv.weight"].data)


def test_cls_epoch_leaves_decoder_untouched(samples):
    cfg = small_config()
    state = init_state(TOY, cfg)
    _, cls = build_loaders(samples, cfg)
    before = {k: v for k, v in snapshot(state).items() if k.startswith("decoder.")}
    train_epoch(state, None, cls)
    assert all(np.array_equal(before[k], state.params[k].data) for k in before)


def test_doubling_lambda_doubles_cls_gradient_only(samples):
    grads, seg_params = {}, {}
    for lam in (10.0, 20.0):
        cfg = small_config(loss_weights=LossWeights(lambda_cls=lam))
        state = init_state(TOY, cfg)
        seg, cls = build_loaders(samples, cfg)
        batch = next(cls.batches())
        task_l = training.batch_task_loss(state.params, TOY, batch, "cls", cfg.loss_weights)
        training.backward(training.final_loss("cls", cls_l=task_l, weights=cfg.loss_weights))
        grads[lam] = {k: p.grad.copy() for k, p in state.params.items() if p.grad is not None}
        for p in state.params.values():
            p.zero_grad()
        train_epoch(state, seg, None)
        seg_params[lam] = snapshot(state)
    assert grads[10.0].keys() == grads[20.0].keys()
    for k in grads[10.0]:
        assert np.array_equal(grads[20.0][k], 2.0 * grads[10.0][k])
    assert all(np.array_equal(seg_params[10.0][k], seg_params[20.0][k]) for k in seg_params[10.0])


def test_training_is_bit_reproducible(samples):
    runs = []
    for _ in range(2):
        cfg = small_config(augment=True)
        state = init_state(TOY, cfg)
        seg, cls = build_loaders(samples, cfg)
        losses = [train_epoch(state, seg, cls)[1] for _ in range(2)]
        runs.append((losses, checkpoint_bytes(state)))
    assert runs[0] == runs[1]


# -- evaluation --------------------------------------------------------------------------


def test_evaluate_with_ground_truth_model(samples, monkeypatch):
    cfg = small_config()
    state = init_state(TOY, cfg)
    seg, cls = build_loaders(samples, cfg, train=False)

    def oracle(params, config, image, prompts, task):
        ids = [current_ids.pop(0) for _ in range(image.shape[0])]
        by_id = {s.id: s for s in samples}
        if task == "seg":
            m = np.stack([by_id[i].mask for i in ids])
            return Tensor(np.stack([m == 0, m == 1], axis=1).astype(float))
        lab = np.array([by_id[i].label for i in ids])
        return Tensor(np.eye(2)[lab % 2]), Tensor(np.eye(4)[lab])

    monkeypatch.setattr(training, "forward", oracle)
    current_ids = [s.id for s in seg.samples]
    assert evaluate(state, seg)[0].value == 1.0
    current_ids = [s.id for s in cls.samples]
    rows = evaluate(state, cls)
    assert all(r.value == 1.0 for r in rows)
    assert {r.metric for r in rows} == {"accuracy", "accuracy_2way", "accuracy_4way"}


def test_evaluate_is_pure(samples):
    cfg = small_config()
    state = init_state(TOY, cfg)
    seg, cls = build_loaders(samples, cfg, train=False)
    before = checkpoint_bytes(state)
    first = evaluate(state, seg) + evaluate(state, cls)
    second = evaluate(state, seg) + evaluate(state, cls)
    assert first == second and checkpoint_bytes(state) == before
    assert all(p.grad is None for p in state.params.values())


def test_untrained_accuracy_in_chance_band(tmp_path):
    manifest, _ = gen_synthetic(tmp_path, n_seg=0, n_cls=40, size=64, seed=2)
    two_way = [s for s in load_samples(manifest, TOY) if s.way == 2]
    assert sorted(s.label for s in two_way) == [0] * 10 + [1] * 10
    state = init_state(TOY, small_config(seed=9))
    acc = evaluate(state, BatchLoader(two_way, 8, "cls", shuffle=False))[0].value
    assert 0.2 <= acc <= 0.8


# -- checkpoints -------------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_identical(samples, tmp_path):
    cfg = small_config()
    state = init_state(TOY, cfg)
    train_epoch(state, *build_loaders(samples, cfg))
    checkpoint_save(state, tmp_path / "a.ckpt")
    loaded = checkpoint_load(tmp_path / "a.ckpt")
    checkpoint_save(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.epoch == 1 and loaded.task_steps == state.task_steps
    assert loaded.rng.random() == state.rng.random()


def test_resume_matches_uninterrupted_training(samples, tmp_path):
    cfg = small_config(augment=True)
    full = init_state(TOY, cfg)
    seg, cls = build_loaders(samples, cfg)
    for _ in range(3):
        train_epoch(full, seg, cls)

    part = init_state(TOY, cfg)
    train_epoch(part, seg, cls)
    checkpoint_save(part, tmp_path / "k.ckpt")
    resumed = checkpoint_load(tmp_path / "k.ckpt")
    for _ in range(2):
        train_epoch(resumed, seg, cls)
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_checkpoint_rejects_damage(samples, tmp_path):
    state = init_state(TOY, small_config())
    good = checkpoint_bytes(state)
    cases = {
        "magic.ckpt": b"X" + good[1:],
        "trunc.ckpt": good[: len(good) - 100],
        "short.ckpt": good[:12],
        "tail.ckpt": good + b"\x00",
        "version.ckpt": good.replace(b'"version":1', b'"version":7'),
    }
    for name, buf in cases.items():
        (tmp_path / name).write_bytes(buf)
        with pytest.raises(FormatError) as info:
            checkpoint_load(tmp_path / name)
        assert name in str(info.value)


def test_checkpoint_rejects_shape_disagreement(tmp_path):
    state = init_state(TOY, small_config())
    other = init_state(ModelConfig.toy(decoder_channels=16), small_config())
    blob = checkpoint_bytes(other)
    # swap the header for one that claims the default toy decoder width
    head_len = int.from_bytes(blob[8:16], "little")
    mine = checkpoint_bytes(state)
    my_len = int.from_bytes(mine[8:16], "little")
    forged = mine[: 16 + my_len] + blob[16 + head_len :]
    (tmp_path / "forged.ckpt").write_bytes(forged)
    with pytest.raises(FormatError, match="shape"):
        checkpoint_load(tmp_path / "forged.ckpt")


def test_fit_writes_metric_rows_and_checkpoint(samples, tmp_path):
    cfg = small_config(eval_every=1, checkpoint_dir=str(tmp_path / "ck"))
    state = init_state(TOY, cfg)
    seg, cls = build_loaders(samples, cfg)
    reports = fit(state, seg, cls, until_epoch=2, eval_loaders=build_loaders(samples, cfg, train=False),
                  metrics_log=tmp_path / "metrics.tsv")
    assert [r.epoch for r in reports] == [1, 2]
    rows = [line.split("\t") for line in (tmp_path / "metrics.tsv").read_text().splitlines()]
    assert all(len(r) == 4 for r in rows)
    assert {(r[0], r[1], r[2]) for r in rows} >= {("1", "seg", "loss"), ("2", "cls", "accuracy"), ("2", "seg", "dice")}
    assert checkpoint_load(tmp_path / "ck" / "last.ckpt").epoch == 2
