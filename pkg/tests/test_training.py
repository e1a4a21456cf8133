import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from panodepth import tensor as T
from panodepth.geometry import yaw_rotate
from panodepth.models import ModelSpec, build_model, load_checkpoint
from panodepth.renderer import ManifestRecord
from panodepth.training import (
    Adam, LossWeights, TrainConfig, batch_order, downscale_gt, load_dataset, loss, masked_rmse, predict,
    read_log, smoothness, split_by_scene, train,
)

ONE = LossWeights({1: 1.0}, {1: 0.0})


def t4(a):
    return np.asarray(a, dtype=np.float64)[None, None]


def test_downscale_identity():
    d, m = np.arange(16.0).reshape(4, 4), np.ones((4, 4), np.uint8)
    out_d, out_m = downscale_gt(d, m, 1)
    np.testing.assert_array_equal(out_d, d)
    np.testing.assert_array_equal(out_m, m)


def test_downscale_valid_mean_example():
    d = np.array([[2.0, 20.0], [4.0, 20.0]])
    m = np.array([[1, 0], [1, 0]], np.uint8)
    out_d, out_m = downscale_gt(d, m, 2, sentinel=20.0)
    assert out_d[0, 0] == 3.0 and out_m[0, 0] == 1


def test_downscale_invalid_block_and_errors():
    out_d, out_m = downscale_gt(np.full((2, 2), 7.0), np.zeros((2, 2), np.uint8), 2, sentinel=20.0)
    assert out_d[0, 0] == 20.0 and out_m[0, 0] == 0
    with pytest.raises(ValueError, match="divide"):
        downscale_gt(np.zeros((4, 6)), np.ones((4, 6)), 4)


def test_loss_example():
    gt = t4([[1, 2], [3, 4]])
    pred = T.tensor(t4([[1, 2], [3, 5]]), np.float64)
    res = loss({1: pred}, {1: gt}, {1: np.ones_like(gt)}, ONE)
    assert abs(res.total.item() - 0.25) < 1e-7
    masked = loss({1: pred}, {1: gt}, {1: t4([[1, 1], [1, 0]])}, ONE)
    assert masked.total.item() == 0.0 and not masked.empty


def test_smoothness_of_constant_is_zero():
    pred = T.tensor(np.full((1, 1, 4, 8), 3.0), np.float64)
    res = loss({1: pred}, {1: np.zeros((1, 1, 4, 8))}, {1: np.ones((1, 1, 4, 8))}, LossWeights({1: 0.0, 2: 1.0}, {1: 1.0}))
    assert res.smooth_term == 0.0 and res.total.item() == 0.0


def test_smoothness_wraps_longitude():
    # a single step between the last and first column is still a difference
    p = np.zeros((1, 1, 1, 4))
    p[..., -1] = 1.0
    val = smoothness(T.tensor(p, np.float64), np.ones((1, 1, 1, 4))).item()
    assert val == pytest.approx(2 / 4)  # two unit jumps over four horizontal pairs


def test_smoothness_pairs_need_both_valid():
    p = np.array([[[[0.0, 5.0, 0.0, 0.0]]]])
    m = np.array([[[[1, 0, 1, 1]]]])
    assert smoothness(T.tensor(p, np.float64), m).item() == 0.0


def test_zero_mask_zero_gradients(rng):
    model = build_model(ModelSpec("rectnet", 16, 32, 2), seed=1, dtype=np.float64)
    out = model(rng.random((2, 3, 16, 32)))
    gts = {s: rng.uniform(1, 4, p.shape) for s, p in out.preds.items()}
    masks = {s: np.zeros(p.shape) for s, p in out.preds.items()}
    res = loss(out.preds, gts, masks, LossWeights.default(model.spec.scales))
    assert res.empty and res.total.item() == 0.0
    res.total.backward()
    for p in model.parameters():
        assert p.grad is None or not np.any(p.grad)


def test_masked_pixels_do_not_affect_gradients(rng):
    model = build_model(ModelSpec("rectnet", 16, 32, 2), seed=1, dtype=np.float64)
    x = rng.random((1, 3, 16, 32))
    gt = rng.uniform(1, 4, (1, 1, 16, 32))
    mask = (rng.random(gt.shape) > 0.5).astype(np.uint8)
    weights = LossWeights.default(model.spec.scales)

    def grads(g):
        model.zero_grad()
        out = model(x)
        tg = {s: downscale_gt(g, mask, s, 20.0) for s in model.spec.scales}
        loss(out.preds, {s: v[0] for s, v in tg.items()}, {s: v[1] for s, v in tg.items()}, weights).total.backward()
        return [p.grad.copy() for p in model.parameters()]

    other = np.where(mask == 1, gt, rng.uniform(100, 200, gt.shape))
    for a, b in zip(grads(gt), grads(other)):
        np.testing.assert_array_equal(a, b)


def test_masked_loss_gradient_check(rng):
    model = build_model(ModelSpec("rectnet", 8, 16, 2), seed=2, dtype=np.float64)
    x = T.tensor(rng.random((1, 3, 8, 16)), np.float64)
    gt = rng.uniform(1, 4, (1, 1, 8, 16))
    mask = (rng.random(gt.shape) > 0.3).astype(np.uint8)
    tg = {s: downscale_gt(gt, mask, s, 20.0) for s in model.spec.scales}
    w = LossWeights({1: 1.0, 2: 0.5}, {1: 0.5, 2: 0.25})

    def fn():
        out = model(x)
        return loss(out.preds, {s: v[0] for s, v in tg.items()}, {s: v[1] for s, v in tg.items()}, w).total

    assert T.grad_check(fn, model.parameters(), samples=6) < 1e-4


@given(arrays(np.float64, (1, 1, 2, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (1, 1, 2, 4), elements=st.floats(0, 5)),
       arrays(np.uint8, (1, 1, 2, 4), elements=st.integers(0, 1)))
def test_loss_non_negative_and_zero_at_truth(pred, gt, mask):
    w = LossWeights({1: 1.0}, {1: 0.1})
    assert loss({1: T.tensor(pred, np.float64)}, {1: gt}, {1: mask}, w).total.item() >= 0
    assert loss({1: T.tensor(gt * 0 + 2.0, np.float64)}, {1: gt * 0 + 2.0}, {1: mask}, w).total.item() == 0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="scale 1"):
        loss({1: T.tensor(np.zeros((1, 1, 2, 2)))}, {1: np.zeros((1, 1, 2, 3))}, {1: np.ones((1, 1, 2, 3))}, ONE)


def test_loss_weights_defaults_and_checks():
    w = LossWeights.default((1, 2, 4, 8))
    assert w.alpha == {1: 1.0, 2: 0.5, 4: 0.25, 8: 0.125}
    assert w.beta[2] == pytest.approx(0.005)
    with pytest.raises(ValueError):
        LossWeights({1: 0.0}, {})
    with pytest.raises(ValueError):
        LossWeights({1: 1.0}, {1: -1.0})


def test_adam_first_step():
    p = T.tensor([1.0, -2.0], np.float64, requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    Adam([p], lr=0.1).step()
    # bias-corrected first step moves each entry by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_train_config_checks(tiny_dataset):
    spec = ModelSpec("rectnet", 32, 64, 2)
    with pytest.raises(ValueError):
        TrainConfig(spec, tiny_dataset, batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(spec, tiny_dataset, lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(spec, tiny_dataset, adam_eps=0.0)


def test_split_by_scene():
    recs = [ManifestRecord("c", "d", "m", f"s{i:02d}", k) for i in range(20) for k in range(4)]
    train_r, val_r = split_by_scene(recs, 0.1, seed=0)
    assert len(val_r) == 8 and len(train_r) == 72
    assert not {r.scene_id for r in train_r} & {r.scene_id for r in val_r}
    assert split_by_scene(recs, 0.1, seed=0) == (train_r, val_r)
    assert split_by_scene(recs[:8], 0.1)[1] == []  # too few scenes to hold one out


def test_batch_order():
    a = batch_order(8, 3, seed=1, step=0)
    assert len(a) == 3 and len(set(a)) == 3
    epoch = np.concatenate([batch_order(8, 4, 1, s) for s in (0, 1)])
    assert sorted(epoch) == list(range(8))
    np.testing.assert_array_equal(batch_order(8, 8, 1, 5), batch_order(8, 8, 1, 5))


def _cfg(manifest, out, dropout=0.2, **kw):
    args = dict(batch_size=4, iterations=3, seed=7)
    args.update(kw)
    return TrainConfig(ModelSpec("rectnet", 32, 64, 2, dropout=dropout), manifest, out_dir=str(out), **args)


def test_training_is_deterministic(tiny_dataset, tmp_path):
    a = train(_cfg(tiny_dataset, tmp_path / "a"))
    b = train(_cfg(tiny_dataset, tmp_path / "b"))
    assert open(a.checkpoint, "rb").read() == open(b.checkpoint, "rb").read()
    assert [r[:4] for r in a.rows] == [r[:4] for r in b.rows]
    log = read_log(a.log)
    assert [r[:4] for r in log] == [r[:4] for r in a.rows]
    assert open(a.log).readline().strip() == "step,loss,depth_term,smooth_term,seconds"


def test_zero_learning_rate_keeps_parameters(tiny_dataset, tmp_path):
    cfg = _cfg(tiny_dataset, tmp_path, dropout=0.0, batch_size=8)
    cfg.lr = 1e-300  # TrainConfig rejects 0; this underflows every update to exactly zero
    res = train(cfg)
    ref = build_model(cfg.model, seed=cfg.seed)
    for name, p in res.model.params.items():
        if name.startswith("pred") and name.endswith(".bias"):
            continue  # initialised from the data mean
        np.testing.assert_array_equal(p.data, ref.params[name].data)
    losses = [r[1] for r in res.rows]
    # same full batch every step, only its order is shuffled
    assert losses == pytest.approx([losses[0]] * len(losses), rel=1e-5)


def test_predict_contract(tiny_dataset, tmp_path, rng):
    res = train(_cfg(tiny_dataset, tmp_path, iterations=1))
    out = predict(res.checkpoint, rng.random((32, 64, 3)))
    assert out.shape == (32, 64) and np.isfinite(out).all()
    assert out.min() > 0 and out.max() <= 20.0
    with pytest.raises(ValueError, match="32x64"):
        predict(res.model, rng.random((16, 32, 3)))
    assert load_checkpoint(res.checkpoint).step == 1


def test_predict_yaw_equivariance(rng):
    model = build_model(ModelSpec("rectnet", 32, 64, 4), seed=3)
    for p in model.params.values():
        if p.data.ndim == 1:
            p.data[:] = 2.0  # keep outputs inside the clamp range
    img = rng.random((32, 64, 3)).astype(np.float32)
    a = predict(model, yaw_rotate(img, 2))
    b = yaw_rotate(predict(model, img), 2)
    assert np.abs(a - b).max() <= 1e-4


def test_masked_rmse():
    assert masked_rmse([[1, 2]], [[1, 4]], [[1, 1]]) == pytest.approx(np.sqrt(2))
    assert masked_rmse([[1, 2]], [[1, 4]], [[1, 0]]) == 0.0
    with pytest.raises(ValueError):
        masked_rmse([[1]], [[1]], [[0]])


def test_dataset_loading(tiny_dataset):
    data = load_dataset(tiny_dataset)
    assert data.color.shape == (8, 3, 32, 64) and data.depth.shape == (8, 1, 32, 64)
    assert data.color.dtype == np.float32 and data.mask.max() == 1
