import math

import numpy as np
import pytest

from yoga import blocks as B
from yoga import train as T
from yoga.detect import Detection
from yoga.errors import DivergenceError, UsageError
from yoga.ops import ConvSpec
from yoga.tensor import Tensor


# -- schedule and optimiser ---------------------------------------------------
def test_lr_anchor_values_exact():
    c = T.TrainConfig(epochs=100)
    assert c.lr_at(0) == 0.0033
    assert c.lr_at(3) == 0.01
    assert c.lr_at(100) == 0.001


def test_lr_continuous_and_piecewise():
    c = T.TrainConfig(epochs=20)
    ts = np.linspace(0, 20, 4001)
    lr = np.array([c.lr_at(t) for t in ts])
    assert np.max(np.abs(np.diff(lr))) < 1e-4
    warm = ts <= 3
    assert np.all(np.diff(lr[warm]) > 0)
    assert np.all(np.diff(lr[~warm]) <= 0)
    assert c.lr_at(1.5) == pytest.approx((0.0033 + 0.01) / 2)
    assert c.lr_at(3 + 17 / 2) == pytest.approx((0.01 + 0.001) / 2)


def test_sgd_quadratic_step():
    w = np.array([1.0])
    T.sgd_step([w], [2 * w.copy()], [np.zeros(1)], lr=0.1, momentum=0.0, weight_decay=0.0)
    assert w[0] == pytest.approx(0.8)


def test_sgd_zero_gradient_no_decay_unchanged():
    w = np.array([1.5, -2.0])
    T.sgd_step([w], [np.zeros(2)], [np.zeros(2)], lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(w, [1.5, -2.0])


def test_sgd_momentum_and_decay():
    p, v = np.array([2.0]), np.array([0.5])
    T.sgd_step([p], [np.array([1.0])], [v], lr=0.1, momentum=0.9, weight_decay=0.01)
    assert v[0] == pytest.approx(0.9 * 0.5 + 1.0 + 0.02)
    assert p[0] == pytest.approx(2.0 - 0.1 * v[0])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        T.sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9, 0.0)


# -- backprop -----------------------------------------------------------------
class TwoLayer(B.Module):
    """Two dense layers written as 1x1 convolutions on a 1x1 map."""

    def __init__(self, rng):
        self.l1 = B.Conv(ConvSpec(4, 3, (1, 1), bias=True), rng)
        self.l2 = B.Conv(ConvSpec(3, 2, (1, 1), bias=True), rng)

    def forward(self, x):
        return self.l2(self.l1(x))


def test_backprop_two_layer_matches_hand_expansion():
    rng = np.random.default_rng(0)
    net = TwoLayer(rng).to(np.float64)
    x = rng.normal(size=(5, 4))
    r = rng.normal(size=(5, 2))
    out = net(Tensor(x.reshape(5, 4, 1, 1)))
    loss = (out * r.reshape(5, 2, 1, 1)).sum()
    grads = T.backprop(net, loss)
    W1 = net.l1.weight.data[:, :, 0, 0]
    W2 = net.l2.weight.data[:, :, 0, 0]
    z1 = x @ W1.T + net.l1.bias.data
    g_z2 = r                                  # dL/dz2
    g_z1 = g_z2 @ W2                          # dL/dz1 = W2^T g_z2
    np.testing.assert_allclose(grads["l2.weight"][:, :, 0, 0], g_z2.T @ z1, atol=1e-12)
    np.testing.assert_allclose(grads["l2.bias"], g_z2.sum(0), atol=1e-12)
    np.testing.assert_allclose(grads["l1.weight"][:, :, 0, 0], g_z1.T @ x, atol=1e-12)
    np.testing.assert_allclose(grads["l1.bias"], g_z1.sum(0), atol=1e-12)


def test_backprop_zero_upstream():
    rng = np.random.default_rng(1)
    net = TwoLayer(rng).to(np.float64)
    loss = (net(Tensor(rng.normal(size=(2, 4, 1, 1)))) * 0.0).sum()
    assert all(not g.any() for g in T.backprop(net, loss).values())


def test_backprop_before_forward():
    net = TwoLayer(np.random.default_rng(2))
    with pytest.raises(UsageError):
        T.backprop(net, Tensor(np.zeros(())))


def test_backprop_each_gradient_once():
    rng = np.random.default_rng(3)
    net = TwoLayer(rng).to(np.float64)
    x = Tensor(rng.normal(size=(2, 4, 1, 1)))
    g1 = T.backprop(net, net(x).sum())
    g2 = T.backprop(net, net(x).sum())     # zeroed between calls, so no doubling
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


# -- toy data -----------------------------------------------------------------
def test_dataset_deterministic():
    a = T.gen_toy_dataset(12, seed=5)
    b = T.gen_toy_dataset(12, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.labels, b.labels))
    c = T.gen_toy_dataset(12, seed=6)
    assert a.images.tobytes() != c.images.tobytes()


def test_dataset_boxes_in_bounds():
    d = T.gen_toy_dataset(60, image_size=64, classes=4, seed=1)
    for lab in d.labels:
        assert 1 <= len(lab) <= 4
        x0, x1 = lab[:, 1] - lab[:, 3] / 2, lab[:, 1] + lab[:, 3] / 2
        y0, y1 = lab[:, 2] - lab[:, 4] / 2, lab[:, 2] + lab[:, 4] / 2
        assert (x0 >= 0).all() and (y0 >= 0).all() and (x1 <= 64).all() and (y1 <= 64).all()


def test_dataset_pixel_scan_oracle():
    d = T.gen_toy_dataset(40, classes=3, seed=2)
    for img, lab in zip(d.images, d.labels):
        for cls in range(3):
            colour = np.array(T.TOY_COLORS[cls])
            hits = np.all(img == colour, axis=-1)
            # each colour channel includes a value >= 150, never produced by the noise
            ys, xs = np.nonzero(hits)
            boxes = lab[lab[:, 0] == cls]
            if not len(boxes):
                assert not hits.any()
                continue
            for _, cx, cy, w, h in boxes:
                x0, y0 = int(round(cx - w / 2)), int(round(cy - h / 2))
                inside = (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
                sx, sy = xs[inside], ys[inside]
                assert abs(sx.min() - x0) <= 1 and abs(sx.max() + 1 - (x0 + w)) <= 1
                assert abs(sy.min() - y0) <= 1 and abs(sy.max() + 1 - (y0 + h)) <= 1


def test_dataset_save_load(tmp_path):
    d = T.gen_toy_dataset(5, classes=2, seed=3)
    d.save(tmp_path)
    e = T.ToyDataset.load(tmp_path)
    assert e.images.tobytes() == d.images.tobytes() and e.ids == d.ids
    for a, b in zip(d.labels, e.labels):
        np.testing.assert_allclose(a, b, atol=64 * 1e-6)


def test_dataset_rejects_bad_size():
    with pytest.raises(ValueError):
        T.gen_toy_dataset(2, image_size=50)


def test_batch_flip_mirrors_boxes():
    d = T.gen_toy_dataset(2, seed=4)
    x, gt = d.batch([0, 1], np.array([True, False]))
    np.testing.assert_array_equal(x[0], d.images[0].transpose(2, 0, 1)[:, :, ::-1] / np.float32(255))
    np.testing.assert_allclose(gt[gt[:, 0] == 0, 2], 64 - d.labels[0][:, 1])


# -- AP -----------------------------------------------------------------------
def _iou(a, b):
    iw = max(0.0, min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2))
    ih = max(0.0, min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2))
    return iw * ih / (a[2] * a[3] + b[2] * b[3] - iw * ih)


def _ap_oracle(dets, gts, thr):
    classes = sorted({int(r[0]) for v in gts.values() for r in v})
    aps = []
    for c in classes:
        cand = sorted([d for d in dets if d.class_id == c], key=lambda d: -d.score)
        used = set()
        n_gt = sum(int((v[:, 0] == c).sum()) for v in gts.values())
        tp = []
        for d in cand:
            best, best_iou = None, -1.0
            for k, row in enumerate(gts[d.image_id]):
                if int(row[0]) != c or (d.image_id, k) in used:
                    continue
                v = _iou(d.box, row[1:])
                if v > best_iou:
                    best, best_iou = k, v
            hit = best is not None and best_iou >= thr
            if hit:
                used.add((d.image_id, best))
            tp.append(hit)
        pts = []
        cum = 0
        for i, hit in enumerate(tp):
            cum += hit
            pts.append((cum / n_gt, cum / (i + 1)))
        total = 0.0
        for j in range(101):
            r = j / 100
            ps = [p for rec, p in pts if rec >= r - 1e-12]
            total += max(ps) if ps else 0.0
        aps.append(total / 101)
    return sum(aps) / len(aps) if aps else 0.0


def _scenario(seed):
    rng = np.random.default_rng(seed)
    gts, dets = {}, []
    for i in range(10):
        k = int(rng.integers(1, 5))
        rows = np.c_[rng.integers(0, 3, k), rng.uniform(10, 54, (k, 2)), rng.uniform(6, 20, (k, 2))]
        gts[f"im{i}"] = rows
        for r in rows:
            if rng.random() < 0.7:       # jittered true positive, sometimes mislabelled
                c = int(r[0]) if rng.random() < 0.85 else int(rng.integers(3))
                box = r[1:] + rng.normal(0, 2, 4) * np.array([1, 1, 0.5, 0.5])
                box[2:] = np.maximum(box[2:], 1)
                dets.append(Detection(c, float(rng.random()), tuple(box), f"im{i}"))
        for _ in range(int(rng.integers(0, 3))):
            dets.append(Detection(int(rng.integers(3)), float(rng.random()),
                                  tuple(np.r_[rng.uniform(0, 64, 2), rng.uniform(4, 20, 2)]),
                                  f"im{i}"))
    return dets, gts


@pytest.mark.parametrize("seed", range(20))
def test_eval_ap_matches_oracle(seed):
    dets, gts = _scenario(seed)
    assert T.eval_ap(dets, gts, 0.5) == pytest.approx(_ap_oracle(dets, gts, 0.5), abs=1e-12)


def test_eval_ap_perfect_and_empty():
    gts = {"a": np.array([[0, 10, 10, 5, 5], [1, 30, 30, 8, 8]]), "b": np.array([[1, 5, 5, 4, 4]])}
    perfect = [Detection(int(r[0]), 0.9, tuple(r[1:]), k) for k, v in gts.items() for r in v]
    assert T.eval_ap(perfect, gts, 0.5) == 1.0
    assert T.eval_ap(perfect, gts, (0.5, 0.95)) == 1.0
    assert T.eval_ap([], gts, 0.5) == 0.0


def test_eval_ap_unknown_image():
    with pytest.raises(ValueError):
        T.eval_ap([Detection(0, 0.5, (1, 1, 1, 1), "zzz")], {"a": np.zeros((0, 5))})


# -- GA -----------------------------------------------------------------------
def test_ga_sphere_converges():
    target = np.array([0.3, -1.2, 2.0])
    cfg = T.GAConfig(population=20, generations=50, bounds=[(-3, 3)] * 3, seed=0)
    res = T.ga_tune(lambda g: -float(((g - target) ** 2).sum()), cfg)
    assert np.max(np.abs(res.best - target)) < 0.05


def test_ga_constant_without_mutation():
    cfg = T.GAConfig(population=8, generations=10, bounds=[(0, 1), (0, 1)], mutation_rate=0.0,
                     initial=[0.4, 0.6])
    res = T.ga_tune(lambda g: float(g.sum()), cfg)
    assert res.history == [pytest.approx(1.0)] * 11


@pytest.mark.parametrize("seed", range(4))
def test_ga_elitism_and_bounds(seed):
    bounds = [(0, 1), (-5, 5), (10, 11)]
    calls = {"n": 0}

    def f(g):
        calls["n"] += 1
        if calls["n"] % 7 == 0:
            raise RuntimeError("flaky")
        return float(np.sin(3 * g).sum())

    res = T.ga_tune(f, T.GAConfig(population=10, generations=15, bounds=bounds, seed=seed))
    assert all(b >= a for a, b in zip(res.history, res.history[1:]))
    lo, hi = np.array(bounds).T
    assert all(((g >= lo) & (g <= hi)).all() for g in res.genomes)


# -- VC bound -----------------------------------------------------------------
def test_vc_bound_monotone_past_peak():
    eps, m = 0.1, 5
    peak = int(8 * m / eps ** 2)
    vals = [T.vc_log_bound(eps, n, m) for n in range(peak, peak * 20, peak // 4)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert T.vc_bound(0.2, 5000, 5) < T.vc_bound(0.1, 5000, 5)


def test_vc_bound_reference_setting_finite():
    v = T.vc_bound(0.05, 5000, 20)
    assert math.isfinite(v) and v > 0


def test_samples_needed_inverts_bound():
    n = T.samples_needed(0.1, 5, delta=0.05)
    assert T.vc_bound(0.1, n, 5) <= 0.05 < T.vc_bound(0.1, n - 1, 5)
    assert T.rule_of_thumb_samples(20) == 200


# -- training loop ------------------------------------------------------------
@pytest.fixture(scope="module")
def tiny_data():
    d = T.gen_toy_dataset(12, seed=9)
    return d.subset(range(8)), d.subset(range(8, 12))


def test_zero_lr_leaves_parameters(tiny_data):
    tr, va = tiny_data
    model = T.toy_model(seed=0)
    before = [p.data.copy() for p in model.parameters()]
    cfg = T.TrainConfig(epochs=2, batch_size=4, lr_warmup_start=0, lr_peak=0, lr_final=0)
    T.train_toy(model, tr, va, cfg)
    for a, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(a, p.data)


def test_training_deterministic(tiny_data):
    tr, va = tiny_data
    runs = []
    for _ in range(2):
        rep = T.train_toy(T.toy_model(seed=1), tr, va, T.TrainConfig(epochs=2, batch_size=4))
        runs.append([(e["loss"], e["ap50"]) for e in rep.epochs])
    assert runs[0] == runs[1]


def test_divergence_names_step(tiny_data):
    tr, va = tiny_data
    model = T.toy_model(seed=2)
    model.parameters()[0].data[:] = np.nan
    with pytest.raises(DivergenceError) as e:
        T.train_toy(model, tr, va, T.TrainConfig(epochs=1, batch_size=4))
    assert e.value.step == 0 and "step 0" in str(e.value)


def test_report_serialisations(tiny_data):
    tr, va = tiny_data
    rep = T.train_toy(T.toy_model(seed=3), tr, va, T.TrainConfig(epochs=2, batch_size=4))
    assert '"epochs"' in rep.to_json()
    assert rep.to_csv().splitlines()[0].startswith("epoch")
    assert rep.to_svg().startswith("<svg")
    assert len(rep.epochs) == 2 and all(math.isfinite(e["loss"]) for e in rep.epochs)
