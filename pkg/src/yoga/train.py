"""Training harness: schedule, SGD, toy data, AP evaluation, GA tuning, VC bound
and gradient audits."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import blocks as B
from . import ops
from .detect import AnchorSet, Detection, DetectionLoss, LossConfig, box_iou, decode, nms
from .errors import DivergenceError, UsageError
from .gradcheck import check_gradients, check_module, directional_derivative, numerical_grad
from .graph import YogaModel, build_yoga
from .ops import ConvSpec
from .tensor import Tensor, inject_fault, no_grad


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    momentum: float = 0.937
    weight_decay: float = 0.005
    lr_warmup_start: float = 0.0033
    lr_peak: float = 0.01
    lr_final: float = 0.001
    warmup_epochs: float = 3.0
    label_smoothing: float = 0.1
    seed: int = 0
    flip: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        lrs = (self.lr_warmup_start, self.lr_peak, self.lr_final)
        if any(v < 0 for v in lrs) or self.lr_final > self.lr_peak:
            raise ValueError("learning rates must be non-negative with final <= peak")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def lr_at(self, epoch: float) -> float:
        """Linear warm-up to the peak, then cosine decay reaching the final rate at ``epochs``."""
        t = float(epoch)
        w = min(self.warmup_epochs, float(self.epochs))
        if t < w:
            return self.lr_warmup_start + (self.lr_peak - self.lr_warmup_start) * (t / w)
        span = self.epochs - w
        if span <= 0 or t >= self.epochs:
            return self.lr_final if span > 0 else self.lr_peak
        u = (t - w) / span
        amp = self.lr_peak - self.lr_final
        # two algebraically equal forms so both ends are hit without rounding
        if u < 0.5:
            return self.lr_peak - amp * 0.5 * (1 - math.cos(math.pi * u))
        return self.lr_final + amp * 0.5 * (1 + math.cos(math.pi * u))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
             velocities: List[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """``v = mu*v + g + wd*p``; ``p -= lr*v`` (in place)."""
    for p, g, v in zip(params, grads, velocities):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ValueError("parameter, gradient and velocity shapes must agree")
        step = (0.0 if g is None else g) + weight_decay * p
        v *= momentum
        v += step
        p -= lr * v


class SGD:
    def __init__(self, params: Sequence[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, epoch: float) -> float:
        lr = self.config.lr_at(epoch)
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity,
                 lr, self.config.momentum, self.config.weight_decay)
        return lr


def backprop(model: B.Module, loss: Tensor) -> Dict[str, np.ndarray]:
    """Clear parameter gradients, run the reverse pass and return them by name."""
    if loss._ctx is None:
        raise UsageError("backward requested before a forward pass was recorded")
    model.zero_grad()
    loss.backward()
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in model.named_parameters()}


# ---------------------------------------------------------------------------
# toy dataset
# ---------------------------------------------------------------------------
TOY_COLORS = ((255, 40, 40), (40, 255, 40), (60, 60, 255), (255, 255, 40))
TOY_SHAPES = ("rectangle", "ellipse", "triangle", "cross")
TOY_ANCHORS = AnchorSet(((( 8, 8), (12, 12), (10, 16)),
                         ((16, 12), (18, 18), (14, 22)),
                         ((24, 20), (22, 26), (28, 28))), (8, 16, 32))
NOISE_MAX = 150


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rectangle":
        m = np.ones((h, w), bool)
    elif kind == "ellipse":
        m = ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0
    elif kind == "triangle":
        half = (yy + 1) / h * (w / 2)
        m = np.abs(xx + 0.5 - w / 2) <= half
    else:
        bw, bh = max(1, w // 3), max(1, h // 3)
        m = (np.abs(xx + 0.5 - w / 2) <= bw / 2) | (np.abs(yy + 0.5 - h / 2) <= bh / 2)
    return m


def _tight(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


@dataclass
class ToyDataset:
    images: np.ndarray                # (n, h, w, 3) uint8
    labels: List[np.ndarray]          # per image (k, 5): class, cx, cy, w, h in pixels
    ids: List[str]
    num_classes: int

    def __len__(self):
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx: Sequence[int]) -> "ToyDataset":
        return ToyDataset(self.images[list(idx)], [self.labels[i] for i in idx],
                          [self.ids[i] for i in idx], self.num_classes)

    def batch(self, idx: Sequence[int], flip: Optional[np.ndarray] = None):
        """Network input (n, 3, h, w) in [0, 1] and gt rows [image, class, cx, cy, w, h]."""
        x = self.images[list(idx)].astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        rows = []
        for b, i in enumerate(idx):
            lab = self.labels[i].copy()
            if flip is not None and flip[b]:
                x[b] = x[b, :, :, ::-1]
                lab[:, 1] = self.image_size - lab[:, 1]
            rows.append(np.concatenate([np.full((len(lab), 1), b), lab], axis=1))
        gt = np.concatenate(rows) if rows else np.zeros((0, 6))
        return np.ascontiguousarray(x), gt

    def gts(self) -> Dict[str, np.ndarray]:
        return dict(zip(self.ids, self.labels))

    def save(self, root: Union[str, Path]) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        s = self.image_size
        for img, lab, iid in zip(self.images, self.labels, self.ids):
            write_ppm(root / "images" / f"{iid}.ppm", img)
            lines = [f"{int(c)} {cx / s:.6f} {cy / s:.6f} {w / s:.6f} {h / s:.6f}\n"
                     for c, cx, cy, w, h in lab]
            (root / "labels" / f"{iid}.txt").write_text("".join(lines))
        (root / "classes.txt").write_text(
            "".join(f"{TOY_SHAPES[k]}\n" for k in range(self.num_classes)))

    @classmethod
    def load(cls, root: Union[str, Path]) -> "ToyDataset":
        root = Path(root)
        ids = sorted(p.stem for p in (root / "images").glob("*.ppm"))
        imgs, labels = [], []
        for iid in ids:
            img = read_ppm(root / "images" / f"{iid}.ppm")
            s = img.shape[1]
            rows = np.loadtxt(root / "labels" / f"{iid}.txt", ndmin=2)
            lab = rows.copy()
            lab[:, 1:] *= s
            imgs.append(img)
            labels.append(lab)
        nc = len((root / "classes.txt").read_text().split())
        return cls(np.stack(imgs), labels, ids, nc)


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(p) for p in parts[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).copy()


def gen_toy_dataset(n_images: int, image_size: int = 64, classes: int = 3, seed: int = 0,
                    min_size: int = 8, max_size: int = 24, prefix: str = "img") -> ToyDataset:
    """Images with 1-4 non-overlapping solid shapes (one colour per class) on noise."""
    if image_size % 32:
        raise ValueError("image_size must be divisible by 32")
    if not 1 <= classes <= len(TOY_COLORS):
        raise ValueError(f"classes must be in [1, {len(TOY_COLORS)}]")
    rng = np.random.default_rng(seed)
    s = image_size
    images = np.empty((n_images, s, s, 3), np.uint8)
    labels, ids = [], []
    for n in range(n_images):
        img = rng.integers(0, NOISE_MAX, size=(s, s, 3), dtype=np.uint8)
        occupied = np.zeros((s, s), bool)
        rows = []
        for _ in range(int(rng.integers(1, 5))):
            for _attempt in range(50):
                c = int(rng.integers(classes))
                w, h = (int(v) for v in rng.integers(min_size, max_size + 1, size=2))
                x0, y0 = int(rng.integers(0, s - w + 1)), int(rng.integers(0, s - h + 1))
                # one-pixel margin keeps neighbouring shapes separable
                if occupied[max(0, y0 - 1):y0 + h + 1, max(0, x0 - 1):x0 + w + 1].any():
                    continue
                mask = _shape_mask(TOY_SHAPES[c], w, h)
                occupied[y0:y0 + h, x0:x0 + w] = True
                img[y0:y0 + h, x0:x0 + w][mask] = TOY_COLORS[c]
                bx0, by0, bx1, by1 = _tight(mask)
                rows.append([c, x0 + (bx0 + bx1) / 2, y0 + (by0 + by1) / 2, bx1 - bx0, by1 - by0])
                break
        images[n] = img
        labels.append(np.asarray(rows, dtype=np.float64).reshape(-1, 5))
        ids.append(f"{prefix}{n:05d}")
    return ToyDataset(images, labels, ids, classes)


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------
def _ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    total = 0.0
    for r in np.linspace(0, 1, 101):
        k = np.searchsorted(recall, r, side="left")
        total += envelope[k] if k < len(recall) else 0.0
    return total / 101


def _match(dets: Sequence[Detection], gts: Dict[str, np.ndarray], cls: int, thr: float):
    cand = [d for d in dets if d.class_id == cls]
    order = sorted(range(len(cand)), key=lambda i: -cand[i].score)
    gt_c = {k: v[v[:, 0] == cls, 1:5] for k, v in gts.items()}
    used = {k: np.zeros(len(v), bool) for k, v in gt_c.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = cand[i]
        g = gt_c.get(d.image_id)
        if g is None or not len(g):
            continue
        iou = box_iou(np.asarray(d.box)[None], g)[0]
        iou[used[d.image_id]] = -1
        j = int(iou.argmax())
        if iou[j] >= thr:
            used[d.image_id][j] = True
            tp[rank] = 1
    return tp, sum(len(v) for v in gt_c.values())


def eval_ap(dets: Sequence[Detection], gts: Dict[str, np.ndarray],
            iou_threshold: Union[float, Tuple[float, float]] = 0.5) -> float:
    """Class-averaged 101-point interpolated AP.

    ``gts`` maps image id to rows ``[class, cx, cy, w, h]``; ``iou_threshold``
    may be a single value or a ``(lo, hi)`` range stepped by 0.05.
    """
    if isinstance(iou_threshold, (tuple, list)):
        lo, hi = iou_threshold
        ts = np.round(np.arange(lo, hi + 1e-9, 0.05), 2)
        return float(np.mean([eval_ap(dets, gts, float(t)) for t in ts]))
    unknown = {d.image_id for d in dets} - set(gts)
    if unknown:
        raise ValueError(f"detections reference unknown image ids: {sorted(unknown)[:3]}")
    classes = sorted({int(c) for v in gts.values() for c in v[:, 0]})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        tp, n_gt = _match(dets, gts, c, iou_threshold)
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(tp) + 1)
        aps.append(_ap_101(recall, precision))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# toy training
# ---------------------------------------------------------------------------
def predict(model: YogaModel, images: np.ndarray, anchors: AnchorSet, conf: float = 0.001,
            iou: float = 0.6, ids: Optional[Sequence[str]] = None, batch: int = 32,
            max_det: int = 100) -> List[List[Detection]]:
    """Detections for uint8 images (n, h, w, 3) after decode and NMS."""
    was = model.training
    model.eval()
    out: List[List[Detection]] = []
    try:
        with no_grad():
            for s in range(0, len(images), batch):
                x = images[s:s + batch].astype(np.float32).transpose(0, 3, 1, 2) / 255.0
                raw = model(np.ascontiguousarray(x))
                chunk_ids = None if ids is None else ids[s:s + batch]
                for dets in decode(raw, anchors, conf, chunk_ids):
                    out.append(nms(dets, iou)[:max_det])
    finally:
        model.train(was)
    return out


@dataclass
class TrainReport:
    config: dict
    epochs: List[dict]
    final_ap50: float
    best_ap50: float
    epochs_to_target: Optional[int]
    target_ap50: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "ap50"])
        for e in self.epochs:
            w.writerow([e["epoch"], f"{e['loss']:.6f}", f"{e['lr']:.6f}", f"{e['ap50']:.4f}"])
        return buf.getvalue()

    def to_svg(self, width: int = 480, height: int = 240) -> str:
        return curves_svg([("loss", [e["loss"] for e in self.epochs], "#c0392b"),
                           ("AP@0.5", [e["ap50"] for e in self.epochs], "#2471a3")],
                          width, height)


def curves_svg(series, width: int = 480, height: int = 240) -> str:
    """Minimal line chart; each series is normalised to its own range."""
    pad = 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (label, ys, color) in enumerate(series):
        ys = np.asarray(ys, dtype=float)
        if not len(ys):
            continue
        lo, hi = float(ys.min()), float(ys.max())
        span = hi - lo or 1.0
        n = max(len(ys) - 1, 1)
        pts = " ".join(f"{pad + i * (width - 2 * pad) / n:.1f},"
                       f"{height - pad - (y - lo) / span * (height - 2 * pad):.1f}"
                       for i, y in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 110 * k}" y="18" font-size="12" fill="{color}">'
                     f'{label} [{lo:.3g}, {hi:.3g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def toy_model(num_classes: int = 3, image_size: int = 64, seed: int = 0,
              profile: str = "micro") -> YogaModel:
    anchors = TOY_ANCHORS.scaled(image_size / 64)
    g = build_yoga(profile, num_classes, (image_size, image_size), anchors=anchors)
    return g.instantiate(seed)


def train_toy(model: YogaModel, train_set: ToyDataset, val_set: ToyDataset,
              config: TrainConfig, target_ap50: float = 0.5,
              log: Optional[Callable[[str], None]] = None) -> TrainReport:
    """Train on ``train_set``; AP@0.5 on ``val_set`` is measured after every epoch."""
    if not len(train_set):
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    anchors = model.graph.anchors
    lcfg = LossConfig(**{**asdict(config.loss), "label_smoothing": config.label_smoothing})
    criterion = DetectionLoss(train_set.num_classes, anchors, lcfg)
    opt = SGD(model.parameters(), config)
    rng = np.random.default_rng(config.seed)
    n = len(train_set)
    steps = math.ceil(n / config.batch_size)
    history, first_hit, step = [], None, 0
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.flip else np.zeros(n, bool)
        total, lr = 0.0, config.lr_at(epoch)
        for b in range(steps):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            x, gt = train_set.batch(idx, flips[idx])
            loss, _ = criterion(model(x), gt)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {step} (epoch {epoch})",
                                      step=step)
            backprop(model, loss)
            lr = opt.step(epoch + b / steps)
            total += value
            step += 1
        dets = predict(model, val_set.images, anchors, ids=val_set.ids)
        ap = eval_ap([d for ds in dets for d in ds], val_set.gts(), 0.5)
        history.append({"epoch": epoch + 1, "loss": total / steps, "lr": lr, "ap50": ap})
        if first_hit is None and ap >= target_ap50:
            first_hit = epoch + 1
        if log:
            log(f"epoch {epoch + 1:3d} loss {total / steps:.4f} lr {lr:.5f} AP50 {ap:.3f}")
    cfg = asdict(config)
    return TrainReport(cfg, history, history[-1]["ap50"], max(h["ap50"] for h in history),
                       first_hit, target_ap50, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# genetic hyperparameter search
# ---------------------------------------------------------------------------
@dataclass
class GAConfig:
    population: int
    generations: int
    bounds: Sequence[Tuple[float, float]]
    mutation_rate: float = 0.9
    mutation_scale: float = 0.2
    elite_fraction: float = 0.2
    seed: int = 0
    initial: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if not 1 <= len(self.bounds) <= 20:
            raise ValueError("between 1 and 20 hyperparameters are supported")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise ValueError("each bound must satisfy lo < hi")


@dataclass
class GAResult:
    best: np.ndarray
    best_fitness: float
    history: List[float]           # best-so-far fitness per generation
    genomes: List[np.ndarray]      # every evaluated genome


def ga_tune(objective: Callable[[np.ndarray], float], config: GAConfig) -> GAResult:
    """Elitist generational GA with clipped Gaussian mutation and no crossover."""
    rng = np.random.default_rng(config.seed)
    lo = np.array([b[0] for b in config.bounds], float)
    hi = np.array([b[1] for b in config.bounds], float)
    span = hi - lo
    if config.initial is not None:
        pop = np.tile(np.clip(np.asarray(config.initial, float), lo, hi), (config.population, 1))
    else:
        pop = lo + rng.random((config.population, len(lo))) * span
    n_elite = max(1, int(round(config.elite_fraction * config.population)))

    def fitness(g):
        try:
            f = float(objective(g.copy()))
        except Exception:
            return -math.inf
        return f if math.isfinite(f) else -math.inf

    fit = np.array([fitness(g) for g in pop])
    genomes = [g.copy() for g in pop]
    history = []
    for _ in range(config.generations):
        order = np.argsort(-fit, kind="stable")
        elite, elite_fit = pop[order[:n_elite]], fit[order[:n_elite]]
        history.append(float(elite_fit[0]))
        children = elite[rng.integers(n_elite, size=config.population - n_elite)].copy()
        for child in children:
            sigma = config.mutation_scale * span * rng.random()
            mask = rng.random(len(lo)) < config.mutation_rate
            child += mask * rng.standard_normal(len(lo)) * sigma
            np.clip(child, lo, hi, out=child)
        child_fit = np.array([fitness(c) for c in children])
        genomes.extend(c.copy() for c in children)
        pop = np.vstack([elite, children])
        fit = np.concatenate([elite_fit, child_fit])
    best = int(np.argmax(fit))
    history.append(float(fit[best]))
    return GAResult(pop[best].copy(), float(fit[best]), history, genomes)


# ---------------------------------------------------------------------------
# VC generalisation bound
# ---------------------------------------------------------------------------
def vc_log_bound(epsilon: float, n_samples: int, growth_exponent: float) -> float:
    """Natural log of ``4 (2N)^m exp(-eps^2 N / 8)``."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    return (math.log(4) + growth_exponent * math.log(2 * n_samples)
            - epsilon ** 2 * n_samples / 8)


def vc_bound(epsilon: float, n_samples: int, growth_exponent: float) -> float:
    """Bound on ``P[|E_in - E_out| > eps]`` with the polynomial growth function."""
    lb = vc_log_bound(epsilon, n_samples, growth_exponent)
    return math.exp(lb) if lb < 700 else math.inf


def samples_needed(epsilon: float, growth_exponent: float, delta: float = 0.05) -> int:
    """Smallest N beyond the bound's peak with ``vc_bound <= delta``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    target = math.log(delta)
    lo = max(1, int(8 * growth_exponent / epsilon ** 2))   # the bound peaks here
    hi = lo
    while vc_log_bound(epsilon, hi, growth_exponent) > target:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if vc_log_bound(epsilon, mid, growth_exponent) > target:
            lo = mid + 1
        else:
            hi = mid
    return lo


def rule_of_thumb_samples(vc_dimension: int) -> int:
    return 10 * int(vc_dimension)


# ---------------------------------------------------------------------------
# gradient audits
# ---------------------------------------------------------------------------
PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


def _primitive_cases(rng):
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    return {
        "conv2d": (lambda t: ops.conv2d(t[0], t[1], ConvSpec(4, 6, (3, 3), 1, 1, 1, True), t[2]),
                   [r(2, 4, 5, 5), r(6, 4, 3, 3), r(6)]),
        "conv2d_grouped": (lambda t: ops.conv2d(t[0], t[1], ConvSpec(4, 6, (3, 3), 2, 1, 2)),
                           [r(2, 4, 6, 6), r(6, 2, 3, 3)]),
        "conv2d_depthwise": (lambda t: ops.conv2d(t[0], t[1], ConvSpec(4, 4, (5, 5), 1, 2, 4)),
                             [r(2, 4, 5, 5), r(4, 1, 5, 5)]),
        "batchnorm2d": (lambda t: ops.batchnorm2d(t[0], t[1], t[2], training=True),
                        [r(3, 4, 3, 3), pos(4), r(4)]),
        "batchnorm2d_eval": (lambda t: ops.batchnorm2d(t[0], t[1], t[2], np.zeros(4), np.ones(4),
                                                       training=False), [r(2, 4, 3, 3), pos(4), r(4)]),
        "silu": (lambda t: ops.silu(t[0]), [r(2, 3, 4, 4)]),
        "sigmoid": (lambda t: ops.sigmoid(t[0]), [r(2, 3, 4, 4)]),
        "maxpool2d": (lambda t: ops.maxpool2d(t[0], 5, 1, 2), [r(2, 3, 6, 6)]),
        "global_avg_pool": (lambda t: ops.global_avg_pool(t[0]), [r(2, 3, 4, 4)]),
        "upsample_nearest2x": (lambda t: ops.upsample_nearest2x(t[0]), [r(2, 3, 3, 3)]),
        "concat": (lambda t: ops.concat_channels(t), [r(2, 3, 4, 4), r(2, 2, 4, 4)]),
        "add": (lambda t: ops.add(t[0], t[1]), [r(2, 3, 4, 4), r(2, 3, 4, 4)]),
        "sub": (lambda t: ops.sub(t[0], t[1]), [r(2, 3, 4, 4), r(2, 3, 1, 1)]),
        "mul": (lambda t: ops.elementwise(t[0], t[1], "mul", "channel"),
                [r(2, 3, 4, 4), r(2, 3, 1, 1)]),
        "div": (lambda t: ops.div(t[0], t[1]), [r(3, 4), pos(3, 4)]),
        "exp": (lambda t: ops.exp(t[0]), [r(3, 4)]),
        "log": (lambda t: ops.log(t[0]), [pos(3, 4)]),
        "atan": (lambda t: ops.atan(t[0]), [r(3, 4)]),
        "power": (lambda t: ops.power(t[0], 2.5), [pos(3, 4)]),
        "maximum": (lambda t: ops.maximum(t[0], t[1]), [r(3, 4), r(3, 4)]),
        "minimum": (lambda t: ops.minimum(t[0], t[1]), [r(3, 4), r(3, 4)]),
        "sum": (lambda t: ops.reduce_sum(t[0], axis=1), [r(3, 4)]),
        "reshape": (lambda t: ops.reshape(t[0], (4, 3)), [r(3, 4)]),
        "transpose": (lambda t: ops.transpose(t[0], (1, 0)), [r(3, 4)]),
        "index": (lambda t: t[0][(np.array([0, 2, 0]), slice(None), np.array([1, 1, 1]))],
                  [r(3, 4, 2)]),
        "bce_with_logits": (lambda t: ops.bce_with_logits(t[0], np.full((3, 4), 0.3)), [r(3, 4)]),
    }


def audit_primitives(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_gradients(fn, inputs, seed=seed)
            for name, (fn, inputs) in _primitive_cases(rng).items()}


def _block_cases(rng):
    r = lambda *s: rng.standard_normal(s)
    return {
        "ConvBlock": (B.ConvBlock(4, 6, 3, 2, rng=rng), [r(2, 4, 6, 6)], None),
        "GhostConv": (B.GhostConv(4, 8, 3, 1, 5, rng=rng), [r(2, 4, 5, 5)], None),
        "GhostBottleneck": (B.GhostBottleneck(8, 8, 1, rng=rng), [r(2, 8, 4, 4)], None),
        "GhostBottleneck_s2": (B.GhostBottleneck(4, 8, 2, rng=rng), [r(2, 4, 6, 6)], None),
        "CSPGhost": (B.CSPGhost(8, 8, 1, rng=rng), [r(2, 8, 4, 4)], None),
        "SPP": (B.SPP(8, 8, (3, 5), rng=rng), [r(2, 8, 4, 4)], None),
        "MSCAM": (B.MSCAM(8, 4, rng=rng), [r(2, 8, 3, 3)], None),
        "AFF": (B.AFF(8, 4, rng=rng), [r(2, 8, 3, 3), r(2, 8, 3, 3)], None),
        "Detect": (B.Detect(2, (8, 8), 2, (8, 16), rng=rng), [r(2, 8, 4, 4), r(2, 8, 2, 2)],
                   lambda m, xs: m(xs)),
    }


def audit_blocks(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_module(mod, inputs, call, seed=seed)
            for name, (mod, inputs, call) in _block_cases(rng).items()}


def audit_model(seed: int = 0, image_size: int = 64, coords_per_tensor: int = 2,
                step: float = 1e-6, num_classes: int = 3) -> Dict[str, float]:
    """Finite-difference audit of the full micro network through the detection loss.

    Each parameter tensor is probed along one random direction and at a few
    sampled coordinates.  Discrepancies are relative to the larger of the
    compared values and the model-wide gradient scale.
    """
    rng = np.random.default_rng(seed)
    model = toy_model(num_classes, image_size, seed).to(np.float64).train()
    ds = gen_toy_dataset(2, image_size, num_classes, seed=seed)
    x, gt = ds.batch([0, 1])
    x = x.astype(np.float64)
    crit = DetectionLoss(num_classes, model.graph.anchors, detach_alpha=False)
    buffers = [b.copy() for _, b in model.named_buffers()]

    def f():
        loss, _ = crit(model(x), gt)
        for (_, b), s in zip(model.named_buffers(), buffers):
            b[...] = s
        return float(loss.data)

    loss, _ = crit(model(x), gt)
    grads = backprop(model, loss)
    for (_, b), s in zip(model.named_buffers(), buffers):
        b[...] = s
    scale = max(np.abs(g).max() for g in grads.values())
    report = {}
    for name, p in model.named_parameters():
        g = grads[name]
        d = rng.standard_normal(p.shape)
        ana = float((g * d).sum())
        num = directional_derivative(f, p.data, d, step)
        err = abs(ana - num) / max(abs(ana), abs(num), scale * float(np.linalg.norm(d)))
        idx = rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
        numc = numerical_grad(f, p.data, step, indices=idx).reshape(-1)[idx]
        err = max(err, float(np.max(np.abs(g.reshape(-1)[idx] - numc))) / scale)
        report[name] = err
    return report


def grad_report(seed: int = 0, include_model: bool = False,
                faults: Sequence[str] = ()) -> dict:
    """Worst relative error per primitive, per block type and (optionally) the full model."""
    with inject_fault(*faults):
        prims = audit_primitives(seed)
        blks = audit_blocks(seed)
        entries = [{"name": k, "group": "primitive", "error": v, "tolerance": PRIMITIVE_TOL}
                   for k, v in prims.items()]
        entries += [{"name": k, "group": "block", "error": v, "tolerance": PRIMITIVE_TOL}
                    for k, v in blks.items()]
        if include_model:
            m = audit_model(seed)
            worst = max(m, key=m.get)
            entries.append({"name": "micro-yoga", "group": "model", "error": m[worst],
                            "tolerance": MODEL_TOL, "worst_tensor": worst})
    for e in entries:
        e["passed"] = bool(e["error"] < e["tolerance"])
    return {"seed": seed, "passed": all(e["passed"] for e in entries), "entries": entries,
            "failed": [e["name"] for e in entries if not e["passed"]]}
