"""Greedy layer-wise training: base classifier, rotation stages, cyclic head, fine-tuning."""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataset as ds
from .errors import ConfigurationError, DimensionError, DivergenceError, StageOrderError
from .layers import softmax, softmax_loss
from .network import (
    Model,
    ModelSpec,
    build_base_model,
    insert_cyclic,
    nearest_cell,
    rotate_conv,
    widen_input,
)

log = logging.getLogger(__name__)

STAGES = ("base", "rotate1", "rotate2", "head", "finetune")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 16
    seed: int = 42
    background_fraction: float = 0.1
    n: int = 12
    periods: tuple = (6, 12)
    augment_per_class: int = 8  # jittered copies per class and stage angle
    finetune_epochs: int = 60
    finetune_scenes: int = 800
    finetune_canvas: int = 64
    finetune_rounds: int = 6  # hard-negative mining rounds
    finetune_margin: int = 3  # cells (Chebyshev) from the symbol before a cell counts as background
    hard_negatives: int = 4  # strongest far cells per scene and round
    label_smoothing: float = 0.1
    clip_norm: float = 1.0  # global gradient-norm cap per step; 0 disables
    divergence_loss: float = 1e3  # epoch mean loss treated as divergence (healthy runs stay near ln C)
    offcenter_min: float = 6.0  # px displacement of negative symbols in the last rotate stage
    offcenter_ratio: int = 3  # displaced negatives per background canvas
    orientation_weight: float = 0.05  # loss weight of wrong-orientation fibers at a symbol
    background_weight: float = 0.3  # loss weight of fibers away from any symbol

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.background_fraction <= 0.3:
            raise ConfigurationError("background_fraction must lie in [0, 0.3]")
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epoch counts >= 0")
        self.periods = tuple(int(p) for p in self.periods)
        for p in self.periods:
            if self.n % p or self.n // p > 2:
                raise ConfigurationError(f"period {p} incompatible with n={self.n}")


@dataclass
class StageReport:
    stage: str
    epoch_losses: list = field(default_factory=list)
    train_accuracy: float = float("nan")
    wall_time: float = 0.0
    converged: bool = True
    notes: dict = field(default_factory=dict)

    def to_record(self, include_time: bool = False) -> str:
        # wall time is left out by default so run logs stay byte-deterministic
        rec = asdict(self)
        if not np.isfinite(rec["train_accuracy"]):
            rec["train_accuracy"] = None
        if not include_time:
            del rec["wall_time"]
        return json.dumps(rec, sort_keys=True)


def append_run_log(path, report: StageReport) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(report.to_record() + "\n")


def _rng(config: TrainConfig, stage: str):
    return np.random.default_rng([config.seed, zlib.crc32(stage.encode())])


def sgd_step(params, grads, lr: float, frozen=None) -> list:
    """Plain gradient descent ``p - lr * g``; frozen entries are returned untouched."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    frozen = frozen or [False] * len(params)
    out = []
    for p, g, fz in zip(params, grads, frozen):
        if fz:
            out.append(p)
            continue
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise DimensionError(f"parameter {p.shape} and gradient {g.shape} shapes differ")
        out.append(p - lr * g)
    return out


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(dw * dw) + np.sum(db * db)) for dw, db in grads.values()))
    if not np.isfinite(total) or total <= max_norm:
        return grads
    s = max_norm / total
    return {k: (dw * s, db * s) for k, (dw, db) in grads.items()}


def apply_gradients(model: Model, grads: dict, lr: float) -> None:
    for idx, (dw, db) in grads.items():
        l = model.layers[idx]
        l.weights, l.bias = sgd_step([l.weights, l.bias], [dw, db], lr, [l.frozen, l.frozen])


# samples -----------------------------------------------------------------------
#
# A training sample is (input, label, weight): ``input`` feeds the model from
# some start layer, ``label`` matches the logits shape [H, W, p, C] and
# ``weight`` [H, W, p] scales each fiber's loss (0 drops the fiber).


def _masked_loss(logits, label, weight):
    # the background level push stops once a fiber's mean logit is below zero
    weight = np.asarray(weight, dtype=np.float64)
    mask = weight > 0
    z, lab, w = logits[mask], label[mask], weight[mask]
    loss = 0.0
    d = np.zeros_like(logits)
    dz = np.zeros_like(z)
    for value in np.unique(w):
        sel = w == value
        res = softmax_loss(z[sel], lab[sel], floor=0.0)
        loss += value * res.loss
        dz[sel] = value * res.dlogits
    d[mask] = dz
    return loss, d


def _orientation_label(class_id, bin_, p, classes, smoothing):
    lab = np.zeros((p, classes))
    lab[bin_ % p, class_id] = 1.0
    if smoothing and p > 2:
        lab[(bin_ - 1) % p, class_id] = smoothing
        lab[(bin_ + 1) % p, class_id] = smoothing
    return lab


def _fiber_weights(label, config):
    # fibers at a symbol but off its orientation get the lighter orientation weight
    return np.where(label.sum(axis=-1) > 0, 1.0, config.orientation_weight)


def _train(model: Model, samples, config, stage, start, cells, rng, epochs):
    losses = []
    bs = config.batch_size
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for b in range(0, len(order), bs):
            batch = [samples[i] for i in order[b:b + bs]]
            if cells:
                x = np.concatenate([s[0] for s in batch], axis=0)
                label = np.concatenate([s[1] for s in batch], axis=0)
                mask = np.concatenate([s[2] for s in batch], axis=0)
                logits = model.forward(x, start=start, keep=True, cells=True)
                loss, d = _masked_loss(logits, label, mask)
                grads = model.backward(d / len(batch))
            else:
                grads, loss = {}, 0.0
                for x, label, mask in batch:
                    logits = model.forward(x, start=start, keep=True)
                    l, d = _masked_loss(logits, label, mask)
                    loss += l
                    for idx, (dw, db) in model.backward(d / len(batch)).items():
                        if idx in grads:
                            grads[idx] = (grads[idx][0] + dw, grads[idx][1] + db)
                        else:
                            grads[idx] = (dw, db)
            if not np.isfinite(loss):
                raise DivergenceError(stage, epoch)
            if config.clip_norm > 0:
                grads = clip_gradients(grads, config.clip_norm)
            apply_gradients(model, grads, config.learning_rate)
            total += loss
        mean = total / len(samples)
        if not np.isfinite(mean) or mean > config.divergence_loss or not all(
            np.all(np.isfinite(model.layers[i].weights)) for i in model.param_layers()
        ):
            raise DivergenceError(stage, epoch)
        losses.append(float(mean))
        log.debug("%s epoch %d loss %.6f", stage, epoch, mean)
    model._cache = None
    return losses


def _prefix(model: Model, x, stop):
    return model.forward(x, stop=stop) if stop else x


def _background_count(config, positives):
    return int(np.ceil(config.background_fraction * positives))


def _jittered_canvas(glyph, rng, angle, max_jitter_deg, canvas=ds.TRAIN_CANVAS):
    c = (canvas - 1) / 2.0
    dy, dx = rng.uniform(-1.0, 1.0, size=2)
    a = angle + rng.uniform(-max_jitter_deg, max_jitter_deg)
    img = np.zeros((canvas, canvas))
    return ds.paste_glyph(img, glyph, c + dy, c + dx, a)


def _offcenter_canvas(glyph, rng, min_shift, max_shift, canvas=ds.TRAIN_CANVAS):
    # symbol displaced far enough that the center cell must not fire
    c = (canvas - 1) / 2.0
    r = rng.uniform(min_shift, max_shift)
    phi = rng.uniform(0.0, 2 * np.pi)
    img = np.zeros((canvas, canvas))
    return ds.paste_glyph(img, glyph, c + r * np.sin(phi), c + r * np.cos(phi), rng.uniform(0.0, 360.0))


def _offcenter_batch(glyphs, rng, config, background_count):
    # displaced symbols teach the network to stay quiet away from a symbol center
    return [_offcenter_canvas(glyphs[int(rng.integers(len(glyphs)))], rng, config.offcenter_min, ds.TRAIN_CANVAS / 2.0)
            for _ in range(background_count * config.offcenter_ratio)]


# stages ---------------------------------------------------------------------------


def _classify_logits(logits):
    # argmax over (class, y, x, orientation) with the lowest index winning ties
    c = np.transpose(logits, (3, 0, 1, 2))
    k, i, j, t = np.unravel_index(int(np.argmax(c)), c.shape)
    return int(k), int(t)


def train_base(config: TrainConfig | None = None, spec: ModelSpec | None = None, images=None):
    """Train the base classifier on the 15 upright symbols plus background canvases."""
    config = config or TrainConfig()
    t0 = time.perf_counter()
    rng = _rng(config, "base")
    if images is None:
        _, images = ds.gen_train_set()
    classes = len(images)
    model = build_base_model(spec or ModelSpec(n=config.n), seed=config.seed)
    samples = []
    for k, img in enumerate(images):
        lab = np.zeros((1, 1, 1, model.class_count))
        lab[0, 0, 0, k] = 1.0
        samples.append((img, lab, np.ones((1, 1, 1))))
    bg, _ = ds.make_background_batch(_background_count(config, classes), ds.TRAIN_CANVAS, seed=config.seed)
    bg = list(bg) + _offcenter_batch(images, rng, config, _background_count(config, classes))
    for img in bg:
        samples.append((img, np.zeros((1, 1, 1, model.class_count)), np.full((1, 1, 1), config.background_weight)))
    losses = _train(model, samples, config, "base", 0, False, rng, config.epochs)
    report = StageReport("base", losses, wall_time=time.perf_counter() - t0)
    if len(losses) >= 3 and not (losses[0] > losses[1] > losses[2]):
        report.converged = False
        log.warning("base training loss did not decrease over the first 3 epochs: %s", losses[:3])
    correct = sum(_classify_logits(model.forward(img))[0] == k for k, img in enumerate(images))
    report.train_accuracy = correct / classes
    return model, report


def greedy_rotate_stage(model: Model, layer_index: int, config: TrainConfig | None = None, images=None):
    """Rotate conv ``layer_index`` (0-based among conv layers), freeze it and retrain downstream."""
    config = config or TrainConfig()
    t0 = time.perf_counter()
    n, p = config.n, config.periods[layer_index]
    convs = model.conv_indices()
    if model.cyclic_index() is not None:
        raise StageOrderError("cannot rotate layers after the cyclic head was inserted")
    if layer_index >= len(convs):
        raise StageOrderError(f"model has no conv layer {layer_index}")
    for r in range(layer_index):
        if model.layers[convs[r]].layout.period == 1:
            raise StageOrderError(f"conv layer {r} must be rotated before conv layer {layer_index}")
    if model.layers[convs[layer_index]].layout.period != 1:
        raise StageOrderError(f"conv layer {layer_index} is already rotated")
    stage = f"rotate{layer_index + 1}"
    rng = _rng(config, stage)
    if images is None:
        _, images = ds.gen_train_set()
    glyphs = [ds.rasterize_glyph(k) for k in range(len(images))]

    model = model.copy()
    model.n = n
    idx = convs[layer_index]
    rotate_conv(model, idx, n, p)
    last_conv = layer_index == len(convs) - 1
    if not last_conv:
        widen_input(model, convs[layer_index + 1], model.layers[idx].layout)
    step = 360.0 / n
    # canonical orientation only while downstream convs are unrotated; every
    # stage angle once the last conv is rotated
    angles = [j * step for j in range(n)] if last_conv else [0.0]
    out_p = p if last_conv else 1
    stop = model.frozen_prefix()
    cells = all(l.pointwise for l in model.layers[stop:])
    classes = model.class_count
    samples = []
    for k, g in enumerate(glyphs):
        for j, a in enumerate(angles):
            for _ in range(config.augment_per_class):
                img = _jittered_canvas(g, rng, a, step / 2)
                lab = _orientation_label(k, j, out_p, classes, config.label_smoothing if last_conv else 0)
                samples.append((_prefix(model, img, stop), lab[None, None], _fiber_weights(lab, config)[None, None]))
    bg, _ = ds.make_background_batch(_background_count(config, len(samples)), ds.TRAIN_CANVAS,
                                     seed=int(rng.integers(2**31)))
    bg = list(bg) + _offcenter_batch(glyphs, rng, config, _background_count(config, len(samples)))
    for img in bg:
        samples.append((_prefix(model, img, stop), np.zeros((1, 1, out_p, classes)),
                        np.full((1, 1, out_p), config.background_weight)))
    losses = _train(model, samples, config, stage, stop, cells, rng, config.epochs)
    report = StageReport(stage, losses, wall_time=0.0)
    per_angle = stage_accuracy(model, glyphs, angles)
    report.train_accuracy = float(np.mean(per_angle))
    report.notes["per_angle_correct"] = [int(round(a * len(glyphs))) for a in per_angle]
    report.wall_time = time.perf_counter() - t0
    return model, report


def stage_accuracy(model: Model, glyphs, angles) -> list:
    """Fraction of centered symbols classified correctly at each angle."""
    out = []
    c = (ds.TRAIN_CANVAS - 1) / 2.0
    for a in angles:
        correct = 0
        for k, g in enumerate(glyphs):
            img = ds.paste_glyph(np.zeros((ds.TRAIN_CANVAS, ds.TRAIN_CANVAS)), g, c, c, a)
            correct += _classify_logits(model.forward(img))[0] == k
        out.append(correct / len(glyphs))
    return out


def insert_cyclic_head(model: Model, check_images=None, tol: float = 1e-9) -> Model:
    """Insert the identity cyclic layer and turn the dense head into 1x1 convolutions."""
    done = model.stages_done()
    if "head" in done:
        raise StageOrderError("the cyclic head is already in place")
    convs = model.conv_indices()
    if any(model.layers[i].layout.period == 1 for i in convs):
        raise StageOrderError("all conv layers must be rotated before inserting the cyclic head")
    out = model.copy()
    insert_cyclic(out)
    if check_images is not None:
        for img in check_images:
            before = model.forward(img)
            after = out.forward(img)
            if before.shape != after.shape or np.max(np.abs(before - after)) > tol:
                raise AssertionError("cyclic head insertion changed the canonical prediction")
    return out


@dataclass
class _Scene:
    feats: np.ndarray  # frozen-trunk output [hy, hx, channels]
    cell: tuple  # ground-truth cell
    label: np.ndarray  # [p, classes] target at the true cell
    far: np.ndarray  # flat indices of cells that must stay quiet


def _finetune_scenes(model, config, rng, stop):
    """Random single-symbol scenes reduced to their frozen-trunk features."""
    records, images = ds.gen_test_set(config.finetune_scenes, config.finetune_canvas,
                                      seed=int(rng.integers(2**31)))
    step = 360.0 / config.n
    p = model.layers[model.conv_indices()[-1]].layout.period
    scenes = []
    for rec, img in zip(records, images):
        feats = model.forward(img, stop=stop)
        hy, hx = feats.shape[:2]
        i0, j0 = nearest_cell(model, rec.cy, rec.cx)
        i0, j0 = min(max(i0, 0), hy - 1), min(max(j0, 0), hx - 1)
        bin_ = int(np.floor(rec.angle_deg / step + 0.5)) % p
        ii, jj = np.meshgrid(np.arange(hy), np.arange(hx), indexing="ij")
        dist = np.maximum(np.abs(ii - i0), np.abs(jj - j0))
        # cells next to the symbol still see most of it and stay unlabelled
        far = np.flatnonzero((dist >= config.finetune_margin).ravel())
        label = _orientation_label(rec.class_id, bin_, p, model.class_count, config.label_smoothing)
        scenes.append(_Scene(feats, (i0, j0), label, far))
    return scenes


def _mine(model, scenes, config, rng, stop):
    """Per scene: the true cell, the strongest far cells and a few random far cells."""
    samples = []
    for sc in scenes:
        hx = sc.feats.shape[1]
        picks = []
        if config.hard_negatives and len(sc.far):
            prob = softmax(model.forward(sc.feats, start=stop))
            peak = prob.max(axis=(2, 3)).ravel()[sc.far]
            order = np.argsort(-peak, kind="stable")
            picks = list(sc.far[order[:config.hard_negatives]])
        rest = np.setdiff1d(sc.far, picks)
        k = min(len(rest), _background_count(config, sc.label.shape[0]))
        if k:
            picks += list(rng.choice(rest, size=k, replace=False))
        cells = [sc.cell] + [divmod(int(c), hx) for c in picks]
        x = np.stack([sc.feats[i, j] for i, j in cells])[:, None, :]
        label = np.zeros((len(cells), 1) + sc.label.shape)
        label[0, 0] = sc.label
        weight = np.full(label.shape[:3], config.background_weight)
        weight[0, 0] = _fiber_weights(sc.label, config)
        samples.append((x, label, weight))
    return samples


def finetune(model: Model, config: TrainConfig | None = None, scenes=None):
    """Train every unfrozen layer against per-fiber pose-map targets on random scenes.

    Training alternates with hard-negative mining: each round re-selects the
    far cells the current model scores highest.
    """
    config = config or TrainConfig()
    t0 = time.perf_counter()
    if model.cyclic_index() is None:
        raise StageOrderError("finetune needs the cyclic head; run the head stage first")
    rng = _rng(config, "finetune")
    model = model.copy()
    stop = model.frozen_prefix()
    if not all(l.pointwise for l in model.layers[stop:]):
        raise ConfigurationError("finetune supports pointwise heads on a frozen trunk only")
    if config.finetune_epochs == 0:
        return model, StageReport("finetune", [], float("nan"), wall_time=time.perf_counter() - t0)
    if scenes is None:
        scenes = _finetune_scenes(model, config, rng, stop)
    rounds = max(1, min(config.finetune_rounds, config.finetune_epochs))
    losses = []
    for r in range(rounds):
        epochs = config.finetune_epochs * (r + 1) // rounds - config.finetune_epochs * r // rounds
        samples = _mine(model, scenes, config, rng, stop)
        losses += _train(model, samples, config, "finetune", stop, True, rng, epochs)
    report = StageReport("finetune", losses, wall_time=time.perf_counter() - t0)
    correct = 0
    for sc in scenes:
        logits = model.forward(sc.feats, start=stop)
        correct += _classify_logits(logits)[0] == int(np.argmax(sc.label.max(axis=0)))
    report.train_accuracy = correct / len(scenes)
    return model, report


def run_stage(name: str, model: Model | None, config: TrainConfig, images=None):
    """Run one named pipeline stage, enforcing the stage order."""
    if name not in STAGES:
        raise ConfigurationError(f"unknown stage {name!r}")
    done = ["none"] if model is None else model.stages_done()
    required = {"base": None, "rotate1": "base", "rotate2": "rotate1", "head": "rotate2", "finetune": "head"}
    need = required[name]
    if name == "base":
        if model is not None:
            raise StageOrderError("base stage starts from scratch; do not pass a model")
        return train_base(config, images=images)
    if model is None or need not in done:
        raise StageOrderError(f"stage {name!r} requires stage {need!r} first")
    if name != "finetune" and done[-1] != need:
        raise StageOrderError(f"stage {name!r} already completed")
    if name == "rotate1":
        return greedy_rotate_stage(model, 0, config, images)
    if name == "rotate2":
        return greedy_rotate_stage(model, 1, config, images)
    if name == "head":
        t0 = time.perf_counter()
        check = images if images is not None else ds.gen_train_set()[1]
        out = insert_cyclic_head(model, check)
        glyphs = [ds.rasterize_glyph(k) for k in range(out.class_count)]
        acc = stage_accuracy(out, glyphs, [j * 360.0 / out.n for j in range(out.n)])
        return out, StageReport("head", [], float(np.mean(acc)), wall_time=time.perf_counter() - t0)
    return finetune(model, config)


def train_pipeline(config: TrainConfig | None = None, stages=STAGES, log_path=None):
    """Run ``stages`` in order from scratch; returns the model and the stage reports."""
    config = config or TrainConfig()
    model, reports = None, []
    for name in stages:
        model, report = run_stage(name, model, config)
        reports.append(report)
        if log_path is not None:
            append_run_log(log_path, report)
        log.info("stage %s done in %.1fs (accuracy %.3f)", name, report.wall_time, report.train_accuracy)
    return model, reports
