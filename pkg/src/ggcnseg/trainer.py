"""Training, evaluation and inference for the DSFE + graph-head segmenter."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .dsfe import DsfeConfig, dsfe_forward, init_params as init_dsfe, DsfeParams
from .errors import ConfigurationError, ContractError, DataError, DimensionError
from .files import read_manifest, read_pgm, read_png_rgb
from .gnn import (GcnLayerParams, GgcnParams, HeadParams, gcn_stack_forward, ggcn_forward,
                  ggnn_forward, GGCN_WEIGHTS)
from .graph import build_grid
from .preprocess import binary_from_tsdm

log = logging.getLogger(__name__)

HEADS = ("ggcn", "ggnn", "gcn")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 1
    seed: int = 0
    lr_decay: float = 0.1
    lr_floor: float = 1e-8
    patience: int = 5
    min_delta: float = 1e-4
    val_fraction: float = 0.2
    head: str = "ggcn"
    timesteps: int = 5
    connectivity: int = 4
    td: int = 5
    dsfe: DsfeConfig = field(default_factory=DsfeConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigurationError("epochs and batch must be >= 1")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if not 1 <= self.timesteps <= 16:
            raise ConfigurationError(f"timesteps must lie in 1..16, got {self.timesteps}")
        if self.td < 1:
            raise ConfigurationError("td must be >= 1")

    @property
    def n_classes(self) -> int:
        return 2 * self.td + 1


def _coerce(kind, raw: str):
    if kind is bool:
        return raw.lower() in ("1", "true", "yes")
    return kind(raw)


def config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a config from flat string values; ``dsfe_<field>`` keys set DsfeConfig fields."""
    base = base or TrainConfig()
    top = {f.name: f for f in fields(TrainConfig) if f.name != "dsfe"}
    sub = {f.name: f for f in fields(DsfeConfig)}
    upd, dupd = {}, {}
    for k, v in values.items():
        if k in top:
            kind = type(getattr(base, k))
            upd[k] = v if not isinstance(v, str) else _coerce(kind, v)
        elif k.startswith("dsfe_") and k[5:] in sub:
            dupd[k[5:]] = int(v)
        else:
            raise ConfigurationError(f"unknown config key {k!r}")
    if dupd:
        upd["dsfe"] = replace(base.dsfe, **dupd)
    return replace(base, **upd)


def read_config_file(path) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_items(cfg: TrainConfig) -> list:
    items = [(f.name, getattr(cfg, f.name)) for f in fields(cfg) if f.name != "dsfe"]
    items += [(f"dsfe_{f.name}", getattr(cfg.dsfe, f.name)) for f in fields(cfg.dsfe)]
    return items


# ---------------------------------------------------------------------------
# Model


class Model:
    """DSFE feature extractor, graph head and classifier with a fixed parameter order."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        F = cfg.dsfe.embed_dim
        self.dsfe: DsfeParams = init_dsfe(cfg.dsfe, rng)
        if cfg.head == "gcn":
            self.graph_params = [GcnLayerParams.init(F, F, rng) for _ in range(cfg.timesteps)]
        else:
            self.graph_params = GgcnParams.init(F, rng)
        self.head = HeadParams.init(F, cfg.n_classes, rng)
        self._graphs = {}

    def parameters(self) -> dict:
        out = {f"dsfe.{k}": v for k, v in self.dsfe.tensors().items()}
        if self.cfg.head == "gcn":
            for i, layer in enumerate(self.graph_params):
                out.update({f"gcn.{i}.{k}": v for k, v in layer.tensors().items()})
        else:
            out.update({f"{self.cfg.head}.{k}": v for k, v in self.graph_params.tensors().items()})
        out.update({f"head.{k}": v for k, v in self.head.tensors().items()})
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def graph(self, h: int, w: int):
        key = (h, w)
        if key not in self._graphs:
            self._graphs[key] = build_grid(h, w, self.cfg.connectivity)
        return self._graphs[key]

    def logits(self, image: Tensor) -> Tensor:
        """Per-node class logits for a C x H x W image."""
        _, H, W = image.shape
        g = self.graph(H, W)
        h0 = dsfe_forward(self.cfg.dsfe, self.dsfe, image)
        if self.cfg.head == "ggcn":
            h = ggcn_forward(g, self.graph_params, h0, self.cfg.timesteps)
        elif self.cfg.head == "ggnn":
            h = ggnn_forward(g, self.graph_params, h0, self.cfg.timesteps)
        else:
            h = gcn_stack_forward(g, self.graph_params, h0)
        return h @ self.head.W_out

    def loss(self, image: np.ndarray, labels: np.ndarray) -> Tensor:
        return ad.log_softmax_nll(self.logits(Tensor(image, _check=False)), labels.reshape(-1))

    def predict_labels(self, image: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits = self.logits(Tensor(image, _check=False))
        return np.argmax(logits.data, axis=1).reshape(image.shape[1:])

    # checkpoint ----------------------------------------------------------

    def header(self) -> dict:
        c = self.cfg
        return {
            "head": c.head,
            "F": str(c.dsfe.embed_dim),
            "C": str(c.n_classes),
            "n": str(c.timesteps),
            "connectivity": str(c.connectivity),
            "seed": str(c.seed),
            "td": str(c.td),
            "dsfe_in_channels": str(c.dsfe.in_channels),
            "dsfe_growth": str(c.dsfe.growth),
            "dsfe_layers_per_block": str(c.dsfe.layers_per_block),
            "dsfe_depth": str(c.dsfe.depth),
        }

    def save(self, path) -> None:
        checkpoint.save(path, {k: v.data for k, v in self.parameters().items()}, self.header())

    @classmethod
    def load(cls, path) -> "Model":
        tensors, hdr = checkpoint.load(path)
        try:
            dsfe = DsfeConfig(int(hdr["dsfe_in_channels"]), int(hdr["dsfe_growth"]),
                              int(hdr["dsfe_layers_per_block"]), int(hdr["dsfe_depth"]), int(hdr["F"]))
            cfg = TrainConfig(head=hdr["head"], timesteps=int(hdr["n"]), connectivity=int(hdr["connectivity"]),
                              seed=int(hdr["seed"]), td=int(hdr["td"]), dsfe=dsfe)
        except (KeyError, ValueError) as e:
            raise DataError(f"checkpoint header incomplete: {e}") from e
        if cfg.n_classes != int(hdr["C"]):
            raise DataError("checkpoint class count disagrees with its threshold")
        model = cls(cfg)
        params = model.parameters()
        if set(params) != set(tensors):
            raise DataError("checkpoint tensors do not match the declared architecture")
        for k, p in params.items():
            if p.shape != tensors[k].shape:
                raise DataError(f"tensor {k}: expected {p.shape}, found {tensors[k].shape}")
            p.data = tensors[k].copy()
        return model


def sgd_step(params, lr: float) -> None:
    """Plain gradient descent ``p <- p - lr * grad`` (no momentum)."""
    items = params.items() if isinstance(params, dict) else enumerate(params)
    for name, p in items:
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient; run backward first")
    for _, p in (params.items() if isinstance(params, dict) else enumerate(params)):
        p.data = p.data - lr * p.grad


class PlateauSchedule:
    """Divide the rate by ten once validation loss stops improving.

    An epoch counts as improving when it beats the best loss so far by more
    than ``min_delta``. After ``patience`` non-improving epochs the rate is
    multiplied by ``decay``; training stops once the rate reaches ``floor``.
    """

    def __init__(self, lr: float, decay: float = 0.1, floor: float = 1e-8, patience: int = 5,
                 min_delta: float = 1e-4):
        self.lr = lr
        self.decay = decay
        self.floor = floor
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    @property
    def stopped(self) -> bool:
        # relative slack absorbs the rounding of repeated multiplication by 0.1
        return self.lr < self.floor * (1.0 + 1e-9)

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.decay
                self.wait = 0
        return self.lr


# ---------------------------------------------------------------------------
# Data


@dataclass
class Sample:
    image: np.ndarray  # C x H x W in [0, 1]
    labels: np.ndarray  # H x W class indices
    name: str = ""


def load_samples(manifest) -> list:
    """Read an ``image<TAB>label`` manifest; labels are PGM class maps."""
    pairs = read_manifest(manifest)
    samples = []
    for img_path, lab_path in pairs:
        img = read_png_rgb(img_path).transpose(2, 0, 1).copy()
        lab = read_pgm(lab_path)
        if lab.shape != img.shape[1:]:
            raise DataError(f"{lab_path}: label size {lab.shape} differs from image {img.shape[1:]}")
        samples.append(Sample(img, lab, Path(img_path).name))
    return samples


def _check_samples(samples, cfg: TrainConfig):
    if not samples:
        raise DataError("no samples to train on")
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise DataError(f"sample {s.name}: shape {s.image.shape} differs from {shape}")
        if not np.all(np.isfinite(s.image)):
            raise DataError(f"sample {s.name}: image contains non-finite values")
        if s.labels.min() < 0 or s.labels.max() >= cfg.n_classes:
            raise DataError(f"sample {s.name}: labels outside 0..{cfg.n_classes - 1}")
    cfg.dsfe.check_dims(shape[1], shape[2])


def split_samples(samples, val_fraction: float = 0.2):
    """Positional split: the trailing fraction becomes validation."""
    n_val = int(len(samples) * val_fraction)
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


@dataclass
class TrainResult:
    model: Model
    history: list  # (epoch, train_loss, val_loss, lr)


def train(cfg: TrainConfig, samples) -> TrainResult:
    """SGD on the mean per-pixel NLL with a plateau learning-rate schedule.

    When the split leaves no validation samples the epoch's training loss
    drives the schedule instead.
    """
    if isinstance(samples, (str, Path)):
        samples = load_samples(samples)
    _check_samples(samples, cfg)
    train_set, val_set = split_samples(samples, cfg.val_fraction)
    model = Model(cfg)
    params = model.parameters()
    shuffle = np.random.default_rng([cfg.seed, 1])
    sched = PlateauSchedule(cfg.lr, cfg.lr_decay, cfg.lr_floor, cfg.patience, cfg.min_delta)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr
        order = shuffle.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            model.zero_grad()
            for i in idx:
                s = train_set[i]
                loss = model.loss(s.image, s.labels)
                if not np.isfinite(loss.item()):
                    raise ConfigurationError(f"training diverged at epoch {epoch} (non-finite loss); lower lr")
                total += loss.item()
                ad.backward(loss * (1.0 / len(idx)))
            sgd_step(params, lr)
        train_loss = total / len(train_set)
        if val_set:
            with ad.no_grad():
                val_loss = float(np.mean([model.loss(s.image, s.labels).item() for s in val_set]))
        else:
            val_loss = train_loss
        history.append((epoch, train_loss, val_loss, lr))
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        sched.step(val_loss)
        if sched.stopped:
            log.info("learning rate reached floor %.3g; stopping", cfg.lr_floor)
            break
    model.zero_grad()
    return TrainResult(model, history)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for epoch, tr, va, lr in history:
        w.writerow([epoch, repr(float(tr)), repr(float(va)), repr(float(lr))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def oa(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 1.0

    @property
    def f1(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 1.0

    @property
    def iou(self) -> float:
        d = self.tp + self.fp + self.fn
        return self.tp / d if d else 1.0

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """Binary confusion counts with building (1) as the positive class."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"prediction {p.shape} and truth {t.shape} differ in size")
    return MetricsReport(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))


def evaluate(model: Model, samples):
    """Pooled binary metrics plus a per-sample list of ``(name, report)``."""
    if isinstance(samples, (str, Path)):
        samples = load_samples(samples)
    if not samples:
        raise DataError("no samples to evaluate")
    td = model.cfg.td
    total = MetricsReport(0, 0, 0, 0)
    per_sample = []
    for s in samples:
        if s.image.shape[0] != model.cfg.dsfe.in_channels:
            raise DataError(f"sample {s.name} has {s.image.shape[0]} bands, model expects {model.cfg.dsfe.in_channels}")
        pred = binary_from_tsdm(model.predict_labels(s.image), td)
        rep = confusion(pred, binary_from_tsdm(s.labels, td))
        per_sample.append((s.name, rep))
        total = total + rep
    return total, per_sample


def metrics_csv(total: MetricsReport, per_sample) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "tp", "fp", "fn", "tn", "oa", "f1", "iou"])
    for name, r in list(per_sample) + [("ALL", total)]:
        w.writerow([name, r.tp, r.fp, r.fn, r.tn, f"{r.oa:.6f}", f"{r.f1:.6f}", f"{r.iou:.6f}"])
    return buf.getvalue()


def format_table(rows) -> str:
    """Plain-text OA/F1/IoU table for ``(label, report)`` rows."""
    width = max([len("Method")] + [len(k) for k, _ in rows])
    lines = [f"{'Method':<{width}}  {'OA':>8}  {'F1':>8}  {'IoU':>8}"]
    for label, r in rows:
        lines.append(f"{label:<{width}}  {r.oa:8.4f}  {r.f1:8.4f}  {r.iou:8.4f}")
    return "\n".join(lines)


def infer(model: Model, image: np.ndarray):
    """Label map, binary mask and a red 50% overlay for an H x W x 3 image in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != model.cfg.dsfe.in_channels:
        raise DimensionError(f"expected H x W x {model.cfg.dsfe.in_channels} image, got {img.shape}")
    labels = model.predict_labels(img.transpose(2, 0, 1).copy())
    mask = binary_from_tsdm(labels, model.cfg.td)
    rgb = img if img.shape[2] == 3 else np.repeat(img[..., :1], 3, axis=2)
    overlay = rgb.copy()
    red = np.array([1.0, 0.0, 0.0])
    overlay[mask == 1] = 0.5 * rgb[mask == 1] + 0.5 * red
    return labels, mask, overlay
