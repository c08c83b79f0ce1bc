"""Training, evaluation and the Table-1-style ablation sweep.

Run configuration files are JSON (``schema_version`` 1)::

    {
      "schema_version": 1,
      "seed": 0,
      "network": { ...NetworkConfig fields... },
      "data": {"train": "data/train", "val": "data/val"},      # val optional
      "train": {
        "iterations": 2000,
        "lr_stages": [{"iterations": 1200, "lr": 1e-3},
                      {"iterations": 500, "lr": 1e-4},
                      {"iterations": 300, "lr": 1e-5}],
        "batch_size": 8, "momentum": 0.9, "weight_decay": 0.0,
        "grad_clip": null, "flip": false,
        "log_interval": 10, "checkpoint_interval": 0
      },
      "loss_weights": {"det": 1.0, "seg": 1.0, "agn": 1.0},
      "output_dir": "runs/default"
    }

Relative paths resolve against the directory holding the config file.
``lr_stages`` may also be given as ``[[fraction, lr], ...]`` with fractions
summing to 1.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from triplenet import anchors as A
from triplenet import evalkit, losses
from triplenet import tensor as T
from triplenet.netgraph import ConfigError, Mode, Network, NetworkConfig, build_network, save_checkpoint
from triplenet.synthdata import load_dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class NumericalAbort(RuntimeError):
    def __init__(self, term: str, iteration: int, value: float):
        super().__init__(f"non-finite loss term {term!r} ({value}) at iteration {iteration}")
        self.term = term
        self.iteration = iteration
        self.value = value


class AblationError(RuntimeError):
    def __init__(self, row: str, cause: Exception):
        super().__init__(f"ablation row {row!r} failed: {cause}")
        self.row = row
        self.cause = cause


@dataclass
class LRStage:
    iterations: int
    lr: float


def default_stages(iterations: int, lrs=(1e-3, 1e-4, 1e-5), fractions=(0.6, 0.25, 0.15)) -> list:
    counts = [int(round(iterations * f)) for f in fractions]
    counts[-1] = iterations - sum(counts[:-1])
    return [LRStage(n, lr) for n, lr in zip(counts, lrs)]


@dataclass
class TrainSettings:
    iterations: int = 2000
    lr_stages: list = field(default_factory=lambda: default_stages(2000))
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    flip: bool = False
    log_interval: int = 10
    checkpoint_interval: int = 0

    def lr_at(self, it: int) -> float:
        """Learning rate for 1-based iteration ``it``."""
        end = 0
        for st in self.lr_stages:
            end += st.iterations
            if it <= end:
                return st.lr
        return self.lr_stages[-1].lr

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        total = sum(s.iterations for s in self.lr_stages)
        if total != self.iterations or any(s.iterations < 0 for s in self.lr_stages):
            raise ConfigError(f"lr_stages cover {total} iterations but iterations = {self.iterations}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train_dir: Optional[str] = None
    val_dir: Optional[str] = None
    train: TrainSettings = field(default_factory=TrainSettings)
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.train.validate()
        if self.train_dir is None:
            raise ConfigError("data.train is required")
        return self

    def to_dict(self) -> dict:
        tr = asdict(self.train)
        tr["lr_stages"] = [{"iterations": s.iterations, "lr": s.lr} for s in self.train.lr_stages]
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "network": self.network.to_dict(),
            "data": {"train": self.train_dir, "val": self.val_dir},
            "train": tr,
            "loss_weights": asdict(self.loss_weights),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
        known = {"schema_version", "seed", "network", "data", "train", "loss_weights", "output_dir"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or base_dir is None else (base_dir / p))

        tr = dict(d.get("train", {}))
        iters = int(tr.get("iterations", 2000))
        stages = tr.pop("lr_stages", None)
        if stages is None:
            lr_stages = default_stages(iters)
        elif stages and isinstance(stages[0], (list, tuple)):
            fr = [float(f) for f, _ in stages]
            if abs(sum(fr) - 1.0) > 1e-9:
                raise ConfigError(f"lr_stages fractions must sum to 1, got {sum(fr)}")
            lr_stages = default_stages(iters, [float(v) for _, v in stages], fr)
        else:
            lr_stages = [LRStage(int(s["iterations"]), float(s["lr"])) for s in stages]
        try:
            settings = TrainSettings(lr_stages=lr_stages, **tr)
            net = NetworkConfig.from_dict(d.get("network", {}))
            weights = losses.LossWeights(**d.get("loss_weights", {}))
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        data = d.get("data", {})
        return cls(net, resolve(data.get("train")), resolve(data.get("val")), settings, weights,
                   int(d.get("seed", 0)), resolve(d.get("output_dir", "runs/default")))

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, p.parent)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    images: np.ndarray  # (S, 3, H, W)
    masks: np.ndarray  # (S, H, W)
    gts: list  # per sample (boxes (G,4), classes (G,))
    ids: list
    matches: list
    flipped_matches: list


def _flip_boxes(boxes: np.ndarray) -> np.ndarray:
    b = boxes.copy()
    b[:, 0] = 1.0 - b[:, 0]
    return b


def prepare(samples: list, net_cfg: NetworkConfig, flip: bool = False, class_names=None) -> PreparedData:
    if not samples:
        raise ConfigError("dataset is empty")
    h, w = net_cfg.input_size
    if samples[0].class_mask.shape != (h, w):
        raise ConfigError(f"dataset image size {samples[0].class_mask.shape} differs from network input {(h, w)}")
    if class_names is not None and len(class_names) != net_cfg.num_classes:
        raise ConfigError(f"dataset has {len(class_names)} classes, network expects {net_cfg.num_classes}")
    anchor_boxes = A.generate_anchors(net_cfg).boxes
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.class_mask for s in samples])
    gts = [(s.box_array(), s.class_array()) for s in samples]
    matches = [A.match_anchors(anchor_boxes, b, c) for b, c in gts] if net_cfg.detection else [None] * len(gts)
    fm = []
    if flip and net_cfg.detection:
        fm = [A.match_anchors(anchor_boxes, _flip_boxes(b), c) for b, c in gts]
    return PreparedData(images, masks, gts, [s.sample_id for s in samples], matches, fm)


def batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    """Endless fixed-order mini-batches drawn from seeded epoch permutations."""
    buf: list = []
    while True:
        while len(buf) < batch_size:
            buf.extend(rng.permutation(n).tolist())
        yield buf[:batch_size]
        buf = buf[batch_size:]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"records": self.records, "final": self.final}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def train_step(net: Network, data: PreparedData, idx: list, weights: losses.LossWeights,
               flip_mask: Optional[np.ndarray] = None) -> tuple:
    """Forward + backward on one batch; returns ``(total_tensor, breakdown)``."""
    imgs = data.images[idx]
    masks = data.masks[idx]
    matches = [data.matches[i] for i in idx]
    if flip_mask is not None and flip_mask.any():
        imgs = imgs.copy()
        masks = masks.copy()
        imgs[flip_mask] = imgs[flip_mask][..., ::-1]
        masks[flip_mask] = masks[flip_mask][..., ::-1]
        matches = [data.flipped_matches[i] if f else m for i, f, m in zip(idx, flip_mask, matches)]
    # divergence is reported through NumericalAbort, so numpy's overflow warnings are noise here
    with np.errstate(over="ignore", invalid="ignore"):
        with T.Tape() as tape:
            out = net.forward(T.tensor(imgs), Mode.TRAIN)
            total, bd = losses.compute_losses(net.cfg, out, matches, masks, weights)
        for name, v in bd.terms().items():
            if not math.isfinite(v):
                raise NumericalAbort(name, -1, v)
        T.backward(total, tape)
    return total, bd


def _clip_grads(params: list, max_norm: float) -> None:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm


def train(cfg: RunConfig, data: Optional[PreparedData] = None, out_dir=None, callback=None) -> tuple:
    """Train ``cfg``; returns ``(network, MetricsLog)``.

    Writes ``checkpoint.tnck`` (and ``checkpoint_<it>.tnck`` at the configured
    interval) plus ``metrics.json`` under ``out_dir`` when it is given.
    """
    cfg.network.validate()
    cfg.train.validate()
    st = cfg.train
    if data is None:
        if cfg.train_dir is None:
            raise ConfigError("data.train is required")
        samples, names = load_dataset(cfg.train_dir)
        data = prepare(samples, cfg.network, st.flip, names)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    net = build_network(cfg.network, cfg.seed)
    opt = T.SGD(net.parameters(), st.momentum, st.weight_decay)
    mlog = MetricsLog()
    batches = batch_stream(len(data.images), st.batch_size, rng)
    for it in range(1, st.iterations + 1):
        idx = next(batches)
        flip_mask = rng.random(len(idx)) < 0.5 if st.flip else None
        lr = st.lr_at(it)
        try:
            _, bd = train_step(net, data, idx, cfg.loss_weights, flip_mask)
        except NumericalAbort as exc:
            # interval checkpoints already on disk are left untouched
            if out is not None:
                mlog.final = {"aborted": {"iteration": it, "term": exc.term}}
                mlog.save(out / "metrics.json")
            raise NumericalAbort(exc.term, it, exc.value) from None
        if st.grad_clip:
            _clip_grads(opt.params, st.grad_clip)
        opt.step(lr)
        if it % st.log_interval == 0 or it == st.iterations or it == 1:
            rec = {"iteration": it, "lr": lr, **bd.terms()}
            mlog.records.append(rec)
            log.info("it %d lr %.2e total %.4f", it, lr, bd.total)
        if callback is not None:
            callback(it, bd)
        if out is not None and st.checkpoint_interval and it % st.checkpoint_interval == 0:
            save_checkpoint(net, out / f"checkpoint_{it:06d}.tnck")
    if out is not None:
        save_checkpoint(net, out / "checkpoint.tnck")
        mlog.save(out / "metrics.json")
    return net, mlog


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(net: Network, samples: list, class_names: Optional[list] = None, batch_size: int = 8) -> dict:
    """mAP@0.5 and mIoU report over ``samples`` (None where the network has no such output)."""
    cfg = net.cfg
    if class_names is not None and len(class_names) != cfg.num_classes:
        raise ConfigError(f"checkpoint has {cfg.num_classes} classes but dataset has {len(class_names)}")
    names = class_names or [str(k) for k in range(1, cfg.num_classes + 1)]
    anchor_boxes = A.generate_anchors(cfg).boxes
    preds, gts = {}, {}
    cm = evalkit.ConfusionMatrix(cfg.num_classes + 1)
    has_seg = False
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        res = evalkit.predict_batch(net, np.stack([s.image for s in chunk]), anchor_boxes)
        for s, (dets, mask) in zip(chunk, res):
            preds[s.sample_id] = dets
            gts[s.sample_id] = s.boxes
            if mask is not None:
                has_seg = True
                cm.update(mask, s.class_mask)
    report = {"num_images": len(samples), "class_names": list(names),
              "mAP": None, "per_class_ap": None, "mIoU": None, "per_class_iou": None}
    if cfg.detection:
        ap = evalkit.evaluate_detections(preds, gts, cfg.num_classes)
        report["mAP"] = ap.mAP
        report["per_class_ap"] = {names[c - 1]: v for c, v in sorted(ap.per_class_ap.items())}
    if has_seg:
        mi = cm.result()
        report["mIoU"] = mi.mIoU
        report["per_class_iou"] = mi.per_class_iou
    return report, preds


def format_summary(report: dict) -> str:
    def f(v):
        return "N/A" if v is None else f"{v:.4f}"
    return f"images={report['num_images']} mAP@0.5={f(report['mAP'])} mIoU={f(report['mIoU'])}"


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

# (row label, detection, seg_levels, mfs, ic, cas, asf)
ABLATION_ROWS = [
    ("(a) only detection", True, "none", False, False, False, False),
    ("(b) only segmentation with fine layer", False, "fine", False, False, False, False),
    ("(c) only segmentation with all layers", False, "all", False, False, False, False),
    ("(d) PairNet", True, "all", False, False, False, False),
    ("(e) add MFS", True, "all", True, False, False, False),
    ("(f) add MFS and IC", True, "all", True, True, False, False),
    ("(g) add MFS, IC and CAS", True, "all", True, True, True, False),
    ("(h) TripleNet", True, "all", True, True, True, True),
]
CSV_COLUMNS = ["row", "det", "seg_fine", "seg_all", "MFS", "IC", "CAS", "ASF", "mAP", "mIoU"]


def ablation_configs(base: NetworkConfig) -> list:
    rows = []
    for label, det, seg, mfs, ic, cas, asf in ABLATION_ROWS:
        rows.append((label, replace(base, detection=det, seg_levels=seg, mfs=mfs, ic=ic, cas=cas, asf=asf)))
    return rows


def _csv_row(label: str, ncfg: NetworkConfig, report: dict) -> dict:
    def mark(b):
        return "x" if b else ""

    def metric(v):
        return "N/A" if v is None else f"{100 * v:.1f}"

    return {"row": label, "det": mark(ncfg.detection),
            "seg_fine": mark(ncfg.seg_levels == "fine"), "seg_all": mark(ncfg.seg_levels == "all"),
            "MFS": mark(ncfg.mfs), "IC": mark(ncfg.ic), "CAS": mark(ncfg.cas), "ASF": mark(ncfg.asf),
            "mAP": metric(report["mAP"]), "mIoU": metric(report["mIoU"])}


def ablate(cfg: RunConfig, out_dir) -> list:
    """Train + evaluate every ablation row from the same seed; writes ``ablation.csv``."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, names = load_dataset(cfg.train_dir)
    if cfg.val_dir:
        val_samples, val_names = load_dataset(cfg.val_dir)
        if len(val_names) != len(names):
            raise ConfigError("train and val datasets disagree on class count")
    else:
        val_samples = train_samples
    rows = []
    csv_path = out / "ablation.csv"

    def flush():
        with open(csv_path, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            wr.writeheader()
            wr.writerows(rows)

    for i, (label, ncfg) in enumerate(ablation_configs(cfg.network)):
        row_dir = out / f"row_{chr(ord('a') + i)}"
        try:
            rcfg = replace(cfg, network=ncfg)
            data = prepare(train_samples, ncfg, cfg.train.flip, names)
            net, mlog = train(rcfg, data, row_dir)
            report, _ = evaluate(net, val_samples, names)
            mlog.final = {"mAP": report["mAP"], "mIoU": report["mIoU"]}
            mlog.save(row_dir / "metrics.json")
            write_report(report, row_dir / "report.json")
        except Exception as exc:
            flush()
            raise AblationError(label, exc) from exc
        rows.append(_csv_row(label, ncfg, report))
        log.info("%s: %s", label, format_summary(report))
        flush()
    return rows
