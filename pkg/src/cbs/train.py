"""SGD training loop with the sigma curriculum, ablations, logging and checkpoints."""

import csv
import dataclasses
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autodiff import Tape, zero_grads
from .data import BatchPlan, Normalizer, batches
from .exceptions import ContractError, NumericsError
from .models import build_model, init_params, load_checkpoint, save_checkpoint
from .nn_ops import log_softmax, softmax_cross_entropy
from .smoothing import SigmaSchedule, SmoothingConfig
from .tensor import Rng

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "sigma", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    smoothing: SmoothingConfig = field(default_factory=lambda: SmoothingConfig(placement="none"))
    eval_every: int = 1
    checkpoint_every: int = 0
    lr_milestones: tuple = (0.5, 0.75)
    lr_gamma: float = 0.1
    init: str = "kaiming"
    augment: bool = False
    timing: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.lr_milestones = tuple(self.lr_milestones)

    def lr_at(self, epoch):
        drops = sum(epoch >= int(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_gamma**drops

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["smoothing"] = self.smoothing.to_dict()
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["smoothing"] = SmoothingConfig.from_dict(d["smoothing"])
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    sigma: float
    seconds: float

    def csv_row(self):
        return [str(self.epoch), f"{self.train_loss:.8f}", f"{self.train_acc:.8f}",
                f"{self.test_acc:.8f}", f"{self.sigma:.8f}", f"{self.seconds:.3f}"]


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """In-place momentum SGD: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    Every gradient is checked before anything is touched, so a
    :class:`NumericsError` leaves parameters and velocities unchanged.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ContractError("params, grads and velocity must have equal length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ContractError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self, lr):
        sgd_step([p.value for p in self.params], [p.grad for p in self.params],
                 [self.velocity[p.name] for p in self.params], lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        zero_grads(self.params)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------


def evaluate(model, ds, sigma=None, batch_size=256, images=None):
    """Mean cross-entropy and top-1 accuracy with BatchNorm in eval mode.

    ``sigma`` temporarily overrides the model's smoothing sigma. ``images``
    supplies already-preprocessed inputs; otherwise ``model.preprocess`` runs.
    """
    was_training, old_sigma = model.training, model.sigma
    model.eval()
    if sigma is not None:
        model.set_sigma(sigma)
    try:
        x = model.preprocess(ds.images) if images is None else images
        logits = model.predict_logits(x, batch_size)
    finally:
        model.training = was_training
        if sigma is not None and old_sigma is not None:
            model.set_sigma(old_sigma)
    return logits_metrics(logits, ds.labels)


def logits_metrics(logits, labels):
    logp = log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return loss, acc


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def _baseline_twin(model):
    spec = dict(model.spec)
    spec["smoothing"] = SmoothingConfig(placement="none").to_dict()
    return build_model(spec)


def check_parameter_parity(model):
    """Assert the smoothed build has exactly the baseline's trainable parameters."""
    base = _baseline_twin(model)
    if base.n_params() != model.n_params():
        raise ContractError(f"smoothing changed parameter count {base.n_params()} -> {model.n_params()}")
    return model.n_params()


class RunWriter:
    """Metrics CSV and JSON manifest for one run directory."""

    def __init__(self, out_dir, cfg, extra=None):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.csv_path = os.path.join(out_dir, "metrics.csv")
        manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__}
        manifest.update(extra or {})
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def write(self, records):
        with open(self.csv_path, "w", newline="") as fh:
            fh.write(metrics_csv(records))


def train_run(model, ds_train, ds_test, cfg, out_dir=None, resume=None, initialize=True,
              manifest_extra=None, stop_after=None):
    """Train ``model`` with SGD while annealing sigma; return per-epoch metrics.

    Each epoch sets sigma from the schedule (the kernel is rebuilt only when
    sigma changes), runs forward/backward/step over the epoch's permutation,
    then logs a :class:`MetricsRecord`. With ``out_dir`` the CSV is rewritten
    after every epoch (partial logs survive a :class:`NumericsError`) and a
    final checkpoint lands in ``out_dir/checkpoint``.

    ``resume`` is a checkpoint directory written by a previous call with the
    same config; training continues from its epoch bit-identically.
    ``stop_after`` ends the run early after that many total epochs, which is
    how interrupted runs are simulated.
    """
    smoothing = cfg.smoothing
    schedule = smoothing.schedule
    check_parameter_parity(model)
    optimizer = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    records = []
    start_epoch = 0
    rng = Rng(cfg.seed)
    if resume is not None:
        saved, meta, extra = load_checkpoint(resume)
        model.load_state_dict(saved.state_dict())
        model.normalizer = saved.normalizer
        for name, v in extra.items():
            optimizer.velocity[name.split("velocity/", 1)[1]] = v.copy()
        records = [MetricsRecord(**r) for r in meta["records"]]
        start_epoch = meta["epoch"]
        rng.set_state(meta["rng_state"])
    else:
        if initialize:
            init_params(model, Rng(cfg.seed), cfg.init)
        model.normalizer = Normalizer.fit(ds_train.images)
    x_train = model.preprocess(ds_train.images)
    x_test = model.preprocess(ds_test.images) if ds_test is not None else None
    plan = BatchPlan(cfg.seed, min(cfg.batch_size, len(ds_train)))
    n_batches = plan.n_batches(len(ds_train))
    writer = RunWriter(out_dir, cfg, manifest_extra) if out_dir else None
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    def sigma_for(epoch, b=0):
        if not smoothing.enabled:
            return 0.0
        return smoothing.sigma_at(schedule.step_index(epoch, b, n_batches))

    def checkpoint(epoch):
        if not out_dir:
            return None
        path = os.path.join(out_dir, "checkpoint")
        save_checkpoint(
            path, model,
            {"epoch": epoch, "config": cfg.to_dict(), "rng_state": rng.get_state(),
             "records": [dataclasses.asdict(r) for r in records]},
            {f"velocity/{k}": v for k, v in optimizer.velocity.items()},
        )
        return path

    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        epoch_sigma = sigma_for(epoch)
        model.set_sigma(epoch_sigma)
        model.train()
        lr = cfg.lr_at(epoch)
        loss_sum, correct, seen = 0.0, 0, 0
        try:
            for b, (xb, yb) in enumerate(batches(ds_train, plan, epoch, x_train, cfg.augment)):
                if schedule.granularity == "iteration" and smoothing.enabled:
                    model.set_sigma(sigma_for(epoch, b))
                optimizer.zero_grad()
                with Tape() as tape:
                    logits = model.forward(xb)
                    loss = softmax_cross_entropy(logits, yb)
                tape.backward(loss)
                optimizer.step(lr)
                loss_sum += float(loss.value) * len(yb)
                correct += int((logits.value.argmax(axis=1) == yb).sum())
                seen += len(yb)
        except NumericsError:
            logger.error("numerics failure in epoch %d; partial logs kept", epoch)
            if writer:
                writer.write(records)
            raise
        test_acc = float("nan")
        if x_test is not None and ((epoch + 1) % max(cfg.eval_every, 1) == 0 or epoch + 1 == cfg.epochs):
            test_acc = evaluate(model, ds_test, images=x_test)[1]
        seconds = time.perf_counter() - t0 if cfg.timing else 0.0
        rec = MetricsRecord(epoch, loss_sum / seen, correct / seen, test_acc, epoch_sigma, seconds)
        records.append(rec)
        logger.info("epoch %d loss %.4f acc %.4f test %.4f sigma %.4f", epoch, rec.train_loss,
                    rec.train_acc, rec.test_acc, rec.sigma)
        if writer:
            writer.write(records)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(epoch + 1)
    checkpoint(last_epoch)
    return records


# ----------------------------------------------------------------------
# ablations
# ----------------------------------------------------------------------

ABLATION_ALIASES = {"full": "full_cbs", "constant": "constant_sigma", "none": "baseline"}


def mode_config(mode, schedule=None, apply_at_eval=True):
    """Smoothing config for an ablation mode name.

    Modes: ``baseline``, ``image_only``, ``image_and_features``,
    ``constant_sigma`` (sigma held at ``sigma0``), ``single:<i>`` (blur after
    conv ``i`` only, 1-based) and ``full_cbs``.
    """
    schedule = schedule or SigmaSchedule()
    mode = ABLATION_ALIASES.get(mode, mode)
    common = {"schedule": schedule, "apply_at_eval": apply_at_eval}
    if mode == "baseline":
        return SmoothingConfig(placement="none", **common)
    if mode == "full_cbs":
        return SmoothingConfig(placement="after_every_conv", **common)
    if mode == "image_only":
        return SmoothingConfig(placement="image_only", **common)
    if mode == "image_and_features":
        return SmoothingConfig(placement="image_and_features", **common)
    if mode == "constant_sigma":
        return SmoothingConfig(placement="after_every_conv", constant_sigma=schedule.sigma0, **common)
    if mode.startswith("single:") or mode.startswith("single_layer"):
        digits = mode.split(":", 1)[1] if ":" in mode else mode[len("single_layer"):].strip("()_")
        try:
            layer = int(digits)
        except ValueError:
            raise ValueError(f"bad single-layer mode {mode!r}") from None
        return SmoothingConfig(placement="listed_layers", layers=(layer,), **common)
    raise ValueError(f"unknown ablation mode {mode!r}")


@dataclass
class AblationRow:
    mode: str
    accuracies: list

    @property
    def mean(self):
        return float(np.mean(self.accuracies))

    @property
    def std(self):
        return float(np.std(self.accuracies))


def ablation_run(modes, shared_cfg, model_factory, ds_train, ds_test, seeds=(0,), out_dir=None):
    """Train every mode under every seed with otherwise identical settings.

    ``model_factory(smoothing_config)`` builds a fresh model. Returns one
    :class:`AblationRow` per mode holding final test accuracies per seed.
    """
    rows = []
    for mode in modes:
        smoothing = mode_config(mode, shared_cfg.smoothing.schedule, shared_cfg.smoothing.apply_at_eval)
        accs = []
        for seed in seeds:
            cfg = dataclasses.replace(shared_cfg, seed=seed, smoothing=smoothing)
            model = model_factory(smoothing)
            run_dir = os.path.join(out_dir, f"{mode.replace(':', '_')}_seed{seed}") if out_dir else None
            recs = train_run(model, ds_train, ds_test, cfg, out_dir=run_dir)
            accs.append(recs[-1].test_acc)
        rows.append(AblationRow(mode, accs))
    if out_dir:
        write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "mean_test_acc", "std_test_acc", "n_seeds", "per_seed"])
        for r in rows:
            w.writerow([r.mode, f"{r.mean:.6f}", f"{r.std:.6f}", len(r.accuracies),
                        " ".join(f"{a:.6f}" for a in r.accuracies)])


def first_batch_loss(model, ds, cfg):
    """Loss of the first minibatch of epoch 0 after initialization (sanity anchor)."""
    init_params(model, Rng(cfg.seed), cfg.init)
    model.normalizer = Normalizer.fit(ds.images)
    model.set_sigma(cfg.smoothing.sigma_at(0) if cfg.smoothing.enabled else 0.0)
    model.train()
    plan = BatchPlan(cfg.seed, min(cfg.batch_size, len(ds)))
    xb, yb = next(batches(ds, plan, 0, model.preprocess(ds.images)))
    return float(model.loss(xb, yb).value)

