"""Maximum-likelihood training with Adam, a plateau schedule, early stopping
and a numerical-invertibility monitor."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .conditioning import conditional_loss, mean_nll
from .engine.params import seeded_rng
from .engine.tensor import NonFiniteError, Tape, no_grad

HISTORY_FIELDS = ("epoch", "train_nll", "val_nll", "lr", "roundtrip_residual")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    plateau_factor: float = 0.8
    plateau_patience: int = 5
    early_stop_patience: int = 10
    batch_size: int = 32
    epochs: int = 20
    dequant_variance: float = 0.0
    alpha: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    roundtrip_threshold: float = 1e-2
    roundtrip_samples: int = 8
    time_budget: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must lie in (0, 1)")
        if self.dequant_variance < 0:
            raise ValueError("dequantization variance must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("validation fraction must lie in [0, 1)")


def nll_loss(model, cond, x, y=None, feats=None):
    """Mean over the batch of -log p(x | y); ``cond`` may be None for density estimation."""
    if np.shape(x)[0] == 0:
        raise ValueError("empty batch")
    if cond is not None and feats is None:
        feats = cond.condition(y)
    return mean_nll(model, x, feats)


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update of every unfrozen parameter from ``store.grads``."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        if store.is_frozen(name):
            continue
        g = store.grads[name]
        m = beta1 * store.m[name] + (1.0 - beta1) * g
        v = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store.m[name] = m.astype(store.dtype)
        store.v[name] = v.astype(store.dtype)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        store.values[name] = (store.values[name] - step).astype(store.dtype)


def dequantize(x, variance, rng):
    """x + N(0, variance) noise; the identity (same object) when variance is 0."""
    if variance == 0:
        return x
    return x + rng.standard_normal(x.shape) * math.sqrt(variance)


@dataclass
class TrainData:
    """Images ``x`` (N, *input_shape) with optional measurements ``y`` and
    precomputed inversions ``xinv``."""

    x: np.ndarray
    y: np.ndarray | None = None
    xinv: np.ndarray | None = None

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return TrainData(self.x[idx], pick(self.y), pick(self.xinv))

    def split(self, val_fraction, seed):
        n = len(self)
        n_val = int(round(n * val_fraction))
        perm = seeded_rng(int(seed), "split").permutation(n)
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def prepare_data(cond, x, y=None):
    xinv = None
    if cond is not None:
        xinv = cond.invert(y)
    return TrainData(np.asarray(x), None if y is None else np.asarray(y), xinv)


@dataclass
class TrainResult:
    best_state: dict
    last_state: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    unstable: bool = False
    aborted: str | None = None
    schedule: dict = field(default_factory=dict)

    @property
    def final_nll(self):
        return self.history[-1]["val_nll"] if self.history else math.nan


def _features(cond, data, idx):
    if cond is None:
        return None
    return cond.features(data.xinv[idx])


def evaluate_nll(model, cond, data, batch_size=256):
    """Mean -log p over a dataset, without recording gradients."""
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = slice(start, start + batch_size)
            feats = _features(cond, data, idx)
            lp = model.log_prob(data.x[idx], feats)
            total -= float(np.sum(lp.data, dtype=np.float64))
            count += lp.shape[0]
    return total / max(count, 1)


def roundtrip_residual(model, cond, data, count):
    idx = slice(0, min(count, len(data)))
    if idx.stop == 0:
        return 0.0
    with no_grad():
        feats = _features(cond, data, idx)
        try:
            return model.roundtrip_error(data.x[idx], feats)
        except (NonFiniteError, FloatingPointError):
            return math.inf


def train(model, cond, data, config: TrainConfig, val=None, resume=None, log=None):
    """Fit ``model`` (and a trainable ``cond``) by minimizing the mean NLL.

    ``data`` is a :class:`TrainData`; without ``val`` a validation split of
    ``config.val_fraction`` is held out. ``resume`` is a previous
    ``TrainResult`` (its last state and schedule are restored).
    """
    store = model.store
    if val is None:
        if config.val_fraction > 0:
            data, val = data.split(config.val_fraction, config.seed)
        else:
            val = data
    if cond is not None and data.xinv is None:
        data = prepare_data(cond, data.x, data.y)
    if cond is not None and val.xinv is None:
        val = prepare_data(cond, val.x, val.y)

    sched = {"epoch": 0, "lr": config.lr, "bad_epochs": 0, "plateau_count": 0,
             "best_val": math.inf, "best_epoch": -1}
    history = []
    best_state = store.state()
    if resume is not None:
        store.load_state(resume.last_state)
        best_state = {k: v.copy() for k, v in resume.best_state.items()}
        sched.update(resume.schedule)
        history = list(resume.history)

    result = TrainResult(best_state=best_state, last_state=store.state(), history=history,
                         best_epoch=sched["best_epoch"], best_val=sched["best_val"],
                         schedule=dict(sched))
    start_time = time.monotonic()
    n = len(data)
    while sched["epoch"] < config.epochs:
        epoch = sched["epoch"]
        rng = seeded_rng(config.seed, "epoch", epoch)
        perm = rng.permutation(n)
        losses = []
        try:
            for start in range(0, n, config.batch_size):
                idx = np.sort(perm[start:start + config.batch_size])
                x = dequantize(data.x[idx], config.dequant_variance, rng)
                feats = _features(cond, data, idx)
                store.zero_grad()
                with Tape() as tape:
                    if cond is not None and config.alpha > 0:
                        loss = conditional_loss(model, cond, x, alpha=config.alpha, feats=feats)
                    else:
                        loss = mean_nll(model, x, feats)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError("training loss", epoch)
                tape.backward(loss)
                adam_step(store, sched["lr"], config.beta1, config.beta2, config.eps)
                losses.append(value)
        except (NonFiniteError, FloatingPointError) as err:
            result.aborted = f"non-finite values in epoch {epoch}: {err}"
            result.unstable = True
            store.load_state(result.best_state)
            break

        val_nll = evaluate_nll(model, cond, val)
        residual = roundtrip_residual(model, cond, val, config.roundtrip_samples)
        if not (residual <= config.roundtrip_threshold):
            result.unstable = True
        row = {"epoch": epoch, "train_nll": float(np.mean(losses)) if losses else math.nan,
               "val_nll": val_nll, "lr": sched["lr"], "roundtrip_residual": residual}
        history.append(row)
        if log is not None:
            log(row)

        if math.isfinite(val_nll) and val_nll < sched["best_val"]:
            sched["best_val"] = val_nll
            sched["best_epoch"] = epoch
            sched["bad_epochs"] = 0
            sched["plateau_count"] = 0
            result.best_state = store.state()
        else:
            sched["bad_epochs"] += 1
            sched["plateau_count"] += 1
            if sched["plateau_count"] >= config.plateau_patience:
                sched["lr"] *= config.plateau_factor
                sched["plateau_count"] = 0
        sched["epoch"] = epoch + 1
        result.last_state = store.state()
        if sched["bad_epochs"] >= config.early_stop_patience:
            break
        if config.time_budget is not None and time.monotonic() - start_time > config.time_budget:
            break

    result.history = history
    result.best_epoch = sched["best_epoch"]
    result.best_val = sched["best_val"]
    result.schedule = dict(sched)
    if result.aborted is None:
        result.last_state = store.state()
    return result


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([_fmt(row[k]) for k in HISTORY_FIELDS])


def read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def config_dict(config):
    return asdict(config)
