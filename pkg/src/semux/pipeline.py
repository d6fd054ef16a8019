"""Training, inference and the two-mode dynamic adaptation protocol."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .channel import (ChannelModel, ChannelRealization, Csi, estimate_csi, genie_csi, sample_realization)
from .data import Dataset
from .model import SemanticMux, freq_link, time_link
from .vibloss import LossConfig, McDraw, nll_term, vib_loss_mc

MASK64 = (1 << 64) - 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TaskBatch:
    inputs: list[np.ndarray]  # n_comp arrays [B, C, H, W]
    labels: list[np.ndarray]  # n_comp arrays [B]

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or not self.inputs:
            raise ValueError(f"TaskBatch: {len(self.inputs)} inputs vs {len(self.labels)} label sets")
        b = self.inputs[0].shape[0]
        if any(x.shape[0] != b for x in self.inputs) or any(y.shape != (b,) for y in self.labels):
            raise ValueError("TaskBatch: inconsistent batch sizes")

    @property
    def size(self) -> int:
        return self.inputs[0].shape[0]

    @property
    def n_comp(self) -> int:
        return len(self.inputs)


def random_batch(x: np.ndarray, y: np.ndarray, n_comp: int, size: int, rng: np.random.Generator) -> TaskBatch:
    idx = [rng.integers(0, len(y), size=size) for _ in range(n_comp)]
    return TaskBatch([x[i] for i in idx], [y[i] for i in idx])


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[dc.Tensor], grads: dict) -> None:
        if self.lr == 0:
            return
        for p in params:
            g = grads.get(p)
            if g is not None:
                p.data -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, params: list[dc.Tensor], grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p in params:
            g = grads.get(p)
            if g is None:
                continue
            key = id(p)
            m = self.m.setdefault(key, np.zeros_like(p.data))
            v = self.v.setdefault(key, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class AdaptConfig:
    steps_per_block: int = 100  # inference steps between channel redraws
    blocks: int = 5
    adapt_every: int = 1  # adapt after every n-th inference step; 0 disables
    lr: float = 3e-3
    optimizer: str = "adam"
    batch: int = 32
    pilots_per_channel: int = 64
    infer_batch: int = 100
    shared_seed: int = 0x5EED


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-3
    epochs: int = 20
    batch_size: int = 64
    steps_per_epoch: int | None = None
    snr_db: float = 20.0
    beta: float = 1e-4
    n_mc: int = 1
    seed: int = 0
    # "step": fresh realization per MC draw; "epoch": one per epoch; "fixed": one for the whole run
    channel_refresh: str = "step"
    eval_items: int = 1024
    eval_n_mc: int = 8
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.n_mc < 1:
            raise ValueError("TrainConfig: invalid hyperparameters")
        if self.channel_refresh not in ("step", "epoch", "fixed"):
            raise ValueError(f"unknown channel_refresh {self.channel_refresh!r}")


# ---------------------------------------------------------------------------
# evaluation / inference


def infer(inputs, model: SemanticMux, realization: ChannelRealization | None, csi: Csi | None,
          sigma2: float, rng: np.random.Generator | None = None, mode: str = "freq",
          stochastic: bool = False) -> np.ndarray:
    """Full transmitter -> channel -> receiver pass, returns ``[n_comp, B]`` predicted classes.

    The latent mean is transmitted unless ``stochastic``.  ``realization`` of
    ``None`` bypasses the channel.
    """
    if csi is None:
        raise ValueError("infer: CSI is required (estimate it from communication pilots)")
    if realization is None:
        link = None
    elif mode == "freq":
        link = freq_link(realization.cfr(model.ofdm), sigma2, model.ofdm, rng)
    elif mode == "time":
        link = time_link(realization, sigma2, model.ofdm, rng)
    else:
        raise ValueError(f"infer: unknown mode {mode!r}")
    return model.predict(inputs, csi, link, rng=rng, sample=stochastic)


def evaluation_set(ds: Dataset, n_comp: int, n_items: int, seed: int) -> TaskBatch:
    """Fixed evaluation set: channel ``j`` carries a seeded permutation of the first test items."""
    rng = np.random.default_rng(seed)
    n = min(n_items, len(ds.y_test))
    idx = [rng.permutation(n) for _ in range(n_comp)]
    return TaskBatch([ds.x_test[i] for i in idx], [ds.y_test[i] for i in idx])


def accuracy_per_task(model: SemanticMux, batch: TaskBatch, channel_model: ChannelModel, seed: int,
                      csi_mode: str = "genie", chunk: int = 256,
                      realization: ChannelRealization | None = None) -> np.ndarray:
    """Per-task accuracy with one fresh channel realization per chunk (or a fixed one).

    Channels, CSI estimation and link noise draw from separate streams, so
    runs that differ only in ``csi_mode`` see the same channels and noise.
    """
    channel_rng, csi_rng, link_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    sigma2 = channel_model.sigma2
    correct = np.zeros(batch.n_comp)
    for lo in range(0, batch.size, chunk):
        real = realization if realization is not None else sample_realization(channel_model, channel_rng)
        csi = csi_for(real, model, channel_model, csi_rng, csi_mode)
        xs = [x[lo:lo + chunk] for x in batch.inputs]
        pred = infer(xs, model, real, csi, sigma2, link_rng)
        correct += np.array([(pred[j] == batch.labels[j][lo:lo + chunk]).sum() for j in range(batch.n_comp)])
    return correct / batch.size


def csi_for(real: ChannelRealization, model: SemanticMux, channel_model: ChannelModel,
            rng: np.random.Generator, csi_mode: str) -> Csi:
    if csi_mode == "genie":
        return genie_csi(real, model.ofdm, channel_model.sigma2)
    if csi_mode == "estimated":
        return estimate_csi(channel_model, real, model.ofdm, rng)
    raise ValueError(f"unknown csi_mode {csi_mode!r}")


# ---------------------------------------------------------------------------
# training


def train(ds: Dataset, model: SemanticMux, channel_model: ChannelModel, cfg: TrainConfig,
          log=None, rng: np.random.Generator | None = None,
          realization: ChannelRealization | None = None) -> list[dict]:
    """Gradient descent on the Monte Carlo VIB loss; returns one metric row per epoch.

    Rows hold ``epoch, loss, kl_term, nll_term, acc_task_<j>, wallclock_s``,
    where the accuracies are test accuracies under fresh channel draws.  The
    random stream is seeded from ``cfg.seed`` unless ``rng`` is given.  With
    ``channel_refresh == "fixed"`` a given ``realization`` is used for the
    whole run instead of a drawn one.
    """
    channel_model = replace(channel_model, snr_db=cfg.snr_db)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = model.params
    params.set_mode("train")
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    loss_cfg = LossConfig(beta=cfg.beta, n_mc=cfg.n_mc)
    n_comp = model.arch.n_comp
    steps = cfg.steps_per_epoch or max(1, len(ds.y_train) // cfg.batch_size)
    evalset = evaluation_set(ds, n_comp, cfg.eval_items, seed=cfg.seed + 1)
    rows = []
    t0 = time.perf_counter()
    fixed = [McDraw(realization)] * cfg.n_mc if realization is not None and cfg.channel_refresh == "fixed" else None
    for epoch in range(1, cfg.epochs + 1):
        if cfg.channel_refresh == "epoch" or (cfg.channel_refresh == "fixed" and fixed is None):
            fixed = [McDraw(sample_realization(channel_model, rng)) for _ in range(cfg.n_mc)]
        sums = np.zeros(3)
        for _ in range(steps):
            batch = random_batch(ds.x_train, ds.y_train, n_comp, cfg.batch_size, rng)
            trainable = params.trainable_params()
            with dc.Tape() as tape:
                parts = vib_loss_mc(batch, model, channel_model, loss_cfg, rng, draws=fixed)
            if not np.isfinite(parts.loss.item()):
                raise TrainingDiverged(f"loss became {parts.loss.item()} at epoch {epoch} "
                                       f"(nll={parts.nll}, kl={parts.kl}); lower the learning rate")
            grads = tape.backward(parts.loss, trainable)
            opt.step(trainable, grads)
            sums += (parts.loss.item(), parts.kl, parts.nll)
        acc = accuracy_per_task(model, evalset, channel_model, seed=cfg.seed + 2)
        row = {"epoch": epoch, "loss": sums[0] / steps, "kl_term": sums[1] / steps, "nll_term": sums[2] / steps}
        row.update({f"acc_task_{j}": float(a) for j, a in enumerate(acc)})
        row["wallclock_s"] = time.perf_counter() - t0
        rows.append(row)
        if log is not None:
            log(row)
    return rows


# ---------------------------------------------------------------------------
# adaptation


def _mix64(x: int) -> int:
    """SplitMix64 finalizer."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash64(global_time: int, shared_seed: int) -> int:
    """64-bit hash of the 128-bit word ``global_time || shared_seed``.

    ``mix(mix(time + G) ^ (seed + 2G))`` with the SplitMix64 finalizer ``mix``
    and golden-ratio increment ``G = 0x9E3779B97F4A7C15``.
    """
    g = 0x9E3779B97F4A7C15
    return _mix64(_mix64((global_time + g) & MASK64) ^ ((shared_seed + 2 * g) & MASK64))


def select_pilot_channel(global_time: int, shared_seed: int, n_comp: int) -> int:
    if n_comp < 1:
        raise ValueError("select_pilot_channel: n_comp must be >= 1")
    return hash64(global_time, shared_seed) % n_comp


@dataclass
class PilotStore:
    """Stored training items per computation channel, shared by transmitter and receiver."""

    inputs: list[np.ndarray]  # per channel [n, C, H, W]
    labels: list[np.ndarray]
    shared_seed: int
    cursor: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.inputs or any(len(y) == 0 for y in self.labels):
            raise ValueError("PilotStore: every channel needs at least one pilot")
        if not self.cursor:
            self.cursor = [0] * len(self.inputs)

    @classmethod
    def from_dataset(cls, ds: Dataset, n_comp: int, per_channel: int, shared_seed: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        idx = [rng.choice(len(ds.y_train), size=per_channel, replace=False) for _ in range(n_comp)]
        return cls([ds.x_train[i] for i in idx], [ds.y_train[i] for i in idx], shared_seed)

    def take(self, channel: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Next ``n`` pilots of ``channel``, cycling through the store."""
        size = len(self.labels[channel])
        idx = (self.cursor[channel] + np.arange(n)) % size
        self.cursor[channel] = int((self.cursor[channel] + n) % size)
        return self.inputs[channel][idx], self.labels[channel][idx]


def adapt_step(pilots: PilotStore, model: SemanticMux, csi: Csi, global_time: int, data: TaskBatch,
               optimizer, rng: np.random.Generator, sigma2: float | None = None) -> float:
    """One task-oriented pilot update; returns the pilot loss.

    The channel picked by :func:`select_pilot_channel` carries stored pilots
    while the others carry ``data``.  The forward pass runs through the channel
    model given by the estimated ``csi``; only the pilot channel's head enters
    the loss, and only the adaptation groups are updated.
    """
    params = model.params
    if any(params.trainable[g] for g in ("disjoint_pre", "f_t", "f_r", "heads")):
        raise RuntimeError("adapt_step: parameters are not in adaptation mode")
    n_comp = model.arch.n_comp
    j = select_pilot_channel(global_time, pilots.shared_seed, n_comp)
    xp, yp = pilots.take(j, data.size)
    inputs = list(data.inputs)
    inputs[j] = xp
    link = freq_link(csi.H, csi.sigma2_noise if sigma2 is None else sigma2, model.ofdm, rng)
    trainable = params.trainable_params()
    with dc.Tape() as tape:
        logits, _ = model.forward(inputs, csi, link, rng=rng, sample=True)
        loss = nll_term([logits[j]], [yp])
    grads = tape.backward(loss, trainable)
    optimizer.step(trainable, grads)
    return loss.item()


def run_dynamic_experiment(model: SemanticMux, ds: Dataset, channel_model: ChannelModel, cfg: AdaptConfig,
                           seed: int, adapt: bool = True, dynamic: bool = True, log=None,
                           initial: ChannelRealization | None = None) -> list[dict]:
    """Inference under a channel redrawn every ``cfg.steps_per_block`` steps.

    The first block uses ``initial`` when given (for example the channel the
    model was trained on).  Each block starts with communication-pilot CSI
    estimation.  With ``adapt``
    a task-oriented pilot step follows every ``cfg.adapt_every`` inference
    steps.  The model is copied; the caller's parameters are untouched.
    Returns rows ``step, channel_epoch, acc_mean, pilot_loss``.
    """
    model = copy.deepcopy(model)
    model.params.set_mode("adapt")
    rng = np.random.default_rng(seed)
    sigma2 = channel_model.sigma2
    n_comp = model.arch.n_comp
    pilots = PilotStore.from_dataset(ds, n_comp, cfg.pilots_per_channel, cfg.shared_seed, seed=seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rows = []
    real = sample_realization(channel_model, rng)  # drawn either way so later blocks see the same channels
    if initial is not None:
        real = initial
    step = 0
    for block in range(cfg.blocks):
        if dynamic and block > 0:
            real = sample_realization(channel_model, rng)
        csi = estimate_csi(channel_model, real, model.ofdm, rng)
        for _ in range(cfg.steps_per_block):
            batch = random_batch(ds.x_test, ds.y_test, n_comp, cfg.infer_batch, rng)
            pred = infer(batch.inputs, model, real, csi, sigma2, rng)
            acc = float(np.mean([(pred[j] == batch.labels[j]).mean() for j in range(n_comp)]))
            pilot_loss = float("nan")
            if adapt and cfg.adapt_every and (step + 1) % cfg.adapt_every == 0:
                data = random_batch(ds.x_train, ds.y_train, n_comp, cfg.batch, rng)
                pilot_loss = adapt_step(pilots, model, csi, step, data, opt, rng)
            row = {"step": step, "channel_epoch": block, "acc_mean": acc, "pilot_loss": pilot_loss}
            rows.append(row)
            if log is not None:
                log(row)
            step += 1
    return rows


@dataclass
class Recovery:
    stale: float  # accuracy of the unadapted model on the new channel
    adapted: float  # after the adaptation steps
    retrained: float  # after retraining every group on the new channel

    @property
    def ratio(self) -> float:
        gap = self.retrained - self.stale
        return (self.adapted - self.stale) / gap if gap > 0 else float("nan")


def recovery_after_redraw(model: SemanticMux, ds: Dataset, channel_model: ChannelModel, cfg: AdaptConfig,
                          seed: int, adapt_steps: int = 50, retrain_steps: int = 200, retrain_lr: float = 1e-3,
                          eval_items: int = 512) -> Recovery:
    """Accuracy on one freshly drawn channel: stale, after ``adapt_steps`` pilot steps, and retrained.

    All three use the same communication-pilot CSI estimate and the same
    evaluation transmissions, so the differences come from the parameters only.
    """
    rng = np.random.default_rng(seed)
    n_comp = model.arch.n_comp
    real = sample_realization(channel_model, rng)
    evalset = evaluation_set(ds, n_comp, eval_items, seed=seed + 1)

    def acc(m):
        return float(accuracy_per_task(m, evalset, channel_model, seed=seed + 2, csi_mode="estimated",
                                       realization=real).mean())

    adapted = copy.deepcopy(model)
    adapted.params.set_mode("adapt")
    pilots = PilotStore.from_dataset(ds, n_comp, cfg.pilots_per_channel, cfg.shared_seed, seed=seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    csi = estimate_csi(channel_model, real, model.ofdm, rng)
    for step in range(adapt_steps):
        data = random_batch(ds.x_train, ds.y_train, n_comp, cfg.batch, rng)
        adapt_step(pilots, adapted, csi, step, data, opt, rng)

    retrained = copy.deepcopy(model)
    retrained.params.set_mode("train")
    opt = make_optimizer("adam", retrain_lr)
    draw = [McDraw(real)]
    loss_cfg = LossConfig(beta=0.0)
    for _ in range(retrain_steps):
        batch = random_batch(ds.x_train, ds.y_train, n_comp, cfg.batch * 2, rng)
        trainable = retrained.params.trainable_params()
        with dc.Tape() as tape:
            parts = vib_loss_mc(batch, retrained, channel_model, loss_cfg, rng, draws=draw)
        opt.step(trainable, tape.backward(parts.loss, trainable))
    return Recovery(stale=acc(model), adapted=acc(adapted), retrained=acc(retrained))
