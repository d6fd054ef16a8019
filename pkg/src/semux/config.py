"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Lists are comma separated (``sweep_n_comp = 2, 4, 6, 8``).  Unspecified
keys keep their defaults, which follow the reference system settings:
FFT size 1024 with 800 used subcarriers, 20 dB SNR and beta = 1e-4.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

from .channel import ChannelModel
from .data import Dataset, idx_images, synthetic
from .modem import OfdmConfig
from .nets import ArchConfig
from .pipeline import AdaptConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    task: str = "synthetic"  # synthetic | idx_images
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_classes: int = 8
    image_size: int = 16
    n_train: int = 4096
    n_test: int = 1024
    margin: float = 0.35
    noise: float = 0.45
    data_seed: int = 0
    # architecture
    n_comp: int = 2
    n_tx: int = 2
    n_rx: int = 2
    key_dim: int = 32
    packets: int = 2
    k_used: int = 800
    fft_size: int = 1024
    rx_hidden: int = 256
    out_dim: int = 64
    precoder_init: str = "matched"
    # channel
    fading: str = "rayleigh"
    n_taps: int = 8
    k_factor_db: float = 10.0
    decay_db: float = 20.0
    snr_db: float = 20.0
    # training
    optimizer: str = "adam"
    lr: float = 2e-3
    epochs: int = 20
    batch_size: int = 64
    steps_per_epoch: int = 0  # 0: one pass over the training set
    beta: float = 1e-4
    n_mc: int = 1
    channel_refresh: str = "step"
    eval_items: int = 1024
    # adaptation
    adapt_enabled: bool = True
    adapt_dynamic: bool = True
    adapt_steps_per_block: int = 100
    adapt_blocks: int = 5
    adapt_every: int = 1
    adapt_lr: float = 3e-3
    adapt_optimizer: str = "adam"
    adapt_batch: int = 32
    pilots_per_channel: int = 64
    shared_seed: int = 0x5EED
    # sweeps
    sweep_n_comp: tuple[int, ...] = (2, 4, 6, 8)
    sweep_betas: tuple[float, ...] = (1e-4, 1e-2, 1e-1)
    sweep_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # run
    seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        if self.task not in ("synthetic", "idx_images"):
            raise ConfigError(f"task must be 'synthetic' or 'idx_images', got {self.task!r}")
        if self.task == "idx_images":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(self, key)
                if not path:
                    raise ConfigError(f"task idx_images needs {key}")
                if not Path(path).exists():
                    raise ConfigError(f"{key}: no such file {path}")
        if self.k_used >= self.fft_size:
            raise ConfigError(f"k_used {self.k_used} must be below fft_size {self.fft_size}")
        if not self.sweep_n_comp or not self.sweep_betas or not self.sweep_seeds:
            raise ConfigError("sweep lists must not be empty")
        for b in (self.beta, *self.sweep_betas):
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"beta values must lie in [0, 1], got {b}")
        if self.steps_per_epoch < 0 or self.eval_items < 1:
            raise ConfigError("steps_per_epoch must be >= 0 and eval_items >= 1")
        try:
            self.arch().validate()
            self.ofdm()
            self.channel()
            self.train_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # builders ---------------------------------------------------------------
    def arch(self, n_comp: int | None = None, in_channels: int = 1, image_size: int | None = None,
             n_classes: int | None = None) -> ArchConfig:
        return ArchConfig(n_comp=n_comp or self.n_comp, in_channels=in_channels,
                          image_size=image_size or self.image_size, n_classes=n_classes or self.n_classes,
                          key_dim=self.key_dim, packets=self.packets, k_used=self.k_used, n_tx=self.n_tx,
                          n_rx=self.n_rx, rx_hidden=self.rx_hidden, out_dim=self.out_dim,
                          precoder_init=self.precoder_init)

    def ofdm(self) -> OfdmConfig:
        return OfdmConfig(fft_size=self.fft_size, used_subcarriers=self.k_used)

    def channel(self) -> ChannelModel:
        return ChannelModel(n_tx=self.n_tx, n_rx=self.n_rx, n_taps=self.n_taps, fading=self.fading,
                            k_factor_db=self.k_factor_db, decay_db=self.decay_db, snr_db=self.snr_db)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(steps_per_block=self.adapt_steps_per_block, blocks=self.adapt_blocks,
                           adapt_every=self.adapt_every, lr=self.adapt_lr, optimizer=self.adapt_optimizer,
                           batch=self.adapt_batch, pilots_per_channel=self.pilots_per_channel,
                           shared_seed=self.shared_seed)

    def train_config(self, seed: int | None = None, beta: float | None = None) -> TrainConfig:
        return TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           steps_per_epoch=self.steps_per_epoch or None, snr_db=self.snr_db,
                           beta=self.beta if beta is None else beta, n_mc=self.n_mc,
                           seed=self.seed if seed is None else seed, channel_refresh=self.channel_refresh,
                           eval_items=self.eval_items, adapt=self.adapt_config())

    def dataset(self) -> Dataset:
        if self.task == "synthetic":
            return synthetic(n_classes=self.n_classes, size=self.image_size, n_train=self.n_train,
                             n_test=self.n_test, margin=self.margin, noise=self.noise, seed=self.data_seed)
        return idx_images(self.train_images, self.train_labels, self.test_images, self.test_labels,
                          n_classes=self.n_classes)

    def model_hash(self) -> bytes:
        """SHA-256 over the settings that fix the parameter set and its meaning.

        Run-level settings (seeds, learning rates, epochs, sweeps, output
        directory) are left out so a checkpoint can be evaluated or adapted
        under a different run configuration.
        """
        keys = ("task", "n_classes", "image_size", "n_comp", "n_tx", "n_rx", "key_dim", "packets", "k_used",
                "fft_size", "rx_hidden", "out_dim")
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in keys)
        return hashlib.sha256(text.encode("utf-8")).digest()

    def dumps(self) -> str:
        """Every setting as ``key = value`` lines; ``loads(dumps(c)) == c``."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw, 0)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip("\"'")
        if typ == tuple[int, ...]:
            return tuple(int(x, 0) for x in raw.split(",") if x.strip())
        if typ == tuple[float, ...]:
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type {typ}")


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: {key!r} set twice")
        values[key] = _convert(key, raw, hints[key])
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, source=str(path))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    out = dataclasses.replace(cfg, **{k: v for k, v in changes.items() if v is not None})
    out.validate()
    return out
