"""
Bidirectional GRU fault classifier with standard and online adversarial training.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from faultguard.dataset import N_FEATURES, WINDOW_LEN, DatasetSplit, WindowSet


class TrainingError(RuntimeError):
    pass


@dataclass
class PredictorConfig:
    hidden_size: int = 220
    dropout_rate: float = 0.5
    n_classes: int = 11
    epochs: int = 80
    learning_rate: float = 1e-3
    batch_size: int = 64
    oat_epsilon: float = 0.2
    oat_include_clean: bool = True
    oat_bim_steps: int = 10
    seed: int = 0
    n_features: int = N_FEATURES
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        if self.hidden_size < 1 or self.n_classes < 2:
            raise ValueError("hidden_size must be >= 1 and n_classes >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.oat_epsilon < 0:
            raise ValueError("oat_epsilon must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @property
    def head_width(self) -> int:
        return 2 * self.hidden_size


class PredictorModel(nn.Module):
    """One-layer bidirectional GRU, dropout on the concatenated final states, linear head."""

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.gru = nn.GRU(config.n_features, config.hidden_size, batch_first=True, bidirectional=True)
        self.head = nn.Linear(config.head_width, config.n_classes)
        self.epochs_trained = 0
        self.dataset_fingerprint = ""

    def features(self, x: torch.Tensor) -> torch.Tensor:
        # h_n: (2, B, H); index 0 is the forward direction's final state,
        # index 1 the backward direction's state after reading t=0
        _, h_n = self.gru(x)
        return torch.cat([h_n[0], h_n[1]], dim=1)

    def forward(self, x: torch.Tensor, dropout_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.config.n_features:
            raise ValueError(f"expected (batch, time, {self.config.n_features}) input, got {tuple(x.shape)}")
        h = self.features(x)
        if dropout_mask is not None:
            h = h * dropout_mask
        elif self.training:
            h = F.dropout(h, self.config.dropout_rate, training=True)
        return self.head(h)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype


@dataclass
class ClassScores:
    logits: np.ndarray
    scores: np.ndarray
    predicted: int


@dataclass
class TrainingTrace:
    loss: list[float] = field(default_factory=list)
    loss_clean: list[float] = field(default_factory=list)
    loss_adversarial: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.loss)


def init_model(config: PredictorConfig) -> PredictorModel:
    """Build a model with every parameter block drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    model = PredictorModel(config)
    gen = torch.Generator().manual_seed(config.seed)
    fan_in = {}
    for name, p in model.named_parameters():
        if p.dim() == 2:
            fan_in[name] = p.shape[1]
    with torch.no_grad():
        for name, p in model.named_parameters():
            fi = fan_in.get(name) or fan_in[name.replace("bias", "weight")]
            bound = 1.0 / math.sqrt(fi)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
    model.eval()
    return model


def as_tensor(x, model: nn.Module | None = None) -> torch.Tensor:
    dtype = next(model.parameters()).dtype if model is not None else torch.float32
    if isinstance(x, WindowSet):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x.detach().to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def logits(model: PredictorModel, x, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits for a window batch (restores the model's mode)."""
    was_training = model.training
    model.eval()
    xt = as_tensor(x, model)
    try:
        with torch.no_grad():
            out = [model(xt[i : i + batch_size]) for i in range(0, len(xt), batch_size)]
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, model.config.n_classes))
    return torch.cat(out).numpy()


def predict(model: PredictorModel, x) -> np.ndarray:
    return logits(model, x).argmax(axis=1)


def forward(model: PredictorModel, window) -> ClassScores:
    data = window.data if hasattr(window, "data") else window
    data = np.asarray(data) if not isinstance(data, torch.Tensor) else data
    cfg = model.config
    if tuple(data.shape) != (cfg.window_len, cfg.n_features):
        raise ValueError(f"window shape {tuple(data.shape)} != ({cfg.window_len}, {cfg.n_features})")
    z = logits(model, data[None])[0]
    return ClassScores(z, 1.0 / (1.0 + np.exp(-z)), int(np.argmax(z)))


def evaluate_accuracy(model: PredictorModel, windows: WindowSet, task: str = "type") -> float:
    if len(windows) == 0:
        raise ValueError("cannot evaluate accuracy on an empty window set")
    return float(np.mean(predict(model, windows.data) == windows.labels(task)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _check_split(split: DatasetSplit, config: PredictorConfig, task: str):
    if len(split.train) == 0:
        raise TrainingError("empty training set")
    labels = split.train.labels(task)
    if labels.max() >= config.n_classes:
        raise TrainingError(f"label {labels.max()} out of range for {config.n_classes} classes")


def _fit(model, split, config, task, step_fn) -> TrainingTrace:
    _check_split(split, config, task)
    trace = TrainingTrace()
    if config.epochs == 0:
        return trace
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    mask_gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    x_all = as_tensor(split.train.data, model)
    y_all = torch.as_tensor(split.train.labels(task))
    n = len(x_all)
    keep = 1.0 - config.dropout_rate
    start = time.perf_counter()
    for epoch in range(config.epochs):
        model.train()
        totals = np.zeros(3)
        for idx in _batches(n, config.batch_size, rng):
            xb, yb = x_all[idx], y_all[idx]
            mask = (torch.rand((len(idx), config.head_width), generator=mask_gen) < keep).to(model.dtype) / keep
            loss, clean, adv = step_fn(model, xb, yb, mask)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}: clean={clean.item()}, adversarial={adv.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += np.array([loss.item(), clean.item(), adv.item()]) * len(idx)
        model.eval()
        trace.loss.append(totals[0] / n)
        trace.loss_clean.append(totals[1] / n)
        trace.loss_adversarial.append(totals[2] / n)
        if len(split.validation):
            trace.val_accuracy.append(evaluate_accuracy(model, split.validation, task))
        model.epochs_trained += 1
    trace.seconds = time.perf_counter() - start
    model.dataset_fingerprint = split.fingerprint()
    model.eval()
    return trace


def train_standard(model: PredictorModel, split: DatasetSplit, config: PredictorConfig | None = None,
                   task: str = "type") -> TrainingTrace:
    """Mini-batch Adam on cross-entropy over logits."""
    config = config or model.config

    def step(m, xb, yb, mask):
        loss = F.cross_entropy(m(xb, mask), yb)
        return loss, loss, torch.zeros(())

    return _fit(model, split, config, task, step)


def oat_batch_loss(model: PredictorModel, xb, yb, mask, config: PredictorConfig):
    """Clean + FGSM + BIM cross-entropy for one batch.

    Adversarial inputs are crafted against the current parameters in eval
    mode; the three forward passes share one dropout mask.
    Returns (total, clean, adversarial).
    """
    from faultguard.attacks import bim_tensor, fgsm_tensor

    eps = config.oat_epsilon
    model.eval()
    x_fgsm = fgsm_tensor(model, xb, yb, eps)
    x_bim = bim_tensor(model, xb, yb, eps, eps / 4, config.oat_bim_steps)
    model.train()
    clean = F.cross_entropy(model(xb, mask), yb)
    adv = F.cross_entropy(model(x_fgsm, mask), yb) + F.cross_entropy(model(x_bim, mask), yb)
    total = clean + adv if config.oat_include_clean else adv
    return total, clean, adv


def train_online_adversarial(model: PredictorModel, split: DatasetSplit, config: PredictorConfig | None = None,
                             task: str = "type") -> TrainingTrace:
    """Single loop; each batch adds FGSM and BIM losses crafted against the current model."""
    config = config or model.config
    return _fit(model, split, config, task, lambda m, xb, yb, mask: oat_batch_loss(m, xb, yb, mask, config))


def save_checkpoint(model: PredictorModel, path, extra: dict | None = None) -> Path:
    """Write ``<path>.npz`` (parameters) and ``<path>.json`` (config and provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path.with_suffix(".npz"), **arrays)
    meta = {
        "config": asdict(model.config),
        "seed": model.config.seed,
        "epochs_trained": model.epochs_trained,
        "dataset_fingerprint": model.dataset_fingerprint,
        "dtype": str(model.dtype).replace("torch.", ""),
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_checkpoint(path, expected: PredictorConfig | None = None) -> PredictorModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = PredictorConfig(**meta["config"])
    if expected is not None and asdict(expected) != asdict(config):
        diff = {k: (v, asdict(expected)[k]) for k, v in asdict(config).items() if asdict(expected)[k] != v}
        raise ValueError(f"checkpoint config mismatch (stored, expected): {diff}")
    model = PredictorModel(config)
    if meta.get("dtype") == "float64":
        model.double()
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as blob:
        model.load_state_dict({k: torch.from_numpy(blob[k]) for k in blob.files})
    model.epochs_trained = meta["epochs_trained"]
    model.dataset_fingerprint = meta["dataset_fingerprint"]
    model.eval()
    return model
