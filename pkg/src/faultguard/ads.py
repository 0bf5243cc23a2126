"""
GAN-based anomaly detection gate.

The discriminator scores single records; a window's score is the mean of its
records' scores and the window is legitimate when that mean reaches the
threshold. Training optionally adds an adversarial-learning step in which
FGSM and BIM perturbations of the real batch, crafted through the trained
predictor, are shown to the discriminator as fake.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from faultguard.attacks import bim_tensor, fgsm_tensor
from faultguard.dataset import GridWindow, WindowSet
from faultguard.networks import DiscriminatorNet, GeneratorNet, seeded_init
from faultguard.predictor import PredictorModel


class AdsError(RuntimeError):
    pass


@dataclass
class AdsConfig:
    epochs: int = 100
    learning_rate: float = 2e-4
    adversarial_learning: bool = True
    al_epsilon: float = 0.2
    al_bim_steps: int = 10
    threshold: float = 0.5
    task: str = "type"
    seed: int = 0
    latent_dim: int = 64
    batch_size: int = 32  # windows per step; each contributes window_len records

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.adversarial_learning and self.al_epsilon <= 0:
            raise ValueError("al_epsilon must be positive when adversarial learning is on")
        if self.task not in ("type", "zone"):
            raise ValueError(f"task must be 'type' or 'zone', got {self.task!r}")


@dataclass
class AdsTrace:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)
    al_loss: list[float] = field(default_factory=list)
    real_score: list[float] = field(default_factory=list)
    fake_score: list[float] = field(default_factory=list)
    d_updates: list[int] = field(default_factory=list)
    g_updates: list[int] = field(default_factory=list)


@dataclass
class AdsModel:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    config: AdsConfig
    trace: AdsTrace
    predictor_fingerprint: str = ""

    def __iter__(self):
        # unpacks as (generator, discriminator, trace)
        return iter((self.generator, self.discriminator, self.trace))


@dataclass
class DetectionVerdict:
    window_score: float
    is_legitimate: bool
    per_record_scores: np.ndarray


def predictor_fingerprint(model: PredictorModel) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def train_ads(train_windows: WindowSet, predictor: PredictorModel, config: AdsConfig | None = None,
              on_epoch=None) -> AdsModel:
    """GAN training with the optional adversarial-learning discriminator step.

    Per batch: (1) D on real records, (2-3) D on generated records,
    (4-5) with adversarial learning, D on FGSM and BIM windows crafted
    through ``predictor`` and unrolled to records, all labelled fake,
    (6-7) G on a fresh generated batch. ``on_epoch(epoch, generator,
    discriminator)`` is called after every epoch, for monitoring.
    """
    config = config or AdsConfig()
    if len(train_windows) == 0:
        raise AdsError("ADS needs non-empty training windows")
    labels = train_windows.labels(config.task)
    if labels.max() >= predictor.config.n_classes:
        raise AdsError(
            f"task {config.task!r} has label {labels.max()} but the predictor has {predictor.config.n_classes} classes"
        )
    n_feat = train_windows.n_features
    gen_net = seeded_init(GeneratorNet(config.latent_dim, n_feat), config.seed)
    disc = seeded_init(DiscriminatorNet(n_feat), config.seed + 1)
    g_opt = torch.optim.Adam(gen_net.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    rng = torch.Generator().manual_seed(config.seed + 2)

    x_all = torch.as_tensor(train_windows.data, dtype=predictor.dtype)
    y_all = torch.as_tensor(labels)
    n = len(x_all)
    trace = AdsTrace()
    predictor.eval()
    if config.adversarial_learning:
        # The predictor is frozen here and both attacks act per window, so
        # crafting once per training window equals crafting per batch.
        adv_fgsm = torch.cat([fgsm_tensor(predictor, x_all[i:i + 256], y_all[i:i + 256], config.al_epsilon)
                              for i in range(0, n, 256)])
        adv_bim = torch.cat([bim_tensor(predictor, x_all[i:i + 256], y_all[i:i + 256], config.al_epsilon,
                                        config.al_epsilon / 4, config.al_bim_steps) for i in range(0, n, 256)])

    def d_step(records, target):
        logits = disc(records.float())
        loss = F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))
        d_opt.zero_grad()
        loss.backward()
        d_opt.step()
        return loss, logits

    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        sums = np.zeros(5)
        d_updates = g_updates = 0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            real = x_all[idx].reshape(-1, n_feat).float()
            b = len(real)

            loss_real, real_logits = d_step(real, 1.0)
            fake = gen_net(torch.randn(b, config.latent_dim, generator=rng))
            loss_fake, _ = d_step(fake.detach(), 0.0)
            d_updates += 2
            d_loss = loss_real + loss_fake

            al_loss = torch.zeros(())
            if config.adversarial_learning:
                adv = torch.cat([adv_fgsm[idx], adv_bim[idx]]).reshape(-1, n_feat).float()
                logits = disc(adv)
                al_loss = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits))
                d_opt.zero_grad()
                al_loss.backward()
                d_opt.step()
                d_updates += 1

            fake = gen_net(torch.randn(b, config.latent_dim, generator=rng))
            fake_logits = disc(fake)
            g_loss = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()
            g_updates += 1

            if not all(torch.isfinite(t) for t in (d_loss, al_loss, g_loss)):
                raise AdsError(f"non-finite ADS loss at epoch {epoch + 1}")
            sums += np.array([
                d_loss.item(), g_loss.item(), al_loss.item(),
                torch.sigmoid(real_logits).mean().item(), torch.sigmoid(fake_logits).mean().item(),
            ]) * len(idx)
        sums /= n
        trace.d_loss.append(sums[0])
        trace.g_loss.append(sums[1])
        trace.al_loss.append(sums[2])
        trace.real_score.append(sums[3])
        trace.fake_score.append(sums[4])
        trace.d_updates.append(d_updates)
        trace.g_updates.append(g_updates)
        if on_epoch is not None:
            on_epoch(epoch, gen_net, disc)
    gen_net.eval()
    disc.eval()
    return AdsModel(gen_net, disc, config, trace, predictor_fingerprint(predictor))


def _windows_array(windows) -> np.ndarray:
    if isinstance(windows, WindowSet):
        return windows.data
    if isinstance(windows, torch.Tensor):
        return windows.detach().numpy()
    return np.asarray(windows)


def record_scores(discriminator: DiscriminatorNet, windows) -> np.ndarray:
    """Per-record realness, shape (n_windows, window_len)."""
    data = _windows_array(windows)
    if data.ndim != 3 or data.shape[2] != discriminator.n_features:
        raise ValueError(f"expected (n, window_len, {discriminator.n_features}) windows, got {data.shape}")
    if len(data) == 0:
        return np.zeros(data.shape[:2])
    with torch.no_grad():
        s = discriminator.score(torch.as_tensor(data.reshape(-1, data.shape[2]), dtype=torch.float32))
    return s.numpy().astype(np.float64).reshape(data.shape[:2])


def window_scores(discriminator: DiscriminatorNet, windows) -> np.ndarray:
    return record_scores(discriminator, windows).mean(axis=1)


def score(discriminator: DiscriminatorNet, window, threshold: float = 0.5) -> DetectionVerdict:
    data = _windows_array(window.data if isinstance(window, GridWindow) else window)
    if data.ndim != 2:
        raise ValueError(f"score takes a single (window_len, features) window, got shape {data.shape}")
    per_record = record_scores(discriminator, data[None])[0]
    return verdict_from_scores(per_record, threshold)


def verdict_from_scores(per_record_scores, threshold: float = 0.5) -> DetectionVerdict:
    per_record = np.asarray(per_record_scores, dtype=np.float64)
    ws = float(per_record.mean())
    return DetectionVerdict(ws, ws >= threshold, per_record)


def legitimate_mask(discriminator: DiscriminatorNet, windows, threshold: float = 0.5) -> np.ndarray:
    return window_scores(discriminator, windows) >= threshold


def gate(discriminator: DiscriminatorNet, windows, threshold: float = 0.5):
    """Split a window stream into (passed, rejected) by verdict; inputs keep their type."""
    data = _windows_array(windows)
    if len(data) == 0:
        return windows[:0], windows[:0]
    keep = legitimate_mask(discriminator, data, threshold)
    return windows[keep], windows[~keep]


def evaluate_ads(discriminator: DiscriminatorNet, real_test, malicious_sets: dict,
                 threshold: float = 0.5) -> dict[str, float]:
    """Detection accuracy per malicious source over the merged real + malicious set.

    A real window is correct when passed and a malicious window when rejected;
    the two sets are merged window for window without reweighting.
    """
    if len(_windows_array(real_test)) == 0:
        raise ValueError("empty real test set")
    real_ok = legitimate_mask(discriminator, real_test, threshold)
    out = {}
    for name, mal in malicious_sets.items():
        if len(_windows_array(mal)) == 0:
            raise ValueError(f"empty malicious set {name!r}")
        mal_ok = ~legitimate_mask(discriminator, mal, threshold)
        out[name] = float((real_ok.sum() + mal_ok.sum()) / (len(real_ok) + len(mal_ok)))
    return out


def save_ads(ads: AdsModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"generator.{k}": v.numpy() for k, v in ads.generator.state_dict().items()}
    arrays.update({f"discriminator.{k}": v.numpy() for k, v in ads.discriminator.state_dict().items()})
    np.savez(path.with_suffix(".npz"), **arrays)
    meta = {
        "config": asdict(ads.config),
        "seed": ads.config.seed,
        "predictor_fingerprint": ads.predictor_fingerprint,
        "n_features": ads.discriminator.n_features,
        "trace": asdict(ads.trace),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_ads(path) -> AdsModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    config = AdsConfig(**meta["config"])
    gen_net = GeneratorNet(config.latent_dim, meta["n_features"])
    disc = DiscriminatorNet(meta["n_features"])
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as blob:
        gen_net.load_state_dict({k.split(".", 1)[1]: torch.from_numpy(blob[k]) for k in blob.files
                                 if k.startswith("generator.")})
        disc.load_state_dict({k.split(".", 1)[1]: torch.from_numpy(blob[k]) for k in blob.files
                              if k.startswith("discriminator.")})
    gen_net.eval()
    disc.eval()
    return AdsModel(gen_net, disc, config, AdsTrace(**meta["trace"]), meta["predictor_fingerprint"])
