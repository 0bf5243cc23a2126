"""
White-box evasion attacks (FGSM, BIM, RFGSM, PGD, CW) against the window
classifier, plus the gray-box GAN data-injection attacker.

The ``*_tensor`` functions are the crafting kernels; they take and return
torch tensors and are reused inside online adversarial training and the
ADS adversarial-learning step. The public functions wrap them and return an
``AdversarialBatch``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from faultguard.dataset import WINDOW_LEN, WindowSet
from faultguard.networks import DiscriminatorNet, GeneratorNet, seeded_init
from faultguard.predictor import as_tensor

KINDS = ("FGSM", "BIM", "CW", "RFGSM", "PGD")
DATA_BOX = (0.0, 1.0)


class AttackError(RuntimeError):
    pass


@dataclass
class AttackSpec:
    kind: str
    epsilon: float = 0.2
    steps: int | None = None
    alpha: float | None = None
    random_start: bool = True
    cw_c: float = 1.0
    cw_kappa: float = 0.0
    cw_lr: float = 0.01
    data_box: tuple[float, float] = DATA_BOX
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        self.data_box = tuple(float(v) for v in self.data_box)
        if not self.data_box[0] < self.data_box[1]:
            raise ValueError(f"data_box low must be below high, got {self.data_box}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps is None:
            self.steps = 100 if self.kind == "CW" else 10
        if self.alpha is None:
            self.alpha = self.epsilon / 2 if self.kind == "RFGSM" else self.epsilon / 4
        if self.kind in ("BIM", "PGD", "RFGSM") and self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        if self.kind == "CW" and (self.cw_c <= 0 or self.cw_kappa < 0 or self.cw_lr <= 0):
            raise ValueError("CW needs cw_c > 0, cw_kappa >= 0, cw_lr > 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["data_box"] = list(self.data_box)
        return d


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    spec: AttackSpec
    success_mask: np.ndarray  # prediction on the perturbed window differs from the true label

    @property
    def success_rate(self) -> float:
        return float(self.success_mask.mean()) if len(self.success_mask) else 0.0

    def linf(self) -> np.ndarray:
        d = np.abs(self.perturbed - self.original)
        return d.reshape(len(d), -1).max(axis=1) if len(d) else np.zeros(0)

    def l2(self) -> np.ndarray:
        d = self.perturbed - self.original
        return np.sqrt((d.reshape(len(d), -1) ** 2).sum(axis=1))


def _input_grad(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    # summed so per-window gradients are not shrunk by the batch size
    loss = F.cross_entropy(model(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient")
    return grad


def _clip_ball(x_adv, x, eps):
    return torch.min(torch.max(x_adv, x - eps), x + eps)


def _clip_box(x, box):
    return x.clamp(box[0], box[1])


class _eval_mode:
    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()

    def __exit__(self, *exc):
        self.model.train(self.was_training)


def fgsm_tensor(model, x, y, epsilon, box=DATA_BOX):
    with _eval_mode(model):
        grad = _input_grad(model, x, y)
    return _clip_box(x + epsilon * grad.sign(), box).detach()


def _iterate(model, x, y, epsilon, alpha, steps, box, start):
    x_adv = start
    with _eval_mode(model):
        for _ in range(steps):
            grad = _input_grad(model, x_adv, y)
            x_adv = _clip_box(_clip_ball(x_adv + alpha * grad.sign(), x, epsilon), box).detach()
    return x_adv


def bim_tensor(model, x, y, epsilon, alpha, steps, box=DATA_BOX):
    if alpha * steps < epsilon:
        warnings.warn(f"BIM alpha*steps ({alpha * steps:g}) < epsilon ({epsilon:g}); budget cannot be reached")
    return _iterate(model, x, y, epsilon, alpha, steps, box, x.detach())


def pgd_tensor(model, x, y, epsilon, alpha, steps, random_start=True, box=DATA_BOX, generator=None):
    start = x.detach()
    if random_start:
        noise = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
        start = _clip_box(x + noise, box)
    return _iterate(model, x, y, epsilon, alpha, steps, box, start)


def rfgsm_tensor(model, x, y, epsilon, alpha, box=DATA_BOX, generator=None):
    if not 0 <= alpha <= epsilon:
        raise ValueError(f"RFGSM needs 0 <= alpha <= epsilon, got alpha={alpha}, epsilon={epsilon}")
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    x_prime = _clip_box(x + alpha * noise.sign(), box)
    with _eval_mode(model):
        grad = _input_grad(model, x_prime, y)
    x_adv = _clip_box(x_prime + (epsilon - alpha) * grad.sign(), box)
    # both steps together never exceed epsilon, but rounding in the box clip can; project anyway
    return _clip_box(_clip_ball(x_adv, x, epsilon), box).detach()


def cw_tensor(model, x, y, c=1.0, kappa=0.0, lr=0.01, steps=100, box=DATA_BOX):
    """Carlini-Wagner L2 with a fixed trade-off constant and tanh box reparameterization.

    Returns, per window, the lowest-L2 misclassified iterate, or the final
    iterate when none succeeded (the input itself when ``steps == 0``).
    """
    low, high = box
    if not (np.isfinite(low) and np.isfinite(high)):
        raise ValueError("CW needs a finite data box")
    x = x.detach()
    best = x.clone()
    if steps == 0:
        return best
    span = high - low
    unit = ((x - low) / span * 2 - 1).clamp(-1 + 1e-6, 1 - 1e-6)
    w = torch.atanh(unit).requires_grad_(True)
    opt = torch.optim.Adam([w], lr=lr)
    n = len(x)
    best_l2 = torch.full((n,), float("inf"), dtype=x.dtype)
    with _eval_mode(model):
        for _ in range(steps):
            x_adv = low + span * (torch.tanh(w) + 1) / 2
            z = model(x_adv)
            onehot = F.one_hot(y, num_classes=z.shape[1]).to(torch.bool)
            true_logit = z[onehot]
            other = z.masked_fill(onehot, float("-inf")).max(dim=1).values
            margin = torch.clamp(true_logit - other, min=-kappa)
            l2 = ((x_adv - x) ** 2).flatten(1).sum(dim=1)
            objective = (l2 + c * margin).sum()
            if not torch.isfinite(objective):
                raise AttackError("non-finite CW objective")
            with torch.no_grad():
                improved = (z.argmax(dim=1) != y) & (l2 < best_l2)
                best_l2 = torch.where(improved, l2, best_l2)
                best[improved] = x_adv.detach()[improved]
            opt.zero_grad()
            objective.backward()
            opt.step()
        with torch.no_grad():
            x_adv = low + span * (torch.tanh(w) + 1) / 2
            z = model(x_adv)
            l2 = ((x_adv - x) ** 2).flatten(1).sum(dim=1)
            improved = (z.argmax(dim=1) != y) & (l2 < best_l2)
            best_l2 = torch.where(improved, l2, best_l2)
            best[improved] = x_adv[improved]
            failed = torch.isinf(best_l2)
            best[failed] = x_adv[failed]
    return _clip_box(best, box).detach()


def craft_tensor(model, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    gen = torch.Generator().manual_seed(spec.seed)
    box = spec.data_box
    if spec.kind == "FGSM":
        return fgsm_tensor(model, x, y, spec.epsilon, box)
    if spec.kind == "BIM":
        return bim_tensor(model, x, y, spec.epsilon, spec.alpha, spec.steps, box)
    if spec.kind == "PGD":
        return pgd_tensor(model, x, y, spec.epsilon, spec.alpha, spec.steps, spec.random_start, box, gen)
    if spec.kind == "RFGSM":
        return rfgsm_tensor(model, x, y, spec.epsilon, spec.alpha, box, gen)
    return cw_tensor(model, x, y, spec.cw_c, spec.cw_kappa, spec.cw_lr, spec.steps, box)


def run_attack(model, x, y, spec: AttackSpec, batch_size: int = 256) -> AdversarialBatch:
    """Craft adversarial windows for ``x`` (array, tensor or ``WindowSet``) with labels ``y``."""
    xt = as_tensor(x, model)
    yt = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if len(xt) != len(yt):
        raise ValueError(f"{len(xt)} windows but {len(yt)} labels")
    if len(xt) == 0:
        out = xt
    else:
        # one seeded generator per call; chunks draw from it in order
        parts = []
        gen = torch.Generator().manual_seed(spec.seed)
        for i in range(0, len(xt), batch_size):
            xb, yb = xt[i : i + batch_size], yt[i : i + batch_size]
            if spec.kind == "PGD":
                parts.append(pgd_tensor(model, xb, yb, spec.epsilon, spec.alpha, spec.steps,
                                        spec.random_start, spec.data_box, gen))
            elif spec.kind == "RFGSM":
                parts.append(rfgsm_tensor(model, xb, yb, spec.epsilon, spec.alpha, spec.data_box, gen))
            else:
                parts.append(craft_tensor(model, xb, yb, spec))
        out = torch.cat(parts)
    with torch.no_grad(), _eval_mode(model):
        pred = model(out).argmax(dim=1) if len(out) else torch.zeros(0, dtype=torch.long)
    return AdversarialBatch(
        original=xt.numpy().copy(),
        perturbed=out.numpy().copy(),
        labels=yt.numpy().copy(),
        spec=spec,
        success_mask=(pred != yt).numpy(),
    )


def fgsm(model, x, y, epsilon, data_box=DATA_BOX) -> AdversarialBatch:
    return run_attack(model, x, y, AttackSpec("FGSM", epsilon, data_box=data_box))


def bim(model, x, y, epsilon, alpha=None, steps=10, data_box=DATA_BOX) -> AdversarialBatch:
    return run_attack(model, x, y, AttackSpec("BIM", epsilon, steps, alpha, data_box=data_box))


def rfgsm(model, x, y, epsilon, alpha=None, data_box=DATA_BOX, seed=0) -> AdversarialBatch:
    return run_attack(model, x, y, AttackSpec("RFGSM", epsilon, 1, alpha, data_box=data_box, seed=seed))


def pgd(model, x, y, epsilon, alpha=None, steps=10, random_start=True, data_box=DATA_BOX,
        seed=0) -> AdversarialBatch:
    spec = AttackSpec("PGD", epsilon, steps, alpha, random_start, data_box=data_box, seed=seed)
    return run_attack(model, x, y, spec)


def cw(model, x, y, cw_c=1.0, cw_kappa=0.0, cw_lr=0.01, steps=100, data_box=DATA_BOX) -> AdversarialBatch:
    spec = AttackSpec("CW", 0.0, steps, 0.0, cw_c=cw_c, cw_kappa=cw_kappa, cw_lr=cw_lr, data_box=data_box)
    return run_attack(model, x, y, spec)


def save_adversarial(batch: AdversarialBatch, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "original.npy", batch.original, allow_pickle=False)
    np.save(directory / "perturbed.npy", batch.perturbed, allow_pickle=False)
    np.save(directory / "labels.npy", batch.labels, allow_pickle=False)
    np.save(directory / "success_mask.npy", batch.success_mask, allow_pickle=False)
    (directory / "spec.json").write_text(json.dumps(batch.spec.to_json(), indent=2))
    return directory


def load_adversarial(directory) -> AdversarialBatch:
    directory = Path(directory)
    spec = AttackSpec(**json.loads((directory / "spec.json").read_text()))
    return AdversarialBatch(
        original=np.load(directory / "original.npy", allow_pickle=False),
        perturbed=np.load(directory / "perturbed.npy", allow_pickle=False),
        labels=np.load(directory / "labels.npy", allow_pickle=False),
        spec=spec,
        success_mask=np.load(directory / "success_mask.npy", allow_pickle=False),
    )


def replay(model, batch: AdversarialBatch) -> AdversarialBatch:
    """Re-run the stored spec on the stored originals."""
    return run_attack(model, batch.original, batch.labels, batch.spec)


# gray-box attacker

@dataclass
class GrayboxAttacker:
    generator: GeneratorNet
    latent_dim: int
    epochs: int
    learning_rate: float
    seed: int
    window_len: int = WINDOW_LEN
    fake_scores: list[float] = field(default_factory=list)  # mean D(G(z)) per epoch
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)


@dataclass
class GeneratedWindows:
    records: np.ndarray  # (n_batches * batch_size, F)
    window_len: int

    @property
    def windows(self) -> np.ndarray:
        n = len(self.records) // self.window_len
        return self.records[: n * self.window_len].reshape(n, self.window_len, -1)

    def __len__(self) -> int:
        return len(self.records) // self.window_len


def train_graybox_generator(train_windows, latent_dim: int = 64, seed: int = 0, epochs: int = 150,
                            learning_rate: float = 2e-4, batch_size: int = 256) -> GrayboxAttacker:
    """Plain BCE GAN on unlabeled records; only the generator is kept."""
    data = train_windows.data if isinstance(train_windows, WindowSet) else np.asarray(train_windows)
    if len(data) == 0:
        raise ValueError("gray-box attacker needs non-empty training data")
    window_len = data.shape[1] if data.ndim == 3 else WINDOW_LEN
    records = torch.as_tensor(data.reshape(-1, data.shape[-1]), dtype=torch.float32)
    n_feat = records.shape[1]
    gen_net = seeded_init(GeneratorNet(latent_dim, n_feat), seed)
    disc = seeded_init(DiscriminatorNet(n_feat), seed + 1)
    g_opt = torch.optim.Adam(gen_net.parameters(), lr=learning_rate, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=learning_rate, betas=(0.5, 0.999))
    rng = torch.Generator().manual_seed(seed + 2)
    attacker = GrayboxAttacker(gen_net, latent_dim, epochs, learning_rate, seed, window_len)
    n = len(records)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=rng)
        d_tot = g_tot = fake_tot = 0.0
        for i in range(0, n, batch_size):
            real = records[order[i : i + batch_size]]
            b = len(real)
            d_real = disc(real)
            d_loss = F.binary_cross_entropy_with_logits(d_real, torch.ones(b))
            fake = gen_net(torch.randn(b, latent_dim, generator=rng))
            d_loss = d_loss + F.binary_cross_entropy_with_logits(disc(fake.detach()), torch.zeros(b))
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()
            fake = gen_net(torch.randn(b, latent_dim, generator=rng))
            d_fake = disc(fake)
            g_loss = F.binary_cross_entropy_with_logits(d_fake, torch.ones(b))
            g_opt.zero_grad()
            g_loss.backward()
            g_opt.step()
            if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
                raise AttackError(
                    f"gray-box GAN diverged at epoch {epoch + 1}: d_loss={attacker.d_loss}, g_loss={attacker.g_loss}"
                )
            d_tot += d_loss.item() * b
            g_tot += g_loss.item() * b
            fake_tot += torch.sigmoid(d_fake).sum().item()
        attacker.d_loss.append(d_tot / n)
        attacker.g_loss.append(g_tot / n)
        attacker.fake_scores.append(fake_tot / n)
    gen_net.eval()
    return attacker


def generate_graybox(attacker: GrayboxAttacker, n_batches: int, batch_size: int = 64,
                     seed: int = 0) -> GeneratedWindows:
    gen = torch.Generator().manual_seed(seed)
    g = attacker.generator
    n_feat = g.n_features
    if n_batches == 0:
        return GeneratedWindows(np.zeros((0, n_feat), dtype=np.float32), attacker.window_len)
    with torch.no_grad():
        out = [g(torch.randn(batch_size, attacker.latent_dim, generator=gen)) for _ in range(n_batches)]
    return GeneratedWindows(torch.cat(out).numpy(), attacker.window_len)


def asr_from_predictions(predictions, n_classes: int) -> float:
    predictions = np.asarray(predictions)
    if predictions.size == 0:
        raise ValueError("ASR needs a non-empty prediction set")
    return len(np.unique(predictions)) / n_classes


def graybox_asr(model, generated, n_classes: int | None = None) -> float:
    """Fraction of classes the predictor assigns to at least one generated window."""
    from faultguard.predictor import predict

    windows = generated.windows if isinstance(generated, GeneratedWindows) else generated
    if len(windows) == 0:
        raise ValueError("ASR needs a non-empty generated set")
    n_classes = n_classes or model.config.n_classes
    return asr_from_predictions(predict(model, windows), n_classes)


def save_graybox(attacker: GrayboxAttacker, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **{k: v.numpy() for k, v in attacker.generator.state_dict().items()})
    meta = {k: getattr(attacker, k) for k in ("latent_dim", "epochs", "learning_rate", "seed", "window_len",
                                              "fake_scores", "d_loss", "g_loss")}
    meta["n_features"] = attacker.generator.n_features
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_graybox(path) -> GrayboxAttacker:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    gen_net = GeneratorNet(meta.pop("latent_dim"), meta.pop("n_features"))
    with np.load(path.with_suffix(".npz"), allow_pickle=False) as blob:
        gen_net.load_state_dict({k: torch.from_numpy(blob[k]) for k in blob.files})
    gen_net.eval()
    return GrayboxAttacker(gen_net, gen_net.latent_dim, **meta)
