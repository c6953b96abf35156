"""Class-conditional denoising diffusion at desk scale.

The forward process follows x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) z
with a linear beta ramp.  Two interchangeable noise predictors are
provided: a trained conditional MLP, and a closed-form oracle that is
exact for a finite empirical class distribution (the minimizer of the
training loss, used as a test reference).  Ancestral sampling runs on a
strided sub-schedule; the final step applies no noise, so a sample ends
at the model's clean-image prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import MAGIC_DENOISER, load_tensors, save_tensors
from .dataset import SHAPES, Dataset
from .errors import TrainingFailure
from .rng import Rng

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_noise", "OracleDenoiser",
    "TrainedDenoiser", "DiffusionTrainConfig", "train_denoiser", "sample",
    "ImageSet", "monte_carlo_loss", "save_denoiser", "load_denoiser",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta ramp with cumulative products, indexed by t in 1..T."""
    T: int
    beta: np.ndarray       # (T,)
    alpha_bar: np.ndarray  # (T,) cumulative product of (1 - beta)
    sigma: np.ndarray      # (T,) per-step sampling noise scale

    def alpha_bar_at(self, t) -> np.ndarray:
        """abar_t with the convention abar_0 = 1."""
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])


def make_schedule(T: int, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Build the linear schedule.

    Raises:
        ValueError: T < 2 or beta bounds outside 0 < min <= max < 1.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, "
                         f"got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar,
                         sigma=np.sqrt(1.0 - alpha_bar))


def forward_noise(x0: np.ndarray, t: int, z: np.ndarray,
                  ns: NoiseSchedule) -> np.ndarray:
    """One shot of the forward noising process at step t."""
    if not 1 <= t <= ns.T:
        raise ValueError(f"t={t} outside [1, {ns.T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != x0.shape:
        raise ValueError(f"noise shape {z.shape} != image shape {x0.shape}")
    ab = ns.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def class_label(cond) -> int:
    """Map a shape name (or index) to its class index."""
    if isinstance(cond, str):
        return SHAPES.index(cond)
    return int(cond)


@dataclass(frozen=True)
class ImageSet:
    """p images generated under one condition, plus their noise seeds."""
    condition: str
    images: np.ndarray        # (p, H, W, 3)
    seeds: tuple              # (seed, index) stream ids, one per image

    def __len__(self) -> int:
        return self.images.shape[0]


class OracleDenoiser:
    """Exact noise predictor for a finite empirical class distribution.

    For class data {x0_i}, the conditional clean-image posterior under
    the forward process is softmax-weighted over the class images:

        E[x0 | x_t] = sum_i x0_i softmax_i(-|x_t - sqrt(abar) x0_i|^2
                                           / (2 (1 - abar)))
        eps*(x_t)   = (x_t - sqrt(abar) E[x0 | x_t]) / sqrt(1 - abar)

    computed with log-sum-exp stabilization.
    """

    kind = "oracle"

    def __init__(self, data: Dataset, ns: NoiseSchedule):
        self.ns = ns
        self.shape = (data.size, data.size, 3)
        groups = data.by_class("train")
        empty = [s for s in SHAPES if not groups[s]]
        if empty:
            raise ValueError(f"classes without training images: {empty}")
        self.class_images = {
            SHAPES.index(s): np.stack([it.image for it in groups[s]])
            .reshape(len(groups[s]), -1)
            for s in SHAPES
        }

    def posterior_mean(self, x_flat: np.ndarray, t: int,
                       label: int) -> np.ndarray:
        x0 = self.class_images[label]           # (N, D)
        ab = self.ns.alpha_bar[t - 1]
        scale = np.sqrt(ab)
        var = 1.0 - ab
        # -|x - s*x0_i|^2 / (2 var), expanded so the cross term is one matmul
        logits = (2.0 * scale * x_flat @ x0.T
                  - ab * (x0 ** 2).sum(axis=1)[None, :]) / (2.0 * var)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        return w @ x0

    def predict_eps(self, x_t: np.ndarray, t: int,
                    labels: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        batch = x_t.reshape(x_t.shape[0], -1)
        labels = np.asarray(labels)
        ab = self.ns.alpha_bar[t - 1]
        out = np.empty_like(batch)
        for label in np.unique(labels):
            m = labels == label
            mean = self.posterior_mean(batch[m], t, int(label))
            out[m] = (batch[m] - np.sqrt(ab) * mean) / np.sqrt(1.0 - ab)
        return out.reshape(x_t.shape)


def _time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal timestep features, (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TrainedDenoiser:
    """Conditional MLP noise predictor with timestep and class embeddings."""

    kind = "trained"

    def __init__(self, size: int = 32, hidden: int = 256, t_dim: int = 32,
                 c_dim: int = 16, seed: int = 0):
        self.size = size
        self.hidden = hidden
        self.t_dim = t_dim
        self.c_dim = c_dim
        self.n_classes = len(SHAPES)
        self.loss_trace: np.ndarray | None = None
        d = size * size * 3
        d_in = d + t_dim + c_dim
        streams = iter(range(16))

        def rng():
            return Rng(seed, 500 + next(streams))

        self.params: dict[str, Tensor] = {
            "class_embed": Tensor(rng().normal((self.n_classes, c_dim)),
                                  requires_grad=True),
            "w1": _he(rng(), d_in, hidden),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": _he(rng(), hidden, hidden),
            "b2": Tensor(np.zeros(hidden), requires_grad=True),
            "w3": Tensor(rng().normal((hidden, d)) / np.sqrt(hidden),
                         requires_grad=True),
            "b3": Tensor(np.zeros(d), requires_grad=True),
        }

    def forward(self, x_flat: Tensor, t: np.ndarray,
                labels: np.ndarray) -> Tensor:
        p = self.params
        temb = Tensor(_time_embedding(t, self.t_dim))
        cemb = ad.take_rows(p["class_embed"], labels)
        h = ad.concat([x_flat, temb, cemb], axis=1)
        h = ad.relu(ad.add(ad.matmul(h, p["w1"]), p["b1"]))
        h = ad.relu(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
        return ad.add(ad.matmul(h, p["w3"]), p["b3"])

    def predict_eps(self, x_t: np.ndarray, t: int,
                    labels: np.ndarray) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        with ad.no_grad():
            out = self.forward(Tensor(x_t.reshape(b, -1)),
                               np.full(b, t), np.asarray(labels))
        return out.data.reshape(x_t.shape)


def _he(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in),
                  requires_grad=True)


@dataclass
class DiffusionTrainConfig:
    seed: int = 1
    steps: int = 20000
    batch_size: int = 32
    lr: float = 2e-4
    hidden: int = 256
    optimizer: str = "adam"   # "adam" | "sgd"


def train_denoiser(data: Dataset, ns: NoiseSchedule,
                   cfg: DiffusionTrainConfig = DiffusionTrainConfig()
                   ) -> TrainedDenoiser:
    """Train the conditional noise predictor.

    Each step samples (x0, c) from the train split, t ~ Uniform(1, T)
    and z ~ N(0, I), forms x_t and minimizes the mean squared error
    between z and the prediction.  The per-step loss trace is stored on
    the returned denoiser (`loss_trace`).

    Raises:
        TrainingFailure: loss became non-finite.
    """
    if not data.train:
        raise ValueError("train split is empty")
    den = TrainedDenoiser(size=data.size, hidden=cfg.hidden, seed=cfg.seed)
    images = np.stack([it.image for it in data.train])
    images = images.reshape(images.shape[0], -1)
    labels = np.array([class_label(it.attributes.shape) for it in data.train])
    n = images.shape[0]

    rng = Rng(cfg.seed, 600)
    state = ad.AdamState()
    trace = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch_size)
        t = rng.integers(1, ns.T + 1, cfg.batch_size)
        z = rng.normal((cfg.batch_size, images.shape[1]))
        ab = ns.alpha_bar[t - 1][:, None]
        x_t = np.sqrt(ab) * images[idx] + np.sqrt(1.0 - ab) * z

        pred = den.forward(Tensor(x_t), t, labels[idx])
        loss = ad.mse(pred, Tensor(z))
        trace[step] = float(loss.data)
        if not np.isfinite(trace[step]):
            raise TrainingFailure(f"loss diverged at step {step}",
                                  final_loss=trace[step])
        ad.zero_grad(den.params)
        loss.backward()
        if cfg.optimizer == "adam":
            ad.adam_step(den.params, state, cfg.lr)
        else:
            ad.sgd_step(den.params, cfg.lr)
    den.loss_trace = trace
    return den


def _stride_steps(T: int, inference_steps: int) -> np.ndarray:
    """Visited timesteps, descending from T toward 1."""
    steps = np.unique(np.round(np.linspace(1, T, inference_steps)).astype(int))
    return steps[::-1]


def sample(den, cond, ns: NoiseSchedule, p: int, seed: int,
           inference_steps: int | None = None) -> ImageSet:
    """Ancestral sampling of p images under one class condition.

    Each image i consumes only the (seed, i) noise stream, so sampling
    is reproducible per index and independent of p.  The reverse mean
    uses the epsilon parameterization with stride-adjusted step sizes;
    the last step adds no noise and pixels are clamped to [0, 1] once,
    at the end.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    label = class_label(cond)
    steps = _stride_steps(ns.T, inference_steps or ns.T)
    h = w = int(np.sqrt(den_shape_pixels(den) // 3))
    shape = (h, w, 3)

    streams = [Rng(seed, i) for i in range(p)]
    x = np.stack([s.normal(shape) for s in streams]).reshape(p, -1)
    labels = np.full(p, label)

    for k, t in enumerate(steps):
        t_prev = steps[k + 1] if k + 1 < len(steps) else 0
        ab_t = ns.alpha_bar[t - 1]
        ab_prev = ns.alpha_bar_at(t_prev)
        beta_eff = 1.0 - ab_t / ab_prev
        eps = den.predict_eps(x.reshape(p, *shape), int(t), labels)
        eps = eps.reshape(p, -1)
        mean = (x - beta_eff / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(1.0 - beta_eff)
        if t_prev > 0:
            sigma = ns.sigma[t_prev - 1]
            z = np.stack([s.normal(shape) for s in streams]).reshape(p, -1)
            x = mean + sigma * z
        else:
            x = mean
    images = np.clip(x.reshape(p, *shape), 0.0, 1.0)
    name = SHAPES[label]
    return ImageSet(condition=name, images=images,
                    seeds=tuple((seed, i) for i in range(p)))


def den_shape_pixels(den) -> int:
    """Flat pixel count a denoiser operates on."""
    if hasattr(den, "shape"):
        return int(np.prod(den.shape))
    return den.size * den.size * 3


def monte_carlo_loss(den, data: Dataset, ns: NoiseSchedule, draws: int,
                     seed: int, label=None) -> float:
    """Estimate the training objective by Monte-Carlo over (x0, t, z).

    Draws are taken from the train split (optionally restricted to one
    class) and evaluated as per-element mean squared error between the
    true and predicted noise; the same (seed, draws) pair yields the
    same draws for any denoiser, enabling paired comparisons.
    """
    items = data.train
    if label is not None:
        lbl = class_label(label)
        items = [it for it in items if class_label(it.attributes.shape) == lbl]
    if not items:
        raise ValueError("no items to draw from")
    images = np.stack([it.image for it in items])
    labels = np.array([class_label(it.attributes.shape) for it in items])
    rng = Rng(seed, 700)
    total = 0.0
    chunk = 256
    done = 0
    while done < draws:
        b = min(chunk, draws - done)
        idx = rng.integers(0, len(items), b)
        # one t per chunk keeps the denoiser interface (scalar t) simple
        t = int(rng.integers(1, ns.T + 1))
        z = rng.normal((b,) + images.shape[1:])
        x_t = forward_noise(images[idx], t, z, ns)
        pred = den.predict_eps(x_t, t, labels[idx])
        total += float(((z - pred) ** 2).mean()) * b
        done += b
    return total / draws


def save_denoiser(den: TrainedDenoiser, path) -> None:
    tensors = {"dims": np.array([den.size, den.hidden, den.t_dim, den.c_dim],
                                dtype=np.float64)}
    tensors.update({k: v.data for k, v in den.params.items()})
    if den.loss_trace is not None:
        tensors["loss_trace"] = den.loss_trace
    save_tensors(path, MAGIC_DENOISER, tensors)


def load_denoiser(path) -> TrainedDenoiser:
    t = load_tensors(path, MAGIC_DENOISER)
    size, hidden, t_dim, c_dim = (int(x) for x in t.pop("dims"))
    den = TrainedDenoiser(size=size, hidden=hidden, t_dim=t_dim, c_dim=c_dim)
    den.loss_trace = t.pop("loss_trace", None)
    for k in den.params:
        den.params[k] = Tensor(t[k], requires_grad=True)
    return den
