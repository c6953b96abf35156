"""Transmitter-side semantic extraction.

Two small trainable models stand in for the usual large pretrained
backbones while keeping the same interface math:

* `ImageEncoder` - a 3-block CNN trained as an 80-way attribute-cell
  classifier, then used headless: the transmitted image feature is
  W2 . relu(W1 . F_conv + b1) + b2 with d_image = 32.
* `TextScorer` - a frozen table of unit-norm prompt embeddings plus a
  trained projector that maps an image into each attribute group's
  embedding space; prompts are picked by softmax over cosine
  similarities, one argmax per group (ties to the lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import MAGIC_ENCODER, MAGIC_SCORER, load_tensors, save_tensors
from .dataset import COLORS, POSITIONS, SHAPES, Dataset, cell_index
from .errors import TrainingFailure
from .rng import Rng

__all__ = [
    "TrainConfig", "ImageEncoder", "TextScorer", "train_image_encoder",
    "train_text_scorer", "extract_image_features",
    "extract_image_features_batch", "conv_features", "classify_cells",
    "prompt_probabilities", "extract_text_features",
    "extract_text_features_batch", "save_encoder", "load_encoder",
    "save_scorer", "load_scorer", "GROUPS",
]

GROUPS = ("shape", "color", "position")
_GROUP_VOCAB = {"shape": SHAPES, "color": COLORS, "position": POSITIONS}

_CHUNK = 256  # batch size cap for inference-time feature extraction


@dataclass
class TrainConfig:
    """Optimization settings for the two encoder trainings."""
    seed: int = 1
    batch_size: int = 64
    lr: float = 3e-3
    max_epochs: int = 60
    target_accuracy: float = 0.95


def _init(rng: Rng, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(shape) / np.sqrt(fan_in), requires_grad=True)


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution on NHWC via shifted-window matmul."""
    n, h, wd, c = x.shape
    xp = ad.pad2d(x, 1)
    windows = [ad.crop2d(xp, dy, dx, h, wd)
               for dy in range(3) for dx in range(3)]
    cols = ad.concat(windows, axis=-1)
    flat = ad.reshape(cols, (n * h * wd, 9 * c))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, (n, h, wd, w.shape[1]))


def _avg_pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    r = ad.reshape(x, (n, h // 2, 2, w // 2, 2, c))
    return ad.mean(r, axis=(2, 4))


class ImageEncoder:
    """3-block CNN, two projection layers, detachable 80-way head."""

    CHANNELS = (16, 16, 16)

    def __init__(self, size: int = 32, d_image: int = 32, d1: int = 128,
                 seed: int = 0):
        self.size = size
        self.d_image = d_image
        self.d1 = d1
        self.d_conv = (size // 8) ** 2 * self.CHANNELS[-1]
        self.n_cells = len(SHAPES) * len(COLORS) * len(POSITIONS)
        self.head_detached = False

        c1, c2, c3 = self.CHANNELS
        streams = iter(range(32))

        def rng():
            return Rng(seed, next(streams))

        self.params: dict[str, Tensor] = {
            "conv1_w": _init(rng(), (9 * 3, c1), 9 * 3),
            "conv1_b": Tensor(np.zeros(c1), requires_grad=True),
            "conv2_w": _init(rng(), (9 * c1, c2), 9 * c1),
            "conv2_b": Tensor(np.zeros(c2), requires_grad=True),
            "conv3_w": _init(rng(), (9 * c2, c3), 9 * c2),
            "conv3_b": Tensor(np.zeros(c3), requires_grad=True),
            "fc1_w": _init(rng(), (self.d_conv, d1), self.d_conv),
            "fc1_b": Tensor(np.zeros(d1), requires_grad=True),
            "fc2_w": _init(rng(), (d1, d_image), d1),
            "fc2_b": Tensor(np.zeros(d_image), requires_grad=True),
        }
        self.head: dict[str, Tensor] = {
            "head_w": _init(rng(), (d_image, self.n_cells), d_image),
            "head_b": Tensor(np.zeros(self.n_cells), requires_grad=True),
        }

    def conv_stack(self, x: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(_conv3x3(x, p["conv1_w"], p["conv1_b"]))
        h = _avg_pool2(h)
        h = ad.relu(_conv3x3(h, p["conv2_w"], p["conv2_b"]))
        h = _avg_pool2(h)
        h = ad.relu(_conv3x3(h, p["conv3_w"], p["conv3_b"]))
        h = _avg_pool2(h)
        return ad.reshape(h, (x.shape[0], self.d_conv))

    def features(self, x: Tensor) -> Tensor:
        p = self.params
        f_conv = self.conv_stack(x)
        f_d1 = ad.relu(ad.add(ad.matmul(f_conv, p["fc1_w"]), p["fc1_b"]))
        return ad.add(ad.matmul(f_d1, p["fc2_w"]), p["fc2_b"])

    def logits(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(self.features(x), self.head["head_w"]),
                      self.head["head_b"])


def _as_batch(images: np.ndarray, size: int) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (size, size, 3):
        raise ValueError(f"expected images of shape ({size}, {size}, 3), "
                         f"got {images.shape[1:]}")
    return images


def conv_features(enc: ImageEncoder, images: np.ndarray) -> np.ndarray:
    """Flattened conv-stack output (the projection layers' input)."""
    images = _as_batch(images, enc.size)
    with ad.no_grad():
        return enc.conv_stack(Tensor(images)).data


def extract_image_features_batch(enc: ImageEncoder,
                                 images: np.ndarray) -> np.ndarray:
    images = _as_batch(images, enc.size)
    outs = []
    with ad.no_grad():
        for lo in range(0, images.shape[0], _CHUNK):
            outs.append(enc.features(Tensor(images[lo:lo + _CHUNK])).data)
    return np.concatenate(outs, axis=0)


def extract_image_features(enc: ImageEncoder, image: np.ndarray) -> np.ndarray:
    """The transmitted semantic feature vector of one image."""
    return extract_image_features_batch(enc, image)[0]


def classify_cells(enc: ImageEncoder, images: np.ndarray) -> np.ndarray:
    """Predicted attribute-cell index per image (needs the head)."""
    images = _as_batch(images, enc.size)
    outs = []
    with ad.no_grad():
        for lo in range(0, images.shape[0], _CHUNK):
            outs.append(enc.logits(Tensor(images[lo:lo + _CHUNK])).data)
    return np.argmax(np.concatenate(outs, axis=0), axis=1)


def _stack_split(items) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([it.image for it in items])
    ys = np.array([cell_index(it.attributes) for it in items])
    return xs, ys


def train_image_encoder(data: Dataset, cfg: TrainConfig = TrainConfig()
                        ) -> ImageEncoder:
    """Train the joint attribute-cell classifier, then detach the head.

    Raises:
        TrainingFailure: target train accuracy not reached within
            cfg.max_epochs (the exception carries the final accuracy).
    """
    if not data.train:
        raise ValueError("train split is empty")
    enc = ImageEncoder(size=data.size, seed=cfg.seed)
    xs, ys = _stack_split(data.train)
    n = xs.shape[0]
    order_rng = Rng(cfg.seed, 100)
    state = ad.AdamState()
    trainable = dict(enc.params) | enc.head

    accuracy = 0.0
    for _ in range(cfg.max_epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = ad.cross_entropy_logits(enc.logits(Tensor(xs[idx])), ys[idx])
            ad.zero_grad(trainable)
            loss.backward()
            ad.adam_step(trainable, state, cfg.lr)
        accuracy = float((classify_cells(enc, xs) == ys).mean())
        if accuracy >= cfg.target_accuracy:
            enc.head_detached = True
            return enc
    raise TrainingFailure(
        f"cell classifier stalled at {accuracy:.3f} after "
        f"{cfg.max_epochs} epochs", final_accuracy=accuracy)


class TextScorer:
    """Frozen unit-norm prompt embeddings + trained per-group projector."""

    def __init__(self, size: int = 32, d_text: int = 32, hidden: int = 128,
                 seed: int = 0):
        self.size = size
        self.d_text = d_text
        self.hidden = hidden
        self.vocab = dict(_GROUP_VOCAB)

        # The embedding table is part of the shared knowledge base: it is
        # seeded, row-normalized and never trained.
        self.embeddings: dict[str, np.ndarray] = {}
        for gi, group in enumerate(GROUPS):
            e = Rng(seed, 200 + gi).normal((len(self.vocab[group]), d_text))
            self.embeddings[group] = e / np.linalg.norm(e, axis=1,
                                                        keepdims=True)

        d_in = size * size * 3
        streams = iter(range(16))

        def rng():
            return Rng(seed, 300 + next(streams))

        self.params: dict[str, Tensor] = {
            "trunk_w": _init(rng(), (d_in, hidden), d_in),
            "trunk_b": Tensor(np.zeros(hidden), requires_grad=True),
        }
        for group in GROUPS:
            self.params[f"{group}_w"] = _init(rng(), (hidden, d_text), hidden)
            self.params[f"{group}_b"] = Tensor(np.zeros(d_text),
                                               requires_grad=True)

    def cosine_logits(self, x: Tensor, group: str) -> Tensor:
        """Cosine similarity of the projected image against each prompt
        embedding of `group` (rows are images).
        """
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p["trunk_w"]), p["trunk_b"]))
        proj = ad.add(ad.matmul(h, p[f"{group}_w"]), p[f"{group}_b"])
        unit = ad.l2_normalize_rows(proj)
        return ad.matmul(unit, Tensor(self.embeddings[group].T))


def _flat_batch(images: np.ndarray, size: int) -> np.ndarray:
    return _as_batch(images, size).reshape(-1, size * size * 3)


def prompt_probabilities(scorer: TextScorer, image: np.ndarray,
                         group: str) -> np.ndarray:
    """P(word | image) over one group's vocabulary: softmax of the
    cosine similarities.
    """
    if group not in GROUPS:
        raise ValueError(f"unknown attribute group {group!r}")
    flat = _flat_batch(image, scorer.size)
    with ad.no_grad():
        sims = scorer.cosine_logits(Tensor(flat), group).data[0]
    e = np.exp(sims - sims.max())
    return e / e.sum()


def extract_text_features_batch(scorer: TextScorer, images: np.ndarray
                                ) -> tuple[list[list[str]], np.ndarray]:
    """Selected prompts and their embedding rows for a batch of images.

    Returns:
        prompts: per image, the 3 selected words in group order.
        features: (B, 3, d_text) matrix of the selected embedding rows.
    """
    flat = _flat_batch(images, scorer.size)
    b = flat.shape[0]
    words: list[list[str]] = [[] for _ in range(b)]
    rows = np.empty((b, len(GROUPS), scorer.d_text))
    with ad.no_grad():
        for gi, group in enumerate(GROUPS):
            sims = np.empty((b, len(scorer.vocab[group])))
            for lo in range(0, b, _CHUNK):
                sims[lo:lo + _CHUNK] = scorer.cosine_logits(
                    Tensor(flat[lo:lo + _CHUNK]), group).data
            # argmax returns the first (lowest-index) maximizer on ties
            picks = np.argmax(sims, axis=1)
            rows[:, gi, :] = scorer.embeddings[group][picks]
            for i, w in enumerate(picks):
                words[i].append(scorer.vocab[group][w])
    return words, rows


def extract_text_features(scorer: TextScorer, image: np.ndarray
                          ) -> tuple[list[str], np.ndarray]:
    """Prompts and text-feature matrix for one image."""
    words, rows = extract_text_features_batch(scorer, image)
    return words[0], rows[0]


def _group_labels(items, group: str) -> np.ndarray:
    vocab = _GROUP_VOCAB[group]
    return np.array([vocab.index(getattr(it.attributes, _ATTR_FIELD[group]))
                     for it in items])


_ATTR_FIELD = {"shape": "shape", "color": "color", "position": "position"}


def train_text_scorer(data: Dataset, cfg: TrainConfig = TrainConfig()
                      ) -> TextScorer:
    """Train the projector against the frozen embedding table.

    The loss is the summed cross-entropy of the three per-group softmax
    distributions; convergence requires every group to reach the target
    accuracy on the train split.

    Raises:
        TrainingFailure: any group below target after cfg.max_epochs.
    """
    if not data.train:
        raise ValueError("train split is empty")
    scorer = TextScorer(size=data.size, seed=cfg.seed)
    flat = _flat_batch(np.stack([it.image for it in data.train]), data.size)
    labels = {g: _group_labels(data.train, g) for g in GROUPS}
    n = flat.shape[0]
    order_rng = Rng(cfg.seed, 400)
    state = ad.AdamState()

    def group_accuracies() -> dict[str, float]:
        accs = {}
        with ad.no_grad():
            for g in GROUPS:
                sims = np.concatenate(
                    [scorer.cosine_logits(Tensor(flat[lo:lo + _CHUNK]), g).data
                     for lo in range(0, n, _CHUNK)])
                accs[g] = float((np.argmax(sims, 1) == labels[g]).mean())
        return accs

    accs: dict[str, float] = {}
    for _ in range(cfg.max_epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x = Tensor(flat[idx])
            loss = None
            for g in GROUPS:
                term = ad.cross_entropy_logits(scorer.cosine_logits(x, g),
                                               labels[g][idx])
                loss = term if loss is None else ad.add(loss, term)
            ad.zero_grad(scorer.params)
            loss.backward()
            ad.adam_step(scorer.params, state, cfg.lr)
        accs = group_accuracies()
        if min(accs.values()) >= cfg.target_accuracy:
            return scorer
    raise TrainingFailure(
        f"prompt scorer stalled at {accs} after {cfg.max_epochs} epochs",
        final_accuracy=min(accs.values()))


def save_encoder(enc: ImageEncoder, path) -> None:
    tensors = {"dims": np.array([enc.size, enc.d_image, enc.d1,
                                 float(enc.head_detached)])}
    tensors.update({k: v.data for k, v in enc.params.items()})
    tensors.update({k: v.data for k, v in enc.head.items()})
    save_tensors(path, MAGIC_ENCODER, tensors)


def load_encoder(path) -> ImageEncoder:
    t = load_tensors(path, MAGIC_ENCODER)
    size, d_image, d1, detached = t.pop("dims")
    enc = ImageEncoder(size=int(size), d_image=int(d_image), d1=int(d1))
    enc.head_detached = bool(detached)
    for k in enc.params:
        enc.params[k] = Tensor(t[k], requires_grad=True)
    for k in enc.head:
        enc.head[k] = Tensor(t[k], requires_grad=True)
    return enc


def save_scorer(scorer: TextScorer, path) -> None:
    tensors = {"dims": np.array([scorer.size, scorer.d_text,
                                 scorer.hidden], dtype=np.float64)}
    for g in GROUPS:
        tensors[f"embed_{g}"] = scorer.embeddings[g]
    tensors.update({k: v.data for k, v in scorer.params.items()})
    save_tensors(path, MAGIC_SCORER, tensors)


def load_scorer(path) -> TextScorer:
    t = load_tensors(path, MAGIC_SCORER)
    size, d_text, hidden = (int(x) for x in t.pop("dims"))
    scorer = TextScorer(size=size, d_text=d_text, hidden=hidden)
    for g in GROUPS:
        scorer.embeddings[g] = t.pop(f"embed_{g}")
    for k in scorer.params:
        scorer.params[k] = Tensor(t[k], requires_grad=True)
    return scorer
