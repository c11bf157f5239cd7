"""Latent plane-classification space and the prototype atlas built on it."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import hash_arrays, load_archive, save_archive
from .data import PLANES, STRUCTURES, LabeledImage, Plane, one_hot
from .errors import EmptyCluster, InsufficientData, ShapeError

log = logging.getLogger(__name__)

ATLAS_TAG = "PRIOR-ATLAS-v1"


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 256
    widths: tuple = (16, 32, 64)
    blocks: tuple = (1, 1, 1)
    num_planes: int = 4
    wide_stem: bool = False

    @classmethod
    def resnet34(cls, input_size: int = 256, num_planes: int = 4) -> "EncoderConfig":
        return cls(input_size, (64, 128, 256, 512), (3, 4, 6, 3), num_planes, True)

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class LatentEncoder(nn.Module):
    """Residual plane classifier; its pooled pre-head features form the latent space."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        w0 = config.widths[0]
        if config.wide_stem:
            self.stem = nn.Sequential(
                nn.Conv2d(1, w0, 7, 2, 3, bias=False), nn.BatchNorm2d(w0), nn.ReLU(inplace=True),
                nn.MaxPool2d(3, 2, 1),
            )
        else:
            self.stem = nn.Sequential(nn.Conv2d(1, w0, 3, 2, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU(inplace=True))
        stages, cin = [], w0
        for i, (width, n) in enumerate(zip(config.widths, config.blocks)):
            layers = [BasicBlock(cin, width, 1 if i == 0 else 2)]
            layers += [BasicBlock(width, width) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, config.num_planes)
        self.train_accuracy = float("nan")
        self.history: list = []

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def check_input(self, x: torch.Tensor) -> None:
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (size, size):
            raise ShapeError(f"latent encoder expects (N, 1, {size}, {size}) input, got {tuple(x.shape)}")

    @torch.no_grad()
    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        was_training = self.training
        self.eval()
        out = self.features(x)
        self.train(was_training)
        return out

    def state_hash(self) -> str:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        return hash_arrays(arrays, {"encoder": asdict(self.config)})


def _pixels_tensor(images: Sequence[LabeledImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([img.pixels for img in images]))[:, None]


def _plane_targets(images, planes) -> torch.Tensor:
    index = {p: i for i, p in enumerate(planes)}
    return torch.tensor([index[img.plane] for img in images], dtype=torch.long)


@torch.no_grad()
def classification_accuracy(encoder: LatentEncoder, images, planes=PLANES, batch_size: int = 64) -> float:
    encoder.eval()
    x, y = _pixels_tensor(images), _plane_targets(images, planes)
    preds = torch.cat([encoder(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    return float((preds == y).float().mean())


@torch.no_grad()
def recalibrate_batchnorm(encoder: LatentEncoder, x: torch.Tensor, batch_size: int = 16) -> None:
    """Replace BN running statistics by exact averages over ``x`` under the final weights.

    With few optimizer steps the exponential running averages still reflect
    early weights, and eval-mode features drift from train-mode ones.
    """
    bns = [m for m in encoder.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    encoder.train()
    for i in range(0, len(x), batch_size):
        encoder(x[i:i + batch_size])
    for m, momentum in zip(bns, saved):
        m.momentum = momentum
    encoder.eval()


def train_latent_encoder(
    images: Sequence[LabeledImage],
    epochs: int = 20,
    seed: int = 0,
    config: EncoderConfig | None = None,
    planes: Sequence[Plane] = PLANES,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> LatentEncoder:
    """Train the plane classifier on tagged images (resized to the encoder input)."""
    planes = tuple(Plane.parse(p) for p in planes)
    if not images:
        raise InsufficientData("no training images")
    counts = {p: 0 for p in planes}
    for img in images:
        if img.plane in counts:
            counts[img.plane] += 1
    missing = [p.value for p, n in counts.items() if n == 0]
    if missing:
        raise InsufficientData(f"no examples for plane(s): {', '.join(missing)}")
    images = [img for img in images if img.plane in counts]
    if config is None:
        config = EncoderConfig(input_size=images[0].shape[0], num_planes=len(planes))
    elif config.num_planes != len(planes):
        raise ValueError(f"config.num_planes={config.num_planes} but {len(planes)} planes given")
    images = [img.resized(config.input_size) for img in images]

    torch.manual_seed(seed)
    encoder = LatentEncoder(config)
    x, y = _pixels_tensor(images), _plane_targets(images, planes)
    encoder.check_input(x)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        encoder.train()
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(encoder(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        encoder.history.append({"epoch": epoch + 1, "loss": total / len(x)})
    recalibrate_batchnorm(encoder, x, batch_size)
    encoder.train_accuracy = classification_accuracy(encoder, images, planes)
    encoder.eval()
    log.info("latent encoder: %d epochs, train accuracy %.3f", epochs, encoder.train_accuracy)
    return encoder


def encode(encoder: LatentEncoder, image) -> np.ndarray:
    """Latent vector of one image; the mask, if any, is ignored."""
    pixels = image.pixels if isinstance(image, LabeledImage) else np.asarray(image, dtype=np.float32)
    if pixels.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {pixels.shape}")
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    return encoder.encode_batch(x)[0].numpy()


# -- clustering --------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    objective_history: list
    n_iter: int
    reseeds: int


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centers)).min(1)
        total = d2.sum()
        p = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=p)])
    return np.array(centers, dtype=np.float64)


def _lloyd(x, centers, max_iter, max_reseeds):
    labels = None
    history, reseeds = [], 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        new_labels = d2.argmin(1)
        counts = np.bincount(new_labels, minlength=len(centers))
        while (counts == 0).any():
            if reseeds >= max_reseeds:
                return None
            empty = int(np.flatnonzero(counts == 0)[0])
            far = int(np.argmax(d2[np.arange(len(x)), new_labels]))
            centers[empty] = x[far]
            reseeds += 1
            d2 = _sq_dists(x, centers)
            new_labels = d2.argmin(1)
            counts = np.bincount(new_labels, minlength=len(centers))
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            return KMeansResult(centers, labels, history[-1], history, it, reseeds)
        labels = new_labels
        centers = np.stack([x[labels == j].mean(0) for j in range(len(centers))])
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(1)
    if (np.bincount(labels, minlength=len(centers)) == 0).any():
        return None
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return KMeansResult(centers, labels, history[-1], history, max_iter, reseeds)


def kmeans(x, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 100, max_reseeds: int = 3) -> KMeansResult:
    """Lloyd iterations with k-means++ starts; the lowest-objective restart wins.

    Empty clusters are reseeded at the point farthest from its assigned centroid,
    at most ``max_reseeds`` times per restart.
    """
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) < k:
        raise InsufficientData(f"{len(x)} points cannot form {k} clusters")
    best = None
    for restart in range(n_init):
        rng = np.random.default_rng([int(seed), restart])
        result = _lloyd(x, _kmeanspp(x, k, rng), max_iter, max_reseeds)
        if result is not None and (best is None or result.inertia < best.inertia):
            best = result
    if best is None:
        raise EmptyCluster(f"every restart left a cluster empty after {max_reseeds} reseeds (k={k})")
    return best


# -- atlas -------------------------------------------------------------------


@dataclass
class PriorAtlas:
    prototypes: np.ndarray  # (K, D)
    center_masks: np.ndarray  # (K, S, H, W)
    cluster_assignments: dict = field(default_factory=dict)
    encoder: LatentEncoder | None = None
    encoder_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.prototypes.shape[1])

    @property
    def num_structures(self) -> int:
        return int(self.center_masks.shape[1])

    @property
    def hash(self) -> str:
        return hash_arrays(
            {"prototypes": self.prototypes, "center_masks": self.center_masks}, {"encoder": self.encoder_hash}
        )

    def save(self, path, run_config_hash: str = "") -> str:
        arrays = {
            "K": np.array(self.K, dtype=np.int64),
            "embed_dim": np.array(self.embed_dim, dtype=np.int64),
            "prototypes": np.ascontiguousarray(self.prototypes, dtype=np.float32),
            "center_masks": np.ascontiguousarray(self.center_masks, dtype=np.float32),
        }
        meta = {
            "encoder_hash": self.encoder_hash,
            "atlas_hash": self.hash,
            "run_config_hash": run_config_hash,
            "cluster_assignments": self.cluster_assignments,
            **self.meta,
        }
        if self.encoder is not None:
            meta["encoder_config"] = asdict(self.encoder.config)
            for k, v in self.encoder.state_dict().items():
                arrays[f"encoder/{k}"] = v.detach().cpu().numpy()
        return save_archive(path, ATLAS_TAG, arrays, meta)

    @classmethod
    def load(cls, path) -> "PriorAtlas":
        arrays, meta = load_archive(path, ATLAS_TAG)
        encoder = None
        if "encoder_config" in meta:
            cfg = meta.pop("encoder_config")
            cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
            encoder = LatentEncoder(cfg)
            state = {k[len("encoder/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("encoder/")}
            encoder.load_state_dict(state)
            encoder.eval()
        assignments = meta.pop("cluster_assignments", {})
        encoder_hash = meta.pop("encoder_hash", "")
        meta.pop("atlas_hash", None)
        return cls(arrays["prototypes"], arrays["center_masks"], assignments, encoder, encoder_hash, meta)


def build_atlas(
    encoder: LatentEncoder,
    images: Sequence[LabeledImage],
    K: int | None = None,
    seed: int = 0,
    structures=STRUCTURES,
    **kmeans_kw,
) -> PriorAtlas:
    """Cluster training latents and pair each centroid with its cluster's mean one-hot mask.

    ``K`` defaults to the number of distinct plane tags among the images.
    """
    if K is None:
        K = len({img.plane for img in images})
    if len(images) < K:
        raise InsufficientData(f"{len(images)} images cannot form {K} clusters")
    size = encoder.config.input_size
    images = [img.resized(size) for img in images]
    latents = np.concatenate(
        [encoder.encode_batch(_pixels_tensor(images[i:i + 64])).numpy() for i in range(0, len(images), 64)]
    ).astype(np.float64)
    result = kmeans(latents, K, seed, **kmeans_kw)
    masks = np.stack([one_hot(img.mask, structures) for img in images]).astype(np.float64)
    center_masks = np.stack([masks[result.labels == i].mean(0) for i in range(K)])
    assignments = {img.image_id: int(c) for img, c in zip(images, result.labels)}
    meta = {
        "seed": int(seed),
        "objective_history": result.objective_history,
        "cluster_sizes": np.bincount(result.labels, minlength=K).tolist(),
    }
    return PriorAtlas(
        result.centers.astype(np.float32),
        center_masks.astype(np.float32),
        assignments,
        encoder,
        encoder.state_hash(),
        meta,
    )


def contingency_table(atlas: PriorAtlas, images: Sequence[LabeledImage]) -> dict:
    """Cluster index -> {plane: count} for images recorded in the atlas."""
    table = {i: {} for i in range(atlas.K)}
    for img in images:
        c = atlas.cluster_assignments.get(img.image_id)
        if c is not None:
            table[c][img.plane.value] = table[c].get(img.plane.value, 0) + 1
    return table
