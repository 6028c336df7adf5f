"""Three parallel feature branches fused into one trainable classifier head.

Every input image runs through all three branches; the pooled feature
vectors are concatenated (paper scale: 1280 + 1664 + 768 = 3712) and fed to
batch norm, a hidden dense layer with ReLU, dropout, and the class logits
layer. Branches are frozen by default: their parameters take no gradient
and they always run in evaluation mode (running statistics untouched), so
training only ever moves the head.

Because frozen branches are pure functions of the image, their fused
features can be cached; :class:`FeatureCache` keys entries by image digest
and model fingerprint and guarantees cached values are bit-identical to a
fresh forward.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .densenet import DenseBranch, DenseConfig, build_dense
from .errors import ConfigError, ContractError
from .layers import BatchNorm, Dense, Dropout, Module, concat, relu
from .mobile import MobileBranch, MobileConfig, build_mobile
from .tensor import Tensor, softmax
from .vit import VitBranch, VitConfig, build_vit


@dataclass
class HeadConfig:
    hidden: int = 256
    dropout: float = 0.5
    num_classes: int = 2

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "dropout": self.dropout,
                "num_classes": self.num_classes}


class ClassifierHead(Module):
    """BN -> dense -> ReLU -> dropout -> class logits."""

    def __init__(self, fused_dim: int, config: HeadConfig,
                 rng: np.random.Generator, dropout_seed: int):
        self.bn = BatchNorm(fused_dim)
        self.fc1 = Dense(fused_dim, config.hidden, rng)
        self.drop = Dropout(config.dropout, seed=dropout_seed)
        self.fc2 = Dense(config.hidden, config.num_classes, rng)

    def forward(self, features: Tensor) -> Tensor:
        y = relu(self.fc1(self.bn(features)))
        return self.fc2(self.drop(y))


class EnsembleModel(Module):
    """The fused three-branch classifier."""

    def __init__(self, mobile: MobileBranch, dense: DenseBranch,
                 vit: VitBranch, head_cfg: HeadConfig,
                 rng: np.random.Generator, dropout_seed: int,
                 freeze_branches: bool = True):
        self.mobile = mobile
        self.dense = dense
        self.vit = vit
        self.fused_dim = (mobile.feature_dim + dense.feature_dim
                          + vit.feature_dim)
        self.head = ClassifierHead(self.fused_dim, head_cfg, rng, dropout_seed)
        self.num_classes = head_cfg.num_classes
        if freeze_branches:
            self.freeze_branches()

    # -- branch freezing ----------------------------------------------------

    def freeze_branches(self) -> None:
        for branch in (self.mobile, self.dense, self.vit):
            branch.freeze()

    def unfreeze_branches(self) -> None:
        for branch in (self.mobile, self.dense, self.vit):
            branch.unfreeze()

    @property
    def branches_frozen(self) -> bool:
        return all(b.is_frozen for b in (self.mobile, self.dense, self.vit))

    def trainable_parameters(self) -> list[tuple[str, "Tensor"]]:
        return [(name, p) for name, p in self.named_parameters()
                if p.requires_grad]

    # -- forward paths ------------------------------------------------------

    def _set_modes(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        for branch in (self.mobile, self.dense, self.vit):
            branch.train(training and not branch.is_frozen)
        self.head.train(training)

    def fused_features(self, images: Tensor, mode: str = "eval") -> Tensor:
        self._set_modes(mode)
        return concat([self.mobile(images), self.dense(images),
                       self.vit(images)], axis=1)

    def head_logits(self, features: Tensor, mode: str) -> Tensor:
        self._set_modes(mode)
        return self.head(features)

    def forward_logits(self, images: Tensor, mode: str) -> Tensor:
        return self.head(self.fused_features(images, mode))

    def forward(self, images: Tensor, mode: str = "eval") -> Tensor:
        """Class probabilities; rows sum to 1."""
        return softmax(self.forward_logits(images, mode), axis=-1)


def build_ensemble(mobile_cfg: MobileConfig, dense_cfg: DenseConfig,
                   vit_cfg: VitConfig, head_cfg: HeadConfig, seed: int = 0,
                   freeze_branches: bool = True) -> EnsembleModel:
    """Build all three branches and the head from one seed."""
    if not (mobile_cfg.input_size == dense_cfg.input_size
            == vit_cfg.input_size):
        raise ConfigError(
            f"branch input sizes differ: mobile {mobile_cfg.input_size}, "
            f"dense {dense_cfg.input_size}, vit {vit_cfg.input_size}")
    streams = np.random.SeedSequence(seed).spawn(5)
    mobile = build_mobile(mobile_cfg, np.random.default_rng(streams[0]))
    dense = build_dense(dense_cfg, np.random.default_rng(streams[1]))
    vit = build_vit(vit_cfg, np.random.default_rng(streams[2]))
    dropout_seed = int(np.random.default_rng(streams[4]).integers(2 ** 63))
    return EnsembleModel(mobile, dense, vit, head_cfg,
                         np.random.default_rng(streams[3]), dropout_seed,
                         freeze_branches=freeze_branches)


class FeatureCache:
    """Digest-keyed store of frozen-branch features.

    Safe for concurrent readers with exclusive writers. Keys combine the
    image content digest with the model fingerprint so a cache can never
    serve features computed by a different architecture.
    """

    def __init__(self, fingerprint: str):
        self.fingerprint = fingerprint
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def digest(image: np.ndarray) -> str:
        h = hashlib.sha256()
        h.update(str(image.shape).encode())
        h.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
        return h.hexdigest()

    def _key(self, image_digest: str) -> str:
        return f"{self.fingerprint}:{image_digest}"

    def get(self, image_digest: str) -> Optional[np.ndarray]:
        with self._lock:
            return self._store.get(self._key(image_digest))

    def put(self, image_digest: str, features: np.ndarray) -> None:
        with self._lock:
            self._store[self._key(image_digest)] = features.copy()

    def features_for(self, model: EnsembleModel,
                     images: np.ndarray) -> np.ndarray:
        """Fused features for a stack of images, computing misses in bulk."""
        digests = [self.digest(img) for img in images]
        missing = [i for i, d in enumerate(digests) if self.get(d) is None]
        if missing:
            fresh = model.fused_features(
                Tensor(images[missing]), mode="eval").data
            for row, i in enumerate(missing):
                self.put(digests[i], fresh[row])
        return np.stack([self.get(d) for d in digests])
