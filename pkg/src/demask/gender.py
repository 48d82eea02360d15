"""Binary gender classification of masked faces.

A pluggable convolutional backbone feeds a fully connected head (ReLU +
batch normalization per hidden layer, single sigmoid output). The output
is the probability of the male class; label = male iff p >= threshold.
"""

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError, TrainingError
from .imaging import ImageTensor, load_image
from .synthdata import Manifest

# Accuracy reported for the full-scale training regime (pretrained backbone,
# ~90k-image corpus). Desk-scale runs do not target this number.
FULL_SCALE_REFERENCE_ACCURACY = 0.8812


@dataclass(frozen=True)
class GenderClassifierConfig:
    input_size: int = 256
    backbone: str = "smallcnn"
    head_layers: tuple = (256, 64)
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.head_layers:
            raise ConfigError("head_layers must name at least one hidden width")


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


class SmallCnnBackbone(nn.Module):
    """4 strided conv blocks (32 -> 256 channels) with global average pooling."""

    feature_dim = 256

    def __init__(self):
        super().__init__()
        chans = (32, 64, 128, 256)
        layers = []
        in_ch = 3
        for ch in chans:
            layers += [nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                       _norm(ch), nn.ReLU(inplace=True)]
            in_ch = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


BACKBONES = {"smallcnn": SmallCnnBackbone}


class GenderClassifier(nn.Module):
    def __init__(self, config: GenderClassifierConfig):
        super().__init__()
        self.config = config
        try:
            self.backbone = BACKBONES[config.backbone]()
        except KeyError:
            raise ConfigError(f"unknown backbone {config.backbone!r}; "
                              f"known: {sorted(BACKBONES)}") from None
        head = []
        in_dim = self.backbone.feature_dim
        for width in config.head_layers:
            head += [nn.Linear(in_dim, width), nn.ReLU(inplace=True),
                     nn.BatchNorm1d(width)]
            in_dim = width
        head.append(nn.Linear(in_dim, 1))
        self.head = nn.Sequential(*head)

    def forward(self, x):
        """Probability of the male class, shape (B,)."""
        return torch.sigmoid(self.head(self.backbone(x))).squeeze(1)


def build_classifier(config: GenderClassifierConfig = GenderClassifierConfig()):
    return GenderClassifier(config)


def _image_batch(images, size):
    arr = np.stack([np.ascontiguousarray(img.data, dtype=np.float32) for img in images])
    t = torch.from_numpy(arr).permute(0, 3, 1, 2)
    if t.shape[1] == 1:
        t = t.expand(-1, 3, -1, -1)
    if t.shape[-1] != size or t.shape[-2] != size:
        raise ShapeMismatchError(f"image batch is {tuple(t.shape[-2:])}, "
                                 f"classifier expects {size}")
    return t


def classify(model: GenderClassifier, image: ImageTensor, threshold: float | None = None):
    """Classify one image; returns (probability_of_male, label)."""
    if threshold is None:
        threshold = model.config.threshold
    x = _image_batch([image], model.config.input_size)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        p = float(model(x)[0])
    if was_training:
        model.train()
    return p, ("male" if p >= threshold else "female")


@dataclass
class GenderTrainResult:
    model: GenderClassifier
    val_accuracy: float
    loss_history: list


def _load_labeled(manifest: Manifest, size: int):
    images, labels = [], []
    for e in manifest.entries:
        if e.gender is None:
            raise TrainingError(f"unlabeled entry {e.masked} in training manifest")
        images.append(load_image(e.masked, size))
        labels.append(1.0 if e.gender == "male" else 0.0)
    return _image_batch(images, size), torch.tensor(labels, dtype=torch.float32)


def train_classifier(train: Manifest, val: Manifest,
                     config: GenderClassifierConfig = GenderClassifierConfig(),
                     epochs: int = 20, batch_size: int = 16, lr: float = 1e-4,
                     seed: int = 0) -> GenderTrainResult:
    """Adam + binary cross-entropy on sigmoid outputs.

    Keeps the weights of the best validation-accuracy epoch. Raises
    TrainingError when the training manifest holds a single class.
    """
    torch.manual_seed(seed)
    x_train, y_train = _load_labeled(train, config.input_size)
    if y_train.min() == y_train.max():
        raise TrainingError("training manifest contains a single gender class")
    x_val, y_val = _load_labeled(val, config.input_size)

    model = build_classifier(config)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    best_acc = -1.0
    best_state = None
    history = []
    order_rng = np.random.default_rng(seed)
    n = len(y_train)
    for epoch in range(epochs):
        model.train()
        perm = order_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            probs = model(x_train[idx])
            loss = nn.functional.binary_cross_entropy(probs, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss))
        history.append(float(np.mean(epoch_losses)))
        model.eval()
        with torch.no_grad():
            preds = model(x_val) >= config.threshold
        acc = float((preds == (y_val >= 0.5)).float().mean())
        if acc > best_acc:
            best_acc = acc
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return GenderTrainResult(model, best_acc, history)
