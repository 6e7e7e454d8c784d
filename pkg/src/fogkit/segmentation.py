"""A small per-pixel segmentation model standing in for a deep network.

:class:`ToyTrainer` is multinomial logistic regression on local features:
the pixel color, box-filtered color means at three scales, local luminance
spread and normalized image position.  Training minimizes the mean cross
entropy plus an L2 penalty with L-BFGS on a fixed pixel sample, so the
training loss never increases from one epoch to the next.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage, optimize
from scipy.special import logsumexp

from .core import as_rgb

VOID = 255
TRAINER_FORMAT = "fogkit-toy-trainer"
TRAINER_VERSION = 1
WINDOW_RADII = (2, 5, 12)


class SegmentationModel(Protocol):
    def predict(self, image: np.ndarray) -> np.ndarray: ...


def pixel_features(image) -> np.ndarray:
    """(H, W, D) feature stack; all entries are O(1)."""
    img = as_rgb(image)
    H, W = img.shape[:2]
    feats = [img]
    for r in WINDOW_RADII:
        feats.append(ndimage.uniform_filter(img, size=(2 * r + 1, 2 * r + 1, 1), mode="nearest"))
    lum = img.mean(axis=2)
    m1 = ndimage.uniform_filter(lum, 5, mode="nearest")
    m2 = ndimage.uniform_filter(lum * lum, 5, mode="nearest")
    feats.append(np.sqrt(np.maximum(m2 - m1 * m1, 0.0))[..., None] * 4.0)
    y = ((np.arange(H) + 0.5) / H)[:, None] * np.ones((1, W))
    x = np.ones((H, 1)) * ((np.arange(W) + 0.5) / W)[None, :]
    feats.append(np.stack([y, x, y * y, (x - 0.5) ** 2 * 4.0], axis=2))
    return np.concatenate(feats, axis=2)


NUM_FEATURES = 3 + 3 * len(WINDOW_RADII) + 1 + 4


class ToyTrainer:
    """Per-pixel multinomial logistic regression over a fixed class list.

    Args:
        classes: class ids the model can output, in logit order.
        l2: weight decay on the non-bias weights.
        pixels_per_image: pixels sampled from each training image.
        iters_per_epoch: L-BFGS iterations per epoch.
        seed: pixel-sampling seed.
    """

    def __init__(self, classes: Sequence[int], l2: float = 1e-4, pixels_per_image: int = 400,
                 iters_per_epoch: int = 25, seed: int = 0):
        self.classes = tuple(int(c) for c in classes)
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ValueError("need at least two distinct classes")
        self.l2 = float(l2)
        self.pixels_per_image = int(pixels_per_image)
        self.iters_per_epoch = int(iters_per_epoch)
        self.seed = int(seed)
        self.weights = np.zeros((NUM_FEATURES + 1, len(self.classes)))

    # -- inference --------------------------------------------------------
    def logits(self, image) -> np.ndarray:
        f = pixel_features(image)
        return f @ self.weights[:-1] + self.weights[-1]

    def predict_proba(self, image) -> np.ndarray:
        z = self.logits(image)
        return np.exp(z - logsumexp(z, axis=2, keepdims=True))

    def predict(self, image) -> np.ndarray:
        return np.asarray(self.classes)[np.argmax(self.logits(image), axis=2)]

    # -- training ---------------------------------------------------------
    def sample_pixels(self, samples: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
        """Fixed pixel sample (features with bias column, class indices).

        Void pixels and classes outside :attr:`classes` are skipped.
        """
        xs, ys = [], []
        for n, (image, labels) in enumerate(samples):
            labels = np.asarray(labels, dtype=np.int64)
            lut = np.full(max(int(labels.max()), max(self.classes)) + 1, -1, dtype=np.int64)
            lut[list(self.classes)] = np.arange(len(self.classes))
            y = lut[labels].ravel()
            ok = np.flatnonzero(y >= 0)
            if ok.size == 0:
                continue
            rng = np.random.default_rng([self.seed, n])
            pick = ok[rng.integers(0, ok.size, min(self.pixels_per_image, ok.size))]
            f = pixel_features(image).reshape(-1, NUM_FEATURES)[pick]
            xs.append(np.concatenate([f, np.ones((pick.size, 1))], axis=1))
            ys.append(y[pick])
        if not xs:
            raise ValueError("no labeled pixels in the training samples")
        return np.concatenate(xs), np.concatenate(ys)

    def loss_and_grad(self, w_flat: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        W = w_flat.reshape(self.weights.shape)
        z = X @ W
        lse = logsumexp(z, axis=1)
        n = X.shape[0]
        loss = float(np.mean(lse - z[np.arange(n), y]))
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        grad = X.T @ p / n
        reg = W.copy()
        reg[-1] = 0.0
        loss += 0.5 * self.l2 * float((reg * reg).sum())
        grad += self.l2 * reg
        return loss, grad.ravel()

    def loss(self, X, y) -> float:
        return self.loss_and_grad(self.weights.ravel(), X, y)[0]

    def fit_arrays(self, X: np.ndarray, y: np.ndarray, epochs: int) -> list[float]:
        """Run ``epochs`` L-BFGS rounds from the current weights; returns the
        loss after each epoch, preceded by the starting loss."""
        losses = [self.loss(X, y)]
        for _ in range(int(epochs)):
            res = optimize.minimize(self.loss_and_grad, self.weights.ravel(), args=(X, y), jac=True,
                                    method="L-BFGS-B", options={"maxiter": self.iters_per_epoch})
            if res.fun <= losses[-1]:
                self.weights = res.x.reshape(self.weights.shape)
                losses.append(float(res.fun))
            else:  # line search failed to improve: keep the previous solution
                losses.append(losses[-1])
        return losses

    def train(self, samples: Sequence[tuple[np.ndarray, np.ndarray]], epochs: int) -> list[float]:
        """Train on ``(image, class map)`` pairs; zero epochs is a no-op."""
        if epochs <= 0:
            return []
        X, y = self.sample_pixels(samples)
        return self.fit_arrays(X, y, epochs)

    # -- state ------------------------------------------------------------
    def clone(self) -> "ToyTrainer":
        other = ToyTrainer(self.classes, self.l2, self.pixels_per_image, self.iters_per_epoch, self.seed)
        other.weights = self.weights.copy()
        return other

    def to_dict(self) -> dict:
        return {
            "format": TRAINER_FORMAT,
            "version": TRAINER_VERSION,
            "classes": list(self.classes),
            "l2": self.l2,
            "pixels_per_image": self.pixels_per_image,
            "iters_per_epoch": self.iters_per_epoch,
            "seed": self.seed,
            "weights": [[float(v) for v in row] for row in self.weights],
        }

    @classmethod
    def from_dict(cls, meta: dict) -> "ToyTrainer":
        if meta.get("format") != TRAINER_FORMAT or meta.get("version") != TRAINER_VERSION:
            raise ValueError("not a version-1 toy trainer state")
        model = cls(meta["classes"], meta["l2"], meta["pixels_per_image"], meta["iters_per_epoch"], meta["seed"])
        w = np.asarray(meta["weights"], dtype=np.float64)
        if w.shape != model.weights.shape:
            raise ValueError(f"weight shape {w.shape} does not match {model.weights.shape}")
        model.weights = w
        return model

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ToyTrainer":
        return cls.from_dict(json.loads(Path(path).read_text()))
