import numpy as np
import pytest

from demask.imaging import BinaryMask, ImageTensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, size=32, channels=3, dtype=np.float64):
    return ImageTensor(rng.uniform(0.0, 1.0, size=(size, size, channels)).astype(dtype))


def random_mask(rng, size=32, p=0.3):
    return BinaryMask((rng.uniform(size=(size, size)) < p).astype(np.float32))


def synthetic_face(rng, size=64, skin=0.8):
    """A crude face-like image: oval skin region, darker eyes and mouth."""
    y, x = np.mgrid[0:size, 0:size]
    cy, cx = size / 2.0, size / 2.0
    img = np.full((size, size, 3), 0.15, dtype=np.float64)
    oval = ((y - cy) / (0.45 * size)) ** 2 + ((x - cx) / (0.33 * size)) ** 2 <= 1.0
    tint = rng.uniform(-0.05, 0.05, size=3)
    img[oval] = np.clip(np.array([skin, skin * 0.82, skin * 0.7]) + tint, 0, 1)
    for ex in (cx - 0.13 * size, cx + 0.13 * size):
        eye = (y - (cy - 0.12 * size)) ** 2 + (x - ex) ** 2 <= (0.035 * size) ** 2
        img[eye] = 0.05
    mouth = (np.abs(y - (cy + 0.22 * size)) < 0.02 * size) & (np.abs(x - cx) < 0.1 * size)
    img[mouth] = [0.45, 0.1, 0.1]
    noise = rng.normal(0, 0.01, size=img.shape)
    return ImageTensor(np.clip(img + noise, 0.0, 1.0))


def face_landmarks(size=64):
    """98 normalized points tracing a face-like layout.

    Indices 0..32 run along the jaw from left temple to right temple (16 is
    the chin), 51..54 descend the nose bridge; the rest fill eye/mouth areas.
    """
    pts = np.zeros((98, 2), dtype=np.float64)
    t = np.linspace(np.pi, 2 * np.pi, 33)
    pts[0:33, 0] = 0.5 + 0.33 * np.cos(t + np.pi / 2)
    pts[0:33, 1] = 0.5 - 0.45 * np.sin(t + np.pi / 2)
    for k in range(33, 51):
        a = (k - 33) / 17.0
        pts[k] = (0.3 + 0.4 * a, 0.3)
    for k, frac in zip(range(51, 55), np.linspace(0.42, 0.58, 4)):
        pts[k] = (0.5, frac)
    for k in range(55, 60):
        pts[k] = (0.44 + 0.03 * (k - 55), 0.62)
    for k in range(60, 76):
        a = (k - 60) / 15.0
        pts[k] = (0.35 + 0.3 * a, 0.38)
    for k in range(76, 96):
        a = (k - 76) / 19.0
        pts[k] = (0.4 + 0.2 * a, 0.72)
    pts[96] = (0.37, 0.38)
    pts[97] = (0.63, 0.38)
    return np.clip(pts, 0.0, 1.0)
