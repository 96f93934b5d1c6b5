import numpy as np
import pytest

from deepam.patch_pipeline import PatchDataset, extract_pairs


def wave_image(seed, h=96, w=96, waves=6, noise=0.0):
    """Sum of oriented sinusoids. Noiseless versions give low-rank patch pools,
    which keeps training problems small and fast."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / 40.0
    img = np.zeros((h, w))
    for _ in range(waves):
        fx, fy = rng.uniform(0.3, 4.0, 2)
        ph = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.2, 1.0) * np.sin(fx * xx + fy * yy + ph)
    if noise:
        img += noise * rng.standard_normal((h, w))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def dead_leaves(seed, h=120, w=120, n_shapes=60):
    """Overlapping random rectangles and discs with a light blur.

    Edge-dominated content with genuinely multi-modal patch statistics; the
    kind of data where large clustering thresholds pay off.
    """
    rng = np.random.default_rng(seed)
    img = np.full((h, w), rng.uniform(0.2, 0.8))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        v = rng.uniform()
        if rng.uniform() < 0.5:
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            rh, rw = rng.integers(4, 40, 2)
            img[r0:r0 + rh, c0:c0 + rw] = v
        else:
            cy, cx, rad = rng.integers(0, h), rng.integers(0, w), rng.integers(3, 22)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2] = v
    out = img.copy()
    out[1:-1, 1:-1] = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2]
                       + img[1:-1, 2:] + 4 * img[1:-1, 1:-1]) / 8.0
    return out


def stack_pairs(images, stride_train=3, noise_sigma=0.0, seed=0):
    parts = [extract_pairs(img, stride_train=stride_train, noise_sigma=noise_sigma,
                           noise_seed=seed + i + 1) for i, img in enumerate(images)]
    return PatchDataset(x0=np.hstack([p.x0 for p in parts]),
                        y=np.hstack([p.y for p in parts]),
                        lr_means=np.concatenate([p.lr_means for p in parts]),
                        positions=np.vstack([p.positions for p in parts]),
                        geom=parts[0].geom)


@pytest.fixture(scope="session")
def wave_dataset():
    return stack_pairs([wave_image(s) for s in range(4)])


@pytest.fixture(scope="session")
def wave_model(wave_dataset):
    """Small 2-layer model on low-rank wave data, shared across tests."""
    from deepam.model import TrainConfig, train
    return train(wave_dataset, [(48, None), (48, None)], TrainConfig(seed=0))
