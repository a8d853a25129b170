from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def write_corpus(root, n_per_class, seed, means=(120.0, 155.0), base_sd=20.0, pixel_sd=40.0, side=32, fmt="png"):
    """Write UTKFace-style ``<age>_<gender>_<race>_<id>.<fmt>`` images whose brightness depends on the gender label."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    i = 0
    for label, n in enumerate(n_per_class):
        for _ in range(n):
            base = rng.normal(means[label], base_sd)
            img = np.clip(rng.normal(base, pixel_sd, size=(side, side, 3)), 0, 255).astype(np.uint8)
            name = root / f"{20 + i % 50}_{label}_{i % 5}_{i:04d}.{fmt}"
            if fmt == "raw":
                from oeshift.data import write_raw

                write_raw(name, img)
            else:
                Image.fromarray(img).save(name)
            i += 1
    return root


@pytest.fixture
def corpus(tmp_path):
    def make(name, n_per_class, seed, **kw):
        return write_corpus(tmp_path / name, n_per_class, seed, **kw)

    return make


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
