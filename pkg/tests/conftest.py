import numpy as np
import pytest

from sbssl.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Dim-8, depth-2 encoder on 16x16 images with 8x8 patches (4 patch tokens)."""
    return EncoderConfig(embed_dim=8, depth=2, heads=2, image_size=16, patch_size=8, dtype="float64")


ACCEPTANCE = []  # (number, name, passed, detail) filled in by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {name}: {detail}")
