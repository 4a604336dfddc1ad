"""Shared fixtures for the test suite."""

import pytest

from oodseg.synth import build_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small corpus sized so every generated object still fits the scenes."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    build_corpus(6, 2, 3, "styleA", seed=5, out_dir=root, height=64, width=96)
    return root
