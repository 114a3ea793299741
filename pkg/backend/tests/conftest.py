"""Pytest config: make backend/ importable the same way the CLI runs (from backend/)."""

import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs; set RUN_SLOW_TESTS=1 to execute")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RUN_SLOW_TESTS") == "1":
        return
    skip_slow = pytest.mark.skip(reason="slow; set RUN_SLOW_TESTS=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
