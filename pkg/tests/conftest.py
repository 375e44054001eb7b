"""
Pytest configuration and shared fixtures for idtrack tests
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    """Fixed-seed generator; tests never touch global random state"""
    return np.random.default_rng(20240917)


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    """Temporary output directory, also set as IDTRACK_OUT_DIR"""
    path = tmp_path / "results"
    monkeypatch.setenv("IDTRACK_OUT_DIR", str(path))
    return path


@pytest.fixture
def tiny_equivalence_spec():
    """Equivalence spec small enough for unit-test runtimes"""
    from idtrack.harness import default_spec

    return default_spec("equivalence", trials=3, steps=12, base_seed=5)


@pytest.fixture
def tiny_colored_spec():
    """Colored rho-sweep spec with a short horizon"""
    from idtrack.harness import default_spec

    return default_spec("rho_sweep", trials=2, steps=30, base_seed=9, grid=(0.0, 0.9))


# Markers
def pytest_configure(config):
    """Register custom markers"""
    config.addinivalue_line("markers", "unit: Unit tests for individual functions")
    config.addinivalue_line("markers", "integration: Integration tests running scenarios or experiments end to end")
    config.addinivalue_line("markers", "mcp: Tests specific to MCP tool registration and the bridge")
    config.addinivalue_line("markers", "slow: Tests that take longer to run")
