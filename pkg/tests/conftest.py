"""Shared fixtures: preset twin runs are expensive, so they are executed
once per session and shared between the module tests and the acceptance
suite."""

import pytest

from vptwin import harness, presets

_TWIN_CACHE = {}


@pytest.fixture(scope="session")
def preset_twin():
    """Factory returning the cached TwinResult for a bundled preset name."""

    def get(name):
        if name not in _TWIN_CACHE:
            _TWIN_CACHE[name] = harness.run_twin_config(presets.bundled(name))
        return _TWIN_CACHE[name]

    return get
