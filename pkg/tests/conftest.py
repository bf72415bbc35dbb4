from __future__ import annotations

import pytest


@pytest.fixture(scope="session")
def scene10():
    """10 m crater, near rim 10 m ahead, noise-free terrain."""
    from craterloc.terrain import approach_scene

    return approach_scene(10.0, 10.0, 180.0, seed=3, roughness=0.0)
