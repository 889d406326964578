"""Shared scenario spec builders for the test suite."""
import copy

import pytest

ROOM_SPEC = {
    "name": "test-room",
    "kind": "room",
    "seed": 7,
    "duration_s": 12.0,
    "camera": {"fx": 460.0, "fy": 460.0, "cx": 320.0, "cy": 240.0,
               "width": 640, "height": 480, "max_matches": 140},
    "scene": {"n_points": 900, "far_points": 50},
    "trajectory": {"speed": 1.0, "path_a": 2.2, "path_b": 1.5},
    "noise": {"pixel_sigma": 0.0, "outlier_rate": 0.0, "match_dropout": 0.0},
    "mocap": {"drift_translation_sigma": 0.0, "drift_rotation_sigma": 0.0,
              "accel_sigma": 0.0},
    "occlusion_windows": [],
}

# Close-range capture volume: a wide-FOV camera orbiting inside a small
# point box, sight lines mostly 0.5-1.2 m. At these depths the reprojection
# term is stiff enough that the mocap priors contribute guidance, not bias.
DESK_SPEC = {
    "name": "test-desk",
    "kind": "room",
    "seed": 7,
    "duration_s": 8.0,
    "camera": {"fx": 330.0, "fy": 330.0, "cx": 320.0, "cy": 240.0,
               "width": 640, "height": 480, "max_matches": 140},
    "scene": {"n_points": 2800, "far_points": 0, "half_x": 0.85,
              "half_y": 0.85, "room_height": 1.0, "root_height": 0.5},
    "trajectory": {"speed": 0.3, "path_a": 0.45, "path_b": 0.3},
    "noise": {"pixel_sigma": 0.0, "outlier_rate": 0.0, "match_dropout": 0.0},
    "mocap": {"drift_translation_sigma": 0.0, "drift_rotation_sigma": 0.0,
              "accel_sigma": 0.0},
    "occlusion_windows": [],
}

CORRIDOR_SPEC = {
    "name": "test-corridor",
    "kind": "corridor-loop",
    "seed": 11,
    "duration_s": 46.0,
    "camera": {"fx": 460.0, "fy": 460.0, "cx": 320.0, "cy": 240.0,
               "width": 640, "height": 480, "max_matches": 140},
    "scene": {"n_points": 1300},
    "trajectory": {"speed": 1.1, "half_x": 5.0, "half_y": 3.0,
                   "corner_radius": 1.2, "corridor_width": 2.0},
    "noise": {"pixel_sigma": 0.0, "outlier_rate": 0.0, "match_dropout": 0.0},
    "mocap": {"drift_translation_sigma": 0.0, "drift_rotation_sigma": 0.0,
              "accel_sigma": 0.0},
    "occlusion_windows": [],
}


def spec_with(base, **overrides):
    """Deep-copied spec with top-level section overrides merged in."""
    spec = copy.deepcopy(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(spec.get(key), dict):
            spec[key] = {**spec[key], **val}
        else:
            spec[key] = val
    return spec


@pytest.fixture
def room_spec():
    return copy.deepcopy(ROOM_SPEC)


@pytest.fixture
def desk_spec():
    return copy.deepcopy(DESK_SPEC)


@pytest.fixture
def corridor_spec():
    return copy.deepcopy(CORRIDOR_SPEC)
