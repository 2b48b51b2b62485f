import numpy as np
import pytest

from graft.network import ArchitectureConfig, TransformerWeights
from graft.scene import SpatialIndex
from graft.synth import build_toy_model, synthesize_scenario


@pytest.fixture(scope="session")
def toy_model():
    return build_toy_model()


@pytest.fixture(scope="session")
def span_model():
    return build_toy_model(exact_span=True)


@pytest.fixture(scope="session")
def scenario():
    return synthesize_scenario(0, difficulty=1.0, kind="standing")


@pytest.fixture(scope="session")
def scene_index(scenario):
    return SpatialIndex(scenario.scene)


@pytest.fixture(scope="session")
def micro_weights():
    return TransformerWeights.init_random(ArchitectureConfig.micro(), 0)


@pytest.fixture(scope="session")
def active_micro_weights():
    """Micro weights with non-zero decoder output layers (non-noop network)."""
    w = TransformerWeights.init_random(ArchitectureConfig.micro(), 3)
    rng = np.random.default_rng(99)
    tensors = dict(w.tensors)
    for name in tensors:
        if name.startswith("heads/") and name.endswith("w1"):
            tensors[name] = 0.05 * rng.standard_normal(tensors[name].shape)
    return TransformerWeights(w.arch, tensors)


def random_state(rng, translation=(0.0, 0.1, 2.5), rot_scale=1.0):
    """A valid random HumanState with proper rotation blocks."""
    from graft.body import HumanState
    from graft.rotation import matrix_to_rot6d, random_rotation_matrix

    state = HumanState.rest()
    state.translation = np.asarray(translation, dtype=np.float64) + 0.05 * rng.standard_normal(3)
    state.shape = 0.2 * rng.standard_normal(10)
    if rot_scale > 0:
        state.global_orient = matrix_to_rot6d(random_rotation_matrix(rng))
        state.body_pose = matrix_to_rot6d(random_rotation_matrix(rng, (21,)))
        state.left_hand_pose = matrix_to_rot6d(random_rotation_matrix(rng, (15,)))
        state.right_hand_pose = matrix_to_rot6d(random_rotation_matrix(rng, (15,)))
    return state
