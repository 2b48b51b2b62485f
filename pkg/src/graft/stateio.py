"""JSON human-state documents.

Human-readable companion to the binary tensor container: floats are emitted
with Python's shortest round-trip repr, so write -> read -> write preserves
every f64 bit.
"""

import json

import numpy as np

from .body import N_BODY_JOINTS, N_HAND_JOINTS, N_SHAPE, HumanState
from .errors import StateDocumentError
from .scene import CameraIntrinsics

SCHEMA_VERSION = 1


def _state_to_dict(state):
    return {
        "global_orient6d": state.global_orient.tolist(),
        "body_pose6d": state.body_pose.tolist(),
        "left_hand6d": state.left_hand_pose.tolist(),
        "right_hand6d": state.right_hand_pose.tolist(),
        "translation_m": state.translation.tolist(),
        "shape": state.shape.tolist(),
    }


def _state_from_dict(d):
    try:
        state = HumanState(
            global_orient=np.asarray(d["global_orient6d"], dtype=np.float64),
            body_pose=np.asarray(d["body_pose6d"], dtype=np.float64),
            left_hand_pose=np.asarray(d["left_hand6d"], dtype=np.float64),
            right_hand_pose=np.asarray(d["right_hand6d"], dtype=np.float64),
            translation=np.asarray(d["translation_m"], dtype=np.float64),
            shape=np.asarray(d["shape"], dtype=np.float64),
        )
    except KeyError as e:
        raise StateDocumentError(f"missing field {e}")
    expect = {
        "global_orient": (6,),
        "body_pose": (N_BODY_JOINTS, 6),
        "left_hand_pose": (N_HAND_JOINTS, 6),
        "right_hand_pose": (N_HAND_JOINTS, 6),
        "translation": (3,),
        "shape": (N_SHAPE,),
    }
    for name, want in expect.items():
        got = getattr(state, name).shape
        if got != want:
            raise StateDocumentError(f"{name}: expected shape {want}, got {got}")
        if not np.all(np.isfinite(getattr(state, name))):
            raise StateDocumentError(f"{name} contains non-finite values")
    return state


def write_states(path, states, intrinsics=None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "humans": [_state_to_dict(s) for s in states],
    }
    if intrinsics is not None:
        doc["intrinsics"] = intrinsics.to_dict()
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def read_states(path):
    """Returns (list of HumanState, CameraIntrinsics or None)."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise StateDocumentError(f"invalid JSON in {path}: {e}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise StateDocumentError(
            f"unsupported schema_version {doc.get('schema_version')}"
        )
    if "humans" not in doc or not isinstance(doc["humans"], list):
        raise StateDocumentError("document must contain a humans list")
    states = [_state_from_dict(d) for d in doc["humans"]]
    intrinsics = None
    if "intrinsics" in doc:
        intrinsics = CameraIntrinsics.from_dict(doc["intrinsics"])
    return states, intrinsics
