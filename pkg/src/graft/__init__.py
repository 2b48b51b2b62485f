"""Iterative geometric refinement of parametric human bodies against scenes."""

from .body import BodyModel, HumanState, PosedMesh, absorb_scale, compute_template_offset, forward
from .engine import RefinementConfig, Trajectory, metric_align, refine, refine_step
from .errors import GraftError
from .metrics import EvalReport, contact_labels, contact_prf, d2s, evaluate, pa_mpjpe, v2s
from .network import ArchitectureConfig, InteractionGradient, TransformerWeights, decode, transformer_forward
from .probes import FourierEncoder, ProbeRecord, compute_probes, probe
from .rotation import matrix_to_rot6d, rot6d_to_matrix
from .scene import CameraIntrinsics, ScenePointCloud, SpatialIndex, estimate_normals, load_scene, project
from .stateio import read_states, write_states
from .synth import build_toy_model, synthesize_scenario
from .tokens import HsiTokenSet, VisualFeatureGrids, sample_anchor_features, tokenize
from .training import (
    Adam,
    LossWeights,
    PerturbationSpec,
    TrainSchedule,
    micro_train,
    rollout_supervised_steps,
    sample_query,
    step_loss,
)

__version__ = "0.1.0"
