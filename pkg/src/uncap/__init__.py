"""Uncertainty-guided natural-language cooperation for connected vehicles:
selective state broadcast, conformal perception calibration, PMI-gated
fusion, uncertainty-scored planning and episode metrics."""

from .calibration import NonconformityModel, calibrate, fit_calibrator, prediction_band, singleton_threshold
from .engine import MODES, SimConfig, replay, run_episode, run_suite
from .fusion import FusedObject, fuse, perception_pmi, select_for_fusion
from .metrics import EpisodeMetrics, driving_score, information_gain
from .planning import MockPlanner, PlanDecision, PlanQuery, decision_uncertainty, filter_peer_messages, plan_pmi
from .protocol import BarePacket, ChannelParams, SpareConfig, make_bare_packet, spare_select, transmit
from .scenario import CavState, Detection, Scenario, load_scenario, step_kinematics, synthesize_detections

__version__ = "0.1.0"

__all__ = [
    "BarePacket", "CavState", "ChannelParams", "Detection", "EpisodeMetrics", "FusedObject", "MODES",
    "MockPlanner", "NonconformityModel", "PlanDecision", "PlanQuery", "Scenario", "SimConfig", "SpareConfig",
    "calibrate", "decision_uncertainty", "driving_score", "filter_peer_messages", "fit_calibrator", "fuse",
    "information_gain", "load_scenario", "make_bare_packet", "perception_pmi", "plan_pmi", "prediction_band",
    "replay", "run_episode", "run_suite", "select_for_fusion", "singleton_threshold", "spare_select",
    "step_kinematics", "synthesize_detections", "transmit",
]
