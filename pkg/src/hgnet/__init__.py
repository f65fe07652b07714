"""Hierarchical feature-guided occupancy-flow prediction."""
from .model import HGNet, ModelConfig, stack_samples
from .scenegen import SceneConfig, SceneSample, simulate_scene

__all__ = ["HGNet", "ModelConfig", "SceneConfig", "SceneSample", "simulate_scene", "stack_samples"]
__version__ = "0.1.0"
