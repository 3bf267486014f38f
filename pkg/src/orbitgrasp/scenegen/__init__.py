"""Synthetic primitive scenes, depth rendering, the grasp oracle and dataset files."""
from .dataset import DataConfig, generate_dataset, read_dataset, write_dataset
from .oracle import GraspOracle, OracleResult, grasp_oracle
from .render import CameraSpec, camera_rig, observe, render_depth
from .scene import Scene, SceneSpec, spawn_scene
from .shapes import Primitive
