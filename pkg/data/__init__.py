"""
Data package: scene files, semantic schemes, instance centers and synthetic scenes
"""
from .instances import centers_per_point, compute_instance_centers, offset_loss
from .scene_generator import SynthConfig, SynthScene, density_profile, gen_features, gen_scene
from .scene_loader import SceneDataset, read_labels, read_points, read_scene, write_labels, write_scene
from .scene_validator import SceneValidator
from .semantic_scheme import load_scheme, synthetic_scheme

__all__ = [
    'centers_per_point', 'compute_instance_centers', 'offset_loss',
    'SynthConfig', 'SynthScene', 'density_profile', 'gen_features', 'gen_scene',
    'SceneDataset', 'read_labels', 'read_points', 'read_scene', 'write_labels', 'write_scene',
    'SceneValidator', 'load_scheme', 'synthetic_scheme',
]
