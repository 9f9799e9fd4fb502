"""
Analysis package: fusion, panoptic metrics and bandwidth statistics
"""
from .bandwidth_analyzer import BandwidthAnalyzer
from .fusion import consensus_fusion
from .panoptic_metrics import PanopticEvaluator, PanopticReport, miou, panoptic_quality

__all__ = ['BandwidthAnalyzer', 'consensus_fusion', 'PanopticEvaluator', 'PanopticReport', 'miou',
           'panoptic_quality']
