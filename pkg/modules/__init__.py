# TAGS detector modules
from .data_io import AnnotationSet, FeatureSequence, read_annotations, read_features
from .encoder import MultiScaleEncoder
from .heads import ClassificationHead, MaskHead
from .labels import assign_targets
from .losses import LossWeights, total_loss

__all__ = ['AnnotationSet', 'FeatureSequence', 'read_annotations', 'read_features',
           'MultiScaleEncoder', 'ClassificationHead', 'MaskHead', 'assign_targets',
           'LossWeights', 'total_loss']
