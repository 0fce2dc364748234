"""Superpixel-driven tissue segmentation and wounded-area quantification
for dermatological ulcer photographs.

The package splits an image into SLIC superpixels, labels each superpixel as
not-wound / granulation / fibrin / necrosis -- either through the classic
MPEG-7 descriptor + classifier route or through a small convolutional
network trained end to end on the patches -- and fuses the labels back into
a per-pixel tissue mask whose areas are quantified exactly.
"""

from .imagecore import (Patch, RgbImage, TissueClass, convert_color, crop_patch,
                        load_image)
from .slic import SlicParams, SuperpixelPartition, partition
from .mpeg7 import FeatureVector, extract
from .pca import PcaModel, fit as fit_pca, transform as pca_transform
from .classifiers import TrainingSet, train as train_classifier, predict as predict_classifier
from .neural import NetworkSpec, TrainConfig, NetworkModel, train as train_network, \
    predict as predict_network, gradient_check
from .augment import AugmentPolicy, augment_patch, augment_stream
from .pipeline import (AreaReport, DescriptorClassifier, PatchNetwork,
                       SegmentationResult, mask_error, quantify_areas, segment_image)
from .evaluation import (ConfusionMatrix, MetricReport, RankTestReport,
                         compute_metrics, cross_validate, friedman_nemenyi)

__version__ = "0.1.0"

__all__ = [
    "AreaReport", "AugmentPolicy", "ConfusionMatrix", "DescriptorClassifier",
    "FeatureVector", "MetricReport", "NetworkModel", "NetworkSpec", "Patch",
    "PatchNetwork", "PcaModel", "RankTestReport", "RgbImage",
    "SegmentationResult", "SlicParams", "SuperpixelPartition", "TissueClass",
    "TrainConfig", "TrainingSet", "augment_patch", "augment_stream",
    "compute_metrics", "convert_color", "crop_patch", "cross_validate",
    "extract", "fit_pca", "friedman_nemenyi", "gradient_check", "load_image",
    "mask_error", "partition", "pca_transform", "predict_classifier",
    "predict_network", "quantify_areas", "segment_image", "train_classifier",
    "train_network",
]
