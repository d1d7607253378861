"""EfficientNet-b4 stage-feature exporter producing ONIP feature files."""

from .export import ExportManifest, StageExtractor, WeightsUnavailable, export
from .onip import read_feature_file, write_feature_file

__version__ = "0.1.0"
