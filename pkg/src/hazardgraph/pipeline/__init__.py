"""Stage orchestration and the command line."""

from .config import PipelineConfig, build_config
from .stages import Pipeline, StageArtifact, StageResult

__all__ = ["Pipeline", "PipelineConfig", "StageArtifact", "StageResult", "build_config"]
