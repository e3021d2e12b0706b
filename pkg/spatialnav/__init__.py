"""
Landmark memory plus a voxel cognitive map for zero-shot embodied navigation.
"""

from .agent import Agent, FrontierSearchAgent, InstructionTask, Memories, NavigationOutcome, QuestionTask
from .cognitive_map import CognitiveMap
from .config import AgentConfig, EndpointSettings, config_hash, load_config
from .errors import (
    AdapterParseError,
    ConfigError,
    ContractViolation,
    EpisodeFinishedError,
    InvalidDepthError,
    OutOfBoundsError,
    PersistenceError,
    RetrievalUnavailableError,
    SpatialNavError,
)
from .landmark_memory import Landmark, LandmarkStore
from .working_memory import CandidateGoal, GoalSpec

__version__ = "0.1.0"
