"""Task registry, worker pool, failure injection and phase checkpoints."""

from .checkpoint import CheckpointStore, ResumePoint, checkpoint_load, checkpoint_write
from .failures import FailurePlan, FailureRule
from .registry import (GLOBAL_TASK, LEGAL_TRANSITIONS, Assignment, Done, Event, Registry, Task,
                       TaskKind, TaskState, Wait)
from .runtime import RunReport, execute_primitive, run_pipeline, static_partition_mode, write_outputs

__all__ = [
    "Assignment", "CheckpointStore", "Done", "Event", "FailurePlan", "FailureRule", "GLOBAL_TASK",
    "LEGAL_TRANSITIONS", "Registry", "ResumePoint", "RunReport", "Task", "TaskKind", "TaskState", "Wait",
    "checkpoint_load", "checkpoint_write", "execute_primitive", "run_pipeline", "static_partition_mode",
    "write_outputs",
]
