import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn

DEFAULT_STAGES = ((1000, 0.99), (2000, 0.999), (None, 0.9999))


@dataclass(frozen=True)
class EmaSchedule:
    """Piecewise-constant teacher momentum keyed on the optimizer step.

    Each stage ``(threshold, alpha)`` applies while ``step < threshold``; the
    last stage has no threshold.
    """
    stages: Tuple[Tuple[Optional[int], float], ...] = DEFAULT_STAGES

    def __post_init__(self):
        stages = tuple((None if t is None else int(t), float(a)) for t, a in self.stages)
        object.__setattr__(self, 'stages', stages)
        if not stages or stages[-1][0] is not None or any(t is None for t, _ in stages[:-1]):
            raise ValueError("Only the last EMA stage may be open-ended")
        bounded = [t for t, _ in stages[:-1]]
        if any(b <= a for a, b in zip(bounded, bounded[1:])):
            raise ValueError(f"EMA thresholds must strictly increase: {bounded}")
        alphas = [a for _, a in stages]
        if any(not 0 < a < 1 for a in alphas) or any(b < a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"EMA alphas must lie in (0, 1) and never decrease: {alphas}")

    @classmethod
    def from_config(cls, stages: Sequence[Sequence]) -> 'EmaSchedule':
        return cls(tuple(tuple(stage) for stage in stages))

    def alpha_at(self, step: int) -> float:
        for threshold, alpha in self.stages:
            if threshold is None or step < threshold:
                return alpha
        raise AssertionError('unreachable')


@dataclass
class TrainState:
    student: nn.Module
    teacher: nn.Module
    optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0
    epoch: int = 0
    best_dice: float = -math.inf
    epochs_since_improvement: int = 0
    last_alpha: float = field(default=math.nan)


def make_teacher(student: nn.Module) -> nn.Module:
    teacher = copy.deepcopy(student)
    for param in teacher.parameters():
        param.requires_grad_(False)
    return teacher.eval()


@torch.no_grad()
def ema_update(state: TrainState, schedule: EmaSchedule) -> TrainState:
    """theta <- alpha * theta + (1 - alpha) * phi with alpha taken from the current step."""
    alpha = schedule.alpha_at(state.step)
    for teacher_param, student_param in zip(state.teacher.parameters(), state.student.parameters()):
        teacher_param.mul_(alpha).add_(student_param.detach(), alpha=1.0 - alpha)
    for teacher_buffer, student_buffer in zip(state.teacher.buffers(), state.student.buffers()):
        teacher_buffer.copy_(student_buffer)
    state.last_alpha = alpha
    return state
