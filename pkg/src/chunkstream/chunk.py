"""Absolutely indexed action chunks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .sim import EndEffectorCommand

if TYPE_CHECKING:
    from .expert import Phase


@dataclass(frozen=True)
class ActionChunk:
    """Commands for absolute ticks ``start_tick .. start_tick + horizon``."""

    start_tick: int
    horizon: int
    actions: tuple[EndEffectorCommand, ...]
    delivery_tick: int | None = None
    phases: tuple[Phase, ...] | None = None  # phase in effect for each action
    next_states: tuple[Any, ...] | None = None  # policy controller state after each action

    def __post_init__(self):
        if len(self.actions) != self.horizon + 1:
            raise ValueError(f"chunk needs {self.horizon + 1} actions, got {len(self.actions)}")
        if self.delivery_tick is not None and self.delivery_tick < self.start_tick:
            raise ValueError("delivery_tick precedes start_tick")

    @property
    def end_tick(self) -> int:
        return self.start_tick + self.horizon

    def covers(self, tick: int) -> bool:
        return self.start_tick <= tick <= self.start_tick + self.horizon

    def action_at(self, tick: int) -> EndEffectorCommand:
        return self.actions[tick - self.start_tick]

    def delivered(self, tick: int) -> "ActionChunk":
        return dataclasses.replace(self, delivery_tick=tick)
