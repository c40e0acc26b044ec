# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses

from typing import TYPE_CHECKING, Dict, List

import mcsim._timefault

from mcsim._model import BadLevel, SchedControl, Thread, ThreadState


if TYPE_CHECKING:  # pragma: no cover
    import mcsim._kernel


@dataclasses.dataclass
class CriticalityState():
    level: int
    # dicts used as insertion-ordered sets of thread ids
    queues: List[Dict[str, None]]


class Criticality():
    '''System criticality level and the per-level thread queues.

    Threads at or above the system level ``C`` run at ``base | C << Np``,
    which puts all of them above every thread below ``C``.
    '''
    def __init__(self, kernel: mcsim._kernel.Kernel) -> None:
        self._kernel = kernel
        self.state = CriticalityState(0, [{} for _ in range(kernel.config.criticality_levels)])

    @property
    def level(self) -> int:
        return self.state.level

    def effective_priority(self, thread: Thread) -> int:
        level = self.state.level
        if level and thread.criticality >= level:
            return thread.base_priority | level << self._kernel.config.priority_bits
        return thread.base_priority

    def enlist(self, thread: Thread) -> None:
        self.state.queues[thread.criticality][thread.id] = None
        self._kernel.ledger['crit-enqueue'] += 1

    def delist(self, thread: Thread) -> None:
        if self.state.queues[thread.criticality].pop(thread.id, 0) is None:
            self._kernel.ledger['crit-dequeue'] += 1

    def move(self, thread: Thread, criticality: int) -> None:
        enlisted = thread.id in self.state.queues[thread.criticality]
        if enlisted:
            self.delist(thread)
        thread.criticality = criticality
        if enlisted:
            self.enlist(thread)

    def set_system_criticality(self, actor: str, level: int) -> int:
        '''Switch the system criticality; returns the number of threads at or above the new level.'''
        kernel = self._kernel
        kernel.authority.require(actor, SchedControl())
        levels = kernel.config.criticality_levels
        if not 0 <= level < levels:
            raise BadLevel(f'Criticality {level} is outside [0, {levels - 1}]')
        old = self.state.level
        # levels below the new one only need revisiting if the old level boosted them
        start = old if 0 < old < level else level
        self.state.level = level
        boosted = visited = moved = 0
        for criticality in range(start, levels):
            for thread_id in self.state.queues[criticality]:
                thread = kernel.threads[thread_id]
                visited += 1
                if kernel.sched.reprioritise(thread, self.effective_priority(thread)):
                    moved += 1
                if criticality >= level:
                    boosted += 1
        kernel.ledger['crit-visit'] += visited
        kernel.ledger['crit-boost'] += moved
        kernel.record('crit-switch', actor, detail={
            'old': str(old), 'new': str(level), 'boosted': str(boosted), 'ops': str(visited + moved),
        })
        if level > old:
            self._borrowed_faults(level)
        return boosted

    def _borrowed_faults(self, level: int) -> None:
        kernel = self._kernel
        runnable = (ThreadState.RUNNING, ThreadState.READY, ThreadState.OUT_OF_BUDGET)
        for criticality in range(level, kernel.config.criticality_levels):
            for thread_id in list(self.state.queues[criticality]):
                thread = kernel.threads[thread_id]
                if thread.state not in runnable or thread.timeout_handler is None:
                    continue
                if thread.current_sc is None or thread.current_sc == thread.home_sc:
                    continue
                owner = kernel.scs[thread.current_sc].home_thread
                if owner is None or kernel.threads[owner].criticality >= level:
                    continue
                kernel.record('borrowed-sc-fault', thread.id, thread.current_sc, detail={'owner': owner})
                kernel.faults.raise_timeout(thread, mcsim._timefault.FaultReason.CRITICALITY_SWITCH)

    def snapshot(self) -> Dict[str, object]:
        return {
            'level': self.state.level,
            'queues': [list(queue) for queue in self.state.queues],
        }
