# SPDX-License-Identifier: MIT

import re

import pytest

import mcsim

from mcsim._model import ThreadState
from mcsim._timefault import FaultReason, TimeoutFault

from .conftest import boot, grant_all, running


def setup(kernel, *, handler_priority=9, sched_control=('h',)):
    kernel.create_endpoint('faults')
    running(kernel, 'h', priority=handler_priority, budget=100, period=100)
    running(kernel, 'w', priority=5, budget=2, period=20, timeout_handler='faults')
    grant_all(kernel, sched_control=sched_control)
    boot(kernel, 'h', 'w')


@pytest.fixture
def faulted(kernel0):
    '''`w` ran out of budget at 2 and its handler `h` holds the fault.'''
    setup(kernel0)
    with kernel0.invocation(0):
        kernel0.ipc.recv('h', 'faults')
    kernel0.timer_interrupt(2)
    return kernel0


def test_fault_sent_to_handler(faulted):
    assert faulted.current == 'h'
    assert faulted.threads['w'].state is ThreadState.BLOCKED_ON_FAULT
    assert faulted.outcomes['h'].fault == TimeoutFault('w', 'w-sc', 'w', FaultReason.BUDGET_EXPIRED, 2)
    assert faulted.threads['h'].reply_slot.fault.faulting_thread == 'w'


def test_fault_queued_until_handler_receives(kernel0):
    setup(kernel0, handler_priority=3)
    assert kernel0.current == 'w'
    kernel0.timer_interrupt(2)
    assert kernel0.current == 'h'
    assert [item.thread for item in kernel0.endpoints['faults'].queue] == ['w']
    with kernel0.invocation(3):
        kernel0.ipc.recv('h', 'faults')
    assert kernel0.current == 'h'
    assert kernel0.outcomes['h'].fault.faulting_thread == 'w'
    assert kernel0.endpoints['faults'].queue == []


def test_plain_resume(faulted):
    with faulted.invocation(3):
        faulted.faults.handler_reply('h')
    assert faulted.threads['w'].state is ThreadState.OUT_OF_BUDGET
    assert faulted.sched.state.release.head() == (20, 'w')
    replies = [record for record in faulted.trace if record.category == 'fault-reply']
    assert replies[-1].detail == (('actions', 'resume'),)


def test_extend_budget(faulted):
    with faulted.invocation(3):
        faulted.faults.handler_reply('h', actions=(mcsim.ExtendBudget(5),))
        faulted.ipc.recv('h', 'faults')
    sc = faulted.scs['w-sc']
    assert (sc.budget, sc.remaining) == (7, 5)
    assert faulted.current == 'w'


def test_extend_beyond_period(faulted):
    before = faulted.snapshot()
    with pytest.raises(mcsim.BadParams, match=re.escape('Budget 21 would exceed the period 20 of `w-sc`')):
        with faulted.invocation(3):
            faulted.faults.handler_reply('h', actions=(mcsim.ExtendBudget(19),))
    assert faulted.snapshot() == before


def test_extend_without_sched_control(kernel0):
    setup(kernel0, sched_control=())
    with kernel0.invocation(0):
        kernel0.ipc.recv('h', 'faults')
    kernel0.timer_interrupt(2)
    with pytest.raises(mcsim.NoAuthority):
        with kernel0.invocation(3):
            kernel0.faults.handler_reply('h', actions=(mcsim.ExtendBudget(1),))
    assert kernel0.threads['h'].reply_slot is not None


def test_no_fault(faulted):
    with pytest.raises(mcsim.NoFault):
        with faulted.invocation(3):
            faulted.faults.handler_reply('w')
    other = TimeoutFault('w', 'w-sc', 'w', FaultReason.BUDGET_EXPIRED, 1)
    with pytest.raises(mcsim.NoFault, match='different fault'):
        with faulted.invocation(3):
            faulted.faults.handler_reply('h', other)


def test_reply_answers_fault(faulted):
    with faulted.invocation(3):
        faulted.ipc.reply('h')
    assert faulted.threads['w'].state is ThreadState.OUT_OF_BUDGET
    assert faulted.threads['h'].reply_slot is None


def test_raise_criticality(faulted):
    with faulted.invocation(3):
        faulted.faults.handler_reply('h', actions=(mcsim.RaiseSystemCriticality(1),))
    assert faulted.crit.level == 1
    assert faulted.threads['h'].effective_priority == 9


def test_suspend_owner(faulted):
    with faulted.invocation(3):
        faulted.faults.handler_reply('h', actions=(mcsim.SuspendOwner(),))
    assert faulted.threads['w'].state is ThreadState.SUSPENDED
    assert 'w' not in faulted.sched.state.release


def test_rollback_without_request(faulted):
    with pytest.raises(mcsim.NoReplyCap):
        with faulted.invocation(3):
            faulted.faults.handler_reply('h', actions=(mcsim.RollbackAndReset(),))


def test_handler_scenario(builtin_mc_params_handler):
    engine = builtin_mc_params_handler.build(check=True)
    result = engine.run()
    faults = [record for record in result.trace if record.category == 'timeout-fault']
    assert faults[0].subject == 'T4'
    assert engine.kernel.scs['T4-sc'].budget == 7
    assert engine.kernel.crit.level == 1
    assert not [job for job in result.misses if job.thread in ('T5', 'T4', 'T2')]


def test_rollback_scenario(builtin_rollback):
    result = builtin_rollback.run(check=True)
    categories = [record.category for record in result.trace]
    assert categories.count('timeout-fault') == 1
    assert categories.count('rollback') == 1
    assert categories.count('restart') == 1
    replies = [
        dict(record.detail)['badge']
        for record in result.trace
        if record.category == 'ipc-reply' and record.subject == 'server'
    ]
    # c1's request was aborted, c2 sees only its own contribution
    assert replies[0] == '3'
    assert result.errors == {}
