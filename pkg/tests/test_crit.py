# SPDX-License-Identifier: MIT

from fractions import Fraction

import hypothesis
import hypothesis.strategies as st
import pytest

import mcsim

from mcsim._model import ThreadState
from mcsim._timefault import FaultReason

from .conftest import boot, grant_all, running


@pytest.fixture
def mixed(kernel0):
    running(kernel0, 'root', priority=250, budget=100, period=100)
    running(kernel0, 'hi', priority=1, criticality=1)
    running(kernel0, 'lo', priority=200)
    grant_all(kernel0, sched_control=('root',))
    boot(kernel0, 'root', 'hi', 'lo')
    return kernel0


def test_boost_dominates(mixed):
    with mixed.invocation(0):
        assert mixed.crit.set_system_criticality('root', 1) == 1
        assert mixed.sched.state.ready.priority_of('hi') == 257
        assert [thread for _, thread in mixed.sched.state.ready] == ['hi', 'lo']
    assert mixed.threads['hi'].effective_priority == 1 | 1 << 8
    assert mixed.threads['lo'].effective_priority == 200
    # boosted above the running thread
    assert mixed.current == 'hi'
    assert mixed.sched.state.ready.queue(250) == ['root']


def test_round_trip(mixed):
    before = {name: thread.effective_priority for name, thread in mixed.threads.items()}
    ready = mixed.sched.state.ready.snapshot()
    with mixed.invocation(0):
        mixed.crit.set_system_criticality('root', 1)
        mixed.crit.set_system_criticality('root', 0)
    assert {name: thread.effective_priority for name, thread in mixed.threads.items()} == before
    assert mixed.sched.state.ready.snapshot() == ready


@pytest.mark.parametrize('level', [-1, 4])
def test_bad_level(mixed, level):
    with pytest.raises(mcsim.BadLevel):
        with mixed.invocation(0):
            mixed.crit.set_system_criticality('root', level)
    assert mixed.crit.level == 0


def test_needs_sched_control(mixed):
    with pytest.raises(mcsim.NoAuthority):
        with mixed.invocation(0):
            mixed.crit.set_system_criticality('lo', 1)


def test_suspended_threads_not_boosted(mixed):
    with mixed.invocation(0):
        mixed.suspend('root', 'hi')
        assert mixed.crit.set_system_criticality('root', 1) == 0
    assert mixed.threads['hi'].effective_priority == 1
    with mixed.invocation(0):
        mixed.resume('root', 'hi')
    assert mixed.threads['hi'].effective_priority == 257
    assert mixed.current == 'hi'


@hypothesis.given(
    threads=st.lists(
        st.tuples(st.integers(min_value=0, max_value=255), st.integers(min_value=0, max_value=3)),
        min_size=1,
        max_size=12,
    ),
    level=st.integers(min_value=0, max_value=3),
)
def test_dominance(threads, level):
    kernel = mcsim.Kernel()
    kernel.create_thread('switcher', 0)
    for index, (priority, criticality) in enumerate(threads):
        kernel.create_thread(f't{index}', priority, criticality=criticality)
    grant_all(kernel, sched_control=('switcher',))
    boot(kernel, *kernel.threads)
    with kernel.invocation(0):
        boosted = kernel.crit.set_system_criticality('switcher', level)

    workers = [kernel.threads[f't{index}'] for index in range(len(threads))]
    if level:
        assert boosted == sum(1 for thread in workers if thread.criticality >= level)
        high = [thread.effective_priority for thread in workers if thread.criticality >= level]
        low = [thread.effective_priority for thread in workers if thread.criticality < level]
        if high and low:
            assert min(high) > max(low)

    with kernel.invocation(0):
        kernel.crit.set_system_criticality('switcher', 0)
    assert all(thread.effective_priority == thread.base_priority for thread in kernel.threads.values())


def test_borrowed_sc_fault(kernel0):
    kernel0.create_endpoint('ep')
    kernel0.create_endpoint('faults')
    running(kernel0, 'h', priority=9, budget=100, period=100)
    running(kernel0, 'client', priority=3)
    kernel0.create_thread('server', 8, criticality=1, timeout_handler='faults')
    grant_all(kernel0, sched_control=('h',))
    boot(kernel0, 'h', 'server', 'client')
    with kernel0.invocation(0):
        kernel0.ipc.recv('h', 'faults')
        kernel0.ipc.recv('server', 'ep')
        kernel0.ipc.call('client', 'ep')
    assert kernel0.current == 'server'
    with kernel0.invocation(1):
        kernel0.crit.set_system_criticality('h', 1)
    assert kernel0.current == 'h'
    assert kernel0.threads['server'].state is ThreadState.BLOCKED_ON_FAULT
    fault = kernel0.outcomes['h'].fault
    assert fault.reason is FaultReason.CRITICALITY_SWITCH
    assert (fault.sc_in_use, fault.sc_owner) == ('client-sc', 'client')
    assert [record.category for record in kernel0.trace].count('borrowed-sc-fault') == 1


def test_mode_switch_counts(builtin_mode_switch_counts):
    result = builtin_mode_switch_counts.run(check=True)
    switches = [dict(record.detail) for record in result.trace if record.category == 'crit-switch']
    assert [switch['new'] for switch in switches] == ['3', '0', '2', '0', '1', '0']
    raising = [switch for switch in switches if switch['old'] == '0' and switch['new'] != '0']
    assert [int(switch['boosted']) for switch in raising] == [4, 12, 28]
    for switch in raising:
        assert Fraction(int(switch['ops']), int(switch['boosted'])) <= 2
