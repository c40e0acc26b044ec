# SPDX-License-Identifier: MIT

import re

import hypothesis
import hypothesis.strategies as st
import pytest

import mcsim

from mcsim._model import (
    AuthorityTable, Direction, Endpoint, EndpointCap, NtfnCap, QueuedIpc, Rights, ScCap, SchedControl, TcbCap,
    ThreadState, describe_capability, parse_capability
)

from .conftest import boot, grant_all, running


def test_config_priority_space():
    mcsim.KernelConfig(priority_bits=8, criticality_levels=4)
    with pytest.raises(mcsim.ConfigurationError, match=re.escape('exceed 1024 effective priorities')):
        mcsim.KernelConfig(priority_bits=8, criticality_levels=5)


def test_config_negative_wcet():
    with pytest.raises(mcsim.ConfigurationError) as e:
        mcsim.KernelConfig(kernel_wcet=-1)
    assert e.value.key == 'kernel.kernel-wcet'


@pytest.mark.parametrize(
    ('text', 'cap'),
    [
        ('sched-control', SchedControl()),
        ('sc:a', ScCap('a')),
        ('tcb:t', TcbCap('t')),
        ('ep:e:send', EndpointCap('e', Rights.SEND)),
        ('ep:e', EndpointCap('e', Rights.ALL)),
        ('ntfn:n:recv', NtfnCap('n', Rights.RECV)),
    ]
)
def test_parse_capability(text, cap):
    assert parse_capability(text) == cap


def test_describe_capability():
    assert describe_capability(EndpointCap('e', Rights.RECV)) == 'ep:e:recv'
    assert describe_capability(NtfnCap('n')) == 'ntfn:n:all'


@pytest.mark.parametrize('text', ['bogus', 'ep:e:write', 'frob:x'])
def test_parse_capability_invalid(text):
    with pytest.raises(mcsim.ConfigurationError):
        parse_capability(text)


def test_authority_rights():
    table = AuthorityTable()
    table.grant('t', EndpointCap('e'))
    table.grant('t', NtfnCap('n', Rights.RECV))
    assert table.holds('t', EndpointCap('e', Rights.SEND))
    assert table.holds('t', NtfnCap('n', Rights.RECV))
    assert not table.holds('t', NtfnCap('n', Rights.SEND))
    assert not table.holds('u', EndpointCap('e'))
    with pytest.raises(mcsim.NoAuthority, match=re.escape('Thread `t` does not hold `ntfn:n:send`')):
        table.require('t', NtfnCap('n', Rights.SEND))


def test_endpoint_priority_order():
    priorities = {'a': 5, 'b': 7, 'c': 5, 'd': 7}
    endpoint = Endpoint('e')
    for thread in 'abcd':
        endpoint.enqueue(QueuedIpc(thread, Direction.SEND), priorities.__getitem__)
    assert [item.thread for item in endpoint.queue] == ['b', 'd', 'a', 'c']


def test_endpoint_one_direction():
    endpoint = Endpoint('e')
    endpoint.enqueue(QueuedIpc('a', Direction.SEND), lambda thread: 0)
    with pytest.raises(AssertionError):
        endpoint.enqueue(QueuedIpc('b', Direction.RECV), lambda thread: 0)


def test_duplicate_names(kernel):
    kernel.create_endpoint('x')
    with pytest.raises(mcsim.ConfigurationError, match=re.escape('Duplicate object name `x`')):
        kernel.create_sc('x', 1, 10)


def test_sc_budget_above_period(kernel):
    with pytest.raises(mcsim.ConfigurationError):
        kernel.create_sc('s', 11, 10)


# binding


@pytest.fixture
def system(kernel):
    running(kernel, 'root', priority=20, budget=100, period=100)
    kernel.create_thread('t', 5)
    kernel.create_sc('t-sc', 2, 10)
    grant_all(kernel)
    boot(kernel, 'root', 't')
    return kernel


def test_bind_makes_ready(system):
    assert system.threads['t'].state is ThreadState.INACTIVE
    with system.invocation(0):
        system.bind_sc('root', 't-sc', 't')
    thread = system.threads['t']
    assert thread.state is ThreadState.READY
    assert thread.home_sc == thread.current_sc == 't-sc'
    assert system.scs['t-sc'].home_thread == system.scs['t-sc'].running_thread == 't'


def test_bind_twice(system):
    system.create_sc('other-sc', 1, 10)
    system.authority.grant('root', ScCap('other-sc'))
    with system.invocation(0):
        system.bind_sc('root', 't-sc', 't')
    with pytest.raises(mcsim.AlreadyBound):
        with system.invocation(0):
            system.bind_sc('root', 'other-sc', 't')
    with pytest.raises(mcsim.AlreadyBound):
        with system.invocation(0):
            system.bind_sc('root', 't-sc', 'root')


def test_unbind_ready_thread(system):
    with system.invocation(0):
        system.bind_sc('root', 't-sc', 't')
        system.unbind_sc('root', 't-sc')
    thread = system.threads['t']
    assert thread.state is ThreadState.INACTIVE
    assert thread.current_sc is None
    assert 't' not in system.sched.state.ready


def test_unbind_unbound(system):
    with pytest.raises(mcsim.NotBound):
        with system.invocation(0):
            system.unbind_sc('root', 't-sc')


def test_unbind_donated_sc(kernel):
    running(kernel, 'client', priority=5)
    kernel.create_thread('server', 8)
    kernel.create_endpoint('ep')
    grant_all(kernel)
    boot(kernel, 'server', 'client')
    with kernel.invocation(0):
        kernel.ipc.recv('server', 'ep')
        kernel.ipc.call('client', 'ep')
    assert kernel.current == 'server'
    with kernel.invocation(0):
        kernel.unbind_sc('server', 'client-sc')
    assert kernel.threads['server'].current_sc == 'client-sc'
    assert kernel.threads['client'].home_sc is None
    assert kernel.scs['client-sc'].home_thread is None


def test_no_authority_leaves_state(system):
    system.authority.revoke('root', ScCap('t-sc'))
    before = system.snapshot()
    with pytest.raises(mcsim.NoAuthority):
        with system.invocation(0):
            system.bind_sc('root', 't-sc', 't')
    assert system.snapshot() == before


# priorities and criticalities


def test_set_priority_boundary(system):
    system.threads['root'].mcp = 10
    with system.invocation(0):
        system.set_priority('root', 't', 10)
    assert system.threads['t'].base_priority == 10
    with pytest.raises(mcsim.ExceedsMcp):
        with system.invocation(0):
            system.set_priority('root', 't', 11)
    with system.invocation(0):
        system.set_priority('root', 't', 1)
    assert system.threads['t'].effective_priority == 1


def test_set_priority_moves_ready_thread(system):
    with system.invocation(0):
        system.bind_sc('root', 't-sc', 't')
        system.set_priority('root', 't', 15)
    assert system.sched.state.ready.priority_of('t') == 15


def test_set_criticality(system):
    root = system.threads['root']
    root.mcc = 1
    with system.invocation(0):
        system.set_criticality('root', 't', 1)
    assert system.threads['t'].criticality == 1
    assert 't' in system.crit.state.queues[1]
    with pytest.raises(mcsim.ExceedsMcc):
        with system.invocation(0):
            system.set_criticality('root', 't', 2)
    records = len(system.trace)
    with system.invocation(0):
        system.set_criticality('root', 't', 1)
    assert len(system.trace) == records


@hypothesis.given(
    mcp=st.integers(min_value=0, max_value=255),
    priority=st.integers(min_value=0, max_value=255),
)
def test_set_priority_iff_within_mcp(mcp, priority):
    kernel = mcsim.Kernel()
    running(kernel, 'actor', priority=0, mcp=mcp)
    kernel.create_thread('target', 0)
    grant_all(kernel)
    boot(kernel, 'actor')
    try:
        with kernel.invocation(0):
            kernel.set_priority('actor', 'target', priority)
    except mcsim.ExceedsMcp:
        assert priority > mcp
    else:
        assert priority <= mcp
        assert kernel.threads['target'].base_priority == priority


@pytest.fixture
def small():
    k = mcsim.Kernel(mcsim.KernelConfig(priority_bits=2, criticality_levels=2, kernel_wcet=0))
    k.check = True
    running(k, 'root', priority=3, budget=100, period=100)
    k.create_thread('t', 1)
    grant_all(k)
    boot(k, 'root')
    return k


def test_create_thread_mcp_range(small):
    with pytest.raises(mcsim.ConfigurationError, match=re.escape('MCP 50 is outside [0, 3]')) as e:
        small.create_thread('a', 3, mcp=50)
    assert e.value.key == 'thread.a.mcp'
    with pytest.raises(mcsim.ConfigurationError):
        small.create_thread('b', 0, mcp=-1)


@pytest.mark.parametrize('mcp', [-1, 4, 40])
def test_set_mcp_range(small, mcp):
    before = small.snapshot()
    with pytest.raises(mcsim.BadParams, match=re.escape(f'Invalid MCP {mcp}')):
        with small.invocation(0):
            small.set_mcp('root', 't', mcp)
    assert small.snapshot() == before


def test_set_priority_range(small):
    with pytest.raises(mcsim.BadParams):
        with small.invocation(0):
            small.set_priority('root', 't', -1)
    with pytest.raises(mcsim.ExceedsMcp):
        with small.invocation(0):
            small.set_priority('root', 't', 40)
    assert small.threads['t'].base_priority == 1


def test_base_priority_stays_below_boosted_levels(small):
    running(small, 'h', priority=0, budget=100, period=100, criticality=1)
    grant_all(small, sched_control=('root',))
    boot(small, 'h')
    with small.invocation(0):
        small.set_priority('root', 't', 3)
        small.crit.set_system_criticality('root', 1)
    assert small.threads['t'].effective_priority == 3
    assert small.threads['h'].effective_priority == 1 << 2


def test_out_of_range_priority_reported(small):
    small.threads['t'].mcp = 40
    with pytest.raises(mcsim.InvariantViolation, match=re.escape('`t` has a priority or MCP outside [0, 3]')):
        small.check_invariants()
