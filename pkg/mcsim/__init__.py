# SPDX-License-Identifier: MIT

'''Tick-accurate simulator of a mixed-criticality microkernel scheduling model.'''

from mcsim._analysis import (  # noqa: F401
    AnalysisError, RtaReport, TaskResponse, TaskSet, TaskSpec, TiePriorities, edf_test, hyperperiod, ll_bound,
    ll_test, rta, utilization, write_report
)
from mcsim._engine import Engine, Job, PeriodicJobs, RunResult, Segment  # noqa: F401
from mcsim._figures import FigureResult, FigureRow, UnknownFigure, figures, reproduce  # noqa: F401
from mcsim._kernel import InvariantViolation, Kernel  # noqa: F401
from mcsim._model import (  # noqa: F401
    AlreadyBound, BadLevel, BadParams, ConfigurationError, DonationRefused, EmptySlot, ExceedsMcc, ExceedsMcp,
    KernelConfig, KernelError, McsimError, McsimWarning, Message, NoAuthority, NoBudget, NoFault, NoReplyCap,
    NotBound, ObjectBusy, RequestAborted, Rights, SchedulingContext, Thread, ThreadState, TraceRecord
)
from mcsim._programs import Program, ProgramContext, program  # noqa: F401
from mcsim._scenario import (  # noqa: F401
    Scenario, load_scenario, read_trace, replay, run_scenario, write_summary, write_trace
)
from mcsim._taskgen import dump_taskset, generate, make_taskset, randfixedsum  # noqa: F401
from mcsim._timefault import (  # noqa: F401
    ExtendBudget, RaiseSystemCriticality, RollbackAndReset, SuspendOwner, TimeoutFault
)


__version__ = '0.1.0'
