"""Deterministic multi-agent simulation of the trading protocol.

Prosumer, solver, and operator agents share a logical clock and interact
only through the ledger contract. Each interval: prosumers post offers for
their prediction window, solvers periodically re-solve and submit strictly
better solutions, and the operator finalizes the next deliverable interval
at the interval boundary. A failure schedule can silence any participant;
after a notification latency its non-finalized trades are withdrawn.

There is no wall-clock anywhere: identical configuration and traces give
an identical event log, byte for byte.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .controller import AffineResourceModel, ControllerState, ResourceModel
from .ledger import Contract, EventKind, LedgerEvent, Role
from .market import GridModel, Side, Solution
from .metrics import Metrics, compute_metrics
from .solver import SolveRecord, SolverAgent, SolverConfig
from .traces import ProsumerTrace

DSO_ID = "dso"


class ConfigError(Exception):
    pass


class SimulationError(Exception):
    pass


class UnknownParticipantError(Exception):
    pass


@dataclass(frozen=True)
class FailureSpec:
    participant: str
    fail_time: float
    recover_time: float | None = None

    def __post_init__(self) -> None:
        if self.fail_time < 0:
            raise ValueError("fail_time must be non-negative")
        if self.recover_time is not None and self.recover_time <= self.fail_time:
            raise ValueError("recover_time must follow fail_time")


@dataclass(frozen=True)
class SimConfig:
    grid: GridModel
    horizon: int
    seconds_per_interval: float = 4.0
    prediction_window: int = 3
    solver_period: float = 1.0
    lookahead: int = 5
    n_solvers: int = 1
    n_adversaries: int = 0
    seed: int = 0
    price_cap: float = 1.0
    failures: tuple[FailureSpec, ...] = ()
    detect_latency: float = 0.14
    notify_latency: float = 1.88
    reactivate_latency: float = 6.52
    confirmation_delay: float = 0.0
    adaptive: bool = False
    initial_max_lookahead: int | None = None
    resource_model: ResourceModel | None = None

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.prediction_window <= 1:
            raise ConfigError("prediction_window must exceed 1")
        if self.lookahead < self.grid.clearing_lead:
            raise ConfigError("lookahead must be at least the clearing lead")
        if self.seconds_per_interval <= 0:
            raise ConfigError("seconds_per_interval must be positive")
        if self.seconds_per_interval > self.grid.interval_hours * 3600.0:
            raise ConfigError("simulated interval cannot exceed the real interval")
        if self.solver_period <= 0:
            raise ConfigError("solver_period must be positive")
        if self.n_solvers < 0 or self.n_adversaries < 0:
            raise ConfigError("agent counts must be non-negative")


class ProsumerAgent:
    """Posts one offer per surplus or deficit interval, never twice."""

    def __init__(self, trace: ProsumerTrace, horizon: int):
        self.trace = trace
        self.horizon = horizon
        self.active = True
        self.offered: set[int] = set()

    def offers_for(self, now: int, clearing_lead: int, prediction_window: int) -> list[dict]:
        out: list[dict] = []
        last = min(now + prediction_window, self.horizon - 1, len(self.trace) - 1)
        for t in range(now + clearing_lead, last + 1):
            if t in self.offered:
                continue
            self.offered.add(t)
            net = self.trace.net(t)
            if net > 1e-12:
                end = t
                if self.trace.flexible:
                    end = min(t + self.trace.flex_window - 1, self.horizon - 1)
                out.append({"side": Side.SELLING, "start": t, "end": end,
                            "energy_kwh": net})
            elif net < -1e-12:
                out.append({"side": Side.BUYING, "start": t, "end": t,
                            "energy_kwh": -net})
        return out

    def forget_future_offers(self, current_interval: int) -> None:
        """After recovery, allow re-posting for still-open intervals."""
        self.offered = {t for t in self.offered if t <= current_interval}


class AdversaryAgent:
    """Submits randomly perturbed and deliberately unsafe solutions."""

    def __init__(self, agent_id: str, seed: int):
        self.id = agent_id
        self.rng = np.random.default_rng(seed)
        self.active = True

    def make_submission(self, state) -> Solution | None:
        strategy = int(self.rng.integers(0, 4))
        try:
            if strategy == 0:
                return self._perturbed_candidate(state)
            if strategy == 1:
                return self._oversized_random_trade(state)
            if strategy == 2:
                return self._pin_violation(state)
            return self._scaled_candidate(state)
        except Exception:
            return None

    def _perturbed_candidate(self, state) -> Solution | None:
        if not len(state.candidate):
            return None
        entries = {}
        for key, (power, price) in state.candidate.items():
            entries[key] = (power * float(self.rng.uniform(0.2, 2.5)), price)
        return Solution(entries)

    def _oversized_random_trade(self, state) -> Solution | None:
        sells = [o for o in state.book.values() if o.side is Side.SELLING]
        buys = [o for o in state.book.values() if o.side is Side.BUYING]
        if not sells or not buys:
            return None
        sell = sells[int(self.rng.integers(0, len(sells)))]
        buy = buys[int(self.rng.integers(0, len(buys)))]
        t = int(self.rng.integers(min(sell.start, buy.start), max(sell.end, buy.end) + 1))
        power = float(self.rng.uniform(1.0, 100.0)) * (1.0 + sell.energy_kwh)
        return Solution({(sell.id, buy.id, t): (power, 0.5)})

    def _pin_violation(self, state) -> Solution | None:
        overlay = state.pinned.overlay()
        if not overlay:
            return None
        entries = dict(state.candidate.items())
        key = sorted(overlay)[int(self.rng.integers(0, len(overlay)))]
        power, price = overlay[key]
        entries[key] = (power + float(self.rng.uniform(0.5, 5.0)), price)
        return Solution(entries)

    def _scaled_candidate(self, state) -> Solution | None:
        if not len(state.candidate):
            return None
        factor = float(self.rng.uniform(0.1, 0.9))
        return Solution({k: (p * factor, pi) for k, (p, pi) in state.candidate.items()})


@dataclass
class SimReport:
    grid: GridModel
    horizon: int
    price_cap: float
    interval_hours: float
    events: list[LedgerEvent]
    metrics: Metrics
    solver_records: list[SolveRecord]
    controller_rows: list[dict]
    failure_log: list[dict]
    final_snapshot: dict
    intervals_finalized: int
    max_variables: int = 0


# Priorities at equal timestamps: finalize the elapsed interval first, then
# prosumer postings, then fault handling, then solver and adversary ticks.
_PRI_FINALIZE = 0
_PRI_PROSUMER = 1
_PRI_FAULT = 2
_PRI_SOLVER = 3
_PRI_ADVERSARY = 4


class Simulation:
    """Event-queue driver; see module docstring for the protocol."""

    def __init__(self, config: SimConfig, traces: list[ProsumerTrace]):
        self.config = config
        self.traces = list(traces)
        self._validate()

        self.contract = Contract(config.grid, price_cap=config.price_cap,
                                 require_dso_finalize=True)
        self.time = 0.0
        self._heap: list[tuple[float, int, int, str, dict]] = []
        self._push_seq = 0
        self.failure_log: list[dict] = []
        self.offer_errors: list[dict] = []

        self.contract.register(DSO_ID, Role.DSO, time=0.0)
        self.prosumers: dict[str, ProsumerAgent] = {}
        for trace in sorted(self.traces, key=lambda tr: tr.participant):
            self.contract.register(trace.participant, Role.PROSUMER, trace.feeder, time=0.0)
            self.prosumers[trace.participant] = ProsumerAgent(trace, config.horizon)

        model = config.resource_model or AffineResourceModel()
        self.solvers: dict[str, SolverAgent] = {}
        for i in range(config.n_solvers):
            sid = f"solver-{i + 1}"
            self.contract.register(sid, Role.SOLVER, time=0.0)
            controller = None
            if config.adaptive:
                ceiling = config.initial_max_lookahead or config.lookahead
                controller = ControllerState(
                    clearing_lead=config.grid.clearing_lead,
                    max_lookahead=ceiling,
                    lookahead=min(config.lookahead, ceiling))
            solver_config = SolverConfig(
                lookahead=config.lookahead, solve_period=config.solver_period,
                price_cap=config.price_cap)
            self.solvers[sid] = SolverAgent(
                sid, self.contract.grid, solver_config,
                controller=controller, resource_model=model)

        self.adversaries: dict[str, AdversaryAgent] = {}
        for i in range(config.n_adversaries):
            aid = f"adversary-{i + 1}"
            self.contract.register(aid, Role.SOLVER, time=0.0)
            self.adversaries[aid] = AdversaryAgent(aid, config.seed + 1000 + i)

        dt = config.seconds_per_interval
        for k in range(config.horizon):
            self._push(k * dt, _PRI_PROSUMER, "prosumer-phase", {"interval": k})
            self._push((k + 1) * dt, _PRI_FINALIZE, "finalize", {"interval": k})
        for sid in sorted(self.solvers):
            self._push(0.0, _PRI_SOLVER, "solver-tick", {"agent": sid, "tick": 0})
        for aid in sorted(self.adversaries):
            self._push(0.0, _PRI_ADVERSARY, "adversary-tick", {"agent": aid, "tick": 0})
        for spec in config.failures:
            self.inject_failure(spec.participant, spec.fail_time, spec.recover_time)

    def _validate(self) -> None:
        ids = [t.participant for t in self.traces]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate participant ids in traces")
        feeders = self.config.grid.feeder_limits()
        for trace in self.traces:
            if trace.feeder not in feeders:
                raise ConfigError(f"{trace.participant}: unknown feeder {trace.feeder!r}")
            if len(trace) < self.config.horizon:
                raise ConfigError(
                    f"{trace.participant}: trace covers {len(trace)} intervals, "
                    f"horizon needs {self.config.horizon}")

    @property
    def interval(self) -> int:
        return int(math.floor(self.time / self.config.seconds_per_interval))

    @property
    def end_time(self) -> float:
        return self.config.horizon * self.config.seconds_per_interval

    def _push(self, time: float, priority: int, kind: str, data: dict) -> None:
        self._push_seq += 1
        heapq.heappush(self._heap, (time, priority, self._push_seq, kind, data))

    def inject_failure(self, participant: str, at_time: float,
                       recover_time: float | None = None) -> None:
        """Silence a participant at ``at_time``; peers react after latency."""
        if participant not in self._all_agents():
            raise UnknownParticipantError(f"no agent named {participant!r}")
        cfg = self.config
        self._push(at_time, _PRI_FAULT, "fail", {"participant": participant})
        self._push(at_time + cfg.detect_latency, _PRI_FAULT, "detect",
                   {"participant": participant})
        self._push(at_time + cfg.notify_latency, _PRI_FAULT, "remove",
                   {"participant": participant})
        if recover_time is not None:
            self._push(recover_time + cfg.reactivate_latency, _PRI_FAULT, "recover",
                       {"participant": participant})

    def _all_agents(self) -> dict:
        agents: dict[str, object] = {}
        agents.update(self.prosumers)
        agents.update(self.solvers)
        agents.update(self.adversaries)
        return agents

    def advance_clock(self) -> float:
        """Process every event at the next timestamp; strictly advances time."""
        if not self._heap:
            return self.time
        next_time = self._heap[0][0]
        self.time = next_time
        while self._heap and self._heap[0][0] == next_time:
            _, _, _, kind, data = heapq.heappop(self._heap)
            self._dispatch(kind, data)
        return self.time

    def run(self) -> SimReport:
        while self._heap:
            self.advance_clock()
        return self._report()

    # -- event handlers -----------------------------------------------------

    def _dispatch(self, kind: str, data: dict) -> None:
        if kind == "prosumer-phase":
            self._prosumer_phase(data["interval"])
        elif kind == "finalize":
            self.contract.finalize(DSO_ID, data["interval"], time=self.time)
        elif kind == "solver-tick":
            self._solver_tick(data["agent"], data["tick"])
        elif kind == "adversary-tick":
            self._adversary_tick(data["agent"], data["tick"])
        elif kind == "fail":
            agent = self._all_agents()[data["participant"]]
            agent.active = False
            self._log_failure(data["participant"], "failed")
        elif kind == "detect":
            self._log_failure(data["participant"], "detected")
        elif kind == "remove":
            self.contract.remove_participant_trades(data["participant"], time=self.time)
            self._log_failure(data["participant"], "removed")
        elif kind == "recover":
            agent = self._all_agents()[data["participant"]]
            agent.active = True
            if isinstance(agent, ProsumerAgent):
                agent.forget_future_offers(self.contract.state.current_interval)
            self._log_failure(data["participant"], "recovered")
        elif kind == "post-offer":
            self._apply_offer(data)
        elif kind == "submit-solution":
            self.contract.submit_solution(data["participant"], data["solution"],
                                          time=self.time)
        else:  # pragma: no cover
            raise SimulationError(f"unknown event kind {kind!r}")

    def _log_failure(self, participant: str, phase: str) -> None:
        self.failure_log.append(
            {"time": self.time, "participant": participant, "phase": phase})

    def _prosumer_phase(self, now: int) -> None:
        cfg = self.config
        for pid in sorted(self.prosumers):
            agent = self.prosumers[pid]
            if not agent.active:
                continue
            for offer in agent.offers_for(now, cfg.grid.clearing_lead,
                                          cfg.prediction_window):
                data = {"participant": pid, **offer}
                if cfg.confirmation_delay > 0:
                    self._push(self.time + cfg.confirmation_delay, _PRI_FAULT,
                               "post-offer", data)
                else:
                    self._apply_offer(data)

    def _apply_offer(self, data: dict) -> None:
        from .ledger import ContractError
        try:
            self.contract.post_offer(
                data["participant"], data["side"], data["start"], data["end"],
                data["energy_kwh"], time=self.time)
        except ContractError as exc:
            self.offer_errors.append(
                {"time": self.time, "participant": data["participant"],
                 "error": str(exc)})

    def _solver_tick(self, sid: str, tick: int) -> None:
        cfg = self.config
        next_time = (tick + 1) * cfg.solver_period
        if next_time < self.end_time:
            self._push(next_time, _PRI_SOLVER, "solver-tick",
                       {"agent": sid, "tick": tick + 1})
        agent = self.solvers[sid]
        if not agent.active:
            return
        events = self.contract.events_since(agent.last_seq)
        submission = agent.step(events, time=self.time)
        if submission is None:
            return
        if cfg.confirmation_delay > 0:
            self._push(self.time + cfg.confirmation_delay, _PRI_FAULT,
                       "submit-solution", {"participant": sid, "solution": submission})
        else:
            self.contract.submit_solution(sid, submission, time=self.time)
            agent.observe(self.contract.events_since(agent.last_seq))

    def _adversary_tick(self, aid: str, tick: int) -> None:
        cfg = self.config
        next_time = (tick + 1) * cfg.solver_period
        if next_time < self.end_time:
            self._push(next_time, _PRI_ADVERSARY, "adversary-tick",
                       {"agent": aid, "tick": tick + 1})
        agent = self.adversaries[aid]
        if not agent.active:
            return
        submission = agent.make_submission(self.contract.state)
        if submission is not None:
            self.contract.submit_solution(aid, submission, time=self.time)

    # -- reporting ----------------------------------------------------------

    def _report(self) -> SimReport:
        events = self.contract.events
        finalized = sum(1 for e in events if e.kind == EventKind.INTERVAL_ADVANCED)
        if finalized != self.config.horizon:
            raise SimulationError(
                f"finalized {finalized} intervals, expected {self.config.horizon}")
        metrics = compute_metrics(events, self.config.grid.interval_hours,
                                  horizon=self.config.horizon)
        records: list[SolveRecord] = []
        controller_rows: list[dict] = []
        for sid in sorted(self.solvers):
            records.extend(self.solvers[sid].records)
            controller_rows.extend(self.solvers[sid].controller_trace)
        records.sort(key=lambda r: (r.time, r.solver))
        controller_rows.sort(key=lambda r: (r["time"], r["solver"]))
        return SimReport(
            grid=self.contract.grid,
            horizon=self.config.horizon,
            price_cap=self.config.price_cap,
            interval_hours=self.config.grid.interval_hours,
            events=events,
            metrics=metrics,
            solver_records=records,
            controller_rows=controller_rows,
            failure_log=self.failure_log,
            final_snapshot=self.contract.state.snapshot(),
            intervals_finalized=finalized,
            max_variables=max((r.variables for r in records), default=0),
        )


def run(config: SimConfig, traces: list[ProsumerTrace]) -> SimReport:
    """Run a complete simulation; pure function of (config, traces)."""
    return Simulation(config, traces).run()
