"""The mutable simulation state: infrastructure, applications, placements, policies."""
from __future__ import annotations

import contextlib
import logging
from typing import Any, Iterable, Mapping

from .graph import Application, Infrastructure, _Guarded
from .placement import (
    FULFILLED,
    PENDING,
    FirstFit,
    Placement,
    PlacementStrategy,
    ResidualState,
    fulfil,
)

log = logging.getLogger(__name__)


class Environment(_Guarded):
    """Everything events may mutate and callbacks may observe.

    ``placements`` always holds one entry per application; ``fulfilled_ticks``
    and ``elapsed`` feed the placement success rate.
    """

    def __init__(
        self,
        infra: Infrastructure,
        apps: Iterable[Application] = (),
        strategies: Mapping[str, PlacementStrategy] | None = None,
        policies: Iterable[Any] = (),
    ):
        self.infra = infra
        self.residual = ResidualState(infra)
        self.apps: dict[str, Application] = {}
        self.strategies: dict[str, PlacementStrategy] = {}
        self.placements: dict[str, Placement] = {}
        self.fulfilled_ticks: dict[str, int] = {}
        self.elapsed = 0
        self.tick = 0
        self.policies = list(policies)
        self.users: dict[str, int] = {}
        self.hub: str | None = None
        self.user_delay_in_rt = False
        self.emulator = None
        self.extra: dict[str, Any] = {}
        for app in apps:
            self.add_application(app, (strategies or {}).get(app.id))

    def add_application(self, app: Application, strategy: PlacementStrategy | None = None) -> None:
        self._check_mutable()
        if app.id in self.apps:
            raise ValueError(f"duplicate application id {app.id!r}")
        app.check_compatible(self.infra)
        self.apps[app.id] = app
        self.apps = dict(sorted(self.apps.items()))
        self.strategies[app.id] = strategy if strategy is not None else FirstFit()
        self.placements[app.id] = Placement(app.id)
        self.fulfilled_ticks[app.id] = 0

    @contextlib.contextmanager
    def read_only(self):
        with contextlib.ExitStack() as stack:
            for obj in (self.infra, self.residual, *self.apps.values()):
                stack.enter_context(obj.read_only())
            stack.enter_context(_Guarded.read_only(self))
            yield self

    # -- the three default step events ---------------------------------------------

    def update(self, tick: int, rngs=None) -> None:
        self._check_mutable()
        self.tick = tick
        for policy in self.policies:
            policy.step(self, tick, rngs)

    def lookup(self) -> list[str]:
        """Ask each non-fulfilled application's strategy for a fresh placement."""
        self._check_mutable()
        placed = []
        for app_id, app in self.apps.items():
            current = self.placements[app_id]
            if current.status == FULFILLED:
                continue
            found = self.strategies[app_id].place(app, self.infra, self.residual)
            if found is None:
                self.placements[app_id] = Placement(app_id)
            else:
                found.status = PENDING
                self.placements[app_id] = found
                placed.append(app_id)
        return placed

    def fulfil(self) -> tuple[list[Placement], list[Placement]]:
        self._check_mutable()
        before = {a for a, p in self.placements.items() if p.status == FULFILLED}
        done, reset = fulfil(list(self.placements.values()), self.apps, self.infra, self.residual)
        self.elapsed += 1
        for pl in done:
            self.fulfilled_ticks[pl.app_id] += 1
        if self.emulator is not None:
            for pl in reset:
                if pl.app_id in before:
                    self.emulator.undeploy(pl.app_id, missing_ok=True)
            for pl in done:
                if pl.app_id not in before:
                    self.emulator.deploy(pl, self.apps[pl.app_id])
        return done, reset

    # -- observations ---------------------------------------------------------------------

    def success_rate(self, app_id: str) -> float:
        if self.elapsed == 0:
            return 0.0
        return self.fulfilled_ticks[app_id] / self.elapsed

    def is_fulfilled(self, app_id: str) -> bool:
        return self.placements[app_id].status == FULFILLED
