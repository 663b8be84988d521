"""Domain model for the forward energy market.

Offers commit energy over contiguous interval windows; a solution assigns
per-interval power and unit prices to matched sell/buy offer pairs. This
module owns the validation rules that every candidate solution must pass:
per-offer energy budgets, per-feeder power limits, reservation-price bands,
and exact agreement with already-finalized (pinned) trades.

All values are plain floats: power in kW, energy in kWh, prices in $/kWh,
interval length in hours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

TOLERANCE = 1e-9

TradeKey = tuple[int, int, int]  # (sell offer id, buy offer id, interval)


class MarketError(Exception):
    """Base class for market domain errors."""


class UnknownOfferError(MarketError):
    """A solution references an offer id that is not in the book."""


class UnmatchablePairError(MarketError):
    """A solution pairs offers that cannot trade (price or window)."""


class InvalidTradeError(MarketError):
    """A trade value is negative or not a finite number."""


class Side(str, Enum):
    SELLING = "selling"
    BUYING = "buying"


@dataclass(frozen=True)
class Feeder:
    """A distribution line segment with power limits.

    ``net_flow_limit_kw`` bounds the absolute net power flowing in or out of
    the feeder; ``internal_limit_kw`` bounds total production and total
    consumption inside the feeder, each separately.
    """

    id: str
    net_flow_limit_kw: float
    internal_limit_kw: float

    def __post_init__(self) -> None:
        if self.net_flow_limit_kw < 0 or self.internal_limit_kw < 0:
            raise ValueError(f"feeder {self.id}: limits must be non-negative")


@dataclass(frozen=True)
class GridModel:
    """Static grid description plus the market's timing constants."""

    feeders: tuple[Feeder, ...]
    interval_hours: float
    clearing_lead: int  # intervals between finalization and delivery

    def __post_init__(self) -> None:
        if self.interval_hours <= 0:
            raise ValueError("interval_hours must be positive")
        if self.clearing_lead < 1:
            raise ValueError("clearing_lead must be at least 1")
        ids = [f.id for f in self.feeders]
        if len(set(ids)) != len(ids):
            raise ValueError("feeder ids must be unique")

    def feeder_limits(self) -> dict[str, Feeder]:
        return {f.id: f for f in self.feeders}

    def with_feeder(self, feeder: Feeder) -> "GridModel":
        if any(f.id == feeder.id for f in self.feeders):
            return self
        return GridModel(self.feeders + (feeder,), self.interval_hours, self.clearing_lead)

    def to_payload(self) -> dict:
        return {
            "feeders": [
                {"id": f.id, "net_flow_limit_kw": f.net_flow_limit_kw,
                 "internal_limit_kw": f.internal_limit_kw}
                for f in self.feeders
            ],
            "interval_hours": self.interval_hours,
            "clearing_lead": self.clearing_lead,
        }

    @classmethod
    def from_payload(cls, payload: Mapping) -> "GridModel":
        feeders = tuple(
            Feeder(f["id"], f["net_flow_limit_kw"], f["internal_limit_kw"])
            for f in payload["feeders"]
        )
        return cls(feeders, payload["interval_hours"], payload["clearing_lead"])


@dataclass(frozen=True)
class Offer:
    """A forward offer to sell or buy energy.

    The interval window is contiguous, ``[start, end]`` inclusive. An absent
    reservation price means "any price": 0 for sellers, unbounded for buyers.
    """

    id: int
    side: Side
    prosumer: str
    feeder: str
    energy_kwh: float
    start: int
    end: int
    reservation_price: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.energy_kwh) or self.energy_kwh <= 0:
            raise ValueError(f"offer {self.id}: energy must be positive")
        if self.start > self.end:
            raise ValueError(f"offer {self.id}: start must not exceed end")
        if self.reservation_price is not None:
            if not math.isfinite(self.reservation_price) or self.reservation_price < 0:
                raise ValueError(f"offer {self.id}: reservation price must be >= 0")

    @property
    def reservation(self) -> float:
        """Effective reservation price with side defaults applied."""
        if self.reservation_price is not None:
            return self.reservation_price
        return 0.0 if self.side is Side.SELLING else math.inf

    def intervals(self) -> range:
        return range(self.start, self.end + 1)

    def covers(self, interval: int) -> bool:
        return self.start <= interval <= self.end


def overlap(sell: Offer, buy: Offer) -> range:
    """Interval window shared by a sell/buy pair (possibly empty)."""
    lo = max(sell.start, buy.start)
    hi = min(sell.end, buy.end)
    return range(lo, hi + 1)


def matchable(sell: Offer, buy: Offer) -> bool:
    """True iff some price and some interval suit both offers."""
    if sell.side is not Side.SELLING or buy.side is not Side.BUYING:
        return False
    return sell.reservation <= buy.reservation and len(overlap(sell, buy)) > 0


@dataclass(frozen=True)
class Trade:
    sell_offer: int
    buy_offer: int
    interval: int
    power_kw: float
    price: float

    @property
    def key(self) -> TradeKey:
        return (self.sell_offer, self.buy_offer, self.interval)


class Solution:
    """A sparse assignment of (power, price) to (sell, buy, interval) keys.

    Absent keys mean zero power. Instances are immutable; all iteration is
    in sorted key order so downstream arithmetic is deterministic.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[TradeKey, tuple[float, float]] | None = None):
        items = sorted((entries or {}).items())
        cleaned: dict[TradeKey, tuple[float, float]] = {}
        for key, (power, price) in items:
            if not (math.isfinite(power) and math.isfinite(price)):
                raise InvalidTradeError(f"trade {key}: values must be finite")
            if power < 0:
                raise InvalidTradeError(f"trade {key}: power must be non-negative")
            if key in cleaned:
                raise InvalidTradeError(f"trade {key}: duplicate key")
            cleaned[key] = (float(power), float(price))
        self._entries = cleaned

    @classmethod
    def empty(cls) -> "Solution":
        return cls({})

    @classmethod
    def from_trades(cls, trades: Iterable[Trade]) -> "Solution":
        entries: dict[TradeKey, tuple[float, float]] = {}
        for t in trades:
            if t.key in entries:
                raise InvalidTradeError(f"trade {t.key}: duplicate key")
            entries[t.key] = (t.power_kw, t.price)
        return cls(entries)

    def power(self, key: TradeKey) -> float:
        return self._entries.get(key, (0.0, 0.0))[0]

    def price(self, key: TradeKey) -> float | None:
        entry = self._entries.get(key)
        return None if entry is None else entry[1]

    def items(self) -> Iterator[tuple[TradeKey, tuple[float, float]]]:
        return iter(self._entries.items())

    def keys(self) -> Iterator[TradeKey]:
        return iter(self._entries)

    def trades(self) -> list[Trade]:
        return [Trade(s, b, t, p, pi) for (s, b, t), (p, pi) in self._entries.items()]

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Solution):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"Solution({len(self._entries)} trades)"

    def merged(self, extra: Mapping[TradeKey, tuple[float, float]]) -> "Solution":
        """New solution with ``extra`` entries overriding existing keys."""
        entries = dict(self._entries)
        entries.update(extra)
        return Solution(entries)

    def without_offers(self, offer_ids: set[int], keep_through: int) -> "Solution":
        """Drop trades touching ``offer_ids`` at intervals after ``keep_through``."""
        entries = {
            key: value
            for key, value in self._entries.items()
            if key[2] <= keep_through or (key[0] not in offer_ids and key[1] not in offer_ids)
        }
        return Solution(entries)

    def to_payload(self) -> list[list]:
        return [[s, b, t, p, pi] for (s, b, t), (p, pi) in self._entries.items()]

    @classmethod
    def from_payload(cls, payload: Iterable[Iterable]) -> "Solution":
        entries: dict[TradeKey, tuple[float, float]] = {}
        for s, b, t, p, pi in payload:
            key = (int(s), int(b), int(t))
            if key in entries:
                raise InvalidTradeError(f"trade {key}: duplicate key")
            entries[key] = (float(p), float(pi))
        return cls(entries)


def objective(solution: Solution) -> float:
    """Total traded power, summed over all trades and intervals (kW)."""
    return sum(power for _, (power, _) in solution.items())


class PinnedTrades:
    """Finalized trade values, immutable once written.

    ``finalized_through`` is the highest interval whose trades are locked;
    intervals at or below it admit exactly the recorded values (absent keys
    are locked at zero).
    """

    __slots__ = ("_by_interval", "finalized_through")

    def __init__(self, finalized_through: int = -1,
                 by_interval: Mapping[int, Mapping[tuple[int, int], tuple[float, float]]] | None = None):
        self.finalized_through = finalized_through
        self._by_interval: dict[int, dict[tuple[int, int], tuple[float, float]]] = {}
        for interval, entries in (by_interval or {}).items():
            if interval > finalized_through:
                raise ValueError(f"interval {interval} beyond finalized_through")
            self._by_interval[int(interval)] = {
                (int(s), int(b)): (float(p), float(pi))
                for (s, b), (p, pi) in sorted(entries.items())
            }

    @classmethod
    def empty(cls) -> "PinnedTrades":
        return cls(-1)

    def is_pinned(self, interval: int) -> bool:
        return interval <= self.finalized_through

    def entries(self, interval: int) -> dict[tuple[int, int], tuple[float, float]]:
        return dict(self._by_interval.get(interval, {}))

    def pin(self, interval: int, entries: Mapping[tuple[int, int], tuple[float, float]]) -> None:
        """Lock an interval's trades. Intervals must be pinned in order."""
        if interval != self.finalized_through + 1:
            raise ValueError(
                f"interval {interval} cannot be pinned; next is {self.finalized_through + 1}")
        kept = {key: value for key, value in sorted(entries.items()) if value[0] > 0.0}
        if kept:
            self._by_interval[interval] = {
                (int(s), int(b)): (float(p), float(pi)) for (s, b), (p, pi) in kept.items()
            }
        self.finalized_through = interval

    def overlay(self) -> dict[TradeKey, tuple[float, float]]:
        """All pinned values keyed as solution entries."""
        out: dict[TradeKey, tuple[float, float]] = {}
        for interval in sorted(self._by_interval):
            for (s, b), value in self._by_interval[interval].items():
                out[(s, b, interval)] = value
        return out

    def energy_by_offer(self, interval_hours: float) -> dict[int, float]:
        """Pinned energy (kWh) already committed per offer id."""
        used: dict[int, float] = {}
        for interval in sorted(self._by_interval):
            for (s, b), (power, _) in self._by_interval[interval].items():
                used[s] = used.get(s, 0.0) + power * interval_hours
                used[b] = used.get(b, 0.0) + power * interval_hours
        return used

    def copy(self) -> "PinnedTrades":
        return PinnedTrades(self.finalized_through, self._by_interval)

    def snapshot(self) -> dict:
        return {
            "finalized_through": self.finalized_through,
            "intervals": {
                str(t): [[s, b, p, pi] for (s, b), (p, pi) in sorted(self._by_interval[t].items())]
                for t in sorted(self._by_interval)
            },
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PinnedTrades):
            return NotImplemented
        return (self.finalized_through == other.finalized_through
                and self._by_interval == other._by_interval)


@dataclass(frozen=True)
class Violation:
    kind: str  # energy-seller | energy-buyer | feeder-net | feeder-internal | price-band | pin-mismatch
    subject: str
    detail: str
    excess: float = 0.0


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple[Violation, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def check_feasibility(
    solution: Solution,
    book: Mapping[int, Offer],
    grid: GridModel,
    pinned: PinnedTrades | None = None,
    *,
    retired: Mapping[int, Offer] | None = None,
    tol: float = TOLERANCE,
) -> FeasibilityReport:
    """Validate a solution against the offer book, grid limits, and pins.

    Returns a report listing every violated constraint. Raises
    ``UnknownOfferError`` for dangling offer ids, ``UnmatchablePairError``
    for keys pairing offers that cannot trade, and ``InvalidTradeError``
    for malformed values. Trades on retired offers are allowed only at
    pinned intervals.
    """
    pinned = pinned or PinnedTrades.empty()
    retired = retired or {}
    feeders = grid.feeder_limits()
    delta = grid.interval_hours

    violations: list[Violation] = []
    sold: dict[int, float] = {}
    bought: dict[int, float] = {}
    production: dict[tuple[str, int], float] = {}
    consumption: dict[tuple[str, int], float] = {}

    def resolve(offer_id: int, interval: int) -> Offer:
        offer = book.get(offer_id)
        if offer is not None:
            return offer
        offer = retired.get(offer_id)
        if offer is None:
            raise UnknownOfferError(f"offer {offer_id} not in book")
        if interval > pinned.finalized_through:
            raise UnknownOfferError(
                f"offer {offer_id} was withdrawn; only pinned trades may reference it")
        return offer

    for (s_id, b_id, interval), (power, price) in solution.items():
        sell = resolve(s_id, interval)
        buy = resolve(b_id, interval)
        if not matchable(sell, buy):
            raise UnmatchablePairError(f"offers {s_id} and {b_id} are not matchable")
        if interval not in overlap(sell, buy):
            raise UnmatchablePairError(
                f"interval {interval} outside the shared window of {s_id} and {b_id}")
        if sell.feeder not in feeders or buy.feeder not in feeders:
            raise MarketError(f"trade ({s_id},{b_id},{interval}) references unknown feeder")

        sold[s_id] = sold.get(s_id, 0.0) + power * delta
        bought[b_id] = bought.get(b_id, 0.0) + power * delta
        production[(sell.feeder, interval)] = production.get((sell.feeder, interval), 0.0) + power
        consumption[(buy.feeder, interval)] = consumption.get((buy.feeder, interval), 0.0) + power

        if power > tol:
            if price < sell.reservation - tol or price > buy.reservation + tol:
                violations.append(Violation(
                    "price-band", f"({s_id},{b_id},{interval})",
                    f"price {price} outside [{sell.reservation}, {buy.reservation}]"))

    for offer_id in sorted(sold):
        offer = book.get(offer_id) or retired[offer_id]
        if sold[offer_id] > offer.energy_kwh + tol:
            violations.append(Violation(
                "energy-seller", str(offer_id),
                f"sold {sold[offer_id]} kWh exceeds offered {offer.energy_kwh}",
                sold[offer_id] - offer.energy_kwh))
    for offer_id in sorted(bought):
        offer = book.get(offer_id) or retired[offer_id]
        if bought[offer_id] > offer.energy_kwh + tol:
            violations.append(Violation(
                "energy-buyer", str(offer_id),
                f"bought {bought[offer_id]} kWh exceeds offered {offer.energy_kwh}",
                bought[offer_id] - offer.energy_kwh))

    for feeder_id, interval in sorted(set(production) | set(consumption)):
        feeder = feeders[feeder_id]
        prod = production.get((feeder_id, interval), 0.0)
        cons = consumption.get((feeder_id, interval), 0.0)
        net = prod - cons
        if abs(net) > feeder.net_flow_limit_kw + tol:
            violations.append(Violation(
                "feeder-net", f"{feeder_id}@{interval}",
                f"net flow {net} kW exceeds limit {feeder.net_flow_limit_kw}",
                abs(net) - feeder.net_flow_limit_kw))
        if prod > feeder.internal_limit_kw + tol:
            violations.append(Violation(
                "feeder-internal", f"{feeder_id}@{interval}",
                f"production {prod} kW exceeds limit {feeder.internal_limit_kw}",
                prod - feeder.internal_limit_kw))
        if cons > feeder.internal_limit_kw + tol:
            violations.append(Violation(
                "feeder-internal", f"{feeder_id}@{interval}",
                f"consumption {cons} kW exceeds limit {feeder.internal_limit_kw}",
                cons - feeder.internal_limit_kw))

    # Pinned intervals admit exactly the recorded values.
    by_interval: dict[int, dict[tuple[int, int], tuple[float, float]]] = {}
    for (s_id, b_id, interval), value in solution.items():
        if interval <= pinned.finalized_through:
            by_interval.setdefault(interval, {})[(s_id, b_id)] = value
    for interval in sorted(set(by_interval) | {
            t for t in range(0, pinned.finalized_through + 1) if pinned.entries(t)}):
        expected = pinned.entries(interval)
        actual = by_interval.get(interval, {})
        for pair in sorted(set(expected) | set(actual)):
            want_p, want_pi = expected.get(pair, (0.0, 0.0))
            have_p, have_pi = actual.get(pair, (0.0, 0.0))
            if abs(have_p - want_p) > tol or (pair in expected and pair in actual
                                              and abs(have_pi - want_pi) > tol):
                violations.append(Violation(
                    "pin-mismatch", f"({pair[0]},{pair[1]},{interval})",
                    f"finalized ({want_p}, {want_pi}) but solution has ({have_p}, {have_pi})"))

    return FeasibilityReport(tuple(violations))
