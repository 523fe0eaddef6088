"""Halo-exchange routing, deterministic reductions and an in-process rank harness.

Ranks are simulated by threads inside one process.  Mailboxes keyed by
``(src, dst)`` are the only channel between ranks; delivery is FIFO per
sender.  Reductions are always evaluated in ascending global-id order so the
result does not depend on how the data is partitioned.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
import threading

import numpy as np

__all__ = [
    "ExchangeError",
    "DeadlockError",
    "HarnessAborted",
    "RoutingTable",
    "RankHarness",
    "SerialComm",
    "RankComm",
    "build_routing",
    "halo_exchange",
    "canonical_sum",
    "global_sum",
    "run_ranks",
]


class ExchangeError(ValueError):
    pass


class DeadlockError(RuntimeError):
    pass


class HarnessAborted(RuntimeError):
    """Raised in surviving ranks after another rank failed."""


@dataclass
class RoutingTable:
    """Send/receive lists of one rank, per peer and per halo depth band.

    ``send[peer][d-1]`` holds local indices of owned dofs that ``peer`` keeps in
    its depth-``d`` band; ``recv[peer][d-1]`` the local halo indices filled from
    ``peer``.  Every list is in ascending global-id order.
    """

    rank: int
    max_depth: int
    send: dict = field(default_factory=dict)
    recv: dict = field(default_factory=dict)
    send_gids: dict = field(default_factory=dict)
    recv_gids: dict = field(default_factory=dict)

    def recv_count(self, depth: int) -> int:
        return sum(len(b) for bands in self.recv.values() for b in bands[:depth])

    def send_count(self, depth: int) -> int:
        return sum(len(b) for bands in self.send.values() for b in bands[:depth])


def build_routing(owned_ids, halo_ids) -> list[RoutingTable]:
    """Routing tables for every rank from global dof id lists.

    Parameters
    ----------
    owned_ids : sequence of arrays
        Per rank, the global ids of its owned dofs in local storage order
        (local indices ``0 .. n_owned-1``).
    halo_ids : sequence of sequences of arrays
        Per rank, per halo depth ``1..D``, global ids of the halo dofs in
        local storage order; they follow the owned dofs contiguously.
    """
    nranks = len(owned_ids)
    owner: dict[int, tuple[int, int]] = {}
    for r, ids in enumerate(owned_ids):
        for pos, g in enumerate(np.asarray(ids).tolist()):
            if g in owner:
                raise ExchangeError(f"global dof {g} owned by ranks {owner[g][0]} and {r}")
            owner[g] = (r, pos)
    max_depth = max((len(h) for h in halo_ids), default=0)
    tables = [RoutingTable(rank=r, max_depth=max_depth) for r in range(nranks)]
    for r in range(nranks):
        offset = len(owned_ids[r])
        for d, ids in enumerate(halo_ids[r]):
            ids = np.asarray(ids, dtype=np.int64)
            per_peer: dict[int, list] = {}
            for pos, g in enumerate(ids.tolist()):
                hit = owner.get(g)
                if hit is None:
                    raise ExchangeError(f"halo dof {g} on rank {r} is not owned by any rank")
                if hit[0] == r:
                    raise ExchangeError(f"halo dof {g} on rank {r} is owned by the same rank")
                per_peer.setdefault(hit[0], []).append((g, offset + pos, hit[1]))
            offset += len(ids)
            for peer, items in per_peer.items():
                items.sort()
                gids = np.array([i[0] for i in items], dtype=np.int64)
                me, them = tables[r], tables[peer]
                for t, p in ((me, peer), (them, r)):
                    for store in (t.send, t.recv, t.send_gids, t.recv_gids):
                        store.setdefault(p, [np.empty(0, dtype=np.int64) for _ in range(max_depth)])
                me.recv[peer][d] = np.array([i[1] for i in items], dtype=np.int64)
                me.recv_gids[peer][d] = gids
                them.send[r][d] = np.array([i[2] for i in items], dtype=np.int64)
                them.send_gids[r][d] = gids
    return tables


def canonical_sum(ids, values) -> float:
    """Sum of ``values`` taken in ascending ``ids`` order; ids must be unique."""
    ids = np.asarray(ids, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if len(ids) != len(values):
        raise ExchangeError("ids and values differ in length")
    if len(ids) > 1:
        step = np.diff(ids)
        if np.any(step <= 0):
            order = np.argsort(ids, kind="stable")
            ids = ids[order]
            values = values[order]
            step = np.diff(ids)
        dup = np.flatnonzero(step == 0)
        if len(dup):
            raise ExchangeError(f"global id {ids[dup[0]]} contributed more than once")
    return float(np.sum(values))


def _merge_and_sum(per_rank_pairs):
    """per_rank_pairs[r][i] = (ids, values) -> list of canonical sums per i."""
    nitems = len(per_rank_pairs[0])
    out = []
    for i in range(nitems):
        ids = np.concatenate([np.asarray(p[i][0], dtype=np.int64) for p in per_rank_pairs])
        vals = np.concatenate([np.asarray(p[i][1], dtype=float) for p in per_rank_pairs])
        out.append(canonical_sum(ids, vals))
    return out


class RankHarness:
    """Mailboxes between simulated ranks.

    ``mode="threads"`` lets rank threads run concurrently.  ``mode="sequential"``
    runs exactly one rank at a time: a rank keeps the baton until it blocks on an
    empty mailbox or finishes, then the next runnable rank (cyclic order) takes
    over.  If no rank can run the harness reports a deadlock.
    """

    def __init__(self, nranks: int, mode: str = "threads", timeout: float = 120.0):
        if mode not in ("threads", "sequential"):
            raise ValueError(f"unknown harness mode {mode!r}")
        self.nranks = nranks
        self.mode = mode
        self.timeout = timeout
        self.messages = 0
        self._boxes: dict = {}
        self._cv = threading.Condition()
        self._error: BaseException | None = None
        self._turn = 0
        self._status = ["ready"] * nranks
        self._waiting_on: list = [None] * nranks

    def _box(self, src, dst):
        return self._boxes.setdefault((src, dst), deque())

    def abort(self, exc: BaseException):
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def _check(self):
        if self._error is not None:
            raise HarnessAborted(f"aborted: {self._error!r}")

    def send(self, src: int, dst: int, payload, tag=None):
        with self._cv:
            self._check()
            self._box(src, dst).append((tag, payload))
            self.messages += 1
            if self._status[dst] == "blocked" and self._waiting_on[dst] == src:
                self._status[dst] = "ready"
            self._cv.notify_all()

    def recv(self, dst: int, src: int, tag=None):
        with self._cv:
            box = self._box(src, dst)
            if self.mode == "threads":
                ok = self._cv.wait_for(lambda: box or self._error is not None, self.timeout)
                self._check()
                if not ok:
                    raise DeadlockError(f"rank {dst} timed out waiting for rank {src}")
            else:
                while not box:
                    self._status[dst] = "blocked"
                    self._waiting_on[dst] = src
                    self._pass_baton(dst)
                    self._wait_turn_locked(dst)
                self._status[dst] = "ready"
                self._waiting_on[dst] = None
            got, payload = box.popleft()
            if tag is not None and got != tag:
                raise ExchangeError(f"rank {dst} expected message {tag!r} from {src}, got {got!r}")
            return payload

    # sequential scheduling ----------------------------------------------
    def _pass_baton(self, me: int):
        n = self.nranks
        for step in range(1, n + 1):
            r = (me + step) % n
            if self._status[r] == "ready":
                self._turn = r
                self._cv.notify_all()
                return
        if any(s == "blocked" for s in self._status):
            blocked = [r for r, s in enumerate(self._status) if s == "blocked"]
            err = DeadlockError(f"deadlock: ranks {blocked} blocked with empty mailboxes")
            if self._error is None:
                self._error = err
            self._cv.notify_all()
            raise err

    def _wait_turn_locked(self, me: int):
        ok = self._cv.wait_for(lambda: self._turn == me or self._error is not None, self.timeout)
        self._check()
        if not ok:
            raise DeadlockError(f"rank {me} never regained the baton")

    def _start(self, rank: int):
        if self.mode == "sequential":
            with self._cv:
                self._wait_turn_locked(rank)

    def _finish(self, rank: int):
        if self.mode == "sequential":
            with self._cv:
                self._status[rank] = "done"
                if self._turn == rank:
                    try:
                        self._pass_baton(rank)
                    except DeadlockError:
                        pass


def run_ranks(nranks: int, program, harness: RankHarness | None = None, mode: str = "threads"):
    """Run ``program(rank, harness)`` on every rank; return per-rank results.

    The first failing rank's exception is re-raised after all ranks stop.
    """
    if harness is None:
        harness = RankHarness(nranks, mode)
    if harness.nranks != nranks:
        raise ValueError("harness rank count mismatch")
    results: list = [None] * nranks
    errors: list = [None] * nranks

    def body(r):
        try:
            harness._start(r)
            results[r] = program(r, harness)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[r] = exc
            harness.abort(exc)
        finally:
            harness._finish(r)

    if nranks == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(nranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    primary = [e for e in errors if e is not None and not isinstance(e, HarnessAborted)]
    if primary:
        raise primary[0]
    secondary = [e for e in errors if e is not None]
    if secondary:
        raise secondary[0]
    return results


def halo_exchange(field, depth: int, table: RoutingTable, harness: RankHarness, tag=None):
    """Fill the halo of ``field`` to ``depth`` with owner values (all bands 1..depth)."""
    if depth > table.max_depth:
        raise ExchangeError(f"exchange depth {depth} exceeds routing depth {table.max_depth}")
    if depth <= 0:
        return field
    rank = table.rank
    data = field.data
    for peer in sorted(table.send):
        idx = np.concatenate(table.send[peer][:depth])
        if len(idx):
            harness.send(rank, peer, data[idx].copy(), tag)
    for peer in sorted(table.recv):
        idx = np.concatenate(table.recv[peer][:depth])
        if len(idx):
            vals = harness.recv(rank, peer, tag)
            if len(vals) != len(idx):
                raise ExchangeError(f"rank {rank}: {len(vals)} values from {peer}, expected {len(idx)}")
            data[idx] = vals
    field.clean_halo_depth = max(field.clean_halo_depth, depth)
    return field


def global_sum(local_contributions, harness: RankHarness | None = None) -> float:
    """Canonical sum of per-rank ``(ids, values)`` contributions.

    With a harness the contributions are reduced collectively through
    mailboxes; the result is identical either way.
    """
    if harness is None:
        return _merge_and_sum([[c] for c in local_contributions])[0]
    n = len(local_contributions)

    def prog(rank, h):
        return RankComm(h, rank).allreduce_sums([local_contributions[rank]])[0]

    return run_ranks(n, prog, harness)[0]


class SerialComm:
    """Single-rank communicator: reductions are local, exchanges are no-ops."""

    rank = 0
    nranks = 1

    def __init__(self):
        self.reductions = 0
        self.exchanges = 0

    def allreduce_sums(self, pairs):
        self.reductions += 1
        return _merge_and_sum([pairs])

    def halo_exchange(self, field, depth: int):
        if depth > field.max_depth:
            raise ExchangeError(f"exchange depth {depth} exceeds max halo depth {field.max_depth}")
        self.exchanges += 1
        field.clean_halo_depth = max(field.clean_halo_depth, depth)


class RankComm:
    """Communicator of one simulated rank.

    Collective calls must be made by every rank in the same order; message
    tags carry a per-rank sequence number to catch mismatches.
    """

    def __init__(self, harness: RankHarness, rank: int):
        self.harness = harness
        self.rank = rank
        self.nranks = harness.nranks
        self.tables: dict[str, RoutingTable] = {}
        self.reductions = 0
        self.exchanges = 0
        self._seq = 0

    def _tag(self, what):
        self._seq += 1
        return (what, self._seq)

    def allreduce_sums(self, pairs):
        self.reductions += 1
        tag = self._tag("sum")
        h = self.harness
        if self.nranks == 1:
            return _merge_and_sum([pairs])
        if self.rank != 0:
            h.send(self.rank, 0, pairs, tag)
            return h.recv(self.rank, 0, tag)
        gathered = [pairs] + [h.recv(0, r, tag) for r in range(1, self.nranks)]
        result = _merge_and_sum(gathered)
        for r in range(1, self.nranks):
            h.send(0, r, result, tag)
        return result

    def halo_exchange(self, field, depth: int):
        kind = field.space.kind
        table = self.tables.get(kind)
        if table is None:
            raise ExchangeError(f"no routing table for space {kind} on rank {self.rank}")
        self.exchanges += 1
        halo_exchange(field, depth, table, self.harness, self._tag(("halo", kind, depth)))
