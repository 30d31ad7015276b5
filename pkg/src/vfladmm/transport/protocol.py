"""Coordinator and party roles of the synchronous sharing protocol.

Message sequence for ``T`` rounds::

    party        REGISTER(0)  [N, d_m]
    coordinator  ACK(0)       [N, M, T]            (state 0: a = 0, y = 0)
    party        PUSH_SHARE(t)  released share, t = 1..T
    coordinator  BROADCAST(t)   (a^t, y^t),       t = 1..T
    coordinator  SHUTDOWN(T + 1)

Each party answers ``ACK`` and every ``BROADCAST(t)`` with ``t < T`` by a
push; ``BROADCAST(T)`` only delivers the final state.  The coordinator never
sees ``x_m``.  Party-side diagnostic terms stay with the party and are
combined with the coordinator's terms afterwards by :func:`assemble_trace`.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .. import engine
from ..dataset import PartyShard
from ..engine import CoordinatorTerms, DiagnosticsRecord, HyperParams, PartyTerms
from .links import DEFAULT_TIMEOUT, LocalBus, TcpCoordinatorLink, TcpPartyLink, TransportError
from .wire import Kind, Message, ProtocolError

log = logging.getLogger(__name__)


@dataclass
class CoordinatorLog:
    """What the coordinator learns during a run."""

    n_samples: int
    widths: tuple[int, ...]
    terms: list[CoordinatorTerms] = field(default_factory=list)
    dy_sq: list[float] = field(default_factory=list)
    dz_sq: list[float] = field(default_factory=list)
    z: np.ndarray | None = None
    y: np.ndarray | None = None
    total: np.ndarray | None = None


@dataclass
class PartyLog:
    party_id: int
    x: np.ndarray
    terms: list[PartyTerms] = field(default_factory=list)


def _abort(link, conns, iteration):
    # best effort: tell everyone to stop
    for c in conns:
        try:
            link.send(c, Message(Kind.SHUTDOWN, iteration))
        except Exception:
            pass


def coordinator_serve(link, labels, hyper: HyperParams, n_parties: int,
                      timeout: float = DEFAULT_TIMEOUT,
                      on_round: Callable[[int, CoordinatorLog], None] | None = None) -> CoordinatorLog:
    """Run the central node: register parties, then ``hyper.max_epochs`` rounds.

    Shares are summed in ascending party id whatever order they arrive in,
    so the result does not depend on network timing.

    Raises
    ------
    ProtocolError
        Duplicate, missing or out-of-order pushes, or a bad registration.
    TransportTimeout
        A party went silent for longer than ``timeout`` seconds.
    """
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    N = labels.shape[0]
    T = hyper.max_epochs
    link.accept(timeout)

    conn_of: dict[int, int] = {}
    widths: dict[int, int] = {}
    all_conns = range(link.n_connections)
    try:
        while len(conn_of) < n_parties:
            conn, msg = link.recv_any(timeout)
            if msg.kind != Kind.REGISTER or msg.iteration != 0:
                raise ProtocolError(f"connection {conn}: expected REGISTER(0), got {msg.kind.name}({msg.iteration})")
            pid = msg.party_id
            meta = msg.payload[0]
            if meta.size != 2:
                raise ProtocolError(f"party {pid}: registration needs [N, d_m]")
            if not 0 <= pid < n_parties:
                raise ProtocolError(f"party id {pid} outside 0..{n_parties - 1}")
            if pid in conn_of:
                raise ProtocolError(f"party {pid} registered twice")
            if conn in conn_of.values():
                raise ProtocolError(f"connection {conn} registered twice")
            if int(meta[0]) != N:
                raise ProtocolError(f"party {pid}: registration rejected, N={int(meta[0])} but labels have N={N}")
            conn_of[pid] = conn
            widths[pid] = int(meta[1])
        order = sorted(conn_of)
        for pid in order:
            link.send(conn_of[pid], Message(Kind.ACK, 0, 0, (np.array([N, n_parties, T], dtype=float),)))

        out = CoordinatorLog(N, tuple(widths[p] for p in order))
        pid_of = {c: p for p, c in conn_of.items()}
        y = np.zeros(N)
        z = np.zeros(N)
        for t in range(1, T + 1):
            got: dict[int, np.ndarray] = {}
            while len(got) < n_parties:
                try:
                    conn, msg = link.recv_any(timeout)
                except TransportError as exc:
                    missing = [p for p in order if p not in got]
                    raise type(exc)(f"iteration {t}: no share from parties {missing}: {exc}") from exc
                pid = pid_of.get(conn)
                if msg.kind != Kind.PUSH_SHARE:
                    raise ProtocolError(f"party {pid}: unexpected {msg.kind.name} at iteration {t}")
                if msg.party_id != pid:
                    raise ProtocolError(f"connection registered as party {pid} pushed as party {msg.party_id}")
                if msg.iteration != t:
                    if msg.iteration < t or pid in got:
                        raise ProtocolError(f"party {pid}: duplicate share for iteration {msg.iteration} (at t={t})")
                    raise ProtocolError(f"party {pid}: share for iteration {msg.iteration} while expecting t={t}")
                if pid in got:
                    raise ProtocolError(f"party {pid}: duplicate share for iteration {t}")
                share = msg.payload[0]
                if share.shape != (N,):
                    raise ProtocolError(f"party {pid}: share length {share.size} != N={N}")
                got[pid] = share
            prev_y, prev_z = y, z
            total, z, y = engine.coordinator_update([got[p] for p in order], y, labels, hyper)
            aggregate = total - z
            terms = engine.coordinator_terms(total, z, y, labels, hyper)
            if terms.dual_gap > engine.DUAL_GAP_TOL:
                log.warning("iteration %d: dual identity gap %.3e", t, terms.dual_gap)
            out.terms.append(terms)
            dy, dz = y - prev_y, z - prev_z
            out.dy_sq.append(float(dy @ dy))
            out.dz_sq.append(float(dz @ dz))
            out.z, out.y, out.total = z, y, total
            for pid in order:
                link.send(conn_of[pid], Message(Kind.BROADCAST, t, 0, (aggregate, y)))
            if on_round is not None:
                on_round(t, out)
        for pid in order:
            link.send(conn_of[pid], Message(Kind.SHUTDOWN, T + 1))
        return out
    except (ProtocolError, TransportError):
        _abort(link, all_conns, T + 1)
        raise


def party_serve(shard: PartyShard, link, hyper: HyperParams, privacy=None, sigma_multiplier: float = 1.0,
                timeout: float = DEFAULT_TIMEOUT,
                on_round: Callable[[int, np.ndarray], None] | None = None) -> PartyLog:
    """Run party ``shard.party_id``: x-updates from broadcasts, one share pushed per round.

    With ``privacy`` set the x-update is confined to the ``b1`` ball and only
    the perturbed share is sent; the cache holds that released share, exactly
    what the coordinator summed.  ``on_round(t, x)`` sees every iterate.

    Raises
    ------
    ProtocolError
        Out-of-order broadcast or an early shutdown.
    TransportTimeout
        The coordinator went silent for longer than ``timeout`` seconds.
    """
    pid = shard.party_id
    N = shard.n_samples
    link.connect(timeout)
    link.send(Message(Kind.REGISTER, 0, pid, (np.array([N, shard.width], dtype=float),)))
    ack = link.recv(timeout)
    if ack.kind == Kind.SHUTDOWN:
        raise ProtocolError(f"party {pid}: registration rejected by coordinator")
    if ack.kind != Kind.ACK or ack.iteration != 0:
        raise ProtocolError(f"party {pid}: expected ACK(0), got {ack.kind.name}({ack.iteration})")
    n_acked, M, T = (int(v) for v in ack.payload[0])
    if n_acked != N:
        raise ProtocolError(f"party {pid}: coordinator N={n_acked} differs from local N={N}")

    perturber = None
    if privacy is not None:
        from ..privacy import calibrate_party, party_rng, perturb_share
        if hyper.ball_radius is None:
            hyper = replace(hyper, ball_radius=privacy.b1)
        sigma = calibrate_party(shard.width, M, hyper.rho, hyper.lam, privacy, sigma_multiplier).sigma
        rng = party_rng(privacy.seed, pid)

        def perturber(s):
            return perturb_share(s, sigma, rng)

    x = np.zeros(shard.width)
    cached = np.zeros(N)
    aggregate = np.zeros(N)
    y = np.zeros(N)
    out = PartyLog(pid, x)
    for t in range(1, T + 1):
        x, s = engine.party_update(shard, x, cached, aggregate, y, hyper)
        cached = s if perturber is None else perturber(s)
        link.send(Message(Kind.PUSH_SHARE, t, pid, (cached,)))
        msg = link.recv(timeout)
        if msg.kind == Kind.SHUTDOWN:
            raise ProtocolError(f"party {pid}: coordinator shut down at iteration {t}")
        if msg.kind != Kind.BROADCAST or msg.iteration != t:
            raise ProtocolError(f"party {pid}: expected BROADCAST({t}), got {msg.kind.name}({msg.iteration})")
        aggregate, y = msg.payload
        if aggregate.shape != (N,):
            raise ProtocolError(f"party {pid}: broadcast length {aggregate.size} != N={N}")
        out.terms.append(engine.party_terms(shard, x, aggregate, y, hyper))
        if on_round is not None:
            on_round(t, x)
    msg = link.recv(timeout)
    if msg.kind != Kind.SHUTDOWN or msg.iteration != T + 1:
        raise ProtocolError(f"party {pid}: expected SHUTDOWN({T + 1}), got {msg.kind.name}({msg.iteration})")
    out.x = x
    return out


def assemble_trace(coord: CoordinatorLog, parties: Sequence[PartyLog], hyper: HyperParams) -> list[DiagnosticsRecord]:
    """Merge coordinator and party terms into the engine's per-epoch records."""
    parties = sorted(parties, key=lambda p: p.party_id)
    T = len(coord.terms)
    for p in parties:
        if len(p.terms) != T:
            raise ValueError(f"party {p.party_id} logged {len(p.terms)} rounds, coordinator {T}")
    return [
        engine.combine_terms(t + 1, coord.terms[t], [p.terms[t] for p in parties], hyper,
                             coord.dy_sq[t], coord.dz_sq[t])
        for t in range(T)
    ]


@dataclass
class DistributedResult:
    trace: list[DiagnosticsRecord]
    coordinator: CoordinatorLog
    parties: list[PartyLog]

    @property
    def x(self) -> tuple[np.ndarray, ...]:
        return tuple(p.x for p in self.parties)


def simulate(shards: Sequence[PartyShard], labels, hyper: HyperParams, privacy=None,
             sigma_multiplier: float = 1.0, backend: str = "local", timeout: float = DEFAULT_TIMEOUT,
             address: str = "127.0.0.1:0", wrap_party_link: Callable | None = None,
             party_round: Callable[[int, int, np.ndarray], None] | None = None) -> DistributedResult:
    """Run coordinator and parties in one process, parties on threads.

    ``backend`` is ``"local"`` (in-memory bus) or ``"tcp"`` (loopback
    sockets).  ``wrap_party_link(party_id, link)`` may substitute a test
    double around each party's link.
    """
    M = len(shards)
    if backend == "local":
        bus = LocalBus(M)
        clink = bus.coordinator_link()
        plinks = [bus.party_link(m) for m in range(M)]
    elif backend == "tcp":
        clink = TcpCoordinatorLink(address, M)
        plinks = [TcpPartyLink(clink.address) for _ in range(M)]
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if wrap_party_link is not None:
        plinks = [wrap_party_link(m, lk) for m, lk in enumerate(plinks)]

    results: list[PartyLog | None] = [None] * M
    errors: list[BaseException] = []

    def party(m):
        cb = None if party_round is None else (lambda t, x: party_round(m, t, x))
        try:
            results[m] = party_serve(shards[m], plinks[m], hyper, privacy, sigma_multiplier, timeout, cb)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)
        finally:
            plinks[m].close()

    threads = [threading.Thread(target=party, args=(m,), daemon=True, name=f"party-{m}") for m in range(M)]
    for th in threads:
        th.start()
    try:
        coord = coordinator_serve(clink, labels, hyper, M, timeout)
    finally:
        for th in threads:
            th.join(timeout)
        clink.close()
    if errors:
        raise errors[0]
    return DistributedResult(assemble_trace(coord, results, hyper), coord, list(results))
