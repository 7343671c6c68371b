"""Deterministic simulated message passing for the space-time solver.

Ranks live in one process; rank = tile + N_sub * window.  Communicators
are views on a shared fabric of FIFO queues keyed by (communicator, sender,
receiver, tag), so delivery order is fully determined by program order.
"split" groups ranks working on the same tile across windows, and
"create_inter" groups the tiles of one window; both partition the world.

Because every rank runs in program order, a wait() on an empty queue can
never be satisfied later: it is reported as a deadlock immediately, naming
the channel.  The world keeps a message log (step, sender, receiver, tag,
bytes) for the optional messages.csv diagnostic.

Senders' array payloads are copied at enqueue time, so a receiver always
sees the values as they were when sent, bit-exactly.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .grid import SIDES

__all__ = [
    "Communicator",
    "DeadlockError",
    "World",
    "create_inter",
    "halo_exchange",
    "split",
    "world_comm",
]


class DeadlockError(RuntimeError):
    pass


class World:
    """Rank space of the simulation: n_sub tiles times n_t windows."""

    def __init__(self, n_sub, n_t):
        if n_sub < 1 or n_t < 1:
            raise ValueError("n_sub and n_t must be >= 1")
        self.n_sub = int(n_sub)
        self.n_t = int(n_t)
        self._queues = {}
        self.log = []
        self._step = 0

    @property
    def n_ranks(self):
        return self.n_sub * self.n_t

    def rank_of(self, tile, window):
        if not (0 <= tile < self.n_sub and 0 <= window < self.n_t):
            raise ValueError(f"no rank for tile {tile}, window {window}")
        return tile + self.n_sub * window

    def tile_of(self, rank):
        return rank % self.n_sub

    def window_of(self, rank):
        return rank // self.n_sub

    def _enqueue(self, key, payload, nbytes):
        self._queues.setdefault(key, deque()).append(payload)
        self._step += 1
        comm_id, src, dst, tag = key
        self.log.append((self._step, src, dst, tag, nbytes))

    def _dequeue(self, key):
        q = self._queues.get(key)
        if not q:
            return None
        return q.popleft()


@dataclass(frozen=True)
class _RecvHandle:
    comm: "Communicator"
    src: int
    dst: int
    tag: int


@dataclass(frozen=True)
class _SendHandle:
    pass


class Communicator:
    """Membership-checked endpoint into the world's message fabric."""

    def __init__(self, world, members, kind):
        members = tuple(members)
        if len(set(members)) != len(members):
            raise ValueError("duplicate ranks in communicator")
        if any(r < 0 or r >= world.n_ranks for r in members):
            raise ValueError("member outside the world")
        self.world = world
        self.members = members
        self.kind = kind
        self._id = (kind,) + members

    @property
    def size(self):
        return len(self.members)

    def _check_member(self, rank, role):
        if rank not in self.members:
            raise ValueError(f"{role} rank {rank} not in {self.kind} "
                             f"communicator {self.members}")

    def isend(self, src, dst, tag, payload):
        self._check_member(src, "sending")
        self._check_member(dst, "receiving")
        if isinstance(payload, np.ndarray):
            nbytes = payload.nbytes
            payload = payload.copy()
        else:
            nbytes = len(repr(payload).encode())
        self.world._enqueue((self._id, src, dst, int(tag)), payload, nbytes)
        return _SendHandle()

    def irecv(self, dst, src, tag):
        self._check_member(src, "sending")
        self._check_member(dst, "receiving")
        return _RecvHandle(self, src, dst, int(tag))

    def wait(self, handle):
        if isinstance(handle, _SendHandle):
            return None
        payload = self.world._dequeue((self._id, handle.src, handle.dst,
                                       handle.tag))
        if payload is None:
            raise DeadlockError(
                f"deadlock: rank {handle.dst} waiting on message "
                f"{handle.src}->{handle.dst} tag {handle.tag} in {self.kind} "
                f"communicator {self.members}; no matching send was posted")
        return payload

    def recv(self, dst, src, tag):
        return self.wait(self.irecv(dst, src, tag))


def world_comm(world):
    return Communicator(world, range(world.n_ranks), "world")


def split(world, tile):
    """Intra communicator of one tile: its ranks across all windows."""
    if not (0 <= tile < world.n_sub):
        raise ValueError(f"tile {tile} outside world")
    members = [world.rank_of(tile, k) for k in range(world.n_t)]
    return Communicator(world, members, "intra")


def create_inter(world, window):
    """Inter communicator of one window: all tiles at that window."""
    if not (0 <= window < world.n_t):
        raise ValueError(f"window {window} outside world")
    members = [world.rank_of(i, window) for i in range(world.n_sub)]
    return Communicator(world, members, "inter")


def halo_exchange(comm, layout, fields, window=0, tag_base=0):
    """Fill every tile's halo strips from the owning neighbors, in place.

    fields maps tile id -> array of shape (..., box_nx, box_ny).  Only halo
    strips are written; owned interiors are never touched.  Exchange order
    is fixed (side order, then tile id), so the message log is
    deterministic.
    """
    for tid, tile in enumerate(layout.tiles):
        want = (fields[tid].shape[-2], fields[tid].shape[-1])
        if want != tile.box_shape:
            raise ValueError(f"tile {tid}: field shape {want} does not match "
                             f"box {tile.box_shape}")
    for s, side in enumerate(SIDES):
        tag = tag_base + s
        for tile in layout.tiles:
            nb = tile.neighbors.get(side)
            if nb is None:
                continue
            neighbor = layout.tile(nb)
            gsl_i, gsl_j = tile.halo_slices[side]
            loc_i = slice(gsl_i.start - neighbor.bi0, gsl_i.stop - neighbor.bi0)
            loc_j = slice(gsl_j.start - neighbor.bj0, gsl_j.stop - neighbor.bj0)
            strip = fields[nb][..., loc_i, loc_j]
            comm.isend(comm.world.rank_of(nb, window),
                       comm.world.rank_of(tile.id, window), tag, strip)
    for s, side in enumerate(SIDES):
        tag = tag_base + s
        for tile in layout.tiles:
            nb = tile.neighbors.get(side)
            if nb is None:
                continue
            strip = comm.recv(comm.world.rank_of(tile.id, window),
                              comm.world.rank_of(nb, window), tag)
            sl_i, sl_j = tile.halo_slices_local(side)
            fields[tile.id][..., sl_i, sl_j] = strip
