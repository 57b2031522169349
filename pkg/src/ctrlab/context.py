"""Context keys, same-context masks, session-window batching and rank-loss subsampling.

A "context" is the grouping key over which the listwise generative loss
contrasts samples: the whole minibatch, the user's gender, the placement
domain, or a per-user session window.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, StreamError

logger = logging.getLogger(__name__)

CONTEXT_KINDS = ("batch", "gender", "domain", "session")


@dataclass
class Sample:
    """One impression: sparse categorical features plus grouping metadata."""

    features: list[tuple[int, int]]  # (field_index, categorical id)
    label: int
    user_id: object
    timestamp: float
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.timestamp < 0:
            raise DataError(f"timestamp must be >= 0, got {self.timestamp!r}")


@dataclass(frozen=True)
class ContextPolicy:
    """How samples are grouped into contexts."""

    kind: str
    session_window_seconds: int = 600

    def __post_init__(self):
        if self.kind not in CONTEXT_KINDS:
            raise ConfigError(
                f"unknown context kind {self.kind!r}; expected one of {CONTEXT_KINDS}"
            )
        if self.session_window_seconds <= 0:
            raise ConfigError("session_window_seconds must be positive")


@dataclass
class ContextBatch:
    """A minibatch with per-sample context keys and the same-context mask."""

    samples: list[Sample]
    context_index: list
    mask: np.ndarray

    @classmethod
    def from_keys(cls, samples: Sequence[Sample], keys: Sequence) -> "ContextBatch":
        return cls(list(samples), list(keys), build_mask(keys))

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)


def assign_context(samples: Sequence[Sample], policy: ContextPolicy) -> list:
    """Per-sample context keys under the given policy.

    batch: a single shared key.  gender/domain: the corresponding attr value.
    session: (user_id, window_ordinal) with tumbling windows anchored at each
    user's first not-yet-assigned sample, in timestamp order.
    """
    if policy.kind == "batch":
        return [0] * len(samples)

    if policy.kind in ("gender", "domain"):
        keys = []
        for i, s in enumerate(samples):
            if policy.kind not in s.attrs:
                raise DataError(
                    f"sample {i} (user {s.user_id!r}) is missing attr {policy.kind!r}"
                )
            keys.append(s.attrs[policy.kind])
        return keys

    # session: tumbling per-user windows, anchored at the first unassigned sample
    window = float(policy.session_window_seconds)
    order = sorted(range(len(samples)), key=lambda i: (samples[i].timestamp, i))
    anchors: dict = {}  # user -> (anchor_ts, window_ordinal)
    keys = [None] * len(samples)
    for i in order:
        s = samples[i]
        cur = anchors.get(s.user_id)
        if cur is None or s.timestamp >= cur[0] + window:
            ordinal = 0 if cur is None else cur[1] + 1
            cur = (s.timestamp, ordinal)
            anchors[s.user_id] = cur
        keys[i] = (s.user_id, cur[1])
    return keys


def build_mask(context_index: Sequence) -> np.ndarray:
    """Boolean matrix with mask[i][j] = (key_i == key_j)."""
    ids = {}
    dense = np.empty(len(context_index), dtype=np.int64)
    for i, k in enumerate(context_index):
        dense[i] = ids.setdefault(k, len(ids))
    return dense[:, None] == dense[None, :]


class _OpenSession:
    __slots__ = ("user", "anchor", "seq", "samples")

    def __init__(self, user, anchor: float, seq: int):
        self.user = user
        self.anchor = anchor
        self.seq = seq
        self.samples: list[Sample] = []


def stream_batcher(
    events: Iterable[Sample],
    policy: ContextPolicy,
    max_batch: int,
) -> Iterator[ContextBatch]:
    """Group a (near-)time-ordered event stream into whole-context minibatches.

    session policy: samples of one user within one tumbling window form a
    context; a context is flushed once its window closes, and closed contexts
    are packed into batches of at most max_batch samples without ever being
    split across batches.  Contexts larger than max_batch are split into
    sub-contexts with a logged warning.

    batch/gender/domain policies: batches are filled in arrival order and the
    context keys are assigned within each batch (scoped by batch ordinal, so
    no two batches ever share a key).

    Timestamp regressions are tolerated up to the window length; anything
    older raises StreamError.
    """
    if max_batch < 1:
        raise ConfigError("max_batch must be >= 1")
    window = float(policy.session_window_seconds)

    if policy.kind != "session":
        yield from _plain_batcher(events, policy, max_batch, window)
        return

    open_by_user: dict[object, _OpenSession] = {}
    expiry_heap: list[tuple[float, int, object]] = []  # (anchor+window, seq, user)
    pending: list[tuple[object, list[Sample]]] = []  # closed contexts awaiting emission
    pending_size = 0
    batch_ordinal = 0
    seq = 0
    stream_time = -np.inf

    def close(sess: _OpenSession) -> None:
        nonlocal pending_size
        key = (sess.user, sess.anchor)
        if len(sess.samples) > max_batch:
            logger.warning(
                "context %r has %d samples > max_batch=%d; splitting into sub-contexts",
                key, len(sess.samples), max_batch,
            )
            for part, lo in enumerate(range(0, len(sess.samples), max_batch)):
                chunk = sess.samples[lo:lo + max_batch]
                pending.append(((key, part), chunk))
                pending_size += len(chunk)
        else:
            pending.append((key, sess.samples))
            pending_size += len(sess.samples)

    def emit_ready(final: bool) -> Iterator[ContextBatch]:
        """Emit batches from `pending`, only when a full batch can be cut (or at end)."""
        nonlocal pending_size, batch_ordinal
        while pending:
            batch: list[tuple[object, list[Sample]]] = []
            size = 0
            while pending and size + len(pending[0][1]) <= max_batch:
                ctx = pending.pop(0)
                batch.append(ctx)
                size += len(ctx[1])
            if not batch:  # head context alone exceeds max_batch: cannot happen (split at close)
                raise AssertionError("unsplit oversize context in pending queue")
            if not final and not pending:
                # stream still running and everything fit: hold back unless full
                if size < max_batch:
                    pending[:0] = batch
                    return
            pending_size -= size
            samples = [s for _, chunk in batch for s in chunk]
            keys = [key for key, chunk in batch for _ in chunk]
            yield ContextBatch.from_keys(samples, keys)
            batch_ordinal += 1

    for ev in events:
        if ev.timestamp < stream_time - window:
            raise StreamError(
                f"timestamp regression beyond the {window:.0f}s window: "
                f"got {ev.timestamp}, stream already at {stream_time}"
            )
        stream_time = max(stream_time, ev.timestamp)

        # flush sessions whose window has closed, oldest anchor first
        while expiry_heap and expiry_heap[0][0] <= stream_time:
            _, s_seq, user = heapq.heappop(expiry_heap)
            sess = open_by_user.get(user)
            if sess is not None and sess.seq == s_seq:
                del open_by_user[user]
                close(sess)

        sess = open_by_user.get(ev.user_id)
        if sess is not None and ev.timestamp < sess.anchor:
            # tolerated late event older than the open session: emit alone so
            # no session ever spans more than one window
            pending.append(((ev.user_id, ev.timestamp, seq), [ev]))
            pending_size += 1
            seq += 1
        else:
            if sess is None or ev.timestamp >= sess.anchor + window:
                if sess is not None:
                    del open_by_user[ev.user_id]
                    close(sess)
                sess = _OpenSession(ev.user_id, ev.timestamp, seq)
                heapq.heappush(expiry_heap, (ev.timestamp + window, seq, ev.user_id))
                seq += 1
                open_by_user[ev.user_id] = sess
            sess.samples.append(ev)

        if pending_size >= max_batch:
            yield from emit_ready(final=False)

    for sess in sorted(open_by_user.values(), key=lambda s: (s.anchor, s.seq)):
        close(sess)
    yield from emit_ready(final=True)


def _plain_batcher(
    events: Iterable[Sample], policy: ContextPolicy, max_batch: int, window: float
) -> Iterator[ContextBatch]:
    buf: list[Sample] = []
    ordinal = 0
    stream_time = -np.inf
    for ev in events:
        if ev.timestamp < stream_time - window:
            raise StreamError(
                f"timestamp regression beyond the {window:.0f}s window: "
                f"got {ev.timestamp}, stream already at {stream_time}"
            )
        stream_time = max(stream_time, ev.timestamp)
        buf.append(ev)
        if len(buf) == max_batch:
            yield _emit_plain(buf, policy, ordinal)
            ordinal += 1
            buf = []
    if buf:
        yield _emit_plain(buf, policy, ordinal)


def _emit_plain(buf: list[Sample], policy: ContextPolicy, ordinal: int) -> ContextBatch:
    local = assign_context(buf, policy)
    keys = [(ordinal, k) for k in local]
    return ContextBatch.from_keys(buf, keys)


def drop_for_rank(batch: ContextBatch, drop_rate: float, seed: int) -> np.ndarray:
    """Boolean participation flags for the generative (rank) loss.

    Flagged-out samples are removed from the rank loss's softmax sets and
    terms; the pointwise/calibration loss is unaffected.  Deterministic
    under seed.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ConfigError(f"drop_rate must be in [0, 1], got {drop_rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.random(len(batch.samples)) >= drop_rate
