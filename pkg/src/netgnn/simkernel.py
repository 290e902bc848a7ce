"""Event-driven FIFO queueing kernel.

One flat event loop over typed arrays so numba can compile it; without numba
the same functions run interpreted (much slower, same results modulo libm).
Packets keep their size across hops; each link is a drop-tail FIFO queue
drained at the link rate. Events are ordered by (time, sequence number) so
runs are deterministic for a given seed.

Packet accounting: packets created in [warmup, duration) are counted, and the
run continues past `duration` (with generation stopped) until every counted
packet is delivered or dropped, which makes the conservation identity exact.
"""

from __future__ import annotations

import math
import os

import numpy as np

_USE_NUMBA = os.environ.get("NETGNN_NO_NUMBA", "") == ""
if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False
if not _USE_NUMBA:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(f):
            return f

        return deco

HAVE_NUMBA = _USE_NUMBA

# splitmix64 constants
_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_U01 = 1.0 / 9007199254740992.0  # 2^-53

# event kinds
_EV_GEN = 0      # generate the next packet of pair `a`
_EV_DONE = 1     # service completion on link `a`
_EV_HOP = 2      # propagated arrival of packet `b` at link `a`

STATUS_OK = 0
STATUS_POOL_EXHAUSTED = 1


@njit(cache=True)
def _rand_u01(state):
    state[0] += _GOLD
    z = state[0]
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    z = z ^ (z >> _S31)
    return (z >> _S11) * _U01


@njit(cache=True)
def _rand_exp(state, rate):
    # inverse CDF; u in [0, 1) keeps the log argument in (0, 1]
    return -math.log(1.0 - _rand_u01(state)) / rate


@njit(cache=True)
def _heap_push(ht, hs, hk, ha, hb, size, t, seq, kind, a, b):
    i = size
    ht[i] = t
    hs[i] = seq
    hk[i] = kind
    ha[i] = a
    hb[i] = b
    while i > 0:
        parent = (i - 1) >> 1
        if ht[i] < ht[parent] or (ht[i] == ht[parent] and hs[i] < hs[parent]):
            ht[i], ht[parent] = ht[parent], ht[i]
            hs[i], hs[parent] = hs[parent], hs[i]
            hk[i], hk[parent] = hk[parent], hk[i]
            ha[i], ha[parent] = ha[parent], ha[i]
            hb[i], hb[parent] = hb[parent], hb[i]
            i = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(ht, hs, hk, ha, hb, size):
    last = size - 1
    ht[0], ht[last] = ht[last], ht[0]
    hs[0], hs[last] = hs[last], hs[0]
    hk[0], hk[last] = hk[last], hk[0]
    ha[0], ha[last] = ha[last], ha[0]
    hb[0], hb[last] = hb[last], hb[0]
    size = last
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and (
            ht[right] < ht[left] or (ht[right] == ht[left] and hs[right] < hs[left])
        ):
            child = right
        if ht[child] < ht[i] or (ht[child] == ht[i] and hs[child] < hs[i]):
            ht[i], ht[child] = ht[child], ht[i]
            hs[i], hs[child] = hs[child], hs[i]
            hk[i], hk[child] = hk[child], hk[i]
            ha[i], ha[child] = ha[child], ha[i]
            hb[i], hb[child] = hb[child], hb[i]
            i = child
        else:
            break
    return size


@njit(cache=True)
def _run_events(
    capacity,        # float64[n_links] service rate per link row
    buffer_packets,  # int64
    path_links,      # int64[n_triples] flattened link-row sequences
    path_start,      # int64[n_pairs + 1]
    rates,           # float64[n_pairs]
    duration,        # float64 generation horizon
    warmup,          # float64
    size_exp,        # int64: 1 exponential unit mean, 0 fixed
    fixed_size,      # float64
    prop_delay,      # float64
    seed,            # uint64
    generated, delivered, dropped,      # int64[n_pairs] outputs
    sum_delay, sum_delay_sq,            # float64[n_pairs] outputs
):
    n_links = capacity.shape[0]
    n_pairs = rates.shape[0]

    state = np.empty(1, dtype=np.uint64)
    state[0] = seed
    # scramble once so nearby seeds decorrelate
    _rand_u01(state)

    pool = n_links * (buffer_packets + 1) + 64
    if prop_delay > 0.0:
        total_rate = 0.0
        for p in range(n_pairs):
            total_rate += rates[p]
        pool += int(total_rate * prop_delay * 8.0) + 1024
    pkt_pair = np.empty(pool, dtype=np.int64)
    pkt_pos = np.empty(pool, dtype=np.int64)
    pkt_created = np.empty(pool, dtype=np.float64)
    pkt_size = np.empty(pool, dtype=np.float64)
    pkt_counted = np.empty(pool, dtype=np.int64)
    free_list = np.empty(pool, dtype=np.int64)
    for i in range(pool):
        free_list[i] = pool - 1 - i
    free_top = pool

    queue = np.empty((n_links, buffer_packets), dtype=np.int64)
    q_head = np.zeros(n_links, dtype=np.int64)
    q_count = np.zeros(n_links, dtype=np.int64)
    serving = np.full(n_links, -1, dtype=np.int64)

    heap_cap = n_pairs + n_links + pool + 8
    hp_t = np.empty(heap_cap, dtype=np.float64)
    hp_s = np.empty(heap_cap, dtype=np.int64)
    hp_k = np.empty(heap_cap, dtype=np.int64)
    hp_a = np.empty(heap_cap, dtype=np.int64)
    hp_b = np.empty(heap_cap, dtype=np.int64)
    heap_size = 0
    seq = 0

    for p in range(n_pairs):
        if rates[p] > 0.0:
            t0 = _rand_exp(state, rates[p])
            if t0 < duration:
                heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                       t0, seq, _EV_GEN, p, -1)
                seq += 1

    while heap_size > 0:
        now = hp_t[0]
        kind = hp_k[0]
        a = hp_a[0]
        b = hp_b[0]
        heap_size = _heap_pop(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size)

        if kind == _EV_GEN:
            p = a
            t_next = now + _rand_exp(state, rates[p])
            if t_next < duration:
                heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                       t_next, seq, _EV_GEN, p, -1)
                seq += 1
            counted = 1 if now >= warmup else 0
            if counted == 1:
                generated[p] += 1
            first_link = path_links[path_start[p]]
            if size_exp == 1:
                size = _rand_exp(state, 1.0)
            else:
                size = fixed_size
            # admission test before taking a pool slot
            if serving[first_link] >= 0 and q_count[first_link] >= buffer_packets:
                if counted == 1:
                    dropped[p] += 1
                continue
            if free_top == 0:
                return STATUS_POOL_EXHAUSTED
            free_top -= 1
            pkt = free_list[free_top]
            pkt_pair[pkt] = p
            pkt_pos[pkt] = 0
            pkt_created[pkt] = now
            pkt_size[pkt] = size
            pkt_counted[pkt] = counted
            if serving[first_link] < 0:
                serving[first_link] = pkt
                heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                       now + size / capacity[first_link], seq,
                                       _EV_DONE, first_link, -1)
                seq += 1
            else:
                slot = (q_head[first_link] + q_count[first_link]) % buffer_packets
                queue[first_link, slot] = pkt
                q_count[first_link] += 1

        elif kind == _EV_DONE:
            link = a
            pkt = serving[link]
            p = pkt_pair[pkt]
            pos = pkt_pos[pkt]
            path_len = path_start[p + 1] - path_start[p]
            if pos + 1 == path_len:
                if pkt_counted[pkt] == 1:
                    d = (now + prop_delay) - pkt_created[pkt]
                    delivered[p] += 1
                    sum_delay[p] += d
                    sum_delay_sq[p] += d * d
                free_list[free_top] = pkt
                free_top += 1
            else:
                pkt_pos[pkt] = pos + 1
                next_link = path_links[path_start[p] + pos + 1]
                if prop_delay > 0.0:
                    heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                           now + prop_delay, seq, _EV_HOP, next_link, pkt)
                    seq += 1
                else:
                    if serving[next_link] < 0:
                        serving[next_link] = pkt
                        heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                               now + pkt_size[pkt] / capacity[next_link],
                                               seq, _EV_DONE, next_link, -1)
                        seq += 1
                    elif q_count[next_link] < buffer_packets:
                        slot = (q_head[next_link] + q_count[next_link]) % buffer_packets
                        queue[next_link, slot] = pkt
                        q_count[next_link] += 1
                    else:
                        if pkt_counted[pkt] == 1:
                            dropped[p] += 1
                        free_list[free_top] = pkt
                        free_top += 1
            # pull the next packet into service on this link
            if q_count[link] > 0:
                nxt = queue[link, q_head[link]]
                q_head[link] = (q_head[link] + 1) % buffer_packets
                q_count[link] -= 1
                serving[link] = nxt
                heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                       now + pkt_size[nxt] / capacity[link], seq,
                                       _EV_DONE, link, -1)
                seq += 1
            else:
                serving[link] = -1

        else:  # _EV_HOP
            link = a
            pkt = b
            if serving[link] < 0:
                serving[link] = pkt
                heap_size = _heap_push(hp_t, hp_s, hp_k, hp_a, hp_b, heap_size,
                                       now + pkt_size[pkt] / capacity[link], seq,
                                       _EV_DONE, link, -1)
                seq += 1
            elif q_count[link] < buffer_packets:
                slot = (q_head[link] + q_count[link]) % buffer_packets
                queue[link, slot] = pkt
                q_count[link] += 1
            else:
                if pkt_counted[pkt] == 1:
                    dropped[pkt_pair[pkt]] += 1
                free_list[free_top] = pkt
                free_top += 1

    return STATUS_OK


def run_kernel(capacity, buffer_packets, path_links, path_start, rates, duration,
               warmup, size_exp, fixed_size, prop_delay, seed):
    """Allocate outputs and run the event loop; returns the stats arrays."""
    n_pairs = len(rates)
    generated = np.zeros(n_pairs, dtype=np.int64)
    delivered = np.zeros(n_pairs, dtype=np.int64)
    dropped = np.zeros(n_pairs, dtype=np.int64)
    sum_delay = np.zeros(n_pairs, dtype=np.float64)
    sum_delay_sq = np.zeros(n_pairs, dtype=np.float64)
    with np.errstate(over="ignore"):
        status = _run_events(
            np.asarray(capacity, dtype=np.float64),
            int(buffer_packets),
            np.asarray(path_links, dtype=np.int64),
            np.asarray(path_start, dtype=np.int64),
            np.asarray(rates, dtype=np.float64),
            float(duration), float(warmup),
            int(size_exp), float(fixed_size), float(prop_delay),
            np.uint64(seed),
            generated, delivered, dropped, sum_delay, sum_delay_sq,
        )
    if status != STATUS_OK:
        raise RuntimeError("packet pool exhausted; increase buffer headroom")
    return generated, delivered, dropped, sum_delay, sum_delay_sq
