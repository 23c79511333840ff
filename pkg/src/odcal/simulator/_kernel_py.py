"""Pure-Python substep kernel.

Reference implementation of the link-queue dynamics; the compiled kernel in
``_kernel.pyx`` is a line-for-line transliteration and must produce
identical floating-point results (same operations in the same order).

Per substep, in this order:
  1. discharge segments downstream-first: FIFO head packets whose traversal
     is complete move to the next segment on their route (or exit), limited
     by discharge capacity and downstream jam storage;
  2. load new demand: each OD's backlog enters the first segment of its
     route as far as storage allows.

Traversal speed is fixed at segment entry from a triangular speed-density
relation on the occupancy seen on arrival.
"""

from __future__ import annotations

__all__ = ["run_interval"]


def _speed(seg, occ, seg_len, seg_vf, seg_kcrit, seg_kjam, seg_w, v_min):
    k = occ[seg] / seg_len[seg]
    if k <= seg_kcrit[seg]:
        return seg_vf[seg]
    w = seg_w[seg]
    kj = seg_kjam[seg]
    if k >= kj:
        return v_min
    v = w * (kj - k) / k
    if v < v_min:
        return v_min
    if v > seg_vf[seg]:
        return seg_vf[seg]
    return v


def run_interval(nsub, t0, dt, rates,
                 pk_od, pk_pos, pk_cnt, pk_ready, pk_entry, pk_next,
                 q_head, q_tail, occ,
                 backlog, loaded_total, exited_total,
                 pool_state,
                 sens_count, sens_speed_mass,
                 route_segs, route_offs,
                 seg_len, seg_vf, seg_cap_s, seg_jam,
                 seg_kcrit, seg_kjam, seg_w,
                 seg_entry_sensor, seg_exit_sensor,
                 discharge_order, v_min):
    """Advance one interval (nsub substeps of dt seconds). Returns 0, or 1 on
    packet-pool exhaustion (the engine pre-grows the pool so this is a bug)."""
    n_seg = q_head.shape[0]
    n_od = backlog.shape[0]
    free_head = int(pool_state[0])
    pool_used = int(pool_state[1])

    for isub in range(nsub):
        now = t0 + isub * dt

        # --- discharge, downstream first ---
        for k in range(n_seg):
            s = int(discharge_order[k])
            cap_left = seg_cap_s[s] * dt
            while True:
                h = int(q_head[s])
                if h < 0:
                    break
                if pk_ready[h] > now:
                    break
                if cap_left <= 0.0:
                    break
                od = int(pk_od[h])
                pos = int(pk_pos[h])
                o0 = int(route_offs[od])
                o1 = int(route_offs[od + 1])
                if o0 + pos + 1 < o1:
                    nxt = int(route_segs[o0 + pos + 1])
                else:
                    nxt = -1
                move = pk_cnt[h]
                if move > cap_left:
                    move = cap_left
                if nxt >= 0:
                    room = seg_jam[nxt] - occ[nxt]
                    if move > room:
                        move = room
                if move <= 0.0:
                    break  # spillback or capacity exhausted; head blocks the queue
                es = int(seg_exit_sensor[s])
                if es >= 0:
                    sens_count[es] += move
                    tt = now - pk_entry[h]
                    if tt > 0.0:
                        speed = seg_len[s] / tt
                    else:
                        speed = seg_vf[s]
                    sens_speed_mass[es] += move * speed
                occ[s] -= move
                cap_left -= move
                if nxt >= 0:
                    v = _speed(nxt, occ, seg_len, seg_vf, seg_kcrit,
                               seg_kjam, seg_w, v_min)
                    slot = free_head
                    if slot < 0:
                        pool_state[0] = free_head
                        pool_state[1] = pool_used
                        return 1
                    free_head = int(pk_next[slot])
                    pk_od[slot] = od
                    pk_pos[slot] = pos + 1
                    pk_cnt[slot] = move
                    pk_entry[slot] = now
                    pk_ready[slot] = now + seg_len[nxt] / v
                    pk_next[slot] = -1
                    if q_tail[nxt] >= 0:
                        pk_next[q_tail[nxt]] = slot
                    else:
                        q_head[nxt] = slot
                    q_tail[nxt] = slot
                    pool_used += 1
                    ns = int(seg_entry_sensor[nxt])
                    if ns >= 0:
                        sens_count[ns] += move
                        sens_speed_mass[ns] += move * v
                    occ[nxt] += move
                else:
                    exited_total[od] += move
                pk_cnt[h] -= move
                if pk_cnt[h] <= 0.0:
                    q_head[s] = pk_next[h]
                    if q_head[s] < 0:
                        q_tail[s] = -1
                    pk_next[h] = free_head
                    free_head = h
                    pool_used -= 1

        # --- load demand ---
        for od in range(n_od):
            q = rates[od] * dt / 3600.0
            backlog[od] += q
            loaded_total[od] += q
            if backlog[od] <= 0.0:
                continue
            s0 = int(route_segs[route_offs[od]])
            room = seg_jam[s0] - occ[s0]
            take = backlog[od]
            if take > room:
                take = room
            if take <= 0.0:
                continue
            v = _speed(s0, occ, seg_len, seg_vf, seg_kcrit, seg_kjam, seg_w, v_min)
            slot = free_head
            if slot < 0:
                pool_state[0] = free_head
                pool_state[1] = pool_used
                return 1
            free_head = int(pk_next[slot])
            pk_od[slot] = od
            pk_pos[slot] = 0
            pk_cnt[slot] = take
            pk_entry[slot] = now
            pk_ready[slot] = now + seg_len[s0] / v
            pk_next[slot] = -1
            if q_tail[s0] >= 0:
                pk_next[q_tail[s0]] = slot
            else:
                q_head[s0] = slot
            q_tail[s0] = slot
            pool_used += 1
            ns = int(seg_entry_sensor[s0])
            if ns >= 0:
                sens_count[ns] += take
                sens_speed_mass[ns] += take * v
            occ[s0] += take
            backlog[od] -= take

    pool_state[0] = free_head
    pool_state[1] = pool_used
    return 0
