# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled substep kernel.

Transliteration of ``_kernel_py.run_interval``; keep both in lockstep. The
float operations run in the same order, and the module is compiled with
-ffp-contract=off, so results are bit-identical to the Python kernel.
"""

import numpy as np
cimport numpy as cnp


cdef inline double _speed(int seg, double[::1] occ, double[::1] seg_len,
                          double[::1] seg_vf, double[::1] seg_kcrit,
                          double[::1] seg_kjam, double[::1] seg_w,
                          double v_min) nogil:
    cdef double k = occ[seg] / seg_len[seg]
    cdef double w, kj, v
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


def run_interval(int nsub, double t0, double dt, double[::1] rates,
                 int[::1] pk_od, int[::1] pk_pos, double[::1] pk_cnt,
                 double[::1] pk_ready, double[::1] pk_entry, int[::1] pk_next,
                 int[::1] q_head, int[::1] q_tail, double[::1] occ,
                 double[::1] backlog, double[::1] loaded_total,
                 double[::1] exited_total,
                 long long[::1] pool_state,
                 double[::1] sens_count, double[::1] sens_speed_mass,
                 int[::1] route_segs, int[::1] route_offs,
                 double[::1] seg_len, double[::1] seg_vf,
                 double[::1] seg_cap_s, double[::1] seg_jam,
                 double[::1] seg_kcrit, double[::1] seg_kjam,
                 double[::1] seg_w,
                 int[::1] seg_entry_sensor, int[::1] seg_exit_sensor,
                 int[::1] discharge_order, double v_min):
    cdef int n_seg = q_head.shape[0]
    cdef int n_od = backlog.shape[0]
    cdef int free_head = <int> pool_state[0]
    cdef long long pool_used = pool_state[1]
    cdef int isub, k, s, h, od, pos, o0, o1, nxt, es, ns, slot, s0
    cdef double now, cap_left, move, room, tt, speed, v, q, take
    cdef int status = 0

    with nogil:
        for isub in range(nsub):
            now = t0 + isub * dt

            # --- discharge, downstream first ---
            for k in range(n_seg):
                s = discharge_order[k]
                cap_left = seg_cap_s[s] * dt
                while True:
                    h = q_head[s]
                    if h < 0:
                        break
                    if pk_ready[h] > now:
                        break
                    if cap_left <= 0.0:
                        break
                    od = pk_od[h]
                    pos = pk_pos[h]
                    o0 = route_offs[od]
                    o1 = route_offs[od + 1]
                    if o0 + pos + 1 < o1:
                        nxt = route_segs[o0 + pos + 1]
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
                        break
                    es = seg_exit_sensor[s]
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
                            status = 1
                            break
                        free_head = pk_next[slot]
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
                        ns = seg_entry_sensor[nxt]
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
                if status != 0:
                    break
            if status != 0:
                break

            # --- load demand ---
            for od in range(n_od):
                q = rates[od] * dt / 3600.0
                backlog[od] += q
                loaded_total[od] += q
                if backlog[od] <= 0.0:
                    continue
                s0 = route_segs[route_offs[od]]
                room = seg_jam[s0] - occ[s0]
                take = backlog[od]
                if take > room:
                    take = room
                if take <= 0.0:
                    continue
                v = _speed(s0, occ, seg_len, seg_vf, seg_kcrit, seg_kjam,
                           seg_w, v_min)
                slot = free_head
                if slot < 0:
                    status = 1
                    break
                free_head = pk_next[slot]
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
                ns = seg_entry_sensor[s0]
                if ns >= 0:
                    sens_count[ns] += take
                    sens_speed_mass[ns] += take * v
                occ[s0] += take
                backlog[od] -= take
            if status != 0:
                break

    pool_state[0] = free_head
    pool_state[1] = pool_used
    return status
