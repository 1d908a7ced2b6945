"""Hot numerical loops for the planar world.

Everything here operates on flat float64 arrays so the exact same source
compiles under numba or runs as plain Python (set SOPE_DISABLE_JIT=1).
fastmath stays off: the determinism contract is bitwise, so IEEE ordering
must not be reassociated by the compiler.
"""

import os

import numpy as np

if os.environ.get("SOPE_DISABLE_JIT") == "1":
    def _jit(fn):
        return fn
else:
    try:
        from numba import njit

        def _jit(fn):
            return njit(cache=True, fastmath=False)(fn)
    except ImportError:  # pragma: no cover - numba is a declared dependency
        def _jit(fn):
            return fn

# body id codes for ContactPoint.body_b (body_a is always a block index)
FLOOR = -1
WALL_L = -2
WALL_R = -3
INSERT_L = -4
INSERT_R = -5
TIP_BASE = -10  # fingertip f encodes as -(10 + f)

# packed scalar-parameter indices (see physics.PhysicsParams.pack)
IP_DT = 0
IP_GRAVITY = 1
IP_KN = 2
IP_CN = 3
IP_MU = 4
IP_TIP_R = 5
IP_KP = 6
IP_KD = 7
IP_KC = 8
IP_BASE_VMAX = 9
IP_WRIST_VMAX = 10
IP_JOINT_VMAX = 11
IP_PEN_CAP = 12
IP_FLOOR_Z = 13
IP_WALL_L = 14
IP_WALL_R = 15
IP_INSERT_L = 16
IP_INSERT_R = 17
IP_INSERT_K = 18
N_PARAMS = 19

MAX_CONTACTS = 1024
CONTACT_WIDTH = 9  # a, b, px, pz, nx, nz, pen, fn, ft


@_jit
def fk_tips(joints, base, mounts, links, out_tips, out_jac, out_dwrist):
    """Forward kinematics for the 4 fingers.

    out_tips[f]     = tip position (x, z)
    out_jac[f, :, k] = d tip / d joint k of finger f
    out_dwrist[f]   = d tip / d wrist angle
    """
    bx = base[0]
    bz = base[1]
    wrist = base[2]
    cw = np.cos(wrist)
    sw = np.sin(wrist)
    for f in range(4):
        mx = mounts[f]
        px = bx + mx * cw
        pz = bz + mx * sw
        phi = wrist
        phis0 = 0.0
        phis1 = 0.0
        phis2 = 0.0
        phis3 = 0.0
        for k in range(4):
            phi += joints[4 * f + k]
            if k == 0:
                phis0 = phi
            elif k == 1:
                phis1 = phi
            elif k == 2:
                phis2 = phi
            else:
                phis3 = phi
            px += links[k] * np.sin(phi)
            pz += links[k] * (-np.cos(phi))
        out_tips[f, 0] = px
        out_tips[f, 1] = pz
        # jac column k = sum over links at or after joint k of d dir / d phi
        ax = 0.0
        az = 0.0
        for k in range(3, -1, -1):
            if k == 0:
                phi_k = phis0
            elif k == 1:
                phi_k = phis1
            elif k == 2:
                phi_k = phis2
            else:
                phi_k = phis3
            ax += links[k] * np.cos(phi_k)
            az += links[k] * np.sin(phi_k)
            out_jac[f, 0, k] = ax
            out_jac[f, 1, k] = az
        # wrist rotates the mount offset and every link
        out_dwrist[f, 0] = -mx * sw + ax
        out_dwrist[f, 1] = mx * cw + az
    return 0


@_jit
def _rect_corners(cx, cz, ang, hx, hz, out):
    c = np.cos(ang)
    s = np.sin(ang)
    # body order: (-hx,-hz), (+hx,-hz), (+hx,+hz), (-hx,+hz)
    for ci in range(4):
        if ci == 0:
            lx = -hx
            lz = -hz
        elif ci == 1:
            lx = hx
            lz = -hz
        elif ci == 2:
            lx = hx
            lz = hz
        else:
            lx = -hx
            lz = hz
        out[ci, 0] = cx + lx * c - lz * s
        out[ci, 1] = cz + lx * s + lz * c
    return 0


@_jit
def contact_pass(P, gdt, block_pos, block_ang, block_vel, block_angvel,
                 block_half, block_mass, block_inertia,
                 tips, tipv, out_contacts, out_tipforce):
    """Detect contacts, then resolve them sequentially in detection order.

    Mutates block velocities in place (Gauss-Seidel over contacts: each
    impulse sees the velocities left by earlier ones, which keeps multi
    contact resting configurations from double-counting corrections).

    gdt is the gravity kick g*dt the caller just applied to every block.
    The damping term subtracts it from the closing velocity against
    static bodies: otherwise the damper eats that phantom approach every
    substep, takes over the load from the springs at rest, and pumps a
    rocking limit cycle that walks blocks sideways. With the kick removed
    a resting block settles at the textbook spring equilibrium
    penetration (weight / stiffness) with true closing velocity zero.

    Accumulates reaction forces on fingertips into out_tipforce.
    Returns the number of contacts written to out_contacts.
    """
    n = block_pos.shape[0]
    dt = P[IP_DT]
    kn = P[IP_KN]
    cn = P[IP_CN]
    mu = P[IP_MU]
    tip_r = P[IP_TIP_R]
    pen_cap = P[IP_PEN_CAP]
    floor_z = P[IP_FLOOR_Z]
    wall_l = P[IP_WALL_L]
    wall_r = P[IP_WALL_R]
    insert_l = P[IP_INSERT_L]
    insert_r = P[IP_INSERT_R]
    insert_k = P[IP_INSERT_K]

    for f in range(4):
        out_tipforce[f, 0] = 0.0
        out_tipforce[f, 1] = 0.0

    corners = np.empty((4, 2))
    nc = 0

    # --- detection; canonical order fixes the resolution sequence ---
    # 1) block vs floor / walls / inserts, per block, per corner
    for i in range(n):
        _rect_corners(block_pos[i, 0], block_pos[i, 1], block_ang[i],
                      block_half[i, 0], block_half[i, 1], corners)
        for ci in range(4):
            px = corners[ci, 0]
            pz = corners[ci, 1]
            if pz < floor_z and nc < MAX_CONTACTS:
                out_contacts[nc, 0] = i
                out_contacts[nc, 1] = FLOOR
                out_contacts[nc, 2] = px
                out_contacts[nc, 3] = pz
                out_contacts[nc, 4] = 0.0
                out_contacts[nc, 5] = 1.0
                out_contacts[nc, 6] = floor_z - pz
                nc += 1
            if px < wall_l and nc < MAX_CONTACTS:
                out_contacts[nc, 0] = i
                out_contacts[nc, 1] = WALL_L
                out_contacts[nc, 2] = px
                out_contacts[nc, 3] = pz
                out_contacts[nc, 4] = 1.0
                out_contacts[nc, 5] = 0.0
                out_contacts[nc, 6] = wall_l - px
                nc += 1
            if px > wall_r and nc < MAX_CONTACTS:
                out_contacts[nc, 0] = i
                out_contacts[nc, 1] = WALL_R
                out_contacts[nc, 2] = px
                out_contacts[nc, 3] = pz
                out_contacts[nc, 4] = -1.0
                out_contacts[nc, 5] = 0.0
                out_contacts[nc, 6] = px - wall_r
                nc += 1
            if insert_k > 0.0:
                if px < insert_l and nc < MAX_CONTACTS:
                    out_contacts[nc, 0] = i
                    out_contacts[nc, 1] = INSERT_L
                    out_contacts[nc, 2] = px
                    out_contacts[nc, 3] = pz
                    out_contacts[nc, 4] = 1.0
                    out_contacts[nc, 5] = 0.0
                    out_contacts[nc, 6] = insert_l - px
                    nc += 1
                if px > insert_r and nc < MAX_CONTACTS:
                    out_contacts[nc, 0] = i
                    out_contacts[nc, 1] = INSERT_R
                    out_contacts[nc, 2] = px
                    out_contacts[nc, 3] = pz
                    out_contacts[nc, 4] = -1.0
                    out_contacts[nc, 5] = 0.0
                    out_contacts[nc, 6] = px - insert_r
                    nc += 1

    # 2) block pairs: separating-axis manifold (reference face + clipping).
    # Per-corner min-pushout picks the wrong axis for near-flush face
    # contact (the pushout collapses onto whichever face the corner is
    # skimming, so an aligned stacked pair tunnels straight through); the
    # pair's minimum-overlap axis fixes the reference face and the other
    # box's incident face is clipped against it, Box2D style.
    for i in range(n):
        for j in range(i + 1, n):
            dxc = block_pos[j, 0] - block_pos[i, 0]
            dzc = block_pos[j, 1] - block_pos[i, 1]
            min_ov = 1.0e30
            ref_nx = 0.0
            ref_nz = 0.0
            ref_box = i
            ref_kind = 0
            separated = False
            for axk in range(4):
                if axk < 2:
                    owner = i
                else:
                    owner = j
                ca = np.cos(block_ang[owner])
                sa = np.sin(block_ang[owner])
                if axk % 2 == 0:
                    ux = ca
                    uz = sa
                else:
                    ux = -sa
                    uz = ca
                ci_ = np.cos(block_ang[i])
                si_ = np.sin(block_ang[i])
                cj_ = np.cos(block_ang[j])
                sj_ = np.sin(block_ang[j])
                ri = (block_half[i, 0] * abs(ux * ci_ + uz * si_)
                      + block_half[i, 1] * abs(-ux * si_ + uz * ci_))
                rj = (block_half[j, 0] * abs(ux * cj_ + uz * sj_)
                      + block_half[j, 1] * abs(-ux * sj_ + uz * cj_))
                if owner == i:
                    d = dxc * ux + dzc * uz
                else:
                    d = -(dxc * ux + dzc * uz)
                # d: center offset of the non-owner box along the owner axis
                ov = ri + rj - abs(d)
                if ov <= 0.0:
                    separated = True
                    break
                if ov < min_ov:
                    min_ov = ov
                    ref_box = owner
                    ref_kind = axk % 2
                    if d >= 0.0:
                        ref_nx = ux
                        ref_nz = uz
                    else:
                        ref_nx = -ux
                        ref_nz = -uz
            if separated:
                continue
            if ref_box == i:
                inc_box = j
            else:
                inc_box = i
            # reference face plane: offset along the outward normal
            if ref_kind == 0:
                ref_off = block_half[ref_box, 0]
                face_half = block_half[ref_box, 1]
            else:
                ref_off = block_half[ref_box, 1]
                face_half = block_half[ref_box, 0]
            ref_tx = -ref_nz
            ref_tz = ref_nx
            fcx = block_pos[ref_box, 0] + ref_nx * ref_off
            fcz = block_pos[ref_box, 1] + ref_nz * ref_off

            # incident face: the face of the other box most facing the
            # reference normal (outward normals tested against -n_ref)
            cinc = np.cos(block_ang[inc_box])
            sinc = np.sin(block_ang[inc_box])
            best_dot = 1.0e30
            inx = 0.0
            inz = 0.0
            ih = 0.0
            it_half = 0.0
            for face in range(4):
                if face == 0:
                    fnx = cinc
                    fnz = sinc
                    h_f = block_half[inc_box, 0]
                    h_t = block_half[inc_box, 1]
                elif face == 1:
                    fnx = -cinc
                    fnz = -sinc
                    h_f = block_half[inc_box, 0]
                    h_t = block_half[inc_box, 1]
                elif face == 2:
                    fnx = -sinc
                    fnz = cinc
                    h_f = block_half[inc_box, 1]
                    h_t = block_half[inc_box, 0]
                else:
                    fnx = sinc
                    fnz = -cinc
                    h_f = block_half[inc_box, 1]
                    h_t = block_half[inc_box, 0]
                dot = fnx * ref_nx + fnz * ref_nz
                if dot < best_dot:
                    best_dot = dot
                    inx = fnx
                    inz = fnz
                    ih = h_f
                    it_half = h_t
            icx = block_pos[inc_box, 0] + inx * ih
            icz = block_pos[inc_box, 1] + inz * ih
            itx = -inz
            itz = inx
            p0x = icx - itx * it_half
            p0z = icz - itz * it_half
            p1x = icx + itx * it_half
            p1z = icz + itz * it_half

            # clip the incident segment to the reference face extent
            s0 = (p0x - fcx) * ref_tx + (p0z - fcz) * ref_tz
            s1 = (p1x - fcx) * ref_tx + (p1z - fcz) * ref_tz
            keep = True
            if s0 > s1:
                tmpx = p0x
                tmpz = p0z
                p0x = p1x
                p0z = p1z
                p1x = tmpx
                p1z = tmpz
                tmps = s0
                s0 = s1
                s1 = tmps
            if s1 < -face_half or s0 > face_half:
                keep = False
            if keep:
                if s0 < -face_half:
                    t = (-face_half - s0) / (s1 - s0)
                    p0x = p0x + (p1x - p0x) * t
                    p0z = p0z + (p1z - p0z) * t
                if s1 > face_half:
                    t = (face_half - s0) / (s1 - s0)
                    p1x = p0x + (p1x - p0x) * t
                    p1z = p0z + (p1z - p0z) * t
                for pt in range(2):
                    if pt == 0:
                        px = p0x
                        pz = p0z
                    else:
                        px = p1x
                        pz = p1z
                    depth = ref_off - ((px - block_pos[ref_box, 0]) * ref_nx
                                       + (pz - block_pos[ref_box, 1]) * ref_nz)
                    if depth > 0.0 and nc < MAX_CONTACTS:
                        out_contacts[nc, 0] = inc_box
                        out_contacts[nc, 1] = ref_box
                        out_contacts[nc, 2] = px
                        out_contacts[nc, 3] = pz
                        out_contacts[nc, 4] = ref_nx
                        out_contacts[nc, 5] = ref_nz
                        out_contacts[nc, 6] = depth
                        nc += 1

    # 3) fingertip circles vs blocks
    for f in range(4):
        tx = tips[f, 0]
        tz = tips[f, 1]
        for i in range(n):
            cb = np.cos(block_ang[i])
            sb = np.sin(block_ang[i])
            hbx = block_half[i, 0]
            hbz = block_half[i, 1]
            dx = tx - block_pos[i, 0]
            dz = tz - block_pos[i, 1]
            lx = dx * cb + dz * sb
            lz = -dx * sb + dz * cb
            qx = min(max(lx, -hbx), hbx)
            qz = min(max(lz, -hbz), hbz)
            if lx != qx or lz != qz:
                # tip center outside the box
                ex = lx - qx
                ez = lz - qz
                dist = np.sqrt(ex * ex + ez * ez)
                if dist >= tip_r or dist == 0.0:
                    continue
                pen = tip_r - dist
                # push on block points from tip into the face
                lnx = -ex / dist
                lnz = -ez / dist
            else:
                # tip center inside the box: push block away from nearest face
                d_px = hbx - lx
                d_nx = hbx + lx
                d_pz = hbz - lz
                d_nz = hbz + lz
                depth = d_px
                lnx = -1.0
                lnz = 0.0
                qx = hbx
                qz = lz
                if d_nx < depth:
                    depth = d_nx
                    lnx = 1.0
                    lnz = 0.0
                    qx = -hbx
                    qz = lz
                if d_pz < depth:
                    depth = d_pz
                    lnx = 0.0
                    lnz = -1.0
                    qx = lx
                    qz = hbz
                if d_nz < depth:
                    depth = d_nz
                    lnx = 0.0
                    lnz = 1.0
                    qx = lx
                    qz = -hbz
                pen = depth + tip_r
            if nc < MAX_CONTACTS:
                out_contacts[nc, 0] = i
                out_contacts[nc, 1] = -(10 + f)
                out_contacts[nc, 2] = block_pos[i, 0] + qx * cb - qz * sb
                out_contacts[nc, 3] = block_pos[i, 1] + qx * sb + qz * cb
                out_contacts[nc, 4] = lnx * cb - lnz * sb
                out_contacts[nc, 5] = lnx * sb + lnz * cb
                out_contacts[nc, 6] = pen
                nc += 1

    # --- normal pass: compute every impulse from the pre-pass velocity
    # snapshot, then apply them all (Jacobi).  A sequential sweep is
    # chiral: within each two-point face manifold one corner always sees
    # the raw closing velocity and the other the corrected one, which
    # rectifies micro-rocking into a steady sideways creep of stacked
    # blocks (a vibratory conveyor; reversing the sweep order reverses
    # the creep).  The spring term reads only geometry and the damping
    # term reads only pre-pass velocities, so the result is independent
    # of row order, and a motionless contact gets exactly the spring
    # force k * penetration.
    body_rows = np.zeros(n, dtype=np.int64)
    for c in range(nc):
        body_rows[int(out_contacts[c, 0])] += 1
        b = int(out_contacts[c, 1])
        if b >= 0:
            body_rows[b] += 1
    for c in range(nc):
        a = int(out_contacts[c, 0])
        b = int(out_contacts[c, 1])
        px = out_contacts[c, 2]
        pz = out_contacts[c, 3]
        nx = out_contacts[c, 4]
        nz = out_contacts[c, 5]
        pen = out_contacts[c, 6]

        rax = px - block_pos[a, 0]
        raz = pz - block_pos[a, 1]
        vax = block_vel[a, 0] - block_angvel[a] * raz
        vaz = block_vel[a, 1] + block_angvel[a] * rax

        inv_ma = 1.0 / block_mass[a]
        inv_ia = 1.0 / block_inertia[a]

        if b >= 0:
            rbx = px - block_pos[b, 0]
            rbz = pz - block_pos[b, 1]
            vbx = block_vel[b, 0] - block_angvel[b] * rbz
            vbz = block_vel[b, 1] + block_angvel[b] * rbx
            inv_mb = 1.0 / block_mass[b]
            inv_ib = 1.0 / block_inertia[b]
        elif b <= TIP_BASE:
            f = -b - 10
            rbx = 0.0
            rbz = 0.0
            vbx = tipv[f, 0]
            vbz = tipv[f, 1]
            inv_mb = 0.0
            inv_ib = 0.0
        else:
            rbx = 0.0
            rbz = 0.0
            vbx = 0.0
            vbz = 0.0
            inv_mb = 0.0
            inv_ib = 0.0

        vrx = vax - vbx
        vrz = vaz - vbz
        closing = -(vrx * nx + vrz * nz)
        if b >= 0:
            closing_damp = closing  # both blocks got the same kick
        else:
            closing_damp = closing - gdt * nz

        cr_an = rax * nz - raz * nx
        cr_bn = rbx * nz - rbz * nx
        k_n_eff = inv_ma + inv_mb + cr_an * cr_an * inv_ia + cr_bn * cr_bn * inv_ib
        meff_n = 1.0 / k_n_eff

        # rows damp the body's approach independently (they all read the
        # pre-pass snapshot), so the per-row cap must share the body's
        # momentum budget or coincident rows over-correct and pump the
        # contact: meff is close to the full mass for face manifolds on
        # narrow faces and for opposing pinch grips, and applying twice
        # that reverses an approach instead of stopping it
        div = body_rows[a]
        if b >= 0 and body_rows[b] > div:
            div = body_rows[b]
        cap = meff_n / div

        k_use = kn
        if b == INSERT_L or b == INSERT_R:
            k_use = insert_k
        pen_f = pen
        if pen_f > pen_cap:
            pen_f = pen_cap
        jn = k_use * pen_f * dt + min(cn * dt, cap) * closing_damp
        if jn < 0.0:
            jn = 0.0

        out_contacts[c, 7] = jn / dt
        out_contacts[c, 8] = 0.0  # accumulated friction impulse during sweeps

    for c in range(nc):
        jn = out_contacts[c, 7] * dt
        if jn <= 0.0:
            continue
        a = int(out_contacts[c, 0])
        b = int(out_contacts[c, 1])
        px = out_contacts[c, 2]
        pz = out_contacts[c, 3]
        nx = out_contacts[c, 4]
        nz = out_contacts[c, 5]
        rax = px - block_pos[a, 0]
        raz = pz - block_pos[a, 1]
        ix = jn * nx
        iz = jn * nz
        inv_ma = 1.0 / block_mass[a]
        inv_ia = 1.0 / block_inertia[a]
        block_vel[a, 0] += ix * inv_ma
        block_vel[a, 1] += iz * inv_ma
        block_angvel[a] += (rax * iz - raz * ix) * inv_ia
        if b >= 0:
            rbx = px - block_pos[b, 0]
            rbz = pz - block_pos[b, 1]
            block_vel[b, 0] -= ix / block_mass[b]
            block_vel[b, 1] -= iz / block_mass[b]
            block_angvel[b] -= (rbx * iz - rbz * ix) / block_inertia[b]
        elif b <= TIP_BASE:
            f = -b - 10
            out_tipforce[f, 0] -= ix / dt
            out_tipforce[f, 1] -= iz / dt

    # --- friction: accumulated-impulse Gauss-Seidel sweeps ---
    # a single sweep ping-pongs between two corners of the same face (a
    # stick impulse at one corner reverses the tangential velocity seen at
    # the other through the angular channel); accumulation with a cone
    # clamp converges geometrically to the coupled both-stick solution.
    # Sweep direction alternates for the same reason the normal pass is
    # symmetric: a fixed direction leaves a chiral residual.
    for sweep in range(8):
        for k_row in range(nc):
            if sweep % 2 == 0:
                c = k_row
            else:
                c = nc - 1 - k_row
            jn = out_contacts[c, 7] * dt
            if jn <= 0.0:
                continue
            a = int(out_contacts[c, 0])
            b = int(out_contacts[c, 1])
            px = out_contacts[c, 2]
            pz = out_contacts[c, 3]
            nx = out_contacts[c, 4]
            nz = out_contacts[c, 5]

            rax = px - block_pos[a, 0]
            raz = pz - block_pos[a, 1]
            vax = block_vel[a, 0] - block_angvel[a] * raz
            vaz = block_vel[a, 1] + block_angvel[a] * rax
            inv_ma = 1.0 / block_mass[a]
            inv_ia = 1.0 / block_inertia[a]

            if b >= 0:
                rbx = px - block_pos[b, 0]
                rbz = pz - block_pos[b, 1]
                vbx = block_vel[b, 0] - block_angvel[b] * rbz
                vbz = block_vel[b, 1] + block_angvel[b] * rbx
                inv_mb = 1.0 / block_mass[b]
                inv_ib = 1.0 / block_inertia[b]
            elif b <= TIP_BASE:
                f = -b - 10
                rbx = 0.0
                rbz = 0.0
                vbx = tipv[f, 0]
                vbz = tipv[f, 1]
                inv_mb = 0.0
                inv_ib = 0.0
            else:
                rbx = 0.0
                rbz = 0.0
                vbx = 0.0
                vbz = 0.0
                inv_mb = 0.0
                inv_ib = 0.0

            tx_ = -nz
            tz_ = nx
            vt = (vax - vbx) * tx_ + (vaz - vbz) * tz_
            cr_at = rax * tz_ - raz * tx_
            cr_bt = rbx * tz_ - rbz * tx_
            k_t_eff = (inv_ma + inv_mb
                       + cr_at * cr_at * inv_ia + cr_bt * cr_bt * inv_ib)
            jt_old = out_contacts[c, 8]
            jt_new = jt_old - vt / k_t_eff
            cone = mu * jn
            if jt_new > cone:
                jt_new = cone
            elif jt_new < -cone:
                jt_new = -cone
            djt = jt_new - jt_old
            if djt == 0.0:
                continue
            out_contacts[c, 8] = jt_new

            ix = djt * tx_
            iz = djt * tz_
            block_vel[a, 0] += ix * inv_ma
            block_vel[a, 1] += iz * inv_ma
            block_angvel[a] += (rax * iz - raz * ix) * inv_ia
            if b >= 0:
                block_vel[b, 0] -= ix * inv_mb
                block_vel[b, 1] -= iz * inv_mb
                block_angvel[b] -= (rbx * iz - rbz * ix) * inv_ib
            elif b <= TIP_BASE:
                f = -b - 10
                out_tipforce[f, 0] -= ix / dt
                out_tipforce[f, 1] -= iz / dt

    for c in range(nc):
        out_contacts[c, 8] /= dt  # impulse -> force to match slot 7

    return nc


@_jit
def control_step(P, substeps, block_pos, block_ang, block_vel, block_angvel,
                 block_half, block_mass, block_inertia,
                 joints, joint_vel, joint_targets, base, base_target,
                 mounts, links, joint_lo, joint_hi,
                 out_contacts, out_tipforce, out_tips):
    """Advance one control period (substeps x dt). Mutates state in place.

    Returns the contact count of the final substep; out_contacts and
    out_tipforce hold that substep's contact set and tip reaction forces.
    """
    n = block_pos.shape[0]
    dt = P[IP_DT]
    gravity = P[IP_GRAVITY]
    kp = P[IP_KP]
    kd = P[IP_KD]
    kc = P[IP_KC]
    base_vmax = P[IP_BASE_VMAX]
    wrist_vmax = P[IP_WRIST_VMAX]
    joint_vmax = P[IP_JOINT_VMAX]

    jac = np.empty((4, 2, 4))
    dwrist = np.empty((4, 2))
    tipv = np.empty((4, 2))
    nc = 0

    for s in range(substeps):
        # planned kinematic base motion for this substep
        dx = base_target[0] - base[0]
        dz = base_target[1] - base[1]
        dist = np.sqrt(dx * dx + dz * dz)
        step_max = base_vmax * dt
        if dist > step_max:
            scale = step_max / dist
        else:
            scale = 1.0
        bvx = dx * scale / dt
        bvz = dz * scale / dt
        dw = base_target[2] - base[2]
        w_max = wrist_vmax * dt
        if dw > w_max:
            dw = w_max
        elif dw < -w_max:
            dw = -w_max
        bvw = dw / dt

        for i in range(n):
            block_vel[i, 1] -= gravity * dt

        fk_tips(joints, base, mounts, links, out_tips, jac, dwrist)
        for f in range(4):
            vx = bvx + dwrist[f, 0] * bvw
            vz = bvz + dwrist[f, 1] * bvw
            for k in range(4):
                vx += jac[f, 0, k] * joint_vel[4 * f + k]
                vz += jac[f, 1, k] * joint_vel[4 * f + k]
            tipv[f, 0] = vx
            tipv[f, 1] = vz

        nc = contact_pass(P, gravity * dt, block_pos, block_ang, block_vel,
                          block_angvel, block_half, block_mass, block_inertia,
                          out_tips, tipv, out_contacts, out_tipforce)

        # the +g*dt^2/2 term makes constant-gravity flight exact (the
        # velocity kick alone overshoots displacement by 1/substeps)
        half_g = 0.5 * gravity * dt * dt
        for i in range(n):
            block_pos[i, 0] += block_vel[i, 0] * dt
            block_pos[i, 1] += block_vel[i, 1] * dt + half_g
            block_ang[i] += block_angvel[i] * dt

        # joint PD plus contact reaction fed back through the chain Jacobian
        for f in range(4):
            for k in range(4):
                jidx = 4 * f + k
                tau = (jac[f, 0, k] * out_tipforce[f, 0]
                       + jac[f, 1, k] * out_tipforce[f, 1])
                acc = (kp * (joint_targets[jidx] - joints[jidx])
                       - kd * joint_vel[jidx] + kc * tau)
                v = joint_vel[jidx] + acc * dt
                if v > joint_vmax:
                    v = joint_vmax
                elif v < -joint_vmax:
                    v = -joint_vmax
                q = joints[jidx] + v * dt
                if q < joint_lo[jidx]:
                    q = joint_lo[jidx]
                    if v < 0.0:
                        v = 0.0
                elif q > joint_hi[jidx]:
                    q = joint_hi[jidx]
                    if v > 0.0:
                        v = 0.0
                joints[jidx] = q
                joint_vel[jidx] = v

        base[0] += bvx * dt
        base[1] += bvz * dt
        base[2] += bvw * dt

    # final tip placement reflects the post-step hand
    fk_tips(joints, base, mounts, links, out_tips, jac, dwrist)
    return nc
