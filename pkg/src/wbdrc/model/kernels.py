"""Spatial-algebra kernels for trees of 1-DOF joints, all quantities in world frame.

Motion vectors are [ω; v_O] with the linear part taken at the world origin, so
joint motion subspaces, velocities and composite inertias can be summed along
the tree without frame transforms.  The floating base is a chain of six virtual
1-DOF joints (three prismatic, then yaw/pitch/roll revolutes), which makes the
generalized velocity exactly dq/dt.
"""
import numpy as np
from numba import njit

PRISMATIC = 0
REVOLUTE = 1


# Explicit loops beat BLAS dispatch for the 3×3 and 6×6 products used below.
@njit(cache=True)
def _mm(A, B):
    n, k = A.shape
    m = B.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += A[i, t] * B[t, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _mv(A, v):
    n, k = A.shape
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(k):
            acc += A[i, t] * v[t]
        out[i] = acc
    return out


@njit(cache=True)
def _dot(a, b):
    acc = 0.0
    for i in range(a.size):
        acc += a[i] * b[i]
    return acc


@njit(cache=True)
def _skew(v):
    m = np.zeros((3, 3))
    m[0, 1] = -v[2]
    m[0, 2] = v[1]
    m[1, 0] = v[2]
    m[1, 2] = -v[0]
    m[2, 0] = -v[1]
    m[2, 1] = v[0]
    return m


@njit(cache=True)
def _cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def _axis_rotation(axis, angle):
    c = np.cos(angle)
    s = np.sin(angle)
    x, y, z = axis[0], axis[1], axis[2]
    C = 1.0 - c
    R = np.empty((3, 3))
    R[0, 0] = c + x * x * C
    R[0, 1] = x * y * C - z * s
    R[0, 2] = x * z * C + y * s
    R[1, 0] = y * x * C + z * s
    R[1, 1] = c + y * y * C
    R[1, 2] = y * z * C - x * s
    R[2, 0] = z * x * C - y * s
    R[2, 1] = z * y * C + x * s
    R[2, 2] = c + z * z * C
    return R


@njit(cache=True)
def _crm(v):
    """Motion cross-product matrix v×."""
    m = np.zeros((6, 6))
    w = _skew(v[0:3])
    u = _skew(v[3:6])
    m[0:3, 0:3] = w
    m[3:6, 3:6] = w
    m[3:6, 0:3] = u
    return m


@njit(cache=True)
def forward_kinematics(q, parent, jtype, axis, Rtree, ptree):
    """Body rotations, origins and world-frame motion subspaces."""
    nb = q.size
    R = np.zeros((nb, 3, 3))
    o = np.zeros((nb, 3))
    S = np.zeros((nb, 6))
    Rj = np.empty((3, 3))
    oj = np.empty(3)
    a = np.empty(3)
    for i in range(nb):
        p = parent[i]
        for r in range(3):
            if p < 0:
                oj[r] = ptree[i, r]
                for c in range(3):
                    Rj[r, c] = Rtree[i, r, c]
            else:
                acc = o[p, r]
                for t in range(3):
                    acc += R[p, r, t] * ptree[i, t]
                oj[r] = acc
                for c in range(3):
                    acc = 0.0
                    for t in range(3):
                        acc += R[p, r, t] * Rtree[i, t, c]
                    Rj[r, c] = acc
        for r in range(3):
            a[r] = Rj[r, 0] * axis[i, 0] + Rj[r, 1] * axis[i, 1] + Rj[r, 2] * axis[i, 2]
        if jtype[i] == REVOLUTE:
            x, y, z = axis[i, 0], axis[i, 1], axis[i, 2]
            cq = np.cos(q[i])
            sq = np.sin(q[i])
            C = 1.0 - cq
            r00 = cq + x * x * C
            r01 = x * y * C - z * sq
            r02 = x * z * C + y * sq
            r10 = y * x * C + z * sq
            r11 = cq + y * y * C
            r12 = y * z * C - x * sq
            r20 = z * x * C - y * sq
            r21 = z * y * C + x * sq
            r22 = cq + z * z * C
            for r in range(3):
                R[i, r, 0] = Rj[r, 0] * r00 + Rj[r, 1] * r10 + Rj[r, 2] * r20
                R[i, r, 1] = Rj[r, 0] * r01 + Rj[r, 1] * r11 + Rj[r, 2] * r21
                R[i, r, 2] = Rj[r, 0] * r02 + Rj[r, 1] * r12 + Rj[r, 2] * r22
                o[i, r] = oj[r]
                S[i, r] = a[r]
            S[i, 3] = oj[1] * a[2] - oj[2] * a[1]
            S[i, 4] = oj[2] * a[0] - oj[0] * a[2]
            S[i, 5] = oj[0] * a[1] - oj[1] * a[0]
        else:
            for r in range(3):
                for c in range(3):
                    R[i, r, c] = Rj[r, c]
                o[i, r] = oj[r] + a[r] * q[i]
                S[i, 3 + r] = a[r]
    return R, o, S


@njit(cache=True)
def body_inertias(R, o, mass, com, inertia):
    """World-frame spatial inertias about the origin, plus world COM of each body."""
    nb = mass.size
    I6 = np.zeros((nb, 6, 6))
    cw = np.zeros((nb, 3))
    RI = np.empty((3, 3))
    for i in range(nb):
        m = mass[i]
        for r in range(3):
            cw[i, r] = o[i, r] + R[i, r, 0] * com[i, 0] + R[i, r, 1] * com[i, 1] + R[i, r, 2] * com[i, 2]
        if m == 0.0:
            continue
        for r in range(3):
            for c in range(3):
                RI[r, c] = R[i, r, 0] * inertia[i, 0, c] + R[i, r, 1] * inertia[i, 1, c] + R[i, r, 2] * inertia[i, 2, c]
        cx, cy, cz = cw[i, 0], cw[i, 1], cw[i, 2]
        # m (c×)(c×)ᵀ = m (|c|² I − c cᵀ)
        c2 = cx * cx + cy * cy + cz * cz
        for r in range(3):
            for c in range(3):
                val = RI[r, 0] * R[i, c, 0] + RI[r, 1] * R[i, c, 1] + RI[r, 2] * R[i, c, 2]
                val -= m * cw[i, r] * cw[i, c]
                if r == c:
                    val += m * c2
                I6[i, r, c] = val
        # m c× in the upper-right block, its transpose lower-left
        I6[i, 0, 4] = -m * cz
        I6[i, 0, 5] = m * cy
        I6[i, 1, 3] = m * cz
        I6[i, 1, 5] = -m * cx
        I6[i, 2, 3] = -m * cy
        I6[i, 2, 4] = m * cx
        for r in range(3):
            for c in range(3):
                I6[i, 3 + c, r] = I6[i, r, 3 + c]
            I6[i, 3 + r, 3 + r] = m
    return I6, cw


@njit(cache=True)
def composite(I6, parent):
    nb = parent.size
    Ic = I6.copy()
    for i in range(nb - 1, -1, -1):
        p = parent[i]
        if p >= 0:
            Ic[p] += Ic[i]
    return Ic


@njit(cache=True)
def mass_matrix(S, Ic, parent):
    """Composite-rigid-body algorithm."""
    nb = parent.size
    D = np.zeros((nb, nb))
    F = np.empty(6)
    for i in range(nb):
        for r in range(6):
            acc = 0.0
            for t in range(6):
                acc += Ic[i, r, t] * S[i, t]
            F[r] = acc
        D[i, i] = _dot(S[i], F)
        j = parent[i]
        while j >= 0:
            val = _dot(S[j], F)
            D[i, j] = val
            D[j, i] = val
            j = parent[j]
    return D


@njit(cache=True)
def _motion_cross(v, s, out):
    """out = v × s for spatial motion vectors [ω; v_O]."""
    out[0] = v[1] * s[2] - v[2] * s[1]
    out[1] = v[2] * s[0] - v[0] * s[2]
    out[2] = v[0] * s[1] - v[1] * s[0]
    out[3] = v[1] * s[5] - v[2] * s[4] + v[4] * s[2] - v[5] * s[1]
    out[4] = v[2] * s[3] - v[0] * s[5] + v[5] * s[0] - v[3] * s[2]
    out[5] = v[0] * s[4] - v[1] * s[3] + v[3] * s[1] - v[4] * s[0]


@njit(cache=True)
def _force_cross(v, f, out):
    """out = v ×* f for a spatial force f = [n; f]."""
    out[0] = v[1] * f[2] - v[2] * f[1] + v[4] * f[5] - v[5] * f[4]
    out[1] = v[2] * f[0] - v[0] * f[2] + v[5] * f[3] - v[3] * f[5]
    out[2] = v[0] * f[1] - v[1] * f[0] + v[3] * f[4] - v[4] * f[3]
    out[3] = v[1] * f[5] - v[2] * f[4]
    out[4] = v[2] * f[3] - v[0] * f[5]
    out[5] = v[0] * f[4] - v[1] * f[3]


@njit(cache=True)
def rnea(S, I6, parent, qd, qdd, a_root):
    """Recursive Newton-Euler; a_root carries gravity as a fictitious base acceleration."""
    nb = parent.size
    v = np.zeros((nb, 6))
    a = np.zeros((nb, 6))
    f = np.zeros((nb, 6))
    tmp = np.empty(6)
    Iv = np.empty(6)
    for i in range(nb):
        p = parent[i]
        for r in range(6):
            if p < 0:
                v[i, r] = S[i, r] * qd[i]
                a[i, r] = a_root[r] + S[i, r] * qdd[i]
            else:
                v[i, r] = v[p, r] + S[i, r] * qd[i]
                a[i, r] = a[p, r] + S[i, r] * qdd[i]
        _motion_cross(v[i], S[i], tmp)
        for r in range(6):
            a[i, r] += tmp[r] * qd[i]
        for r in range(6):
            acc_v = 0.0
            acc_a = 0.0
            for t in range(6):
                acc_v += I6[i, r, t] * v[i, t]
                acc_a += I6[i, r, t] * a[i, t]
            Iv[r] = acc_v
            f[i, r] = acc_a
        _force_cross(v[i], Iv, tmp)
        for r in range(6):
            f[i, r] += tmp[r]
    tau = np.zeros(nb)
    for i in range(nb - 1, -1, -1):
        tau[i] = _dot(S[i], f[i])
        p = parent[i]
        if p >= 0:
            for r in range(6):
                f[p, r] += f[i, r]
    return tau


@njit(cache=True)
def velocities_accels(S, parent, qd, qdd):
    """Body spatial velocities and accelerations (no gravity)."""
    nb = parent.size
    v = np.zeros((nb, 6))
    a = np.zeros((nb, 6))
    tmp = np.empty(6)
    for i in range(nb):
        p = parent[i]
        for r in range(6):
            if p >= 0:
                v[i, r] = v[p, r]
                a[i, r] = a[p, r]
            v[i, r] += S[i, r] * qd[i]
            a[i, r] += S[i, r] * qdd[i]
        _motion_cross(v[i], S[i], tmp)
        for r in range(6):
            a[i, r] += tmp[r] * qd[i]
    return v, a


@njit(cache=True)
def point_jacobians(R, o, S, parent, cbody, cpoint):
    """Stacked 3×nb linear-velocity Jacobians of body-fixed points; also their positions."""
    nc = cbody.size
    nb = parent.size
    J = np.zeros((3 * nc, nb))
    P = np.zeros((nc, 3))
    for k in range(nc):
        b = cbody[k]
        for r in range(3):
            P[k, r] = o[b, r] + R[b, r, 0] * cpoint[k, 0] + R[b, r, 1] * cpoint[k, 1] + R[b, r, 2] * cpoint[k, 2]
        px, py, pz = P[k, 0], P[k, 1], P[k, 2]
        j = b
        while j >= 0:
            J[3 * k, j] = S[j, 3] + S[j, 1] * pz - S[j, 2] * py
            J[3 * k + 1, j] = S[j, 4] + S[j, 2] * px - S[j, 0] * pz
            J[3 * k + 2, j] = S[j, 5] + S[j, 0] * py - S[j, 1] * px
            j = parent[j]
    return J, P


@njit(cache=True)
def point_bias_accels(v, a, P, cbody):
    """Classical point accelerations at qdd = 0: p̈ = a_O + α×p + ω×ṗ."""
    nc = cbody.size
    out = np.zeros(3 * nc)
    for k in range(nc):
        b = cbody[k]
        w = v[b, 0:3]
        pd = v[b, 3:6] + _cross(w, P[k])
        out[3 * k:3 * k + 3] = a[b, 3:6] + _cross(a[b, 0:3], P[k]) + _cross(w, pd)
    return out


@njit(cache=True)
def centroidal_matrix(S, Ic, cw, mass):
    """A(q) with rows [linear momentum; angular momentum about the COM]; and the COM."""
    nb = mass.size
    M = mass.sum()
    c = np.zeros(3)
    for i in range(nb):
        for r in range(3):
            c[r] += mass[i] * cw[i, r]
    c /= M
    A = np.zeros((6, nb))
    h = np.empty(6)
    for j in range(nb):
        for r in range(6):
            acc = 0.0
            for t in range(6):
                acc += Ic[j, r, t] * S[j, t]
            h[r] = acc
        A[0, j] = h[3]
        A[1, j] = h[4]
        A[2, j] = h[5]
        # angular momentum about the COM: h_O − c × h_lin
        A[3, j] = h[0] - (c[1] * h[5] - c[2] * h[4])
        A[4, j] = h[1] - (c[2] * h[3] - c[0] * h[5])
        A[5, j] = h[2] - (c[0] * h[4] - c[1] * h[3])
    return A, c


@njit(cache=True)
def full_evaluate(q, qd, parent, jtype, axis, Rtree, ptree, mass, com, inertia,
                  cbody, cpoint, a_root):
    """One pass producing D, C q̇ + G, contact J, J̇q̇, contact positions, A and COM."""
    R, o, S = forward_kinematics(q, parent, jtype, axis, Rtree, ptree)
    I6, cw = body_inertias(R, o, mass, com, inertia)
    Ic = composite(I6, parent)
    D = mass_matrix(S, Ic, parent)
    bias = rnea(S, I6, parent, qd, np.zeros(q.size), a_root)
    J, P = point_jacobians(R, o, S, parent, cbody, cpoint)
    v, a = velocities_accels(S, parent, qd, np.zeros(q.size))
    Jdqd = point_bias_accels(v, a, P, cbody)
    A, c = centroidal_matrix(S, Ic, cw, mass)
    return D, bias, J, Jdqd, P, A, c


@njit(cache=True)
def centroidal_evaluate(q, parent, jtype, axis, Rtree, ptree, mass, com, inertia, cbody, cpoint):
    R, o, S = forward_kinematics(q, parent, jtype, axis, Rtree, ptree)
    I6, cw = body_inertias(R, o, mass, com, inertia)
    Ic = composite(I6, parent)
    J, P = point_jacobians(R, o, S, parent, cbody, cpoint)
    A, c = centroidal_matrix(S, Ic, cw, mass)
    return A, c, J, P


@njit(cache=True)
def kinetic_potential(q, qd, parent, jtype, axis, Rtree, ptree, mass, com, inertia, gvec):
    """Kinetic energy from body twists (independent of the mass-matrix path) and potential energy."""
    R, o, S = forward_kinematics(q, parent, jtype, axis, Rtree, ptree)
    I6, cw = body_inertias(R, o, mass, com, inertia)
    v, a = velocities_accels(S, parent, qd, np.zeros(q.size))
    T = 0.0
    V = 0.0
    for i in range(mass.size):
        T += 0.5 * v[i] @ (I6[i] @ v[i])
        V -= mass[i] * (gvec @ cw[i])
    return T, V


@njit(cache=True)
def body_jacobian(q, parent, jtype, axis, Rtree, ptree, body, point):
    """6×nb Jacobian [ω; ṗ] of a body-fixed point, plus the point's world position."""
    R, o, S = forward_kinematics(q, parent, jtype, axis, Rtree, ptree)
    p = o[body] + _mv(R[body], point)
    J = np.zeros((6, q.size))
    j = body
    while j >= 0:
        J[0:3, j] = S[j, 0:3]
        J[3:6, j] = S[j, 3:6] + _cross(S[j, 0:3], p)
        j = parent[j]
    return J, p


@njit(cache=True)
def centroidal_batch(Q, parent, jtype, axis, Rtree, ptree, mass, com, inertia, cbody, cpoint, fbody, fpoint):
    """Centroidal quantities at every row of Q (used for finite-difference Jacobians).

    Returns A (k×6×nb), COM (k×3), contact positions (k×nc×3), contact point
    Jacobians (k×3nc×nb) and twist Jacobians [ω; v] of extra frames (k×6nf×nb).
    """
    k, nb = Q.shape
    nc = cbody.size
    nf = fbody.size
    A = np.zeros((k, 6, nb))
    C = np.zeros((k, 3))
    P = np.zeros((k, nc, 3))
    Jp = np.zeros((k, 3 * nc, nb))
    Jf = np.zeros((k, 6 * nf, nb))
    for r in range(k):
        q = Q[r].copy()
        R, o, S = forward_kinematics(q, parent, jtype, axis, Rtree, ptree)
        I6, cw = body_inertias(R, o, mass, com, inertia)
        Ic = composite(I6, parent)
        J, Pc = point_jacobians(R, o, S, parent, cbody, cpoint)
        Ar, c = centroidal_matrix(S, Ic, cw, mass)
        A[r] = Ar
        C[r] = c
        P[r] = Pc
        Jp[r] = J
        for f in range(nf):
            b = fbody[f]
            p = o[b] + _mv(R[b], fpoint[f])
            j = b
            while j >= 0:
                Jf[r, 6 * f:6 * f + 3, j] = S[j, 0:3]
                Jf[r, 6 * f + 3:6 * f + 6, j] = S[j, 3:6] + _cross(S[j, 0:3], p)
                j = parent[j]
    return A, C, P, Jp, Jf
