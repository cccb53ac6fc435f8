"""Floating-base robot models loaded from YAML description files."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from . import kernels as K

DATA_DIR = Path(__file__).with_name("data")
GRAVITY = 9.81


class ModelError(ValueError):
    pass


class UnknownContactFrame(KeyError):
    pass


class UnknownLink(KeyError):
    pass


class SingularBaseBlock(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Contact:
    name: str
    link: str
    position: tuple
    leg: str


class DynamicsTerms(NamedTuple):
    """Everything the controller and simulator need at one state."""

    D: np.ndarray          # mass matrix
    bias: np.ndarray       # C(q̇,q)q̇ + G(q)
    J: np.ndarray          # stacked contact Jacobians (rows per contact = model.cdim)
    Jdqd: np.ndarray       # J̇ q̇
    P: np.ndarray          # contact positions, world frame (nc × 3)
    A: np.ndarray          # centroidal momentum matrix (model.mdim rows)
    com: np.ndarray


_BASE_JOINTS = {
    # virtual chains: (name suffix, type, axis)
    "floating": [("x", K.PRISMATIC, (1, 0, 0)), ("y", K.PRISMATIC, (0, 1, 0)),
                 ("z", K.PRISMATIC, (0, 0, 1)), ("yaw", K.REVOLUTE, (0, 0, 1)),
                 ("pitch", K.REVOLUTE, (0, 1, 0)), ("roll", K.REVOLUTE, (1, 0, 0))],
    "planar": [("x", K.PRISMATIC, (1, 0, 0)), ("z", K.PRISMATIC, (0, 0, 1)),
               ("pitch", K.REVOLUTE, (0, 1, 0))],
    "fixed": [],
}


def _inertia_matrix(val):
    a = np.asarray(val, dtype=float)
    if a.shape == (3,):
        return np.diag(a)
    if a.shape == (6,):
        xx, yy, zz, xy, xz, yz = a
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    if a.shape == (3, 3):
        return a
    raise ModelError(f"bad inertia specification {val!r}")


def _rpy(r, p, y):
    cr, sr, cp, s_p, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, s_p], [0, 1, 0], [-s_p, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


class RobotModel:
    """Kinematic tree with inertial parameters and point contacts.

    Generalized coordinates are q = [q_b; q_j] where q_b is the base pose
    (floating: x, y, z, yaw, pitch, roll; planar: x, z, pitch; fixed: empty).
    Immutable after construction; use :meth:`with_point_mass` to derive variants.
    """

    def __init__(self, spec: dict):
        self.spec = copy.deepcopy(spec)
        self.name = spec.get("name", "robot")
        base = spec.get("base", {"type": "fixed"})
        self.base_type = base.get("type", "fixed")
        if self.base_type not in _BASE_JOINTS:
            raise ModelError(f"unknown base type {self.base_type!r}")
        self.gravity = np.asarray(spec.get("gravity_mps2", [0.0, 0.0, -GRAVITY]), dtype=float)

        links = {}
        for rec in spec.get("links", []):
            name = rec["name"]
            if name in links:
                raise ModelError(f"duplicate link {name}")
            m = float(rec["mass_kg"])
            if not m > 0.0:
                raise ModelError(f"link {name} must have positive mass")
            I = _inertia_matrix(rec.get("inertia_kgm2", [0.0, 0.0, 0.0]))
            if not np.allclose(I, I.T) or np.linalg.eigvalsh(I).min() <= 0.0:
                raise ModelError(f"link {name} inertia must be symmetric positive definite")
            links[name] = (m, np.asarray(rec.get("com_m", [0, 0, 0]), dtype=float), I)
        self.link_names = list(links)

        parent, jtype, axis, Rtree, ptree = [], [], [], [], []
        mass, com, inertia = [], [], []
        body_of_link: dict[str, int] = {}
        self.joint_names = []

        base_link = base.get("link")
        vchain = _BASE_JOINTS[self.base_type]
        for k, (suffix, jt, ax) in enumerate(vchain):
            parent.append(k - 1)
            jtype.append(jt)
            axis.append(np.asarray(ax, float))
            Rtree.append(np.eye(3))
            ptree.append(np.zeros(3))
            last = k == len(vchain) - 1
            if last:
                if base_link not in links:
                    raise ModelError("base.link must name a link")
                m, c, I = links[base_link]
                body_of_link[base_link] = k
            else:
                m, c, I = 0.0, np.zeros(3), np.zeros((3, 3))
            mass.append(m)
            com.append(c)
            inertia.append(I)
            self.joint_names.append(f"base_{suffix}")
        self.nb = len(vchain)

        self.joint_limits = []
        for rec in spec.get("joints", []):
            pname = rec.get("parent")
            if pname is None or pname == "world":
                if self.base_type != "fixed":
                    raise ModelError("only fixed-base models may attach joints to the world")
                pidx = -1
            else:
                if pname not in body_of_link:
                    raise ModelError(f"joint {rec['name']}: parent {pname} not yet defined (tree order or loop)")
                pidx = body_of_link[pname]
            child = rec["child"]
            if child in body_of_link:
                raise ModelError(f"link {child} has two parent joints (closed loop)")
            if child not in links:
                raise ModelError(f"unknown link {child}")
            jt = {"revolute": K.REVOLUTE, "prismatic": K.PRISMATIC}[rec.get("type", "revolute")]
            ax = np.asarray(rec["axis"], float)
            ax = ax / np.linalg.norm(ax)
            parent.append(pidx)
            jtype.append(jt)
            axis.append(ax)
            Rtree.append(_rpy(*rec.get("rpy_rad", [0.0, 0.0, 0.0])))
            ptree.append(np.asarray(rec.get("origin_m", [0, 0, 0]), float))
            m, c, I = links[child]
            mass.append(m)
            com.append(c)
            inertia.append(I)
            body_of_link[child] = len(parent) - 1
            self.joint_names.append(rec["name"])
            self.joint_limits.append(tuple(rec.get("limits_rad", (-np.inf, np.inf))))
        missing = set(links) - set(body_of_link)
        if missing:
            raise ModelError(f"links not attached to the tree: {sorted(missing)}")

        self.parent = np.asarray(parent, dtype=np.int64)
        self.jtype = np.asarray(jtype, dtype=np.int64)
        self.axis = np.asarray(axis, dtype=float).reshape(-1, 3)
        self.Rtree = np.asarray(Rtree, dtype=float).reshape(-1, 3, 3)
        self.ptree = np.asarray(ptree, dtype=float).reshape(-1, 3)
        self.mass = np.asarray(mass, dtype=float)
        self.com = np.asarray(com, dtype=float).reshape(-1, 3)
        self.inertia = np.asarray(inertia, dtype=float).reshape(-1, 3, 3)
        self.body_of_link = body_of_link
        self.nq = len(parent)
        self.n = self.nq - self.nb
        self.total_mass = float(self.mass.sum())
        self.a_root = np.concatenate([np.zeros(3), -self.gravity])

        self.contacts = []
        for rec in spec.get("contacts", []):
            if rec["link"] not in body_of_link:
                raise ModelError(f"contact {rec['name']} on unknown link {rec['link']}")
            self.contacts.append(Contact(rec["name"], rec["link"], tuple(rec["position_m"]),
                                         rec.get("leg", rec["name"])))
        self.contact_names = [c.name for c in self.contacts]
        self._cidx = {c.name: i for i, c in enumerate(self.contacts)}
        self.cbody = np.asarray([body_of_link[c.link] for c in self.contacts], dtype=np.int64)
        self.cpoint = np.asarray([c.position for c in self.contacts], dtype=float).reshape(-1, 3)
        self.legs: dict[str, list[int]] = {}
        for i, c in enumerate(self.contacts):
            self.legs.setdefault(c.leg, []).append(i)
        self.leg_names = list(self.legs)

        planar = self.base_type == "planar"
        self.lin_axes = np.array([0, 2]) if planar else np.array([0, 1, 2])
        self.ang_axes = np.array([1]) if planar else np.array([0, 1, 2])
        self.cdim = self.lin_axes.size
        self.mdim = self.lin_axes.size + self.ang_axes.size
        self._mrows = np.concatenate([self.lin_axes, 3 + self.ang_axes])
        self.S = np.hstack([np.zeros((self.n, self.nb)), np.eye(self.n)])

        st = spec.get("stance", {})
        self.torque_limit = float(spec.get("torque_limit_Nm", np.inf))
        self.default_height = float(st.get("height_m", 0.0))
        self.footprint = {k: np.asarray(v, float) for k, v in st.get("footprint_m", {}).items()}
        self.joint_guess = np.zeros(self.n)
        for name, val in st.get("joints_guess_rad", {}).items():
            self.joint_guess[self.actuated_index(name)] = float(val)
        self._sub_cache: dict = {}

    # ------------------------------------------------------------------ helpers
    @classmethod
    def load(cls, name_or_path) -> "RobotModel":
        return load_model(name_or_path)

    @property
    def actuated_names(self):
        return self.joint_names[self.nb:]

    def actuated_index(self, name: str) -> int:
        try:
            return self.actuated_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint {name!r}") from None

    def contact_indices(self, contacts) -> np.ndarray:
        if contacts is None:
            return np.arange(len(self.contacts))
        out = []
        for c in contacts:
            if isinstance(c, (int, np.integer)):
                if not 0 <= c < len(self.contacts):
                    raise UnknownContactFrame(c)
                out.append(int(c))
            else:
                if c not in self._cidx:
                    raise UnknownContactFrame(c)
                out.append(self._cidx[c])
        return np.asarray(out, dtype=np.int64)

    def _contact_arrays(self, idx):
        key = tuple(int(i) for i in idx)
        hit = self._sub_cache.get(key)
        if hit is None:
            hit = (np.ascontiguousarray(self.cbody[list(key)]), np.ascontiguousarray(self.cpoint[list(key)]).reshape(-1, 3),
                   self._row_select(len(key)))
            self._sub_cache[key] = hit
        return hit

    def _row_select(self, nc):
        return (3 * np.arange(nc)[:, None] + self.lin_axes[None, :]).reshape(-1)

    def base_height(self, q) -> float:
        if self.base_type == "floating":
            return float(q[2])
        if self.base_type == "planar":
            return float(q[1])
        return 0.0

    def leg_contacts(self, flags) -> np.ndarray:
        """Contact indices in stance given per-leg flags (ordered as model.leg_names)."""
        idx = []
        for leg, on in zip(self.leg_names, flags):
            if on:
                idx.extend(self.legs[leg])
        return np.asarray(sorted(idx), dtype=np.int64)

    def _args(self):
        return (self.parent, self.jtype, self.axis, self.Rtree, self.ptree,
                self.mass, self.com, self.inertia)

    # ------------------------------------------------------------------ evaluation
    def evaluate(self, q, qd, contacts=None) -> DynamicsTerms:
        q = np.ascontiguousarray(q, dtype=float)
        qd = np.ascontiguousarray(qd, dtype=float)
        idx = self.contact_indices(contacts)
        cb, cp, rows = self._contact_arrays(idx)
        D, bias, J, Jdqd, P, A, c = K.full_evaluate(q, qd, *self._args(), cb, cp, self.a_root)
        return DynamicsTerms(D, bias, J[rows], Jdqd[rows], P, A[self._mrows], c)

    def centroidal_terms(self, q, contacts=None):
        """(A, com, contact J, contact positions) without the dynamics terms."""
        q = np.ascontiguousarray(q, dtype=float)
        idx = self.contact_indices(contacts)
        cb, cp, rows = self._contact_arrays(idx)
        A, c, J, P = K.centroidal_evaluate(q, *self._args(), cb, cp)
        return A[self._mrows], c, J[rows], P

    def contact_positions(self, q, contacts=None) -> np.ndarray:
        return self.centroidal_terms(q, contacts)[3]

    def energy(self, q, qd):
        """(kinetic, potential) computed from body twists, independent of the mass matrix."""
        q = np.ascontiguousarray(q, dtype=float)
        qd = np.ascontiguousarray(qd, dtype=float)
        return K.kinetic_potential(q, qd, *self._args(), self.gravity)

    def wrench_jacobian(self, q, link=None, point=(0.0, 0.0, 0.0)) -> np.ndarray:
        """Rows [ω; v] (planar models: the in-plane rows only) of a point on ``link``
        (default: the base link); its transpose maps a world wrench [torque; force] to
        generalized forces."""
        body = self.nb - 1 if link is None else self.body_of_link[link]
        J, _ = K.body_jacobian(np.ascontiguousarray(q, dtype=float), self.parent, self.jtype, self.axis,
                               self.Rtree, self.ptree, body, np.asarray(point, float))
        return J[np.concatenate([self.ang_axes, 3 + self.lin_axes])]

    def com_position(self, q) -> np.ndarray:
        return self.centroidal_terms(q, [])[1]

    # ------------------------------------------------------------------ variants
    def with_point_mass(self, link: str, mass: float, offset=None) -> "RobotModel":
        """Copy with a point mass rigidly attached to ``link`` (default: at the link COM)."""
        if link not in self.link_names:
            raise UnknownLink(link)
        if mass == 0.0:
            return self
        spec = copy.deepcopy(self.spec)
        for rec in spec["links"]:
            if rec["name"] == link:
                m0 = float(rec["mass_kg"])
                c0 = np.asarray(rec.get("com_m", [0, 0, 0]), float)
                I0 = _inertia_matrix(rec.get("inertia_kgm2", [0, 0, 0]))
                r = c0 if offset is None else np.asarray(offset, float)
                m1 = m0 + mass
                c1 = (m0 * c0 + mass * r) / m1
                # parallel-axis: both masses about the new COM
                def shift(m, d):
                    return m * (np.dot(d, d) * np.eye(3) - np.outer(d, d))
                I1 = I0 + shift(m0, c0 - c1) + shift(mass, r - c1)
                rec["mass_kg"] = m1
                rec["com_m"] = c1.tolist()
                rec["inertia_kgm2"] = I1.tolist()
        spec["name"] = f"{self.name}+{mass:g}kg@{link}"
        return RobotModel(spec)

    # ------------------------------------------------------------------ poses
    def standing_pose(self, height=None, contacts=None, iters=50) -> np.ndarray:
        """Base at ``height`` with contacts placed on their footprint targets at z = 0."""
        height = self.default_height if height is None else height
        q = np.zeros(self.nq)
        if self.base_type == "floating":
            q[2] = height
        elif self.base_type == "planar":
            q[1] = height
        q[self.nb:] = self.joint_guess
        idx = self.contact_indices(contacts) if contacts is not None else np.array(
            [i for i, c in enumerate(self.contacts) if c.name in self.footprint], dtype=np.int64)
        if idx.size == 0:
            return q
        target = []
        for i in idx:
            xy = self.footprint[self.contacts[i].name]
            full = np.array([xy[0], xy[1] if xy.size > 1 else 0.0, 0.0])
            target.append(full[self.lin_axes])
        target = np.concatenate(target)
        rows = self._row_select(idx.size)
        for _ in range(iters):
            A, c, J, P = self.centroidal_terms(q, idx)
            err = target - P[:, self.lin_axes].reshape(-1)
            if np.abs(err).max() < 1e-13:
                break
            Jj = J[:, self.nb:]
            dq = np.linalg.lstsq(Jj, err, rcond=None)[0]
            q[self.nb:] += dq
        return q

    def __repr__(self):
        return f"RobotModel({self.name!r}, base={self.base_type}, n={self.n}, contacts={len(self.contacts)})"


# ---------------------------------------------------------------------- API

def mass_matrix(model: RobotModel, q) -> np.ndarray:
    return model.evaluate(q, np.zeros(model.nq), []).D


def bias_forces(model: RobotModel, q, qd) -> np.ndarray:
    return model.evaluate(q, qd, []).bias


def gravity_vector(model: RobotModel, q) -> np.ndarray:
    return model.evaluate(q, np.zeros(model.nq), []).bias


def contact_jacobian(model: RobotModel, q, contacts: Sequence) -> np.ndarray:
    idx = model.contact_indices(contacts)
    if idx.size == 0:
        raise UnknownContactFrame("contact list must be nonempty")
    return model.centroidal_terms(q, idx)[2]


def jdot_qdot(model: RobotModel, q, qd, contacts: Sequence) -> np.ndarray:
    idx = model.contact_indices(contacts)
    if idx.size == 0:
        raise UnknownContactFrame("contact list must be nonempty")
    return model.evaluate(q, qd, idx).Jdqd


def centroidal_momentum_matrix(model: RobotModel, q, cond_limit=1e12):
    """A(q) with A q̇ = [h; L] and the COM position; raises SingularBaseBlock near singular poses."""
    A, c, _, _ = model.centroidal_terms(q, [])
    if model.nb:
        Ab = A[:, :model.nb]
        if Ab.shape[0] == Ab.shape[1] and np.linalg.cond(Ab) > cond_limit:
            raise SingularBaseBlock("centroidal base block is singular at this pose")
    return A, c


def inverse_dynamics(model: RobotModel, q, qd, qdd, F=None, contacts=None) -> np.ndarray:
    """D q̈ + C q̇ + G − Jᵀ F."""
    idx = model.contact_indices(contacts if contacts is not None else [])
    t = model.evaluate(q, qd, idx)
    out = t.D @ np.asarray(qdd, float) + t.bias
    if F is not None and idx.size:
        out = out - t.J.T @ np.asarray(F, float)
    return out


@lru_cache(maxsize=None)
def _load_cached(path: str) -> RobotModel:
    with open(path) as fh:
        return RobotModel(yaml.safe_load(fh))


def bundled_models():
    return sorted(p.stem for p in DATA_DIR.glob("*.yaml"))


def load_model(name_or_path) -> RobotModel:
    p = Path(name_or_path)
    if not p.suffix:
        p = DATA_DIR / f"{name_or_path}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no robot model {name_or_path!r}; bundled: {bundled_models()}")
    return _load_cached(str(p.resolve()))
