"""Pose graphs with optimized loop-closure confidences, and articulated refinement.

Edge residual: ``e_ij = log(X_i^-1 X_j Z_ij)`` where ``X`` are node variables and
``Z_ij`` the measured transform taking node-i coordinates to node-j coordinates.
The cost of a graph is

    sum_odo f_ij + sum_loop l_ij f_ij + mu * sum_loop (sqrt(l_ij) - 1)^2,
    f_ij = e_ij^T Omega_ij e_ij.

Confidences are optimized through ``c = sqrt(l)`` so every term is a plain
least-squares residual.

Part graphs carry world-frame measurements (``tau_j = Z tau_i`` with
``Z = T_j T_i^-1``); their node variables are the inverse part poses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, lift
from .clustering import aggregate_hypotheses
from .errors import Degenerate, DisconnectedChain, NoConsensus, NoTracks, NotConverged
from .geometry import Pose, adjoint, hat, robust_register, se3_exp, se3_log_vec, se3_right_jacobian_inv, so3_exp, so3_right_jacobian
from .joints import PRISMATIC, REVOLUTE, JointModel, canonicalize, joint_pose
from .trackfit import VISIBILITY_FLOOR, TrackSet, fit_tracks

log = logging.getLogger(__name__)


@dataclass
class Edge:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray
    confidence: float = 1.0


@dataclass
class PoseGraph:
    num_nodes: int
    odometry: list[Edge]
    loops: list[Edge]
    mu: float = 0.1
    world_measurements: bool = False
    initial: list[Pose] | None = None

    def __post_init__(self):
        for e in self.loops:
            if not 0.0 <= e.confidence <= 1.0:
                raise ValueError("loop confidences must lie in [0, 1]")
        for e in self.odometry + self.loops:
            O = e.information
            if O.shape != (6, 6) or not np.allclose(O, O.T) or np.linalg.eigvalsh(O).min() < -1e-9:
                raise ValueError("information matrices must be symmetric PSD 6x6")


@dataclass
class GraphSolution:
    poses: list[Pose]
    confidences: np.ndarray
    final_cost: float
    initial_cost: float
    converged: bool
    history: list[float] = field(default_factory=list)


@dataclass
class ArticulatedSolution:
    poses: list[Pose]
    joint: JointModel
    final_cost: float
    converged: bool
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gauge: Pose = field(default_factory=Pose.identity)
    history: list[float] = field(default_factory=list)
    initial_cost: float = np.nan


# --- generic Levenberg-Marquardt ----------------------------------------------


def levenberg_marquardt(x0, residual_jacobian, retract, residual=None, max_iterations=100, gtol=1e-8, ftol=1e-10, lam=1e-4):
    """Minimize ``|r(x)|^2``. Returns ``(x, cost, history, converged)``.

    ``history`` holds the cost after every accepted step (first entry: initial cost).
    """
    residual = residual or (lambda x: residual_jacobian(x)[0])
    x = x0
    r, J = residual_jacobian(x)
    cost = float(r @ r)
    history = [cost]
    converged = False
    for _ in range(max_iterations):
        g = J.T @ r
        if np.linalg.norm(g) < gtol:
            converged = True
            break
        H = J.T @ J
        diag = np.diag(H).copy()
        accepted = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(diag, 1e-9))
            try:
                dx = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = retract(x, dx)
            r_new = residual(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        decrease = cost - cost_new
        x = x_new
        cost = cost_new
        history.append(cost)
        lam = max(lam / 3, 1e-12)
        if decrease < ftol:
            converged = True
            break
        r, J = residual_jacobian(x)
    return x, cost, history, converged


def _sqrt_info(O):
    w, V = np.linalg.eigh(O)
    return (V * np.sqrt(np.maximum(w, 0))) @ V.T


def _edge_residual(Xi: Pose, Xj: Pose, Z: Pose):
    E = Xi.inverse() @ Xj @ Z
    e = se3_log_vec(E, check_cut_locus=False)
    return e, E


# --- plain pose graph -----------------------------------------------------------


class _GraphProblem:
    def __init__(self, graph: PoseGraph):
        self.g = graph
        self.n = graph.num_nodes
        self.edges = graph.odometry + graph.loops
        self.nodd = len(graph.odometry)
        self.nloop = len(graph.loops)
        self.L = [_sqrt_info(e.information) for e in self.edges]
        self.smu = np.sqrt(graph.mu)

    def unpack(self, x):
        return x[0], x[1]

    def residual_jacobian(self, x, want_jac=True):
        X, c = x
        nv = 6 * (self.n - 1) + self.nloop
        rows = 6 * len(self.edges) + self.nloop
        r = np.zeros(rows)
        J = np.zeros((rows, nv)) if want_jac else None
        for k, ed in enumerate(self.edges):
            e, E = _edge_residual(X[ed.i], X[ed.j], ed.measurement)
            Le = self.L[k] @ e
            scale = 1.0 if k < self.nodd else c[k - self.nodd]
            r[6 * k : 6 * k + 6] = scale * Le
            if want_jac:
                Jr = se3_right_jacobian_inv(e)
                Ji = -Jr @ adjoint(E.inverse())
                Jj = Jr @ adjoint(ed.measurement.inverse())
                if ed.i > 0:
                    J[6 * k : 6 * k + 6, 6 * (ed.i - 1) : 6 * ed.i] = scale * self.L[k] @ Ji
                if ed.j > 0:
                    J[6 * k : 6 * k + 6, 6 * (ed.j - 1) : 6 * ed.j] = scale * self.L[k] @ Jj
                if k >= self.nodd:
                    J[6 * k : 6 * k + 6, 6 * (self.n - 1) + k - self.nodd] = Le
        base = 6 * len(self.edges)
        r[base:] = self.smu * (c - 1.0)
        if want_jac:
            J[base:, 6 * (self.n - 1) :] = self.smu * np.eye(self.nloop)
        return r, J

    def residual(self, x):
        return self.residual_jacobian(x, want_jac=False)[0]

    def retract(self, x, dx):
        X, c = x
        Xn = [X[0]] + [X[i] @ se3_exp(dx[6 * (i - 1) : 6 * i]) for i in range(1, self.n)]
        cn = np.clip(c + dx[6 * (self.n - 1) :], 0.0, 1.0)
        return Xn, cn


def chain_initial(num_nodes: int, odometry: list[Edge]) -> list[Pose]:
    """Node variables obtained by composing odometry measurements from node 0."""
    X = [Pose.identity()] * num_nodes
    by_pair = {(e.i, e.j): e for e in odometry}
    for i in range(num_nodes - 1):
        Z = by_pair[(i, i + 1)].measurement
        X[i + 1] = X[i] @ Z.inverse()
    return X


def graph_cost(graph: PoseGraph, poses: list[Pose], confidences=None) -> float:
    X = [p.inverse() for p in poses] if graph.world_measurements else list(poses)
    c = np.sqrt(np.array([e.confidence for e in graph.loops] if confidences is None else confidences, dtype=float))
    r = _GraphProblem(graph).residual((X, c))
    return float(r @ r)


def solve_pose_graph(graph: PoseGraph, max_iterations: int = 100, fixed_confidences: bool = False, raise_on_failure: bool = False) -> GraphSolution:
    """Levenberg-Marquardt over node poses and loop confidences; node 0 is clamped."""
    prob = _GraphProblem(graph)
    if graph.initial is not None:
        X0 = [p.inverse() for p in graph.initial] if graph.world_measurements else list(graph.initial)
        X0 = [X0[0].inverse() @ p for p in X0]
    else:
        X0 = chain_initial(graph.num_nodes, graph.odometry)
    c0 = np.sqrt(np.array([e.confidence for e in graph.loops], dtype=float))

    if fixed_confidences:
        nl = prob.nloop

        def rj(x):
            r, J = prob.residual_jacobian(x)
            return r, J[:, : J.shape[1] - nl]

        def retract(x, dx):
            return prob.retract(x, np.concatenate([dx, np.zeros(nl)]))

        x, cost, hist, conv = levenberg_marquardt((X0, c0), rj, retract, prob.residual, max_iterations)
    else:
        x, cost, hist, conv = levenberg_marquardt((X0, c0), prob.residual_jacobian, prob.retract, prob.residual, max_iterations)
    X, c = x
    poses = [p.inverse() for p in X] if graph.world_measurements else X
    if not conv:
        log.warning("pose graph did not converge in %d iterations (cost %.3e)", max_iterations, cost)
        if raise_on_failure:
            raise NotConverged(f"cost {cost:.3e}")
    return GraphSolution(poses, c**2, cost, hist[0], conv, hist)


# --- graph construction -----------------------------------------------------------


def part_loop_pairs(n: int) -> list[tuple[int, int]]:
    pairs = []
    for d in sorted({n // 4, n // 2, n - 1}):
        if d < 2:
            continue
        pairs += [(i, i + d) for i in range(n - d)]
    return pairs[: 3 * n]


def camera_loop_pairs(n: int) -> list[tuple[int, int]]:
    s = n // 5
    if s < 2:
        return []
    return [(i, i + s) for i in range(0, n - s, s)]


def _pair_seed(seed: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, i, j]).generate_state(1, np.uint64)[0])


def registration_information(points: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Gauss-Newton information of a point-to-point alignment about the world origin.

    For a right perturbation ``Z exp(xi)`` each source point ``x`` contributes
    ``[-hat(x), I]^T [-hat(x), I]``; the sum grows with the inlier count.
    """
    x = np.asarray(points, dtype=float).reshape(-1, 3)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    c = (w[:, None] * x).sum(axis=0)
    S = (w[:, None, None] * np.einsum("ni,nj->nij", x, x)).sum(axis=0)
    O = np.zeros((6, 6))
    O[:3, :3] = np.trace(S) * np.eye(3) - S
    O[:3, 3:] = hat(c)
    O[3:, :3] = hat(c).T
    O[3:, 3:] = sw * np.eye(3)
    return O


def relative_part_transforms(tracks: TrackSet, pairs, inlier_threshold: float = 0.02, seed: int = 0, max_iterations: int = 1024, floor: float = VISIBILITY_FLOOR, with_information: bool = False):
    """World-frame part motion ``tau_j ~ Z tau_i`` for every pair with consensus.

    Returns ``(i, j, Z, inlier_count)``; with ``with_information`` a fifth entry
    holds the registration information of the inlier set.
    """
    out = []
    for i, j in pairs:
        both = (tracks.visibility[:, i] >= floor) & (tracks.visibility[:, j] >= floor)
        if i == j:
            rec = (i, j, Pose.identity(), int(both.sum()))
            out.append(rec + (registration_information(tracks.positions[both, i]),) if with_information else rec)
            continue
        if both.sum() < 3:
            continue
        w = tracks.visibility[both, i] * tracks.visibility[both, j]
        try:
            Z, mask = robust_register((tracks.positions[both, i], tracks.positions[both, j], w), inlier_threshold, max_iterations, _pair_seed(seed, i, j))
        except (Degenerate, NoConsensus):
            continue
        rec = (i, j, Z, int(mask.sum()))
        if with_information:
            rec += (registration_information(tracks.positions[both, i][mask], w[mask]),)
        out.append(rec)
    return out


def build_part_graph(odometry, loops, mu: float = 0.1, omega=None, num_nodes: int | None = None, world_measurements: bool = True) -> PoseGraph:
    """Assemble a pose graph from ``(i, j, Pose, inlier_count[, information])`` tuples.

    Without an explicit information entry the edge gets ``inlier_count * I``;
    ``omega`` overrides both.
    """

    def info(rec):
        if omega is not None:
            return np.asarray(omega, dtype=float)
        if len(rec) > 4:
            return np.asarray(rec[4], dtype=float)
        return float(rec[3]) * np.eye(6)

    odo = [Edge(r[0], r[1], r[2], info(r)) for r in odometry]
    lp = [Edge(r[0], r[1], r[2], info(r), 1.0) for r in loops]
    if num_nodes is None:
        num_nodes = 1 + max([e.j for e in odo] + [0])
    have = {(e.i, e.j) for e in odo}
    missing = [(k, k + 1) for k in range(num_nodes - 1) if (k, k + 1) not in have]
    if missing:
        raise DisconnectedChain(f"odometry chain lacks edges {missing}")
    return PoseGraph(num_nodes, odo, lp, mu, world_measurements)


# --- articulated refinement ---------------------------------------------------------


def _tangent_basis(a):
    h = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
    b1 = np.cross(a, h)
    b1 /= np.linalg.norm(b1)
    return np.column_stack([b1, np.cross(a, b1)])


@dataclass
class ArticulatedParams:
    axis: np.ndarray
    pivot: np.ndarray | None
    states: np.ndarray  # all frames, states[0] held at its initial value
    c: np.ndarray


class ArticulatedProblem:
    """Eq.-7 style residuals with poses expressed through one joint.

    Tangent coordinates: 2 for the axis (sphere chart), 2 for the pivot (in the
    axis-normal plane, revolute only), one per frame except frame 0, one per loop.
    """

    def __init__(self, graph: PoseGraph, kind: str):
        if not graph.world_measurements:
            raise ValueError("articulated refinement expects a part graph with world-frame measurements")
        self.g = graph
        self.kind = kind
        self.edges = graph.odometry + graph.loops
        self.nodd = len(graph.odometry)
        self.nloop = len(graph.loops)
        self.L = [_sqrt_info(e.information) for e in self.edges]
        self.smu = np.sqrt(graph.mu)
        self.n = graph.num_nodes
        self.npiv = 2 if kind == REVOLUTE else 0

    @property
    def dim(self):
        return 2 + self.npiv + (self.n - 1) + self.nloop

    def relative(self, p: ArticulatedParams, d: float) -> Pose:
        return JointModel(self.kind, p.axis, [d], p.pivot).transform(d)

    def _motion_twists(self, p: ArticulatedParams, d: float):
        """Body twists ``T^-1 dT`` of the relative joint transform w.r.t. (axis chart, pivot chart, d)."""
        a = p.axis
        B = _tangent_basis(a)
        if self.kind == PRISMATIC:
            Ta = np.zeros((6, 2))
            Ta[3:] = d * B
            Td = np.concatenate([np.zeros(3), a])
            return Ta, None, Td
        R = JointModel(REVOLUTE, a, [d], p.pivot).transform(d).rotation
        piv = p.pivot
        # pivot moves with the chart: dp = B dq - a (p^T B) da
        dp_da = -np.outer(a, piv @ B)
        om_da = d * so3_right_jacobian(d * a) @ B
        Ta = np.zeros((6, 2))
        Ta[:3] = om_da
        Ta[3:] = (R.T - np.eye(3)) @ dp_da + hat(piv) @ om_da
        Tp = np.zeros((6, 2))
        Tp[3:] = (R.T - np.eye(3)) @ B
        Td = np.concatenate([a, -np.cross(a, piv)])
        return Ta, Tp, Td

    def residual_jacobian(self, p: ArticulatedParams, want_jac=True):
        rows = 6 * len(self.edges) + self.nloop
        r = np.zeros(rows)
        J = np.zeros((rows, self.dim)) if want_jac else None
        s0 = 2 + self.npiv
        for k, ed in enumerate(self.edges):
            d = p.states[ed.i] - p.states[ed.j]
            T = self.relative(p, d)
            E = T @ ed.measurement
            e = se3_log_vec(E, check_cut_locus=False)
            Le = self.L[k] @ e
            scale = 1.0 if k < self.nodd else p.c[k - self.nodd]
            r[6 * k : 6 * k + 6] = scale * Le
            if not want_jac:
                continue
            M = scale * self.L[k] @ se3_right_jacobian_inv(e) @ adjoint(ed.measurement.inverse())
            Ta, Tp, Td = self._motion_twists(p, d)
            J[6 * k : 6 * k + 6, 0:2] = M @ Ta
            if Tp is not None:
                J[6 * k : 6 * k + 6, 2:4] = M @ Tp
            col_d = M @ Td
            if ed.i > 0:
                J[6 * k : 6 * k + 6, s0 + ed.i - 1] += col_d
            if ed.j > 0:
                J[6 * k : 6 * k + 6, s0 + ed.j - 1] -= col_d
            if k >= self.nodd:
                J[6 * k : 6 * k + 6, s0 + self.n - 1 + k - self.nodd] = Le
        base = 6 * len(self.edges)
        r[base:] = self.smu * (p.c - 1.0)
        if want_jac:
            J[base:, s0 + self.n - 1 :] = self.smu * np.eye(self.nloop)
        return r, J

    def residual(self, p):
        return self.residual_jacobian(p, want_jac=False)[0]

    def retract(self, p: ArticulatedParams, dx) -> ArticulatedParams:
        B = _tangent_basis(p.axis)
        a = p.axis + B @ dx[0:2]
        a /= np.linalg.norm(a)
        pivot = None
        if self.kind == REVOLUTE:
            q = p.pivot + B @ dx[2:4]
            pivot = q - (a @ q) * a
        s0 = 2 + self.npiv
        states = p.states.copy()
        states[1:] += dx[s0 : s0 + self.n - 1]
        c = np.clip(p.c + dx[s0 + self.n - 1 :], 0.0, 1.0)
        return ArticulatedParams(a, pivot, states, c)


def refine_articulated(graph: PoseGraph, init: JointModel, max_iterations: int = 100) -> ArticulatedSolution:
    """Re-solve the part graph with every pose tied to one joint model."""
    if init.num_frames != graph.num_nodes:
        raise ValueError("joint and graph frame counts differ")
    prob = ArticulatedProblem(graph, init.kind)
    pivot = None if init.pivot is None else init.pivot - (init.axis @ init.pivot) * init.axis
    states = init.states - init.states[0]
    p0 = ArticulatedParams(init.axis.copy(), pivot, states, np.sqrt([e.confidence for e in graph.loops]))
    p, cost, hist, conv = levenberg_marquardt(p0, prob.residual_jacobian, prob.retract, prob.residual, max_iterations)
    if not conv:
        log.warning("articulated refinement did not converge (cost %.3e)", cost)
    joint = JointModel(init.kind, p.axis, p.states, p.pivot)
    # canonical sign; poses are unaffected by the flip
    joint = canonicalize(joint)
    poses = [joint_pose(joint, i) for i in range(joint.num_frames)]
    return ArticulatedSolution(poses, joint, cost, conv, p.c**2, Pose.identity(), hist, hist[0])


def init_articulation(tracks: TrackSet, kind: str, floor: float = VISIBILITY_FLOOR, hypotheses=None) -> JointModel:
    """Least-squares initialization: aggregate per-track fits into one joint."""
    if tracks.num_tracks == 0:
        raise NoTracks("no moving tracks")
    hyps = hypotheses if hypotheses is not None else fit_tracks(tracks, range(tracks.num_tracks), kind, floor)
    hyps = list(hyps.values()) if isinstance(hyps, dict) else list(hyps)
    if not hyps:
        raise NoTracks("no moving track admits a fit")
    rep = aggregate_hypotheses(hyps)
    return canonicalize(JointModel(kind, rep.axis, rep.states, rep.pivot))


# --- camera graph ----------------------------------------------------------------------


def vertex_normals_at(depth: np.ndarray, K: Intrinsics, row: np.ndarray, col: np.ndarray, max_jump: float = 0.05):
    """Camera-frame vertices and central-difference normals at the given pixels.

    Normals face the camera and are zero at borders, holes and depth jumps.
    """
    H, W = depth.shape
    r = np.clip(row, 1, H - 2)
    c = np.clip(col, 1, W - 2)

    def vert(rr, cc):
        z = depth[rr, cc]
        return np.column_stack([(cc - K.cx) / K.fx * z, (rr - K.cy) / K.fy * z, z]), z

    q, z0 = vert(r, c)
    xp, zxp = vert(r, c + 1)
    xm, zxm = vert(r, c - 1)
    yp, zyp = vert(r + 1, c)
    ym, zym = vert(r - 1, c)
    zs = np.stack([z0, zxp, zxm, zyp, zym])
    n = np.cross(xp - xm, yp - ym)
    norm = np.linalg.norm(n, axis=1)
    ok = (zs.min(axis=0) > 0) & (zs.max(axis=0) - zs.min(axis=0) < max_jump) & (norm > 0) & (r == row) & (c == col)
    n = np.where(ok[:, None], n / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    n[np.einsum("ij,ij->i", n, q) > 0] *= -1
    return q, n


def projective_icp(src, w, depth_j, K: Intrinsics, init: Pose, inlier_threshold: float = 0.02, level_iterations: int = 8, tol: float = 5e-5):
    """Point-to-plane ICP of camera-i points ``src`` against frame j's depth.

    Association is projective (nearest pixel). The distance gate starts at ten
    thresholds and tightens to ``inlier_threshold`` once the step at the current
    gate is small or its iteration budget is spent. Returns ``(Z, inlier_count)`` with ``Z`` mapping camera-i to
    camera-j coordinates.
    """
    depth = np.asarray(depth_j, dtype=float)
    H, W = depth.shape
    Z = init
    gates = np.geomspace(10 * inlier_threshold, inlier_threshold, 4)
    level, level_it = 0, 0
    inl = np.zeros(len(src), bool)
    while True:
        gate = gates[level]
        p = Z.apply(src)
        zc = p[:, 2]
        good = zc > 1e-6
        col = np.full(len(p), -1)
        row = np.full(len(p), -1)
        col[good] = np.floor(K.fx * p[good, 0] / zc[good] + K.cx + 0.5).astype(int)
        row[good] = np.floor(K.fy * p[good, 1] / zc[good] + K.cy + 0.5).astype(int)
        good &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
        q = np.zeros_like(p)
        n = np.zeros_like(p)
        q[good], n[good] = vertex_normals_at(depth, K, row[good], col[good])
        good &= np.any(n != 0, axis=1)
        r = np.einsum("ij,ij->i", n, p - q)
        inl = good & (np.linalg.norm(p - q, axis=1) < gate) & (np.abs(r) < gate)
        if inl.sum() < 6:
            raise NoConsensus("too few projective associations")
        J = np.hstack([np.cross(p[inl], n[inl]), n[inl]])
        # Tukey weights at the current gate suppress surfaces that moved between frames
        ww = w[inl] * (1 - (r[inl] / gate) ** 2) ** 2
        A = J.T @ (J * ww[:, None])
        g = J.T @ (ww * r[inl])
        try:
            d = -np.linalg.solve(A + 1e-9 * np.trace(A) * np.eye(6), g)
        except np.linalg.LinAlgError as exc:
            raise NoConsensus("degenerate point-to-plane system") from exc
        Z = Pose(so3_exp(d[:3]), d[3:]) @ Z
        step = np.linalg.norm(d)
        level_it += 1
        if step < (tol if level == len(gates) - 1 else 10 * tol) or level_it >= level_iterations:
            if level == len(gates) - 1:
                break
            level, level_it = level + 1, 0
    return Z, int(inl.sum())


def solve_camera_graph(
    depths,
    K: Intrinsics,
    hand_masks=None,
    object_masks=None,
    inlier_threshold: float = 0.02,
    level_iterations: int = 8,
    stride: int = 8,
    object_weight: float = 0.2,
    mu: float = 10.0,
    min_loop_overlap: float = 0.3,
) -> tuple[list[Pose], GraphSolution]:
    """Camera poses for a fragment; ``T_0 = identity``.

    The default ``mu`` is larger than for part graphs: with inlier-count information
    a few millimetres of odometry drift would otherwise switch off valid loops.
    """
    n = len(depths)
    if n == 1:
        return [Pose.identity()], None
    srcs, targets = [], []
    for i in range(n):
        keep = np.ones(K.shape, bool) if hand_masks is None else ~np.asarray(hand_masks[i], bool)
        d = np.where(keep, depths[i], 0.0)
        pts, rows, cols = lift(d, K, None, stride)
        w = np.ones(len(pts))
        if object_masks is not None:
            w[np.asarray(object_masks[i], bool)[rows, cols]] = object_weight
        srcs.append((pts, w))
        targets.append(np.asarray(d, dtype=float))

    def register(i, j, init):
        pts, w = srcs[i]
        if len(pts) < 6:
            raise NoConsensus(f"frame {i} has no usable depth")
        return projective_icp(pts, w, targets[j], K, init, inlier_threshold, level_iterations)

    odo = []
    for i in range(n - 1):
        try:
            Z, cnt = register(i, i + 1, Pose.identity())
        except (NoConsensus, Degenerate) as exc:
            raise NoConsensus(f"odometry ({i},{i + 1}) failed: {exc}") from exc
        odo.append((i, i + 1, Z, cnt))
    X = chain_initial(n, [Edge(i, j, Z, np.eye(6)) for i, j, Z, _ in odo])
    loops = []
    for i, j in camera_loop_pairs(n):
        try:
            Z, cnt = register(i, j, X[j].inverse() @ X[i])
        except (NoConsensus, Degenerate):
            continue
        if cnt >= min_loop_overlap * len(srcs[i][0]):
            loops.append((i, j, Z, cnt))
    graph = build_part_graph(odo, loops, mu, num_nodes=n, world_measurements=False)
    sol = solve_pose_graph(graph)
    return sol.poses, sol


# --- text dump ----------------------------------------------------------------------------


def _pose_fields(p: Pose) -> str:
    return " ".join(f"{v:.17g}" for v in list(p.to_quaternion()) + list(p.translation))


def dump_pose_graph(graph: PoseGraph, poses: list[Pose] | None = None) -> str:
    lines = ["# egotwin pose graph v1", f"CONVENTION {'world' if graph.world_measurements else 'body'}", f"MU {graph.mu:.17g}", f"NODES {graph.num_nodes}"]
    for k, p in enumerate(poses or []):
        lines.append(f"NODE {k} {_pose_fields(p)}")
    for e in graph.odometry:
        lines.append(f"ODOM {e.i} {e.j} {_pose_fields(e.measurement)} " + " ".join(f"{v:.17g}" for v in np.diag(e.information)))
    for e in graph.loops:
        lines.append(f"LOOP {e.i} {e.j} {_pose_fields(e.measurement)} " + " ".join(f"{v:.17g}" for v in np.diag(e.information)) + f" {e.confidence:.17g}")
    return "\n".join(lines) + "\n"


def load_pose_graph(text: str) -> tuple[PoseGraph, list[Pose]]:
    mu, world, n = 0.1, False, 0
    odo, loops, nodes = [], [], {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        tag = tok[0]
        if tag == "CONVENTION":
            world = tok[1] == "world"
        elif tag == "MU":
            mu = float(tok[1])
        elif tag == "NODES":
            n = int(tok[1])
        elif tag == "NODE":
            v = list(map(float, tok[2:9]))
            nodes[int(tok[1])] = Pose.from_quaternion(v[:4], v[4:])
        elif tag in ("ODOM", "LOOP"):
            i, j = int(tok[1]), int(tok[2])
            v = list(map(float, tok[3:]))
            Z = Pose.from_quaternion(v[:4], v[4:7])
            O = np.diag(v[7:13])
            if tag == "ODOM":
                odo.append(Edge(i, j, Z, O))
            else:
                loops.append(Edge(i, j, Z, O, v[13]))
        else:
            raise ValueError(f"unknown record {tag!r}")
    return PoseGraph(n, odo, loops, mu, world), [nodes[k] for k in sorted(nodes)]
