"""
Verify Module - Finite-difference gradient suite and structural invariant suite

Both suites run in 64-bit and use only seeded randomness. Each check yields a
CheckResult holding the worst observed error and the threshold it must stay
under.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

import tensor as T
from tensor import Tensor, RunningStats
from config import model_preset
from dcgct import (
    FLOP_TARGETS, FLOP_TOLERANCE, PARAM_TARGETS, PARAM_TOLERANCE, PCK_THRESHOLD_MM, ConfigError,
)
from metrics import p_mpjpe, pck
from model import count_flops, count_params, forward, gcm_forward, init_params, lcm_forward
from skeleton import CATEGORIES, build_topology, decompose_adjacency, flip_pose, make_topology
from train import weighted_pose_loss

log = logging.getLogger("dcgct.verify")

SUITES = ("grads", "invariants", "all")
PRIMITIVE_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-4
INVARIANT_TOLERANCE = 1e-6


@dataclass
class CheckResult:
    suite: str
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.threshold

    def to_dict(self) -> Dict:
        return {"suite": self.suite, "name": self.name, "error": self.error,
                "threshold": self.threshold, "passed": self.passed}


@dataclass
class VerifyReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def worst(self, suite: str) -> Optional[CheckResult]:
        chosen = [r for r in self.results if r.suite == suite]
        if not chosen:
            return None
        return max(chosen, key=lambda r: r.error / r.threshold)

    def to_dict(self) -> Dict:
        return {"passed": self.passed, "results": [r.to_dict() for r in self.results]}


# Gradient suite

def _weighted_sum(weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Reduce an op output to a scalar with fixed random weights"""
    return lambda out: T.sum(out * weights)


def _primitive_cases(rng: np.random.Generator) -> List:
    """(name, point, f) triples; f maps a 64-bit Tensor to a scalar Tensor"""
    n = lambda *shape: rng.normal(size=shape)
    cases = []

    def case(name, x, op, out_shape):
        reduce = _weighted_sum(n(*out_shape))
        cases.append((name, x, lambda t: reduce(op(t))))

    b_row = n(1, 4)
    case("add", n(3, 4), lambda t: t + b_row, (3, 4))
    case("sub", n(3, 4), lambda t: T.sub(b_row, t), (3, 4))
    b_full = n(3, 4)
    case("mul", n(3, 4), lambda t: t * b_full, (3, 4))
    case("mul_self", n(2, 3), lambda t: t * t, (2, 3))
    case("mul_broadcast_size1", n(1, 4), lambda t: t * b_full, (3, 4))

    right = n(4, 5)
    case("matmul_lhs", n(2, 3, 4), lambda t: T.matmul(t, right), (2, 3, 5))
    left = n(2, 3, 4)
    case("matmul_rhs_broadcast", n(4, 5), lambda t: T.matmul(left, t), (2, 3, 5))
    col = n(3, 1)
    case("matmul_size1", n(1, 1, 3), lambda t: T.matmul(t, col), (1, 1, 1))
    x_lin, bias = n(2, 3, 4), n(5)
    case("linear_weight", n(4, 5), lambda t: T.linear(x_lin, t, bias), (2, 3, 5))
    w_lin = n(4, 5)
    case("linear_bias", n(5), lambda t: T.linear(x_lin, w_lin, t), (2, 3, 5))

    case("sum_axis", n(2, 3, 4), lambda t: T.sum(t, axis=1), (2, 4))
    case("mean_axis", n(2, 3, 4), lambda t: T.mean(t, axis=2, keepdims=True), (2, 3, 1))
    case("reshape", n(2, 6), lambda t: T.reshape(t, (3, 4)), (3, 4))
    case("transpose", n(2, 3, 4), lambda t: T.transpose(t, (2, 0, 1)), (4, 2, 3))
    case("select", n(2, 3, 4), lambda t: T.select(t, 1, axis=1), (2, 4))
    other = n(2, 3, 2)
    case("concat_channels", n(2, 3, 4), lambda t: T.concat_channels([t, other]), (2, 3, 6))
    case("split_channels", n(2, 3, 5), lambda t: T.split_channels(t, [2, 3])[1], (2, 3, 3))

    case("softmax_rows", n(2, 3, 5), T.softmax_rows, (2, 3, 5))
    cases.append(("softmax_rows_sum_of_squares", n(3, 6), lambda t: T.sum(T.softmax_rows(t) * T.softmax_rows(t))))
    case("gelu", n(3, 4), T.gelu, (3, 4))

    gamma, beta = 1.0 + 0.1 * n(6), n(6)
    case("layer_norm_x", n(2, 3, 6), lambda t: T.layer_norm(t, gamma, beta), (2, 3, 6))
    x_ln = n(2, 3, 6)
    case("layer_norm_gamma", n(6), lambda t: T.layer_norm(x_ln, t, beta), (2, 3, 6))

    def bn_train(t):
        return T.batch_norm(t, gamma, beta, RunningStats(6), "train")
    case("batch_norm_train", n(2, 3, 6), bn_train, (2, 3, 6))
    stats = RunningStats(6)
    stats.mean, stats.var = n(6), 0.5 + rng.random(6)
    case("batch_norm_eval", n(2, 3, 6), lambda t: T.batch_norm(t, gamma, beta, stats, "eval"), (2, 3, 6))
    case("batch_norm_gamma", n(6), lambda t: T.batch_norm(x_ln, t, beta, RunningStats(6), "train"), (2, 3, 6))

    case("joint_norm", n(2, 4, 3), T.joint_norm, (2, 4))
    case("dropout", n(3, 4), lambda t: T.dropout(t, 0.3, np.random.default_rng(7), True), (3, 4))
    return cases


def _significant_coords(grad: np.ndarray, rng: np.random.Generator, count: int) -> List[int]:
    """Random flat indices among entries at least 1e-3 of the largest gradient"""
    flat = np.abs(grad.reshape(-1))
    top = flat.max() if flat.size else 0.0
    if top == 0.0:
        return []
    candidates = np.flatnonzero(flat >= 1e-3 * top)
    picked = rng.choice(candidates, size=min(count, len(candidates)), replace=False)
    return sorted(int(i) for i in picked)


def end_to_end_checks(seed: int = 0, coords_per_tensor: int = 2) -> List[CheckResult]:
    """Loss gradient of the tiny config against finite differences, input and every parameter tensor"""
    rng = np.random.default_rng(seed)
    cfg = model_preset("tiny")
    topo = build_topology("h36m17")
    adjacency = decompose_adjacency(topo)
    results = []
    with T.precision(np.float64):
        params = init_params(cfg, seed)
        inputs = Tensor(rng.uniform(-0.5, 0.5, size=(2, cfg.joints, 2)), requires_grad=True)
        targets = rng.normal(0.0, 300.0, size=(2, cfg.joints, 3))
        weights = [1.0] * cfg.joints

        def loss_of_input(x: Tensor) -> Tensor:
            return weighted_pose_loss(forward(x, params, cfg, adjacency, "train"), targets, weights)

        with T.recording() as tape:
            loss = loss_of_input(inputs)
        T.backward(tape, loss)
        grads = {name: t.grad.copy() for name, t in params.items() if t.grad is not None}
        params.zero_grad()

        coords = _significant_coords(inputs.grad, rng, 24)
        err = T.grad_check(loss_of_input, inputs, coords=coords)
        params.zero_grad()
        results.append(CheckResult("grads", "end_to_end_input", err, END_TO_END_TOLERANCE))

        worst = 0.0
        for name, original in list(params.items()):
            coords = _significant_coords(grads.get(name, np.zeros(1)), rng, coords_per_tensor)
            if not coords:
                continue

            def loss_of_param(p: Tensor, name=name) -> Tensor:
                params.tensors[name] = p
                try:
                    return weighted_pose_loss(forward(inputs, params, cfg, adjacency, "train"), targets, weights)
                finally:
                    params.tensors[name] = original

            worst = max(worst, T.grad_check(loss_of_param, original, coords=coords))
        params.zero_grad()
    results.append(CheckResult("grads", "end_to_end_params", worst, END_TO_END_TOLERANCE))
    return results


def gradient_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.precision(np.float64):
        for name, x, f in _primitive_cases(rng):
            err = T.grad_check(f, Tensor(x))
            results.append(CheckResult("grads", name, err, PRIMITIVE_TOLERANCE))
    results.extend(end_to_end_checks(seed))
    return results


# Invariant suite

def _adjacency_checks() -> List[CheckResult]:
    topo = build_topology("h36m17")
    adj = decompose_adjacency(topo)
    stacked = adj.stacked()
    out = [
        CheckResult("invariants", "adjacency_nonnegative", float(max(0.0, -stacked.min())), 0.0),
        CheckResult("invariants", "adjacency_self_identity",
                    float(np.abs(adj.normalized["self"] - np.eye(topo.joint_count)).max()), INVARIANT_TOLERANCE),
        CheckResult("invariants", "adjacency_row_energy",
                    float(max(0.0, (stacked ** 2).sum(axis=2).max() - 1.0)), INVARIANT_TOLERANCE),
    ]
    union = np.zeros_like(adj.raw["self"])
    for k in CATEGORIES:
        union = np.maximum(union, adj.raw[k])
    overlap = np.abs(sum(adj.raw[k] for k in CATEGORIES) - union).max()
    out.append(CheckResult("invariants", "categories_partition_neighborhood", float(overlap), 0.0))

    pair = make_topology(["a", "b"], [None, 0], 0, [])
    toward = decompose_adjacency(pair).normalized["toward_root"]
    out.append(CheckResult("invariants", "two_joint_toward_root",
                           float(np.abs(toward - np.array([[0.0, 0.0], [1.0, 0.0]])).max()), INVARIANT_TOLERANCE))
    return out


def _module_checks(rng: np.random.Generator) -> List[CheckResult]:
    cfg = model_preset("tiny")
    topo = build_topology("h36m17")
    adj = decompose_adjacency(topo)
    out = []
    with T.precision(np.float64):
        params = init_params(cfg, int(rng.integers(1 << 30)))
        x = Tensor(rng.normal(size=(2, cfg.joints, cfg.c2)))
        perm = rng.permutation(cfg.joints)
        gcm = params.scope("layers.0.g2l_gcm.")
        err = np.abs(gcm_forward(Tensor(x.data[:, perm]), gcm, cfg.heads).data
                     - gcm_forward(x, gcm, cfg.heads).data[:, perm]).max()
        out.append(CheckResult("invariants", "gcm_permutation_equivariance", float(err), INVARIANT_TOLERANCE))

        lcm = params.scope("layers.0.l2g_lcm.")
        base = Tensor(rng.normal(size=(1, cfg.joints, cfg.c1)))
        joint = 3
        bumped = base.data.copy()
        bumped[0, joint] += rng.normal(size=cfg.c1)
        delta = np.abs(lcm_forward(Tensor(bumped), adj, lcm, "eval").data
                       - lcm_forward(base, adj, lcm, "eval").data).max(axis=-1)[0]
        reach = adj.merged() > 0
        two_hop = (reach.astype(int) @ reach.astype(int))[:, joint] > 0
        out.append(CheckResult("invariants", "lcm_two_hop_locality", float(delta[~two_hop].max()), 1e-12))

        fim = params.scope("layers.0.fim.")
        composed = fim["w_a"].data @ fim["w_b"].data
        s = np.linalg.svd(composed, compute_uv=False)
        rank_cut = cfg.channels // cfg.fim_reduction
        out.append(CheckResult("invariants", "fim_rank_bound", float(s[rank_cut:].max() / s[0]), 1e-10))

        rows = T.softmax_rows(Tensor(rng.normal(scale=10.0, size=(4, 7)))).data
        out.append(CheckResult("invariants", "softmax_rows_sum_to_one",
                               float(np.abs(rows.sum(axis=-1) - 1.0).max()), INVARIANT_TOLERANCE))
        ln = T.layer_norm(Tensor(rng.normal(3.0, 5.0, size=(4, 9))), np.ones(9), np.zeros(9)).data
        out.append(CheckResult("invariants", "layer_norm_row_mean", float(np.abs(ln.mean(axis=-1)).max()),
                               INVARIANT_TOLERANCE))
        out.append(CheckResult("invariants", "layer_norm_row_variance", float(np.abs(ln.var(axis=-1) - 1.0).max()), 1e-4))
    return out


def _pose_checks(rng: np.random.Generator) -> List[CheckResult]:
    topo = build_topology("h36m17")
    pose = rng.normal(size=(5, topo.joint_count, 3))
    out = [CheckResult("invariants", "flip_involution",
                       float(np.abs(flip_pose(flip_pose(pose, topo), topo) - pose).max()), 0.0)]

    gt = rng.normal(0.0, 300.0, size=(topo.joint_count, 3))
    rot = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
    pred = 2.0 * gt @ rot.T + rng.normal(0.0, 100.0, size=3)
    out.append(CheckResult("invariants", "procrustes_similarity_invariance", p_mpjpe(pred, gt), INVARIANT_TOLERANCE))

    exact = np.zeros((1, topo.joint_count, 3))
    shifted = exact.copy()
    shifted[..., 0] = PCK_THRESHOLD_MM
    out.append(CheckResult("invariants", "pck_threshold_exclusive", pck(shifted, exact), 0.0))
    return out


def _accounting_checks() -> List[CheckResult]:
    out = []
    for name in ("tiny", "paper", "frames9"):
        cfg = model_preset(name)
        out.append(CheckResult("invariants", f"param_count_matches_tensors[{name}]",
                               float(abs(count_params(cfg) - init_params(cfg).scalar_count())), 0.0))
    for name, target in PARAM_TARGETS.items():
        measured = count_params(model_preset(name))
        out.append(CheckResult("invariants", f"param_target[{name}]", abs(measured / target - 1.0), PARAM_TOLERANCE))
    for name, target in FLOP_TARGETS.items():
        measured = count_flops(model_preset(name))
        out.append(CheckResult("invariants", f"flop_target[{name}]", abs(measured / target - 1.0), FLOP_TOLERANCE))
    return out


def invariant_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    return _adjacency_checks() + _module_checks(rng) + _pose_checks(rng) + _accounting_checks()


def run_suites(suite: str = "all", seed: int = 0, corrupt_op: Optional[str] = None) -> VerifyReport:
    """
    Run the requested suites

    Args:
        suite: grads | invariants | all
        seed: Seed for every random draw
        corrupt_op: Debug: scale this op's adjoint by 1.5 while the gradient suite runs

    Returns:
        VerifyReport
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
    report = VerifyReport()
    if suite in ("grads", "all"):
        if corrupt_op:
            with T.corrupt_adjoint(corrupt_op):
                report.results.extend(gradient_checks(seed))
        else:
            report.results.extend(gradient_checks(seed))
    if suite in ("invariants", "all"):
        report.results.extend(invariant_checks(seed))
    for r in report.results:
        level = logging.DEBUG if r.passed else logging.WARNING
        log.log(level, f"[VERIFY] {r.suite}/{r.name}: {r.error:.3e} (threshold {r.threshold:.0e})")
    return report
