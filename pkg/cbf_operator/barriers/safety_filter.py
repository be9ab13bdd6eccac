"""
CBF-QP 안전 필터 - 함수 기반
반공간 ∩ 입력 박스 위로의 사영 QP (면 열거 방식의 정확한 해), 학습된 h_θ 기반 필터,
이중 적분기 PD 제어기와 유니사이클 기준 제어기
"""

import itertools
from typing import Any, Dict, Tuple

import numpy as np

from barriers.network import h_forward, h_gradient_x
from barriers.systems import ControlAffineSystem, hamiltonian_max


FEASIBILITY_TOLERANCE = 1e-9
STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"

# 기준 제어기 기본 이득
DEFAULT_GAINS = {
    "pd": {"kp": 1.0, "kd": 2.0},
    "unicycle": {"k_omega": 2.0, "k_v": 1.0},
}


def make_filter_problem(u_ref, a, b: float, lower, upper) -> Dict[str, Any]:
    """min ‖u − u_ref‖² s.t. aᵀu ≥ b, lower ≤ u ≤ upper"""
    problem = {
        "u_ref": np.atleast_1d(np.asarray(u_ref, dtype=float)),
        "a": np.atleast_1d(np.asarray(a, dtype=float)),
        "b": float(b),
        "lower": np.atleast_1d(np.asarray(lower, dtype=float)),
        "upper": np.atleast_1d(np.asarray(upper, dtype=float)),
    }
    m = problem["u_ref"].shape[0]
    for key in ("a", "lower", "upper"):
        if problem[key].shape != (m,):
            raise ValueError(f"filter problem '{key}' must have length {m}, got {problem[key].shape}")
    if np.any(problem["lower"] > problem["upper"]):
        raise ValueError("filter problem box is empty")
    if not all(np.all(np.isfinite(problem[k])) for k in ("u_ref", "a", "lower", "upper")) or not np.isfinite(problem["b"]):
        raise ValueError("filter problem entries must be finite")
    return problem


def _candidate(problem: Dict[str, Any], faces: Tuple[int, ...], halfspace_active: bool):
    """
    고정할 좌표(하한 -1 / 상한 +1 / 자유 0)와 반공간 활성 여부가 주어졌을 때
    그 면 위의 닫힌 형태 최소점
    """
    u = problem["u_ref"].copy()
    fixed = np.array(faces) != 0
    u[np.array(faces) < 0] = problem["lower"][np.array(faces) < 0]
    u[np.array(faces) > 0] = problem["upper"][np.array(faces) > 0]
    if not halfspace_active:
        return u
    a_free = np.where(fixed, 0.0, problem["a"])
    norm2 = float(a_free @ a_free)
    if norm2 == 0.0:
        return None
    rhs = problem["b"] - float(problem["a"][fixed] @ u[fixed])
    return u + (rhs - float(a_free @ u)) / norm2 * a_free


def _is_feasible(problem: Dict[str, Any], u: np.ndarray) -> bool:
    in_box = np.all(u >= problem["lower"] - 1e-12) and np.all(u <= problem["upper"] + 1e-12)
    return bool(in_box and problem["a"] @ u >= problem["b"] - FEASIBILITY_TOLERANCE)


def solve_halfspace_box_qp(problem: Dict[str, Any]) -> Tuple[np.ndarray, str]:
    """
    박스의 3^m 면 격자와 반공간 활성/비활성 조합을 모두 닫힌 형태로 풀고
    실현 가능한 후보 중 목적함수가 가장 작은 것을 선택
    max_{u∈box} aᵀu < b 이면 infeasible 상태 반환 (예외 아님)
    """
    a, lower, upper = problem["a"], problem["lower"], problem["upper"]
    best_vertex = np.where(a > 0, upper, lower)
    if a @ best_vertex < problem["b"]:
        return best_vertex, STATUS_INFEASIBLE

    best, best_cost = None, np.inf
    m = problem["u_ref"].shape[0]
    for faces in itertools.product((0, -1, 1), repeat=m):
        for halfspace_active in (False, True):
            u = _candidate(problem, faces, halfspace_active)
            if u is None or not _is_feasible(problem, u):
                continue
            cost = float(np.sum((u - problem["u_ref"]) ** 2))
            if cost < best_cost:
                best, best_cost = u, cost

    if best is None:
        # 수치 오차로 후보가 모두 탈락한 경우 aᵀu 최대 꼭짓점이 유일한 실현 가능점
        best = best_vertex
    return np.clip(best, lower, upper), STATUS_OPTIMAL


def safety_filter(params, system: ControlAffineSystem, tree: Dict[str, Any], x, e, u_ref,
                  gamma: float, beta: float, verbose: bool = False) -> Tuple[np.ndarray, str]:
    """
    a = gᵀ∇_x h, b = −∇_x h·f − γh 로 QP를 구성해 풀이
    infeasible 이면 해밀토니안 최대화 꼭짓점 u* 로 대체
    """
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    h = float(h_forward(params, tree, x, e, beta))
    grad = np.asarray(h_gradient_x(params, tree, x, e, beta))
    f = system.drift(x)
    g = system.actuation(x)
    problem = make_filter_problem(u_ref, g.T @ grad, -float(grad @ f) - gamma * h,
                                  system.input_lower, system.input_upper)
    u, status = solve_halfspace_box_qp(problem)
    if status == STATUS_INFEASIBLE:
        _, u = hamiltonian_max(system, x, grad)
        if verbose:
            print(f"CBF-QP infeasible at x={x.tolist()}, using most-safe input {u.tolist()}")
    return np.asarray(u, dtype=float), status


def pd_controller(x, target: float, kp: float, kd: float) -> float:
    """u = kp·(target − position) − kd·velocity (포화 없음, 필터가 처리)"""
    if kp < 0 or kd < 0:
        raise ValueError(f"PD gains must be non-negative, got kp={kp}, kd={kd}")
    position, velocity = float(x[0]), float(x[1])
    return kp * (target - position) - kd * velocity


def unicycle_controller(state, target, k_omega: float, k_v: float) -> np.ndarray:
    """
    rerr = R(ψ)⁻¹ [x_f − x, y_f − y], d = atan2(rerr[1], rerr[0]),
    ω = k_ω d, v = k_v cos(d). 목표와 위치가 같으면 d = 0
    """
    if k_omega <= 0 or k_v <= 0:
        raise ValueError(f"unicycle gains must be positive, got k_omega={k_omega}, k_v={k_v}")
    px, py, psi = float(state[0]), float(state[1]), float(state[2])
    dx, dy = float(target[0]) - px, float(target[1]) - py
    forward = np.cos(psi) * dx + np.sin(psi) * dy
    lateral = -np.sin(psi) * dx + np.cos(psi) * dy
    d = 0.0 if forward == 0.0 and lateral == 0.0 else float(np.arctan2(lateral, forward))
    return np.array([k_v * np.cos(d), k_omega * d])
