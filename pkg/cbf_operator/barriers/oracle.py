"""
격자 생존 커널 오라클 - 함수 기반
2차원 상태 격자 위에서 B ← min(c, B + dt·(H(x,∇B) + γB)) 값 반복 (풍상 차분)으로
최대 제어 불변 집합을 독립적으로 계산. 학습 결과 검증용
"""

from typing import Any, Dict, Optional

import numpy as np

from barriers.environment import eval_constraint
from barriers.storage import save_to_csv
from barriers.systems import ControlAffineSystem, box_vertices


ORACLE_DEFAULTS = {
    "lower": [-1.0, -6.0],
    "upper": [11.0, 6.0],
    "resolution": [201, 201],
    "gamma": 1.0,
    "dt": 0.005,
    "max_iters": 20000,
    "tol": 1e-6,
}


def make_grid(grid: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """격자 축, 간격, 노드 상태 배열 (R0, R1, 2)"""
    grid = {**{k: ORACLE_DEFAULTS[k] for k in ("lower", "upper", "resolution")}, **(grid or {})}
    axes = [np.linspace(lo, hi, int(r)) for lo, hi, r in zip(grid["lower"], grid["upper"], grid["resolution"])]
    if len(axes) != 2 or any(a.size < 3 for a in axes):
        raise ValueError("oracle grid must be 2-D with at least 3 nodes per axis")
    spacing = np.array([a[1] - a[0] for a in axes])
    mesh = np.meshgrid(*axes, indexing="ij")
    return {"axes": axes, "spacing": spacing, "states": np.stack(mesh, -1)}


def cfl_limit(system: ControlAffineSystem, grid: Dict[str, Any], gamma: float) -> float:
    """풍상 차분이 단조가 되는 최대 dt"""
    states = grid["states"]
    f = system.drift(states)
    g = system.actuation(states)
    speed = 0.0
    for u in box_vertices(system):
        velocity = f + np.einsum("...nm,m->...n", g, u)
        speed = max(speed, float(np.max(np.sum(np.abs(velocity) / grid["spacing"], -1))))
    return 1.0 / (speed + gamma) if speed + gamma > 0 else np.inf


def upwind_hamiltonian(system: ControlAffineSystem, grid: Dict[str, Any], value: np.ndarray) -> np.ndarray:
    """
    각 입력 꼭짓점의 속도장에 대해 풍상 차분 ∇B·(f + g u) 후 최대값
    경계 밖은 가장자리 값을 복사한 유령 셀
    """
    states = grid["states"]
    h0, h1 = grid["spacing"]
    padded = np.pad(value, 1, mode="edge")
    forward = [(padded[2:, 1:-1] - value) / h0, (padded[1:-1, 2:] - value) / h1]
    backward = [(value - padded[:-2, 1:-1]) / h0, (value - padded[1:-1, :-2]) / h1]

    f = system.drift(states)
    g = system.actuation(states)
    best = np.full(value.shape, -np.inf)
    for u in box_vertices(system):
        velocity = f + np.einsum("...nm,m->...n", g, u)
        term = np.zeros(value.shape)
        for i in range(2):
            vel = velocity[..., i]
            term += np.where(vel > 0, vel * forward[i], vel * backward[i])
        best = np.maximum(best, term)
    return best


def value_iteration_step(value: np.ndarray, constraint: np.ndarray, hamiltonian: np.ndarray,
                         gamma: float, dt: float, floor: float = -np.inf) -> np.ndarray:
    """B ← max(floor, min(c, B + dt·(H + γB)))"""
    return np.maximum(floor, np.minimum(constraint, value + dt * (hamiltonian + gamma * value)))


def grid_viability_kernel(system: ControlAffineSystem, tree: Dict[str, Any], e, grid: Optional[Dict[str, Any]] = None,
                          gamma: float = ORACLE_DEFAULTS["gamma"], dt: float = ORACLE_DEFAULTS["dt"],
                          max_iters: int = ORACLE_DEFAULTS["max_iters"],
                          tol: float = ORACLE_DEFAULTS["tol"]) -> Dict[str, Any]:
    """
    B⁰ = c 에서 시작해 최대 갱신량이 tol 미만이 될 때까지 반복
    γ > 0 이면 커널 밖 값이 −∞ 로 발산하므로 음수 하한 floor 에서 자름 (부호는 보존)
    반환: 0-초상위 마스크, 값 격자, 수렴 여부와 마지막 잔차
    """
    if system.state_dim != 2:
        raise ValueError(f"grid oracle supports 2-D systems only, got n={system.state_dim}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    grid = make_grid(grid)
    limit = cfl_limit(system, grid, gamma)
    if dt > limit:
        print(f"Warning: oracle dt={dt} exceeds the monotone limit {limit:.3g}")

    states = grid["states"]
    constraint = np.asarray(eval_constraint(tree, states, np.asarray(e, dtype=float)))
    floor = min(float(constraint.min()), 0.0) - 1.0
    value = constraint.copy()
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        updated = value_iteration_step(value, constraint, upwind_hamiltonian(system, grid, value), gamma, dt, floor)
        residual = float(np.max(np.abs(updated - value)))
        value = updated
        if residual < tol:
            break

    converged = residual < tol
    if not converged:
        print(f"Oracle did not converge in {max_iters} iterations (residual {residual:.3e})")
    return {
        "axes": grid["axes"],
        "value": value,
        "mask": value >= 0,
        "constraint": constraint,
        "floor": floor,
        "converged": converged,
        "iterations": iterations,
        "residual": residual,
    }


def analytic_double_integrator_kernel(states: np.ndarray, position_box=(0.0, 10.0),
                                      velocity_box=(-5.0, 5.0), max_accel: float = 1.0) -> np.ndarray:
    """장애물 없는 이중 적분기의 최대 제어 불변 집합 (최소 제동 거리 경계)"""
    x, v = states[..., 0], states[..., 1]
    lo, hi = position_box
    braking = v ** 2 / (2.0 * max_accel)
    in_box = (x >= lo) & (x <= hi) & (v >= velocity_box[0]) & (v <= velocity_box[1])
    return in_box & ((v <= 0) | (x <= hi - braking)) & ((v >= 0) | (x >= lo + braking))


def mask_agreement(mask: np.ndarray, reference: np.ndarray) -> float:
    """두 마스크가 일치하는 셀 비율"""
    return float(np.mean(mask == reference))


def mask_iou(mask: np.ndarray, reference: np.ndarray) -> float:
    union = np.logical_or(mask, reference).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask, reference).sum() / union)


def dilate_mask(mask: np.ndarray, cells: int) -> np.ndarray:
    """정사각형 구조 요소로 cells 칸 팽창"""
    padded = np.pad(mask, cells, mode="constant", constant_values=False)
    result = np.zeros_like(mask)
    rows, cols = mask.shape
    for di in range(2 * cells + 1):
        for dj in range(2 * cells + 1):
            result |= padded[di:di + rows, dj:dj + cols]
    return result


def boundary_cells(mask: np.ndarray) -> np.ndarray:
    """마스크 안쪽 셀 중 4-이웃에 바깥 셀이 있는 것"""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


def save_kernel(result: Dict[str, Any], filepath):
    """오라클 CSV (x0,x1,B,kernel)"""
    xs, vs = result["axes"]
    rows = []
    for i, x in enumerate(xs):
        for j, v in enumerate(vs):
            rows.append([float(x), float(v), float(result["value"][i, j]), int(result["mask"][i, j])])
    return save_to_csv(["x0", "x1", "B", "kernel"], rows, filepath)
