"""
제어 아핀 시스템 - 함수 기반
ẋ = f(x) + g(x)u 형태의 동역학, 박스 입력 제약, 닫힌 형태의 해밀토니안 최대값, RK4 적분기
"""

import itertools
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import torch


INPUT_TOLERANCE = 1e-9
TIE_TOLERANCE = 1e-12

# 빌트인 시스템의 상태 샘플링 영역 (안전 박스 [0,10]x[-5,5] 주변 여유 포함)
DEFAULT_STATE_DOMAINS = {
    "double_integrator": [[-1.0, 11.0], [-6.0, 6.0]],
    "unicycle": [[-1.0, 11.0], [-6.0, 6.0], [-np.pi, np.pi]],
    "dubins": [[-1.0, 11.0], [-6.0, 6.0], [-np.pi, np.pi]],
}


class IntegrationError(RuntimeError):
    """적분 중 상태가 유한하지 않게 된 경우"""


@dataclass(frozen=True)
class ControlAffineSystem:
    name: str
    state_dim: int
    input_dim: int
    drift: Callable[[Any], Any]
    actuation: Callable[[Any], Any]
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_domain: np.ndarray

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError(f"{self.name}: state_dim and input_dim must be positive")
        if self.input_lower.shape != (self.input_dim,) or self.input_upper.shape != (self.input_dim,):
            raise ValueError(f"{self.name}: input bounds must have length {self.input_dim}")
        if np.any(self.input_lower > self.input_upper):
            raise ValueError(f"{self.name}: input_lower must not exceed input_upper")
        if self.state_domain.shape != (self.state_dim, 2):
            raise ValueError(f"{self.name}: state_domain must be a {self.state_dim}x2 box")


def _backend(x):
    """텐서면 torch, 아니면 numpy 모듈 반환"""
    return torch if isinstance(x, torch.Tensor) else np


def _bounds_like(bounds: np.ndarray, x):
    if isinstance(x, torch.Tensor):
        return torch.as_tensor(bounds, dtype=x.dtype, device=x.device)
    return bounds


# 빌트인 동역학 (배치 입력 (..., n) 지원, numpy/torch 공용)
def _double_integrator_drift(x):
    xp = _backend(x)
    v = x[..., 1]
    return xp.stack([v, xp.zeros_like(v)], -1)


def _double_integrator_actuation(x):
    xp = _backend(x)
    zero = xp.zeros_like(x[..., 0])
    one = xp.ones_like(x[..., 0])
    return xp.stack([zero, one], -1)[..., None]


def _unicycle_drift(x):
    return x * 0.0


def _unicycle_actuation(x):
    xp = _backend(x)
    psi = x[..., 2]
    zero = xp.zeros_like(psi)
    one = xp.ones_like(psi)
    first = xp.stack([xp.cos(psi), xp.sin(psi), zero], -1)
    second = xp.stack([zero, zero, one], -1)
    return xp.stack([first, second], -1)


def _dubins_drift(speed: float):
    def drift(x):
        xp = _backend(x)
        psi = x[..., 2]
        return xp.stack([speed * xp.cos(psi), speed * xp.sin(psi), xp.zeros_like(psi)], -1)
    return drift


def _dubins_actuation(x):
    xp = _backend(x)
    psi = x[..., 2]
    zero = xp.zeros_like(psi)
    return xp.stack([zero, zero, xp.ones_like(psi)], -1)[..., None]


def double_integrator() -> ControlAffineSystem:
    """이중 적분기: f=(v,0), g=(0,1)ᵀ, u∈[-1,1]"""
    return ControlAffineSystem(
        name="double_integrator",
        state_dim=2,
        input_dim=1,
        drift=_double_integrator_drift,
        actuation=_double_integrator_actuation,
        input_lower=np.array([-1.0]),
        input_upper=np.array([1.0]),
        state_domain=np.array(DEFAULT_STATE_DOMAINS["double_integrator"]),
    )


def unicycle() -> ControlAffineSystem:
    """유니사이클: f=0, g=[(cosψ,sinψ,0),(0,0,1)], (v,ω)∈[0.2,2]x[-1,1]"""
    return ControlAffineSystem(
        name="unicycle",
        state_dim=3,
        input_dim=2,
        drift=_unicycle_drift,
        actuation=_unicycle_actuation,
        input_lower=np.array([0.2, -1.0]),
        input_upper=np.array([2.0, 1.0]),
        state_domain=np.array(DEFAULT_STATE_DOMAINS["unicycle"]),
    )


def dubins_car(speed: float, turn_rate_limit: float = 1.0) -> ControlAffineSystem:
    """등속 더빈스 자동차: f=(V cosψ, V sinψ, 0), g=(0,0,1)ᵀ"""
    if not np.isfinite(speed):
        raise ValueError(f"dubins speed must be finite, got {speed}")
    return ControlAffineSystem(
        name="dubins",
        state_dim=3,
        input_dim=1,
        drift=_dubins_drift(float(speed)),
        actuation=_dubins_actuation,
        input_lower=np.array([-turn_rate_limit]),
        input_upper=np.array([turn_rate_limit]),
        state_domain=np.array(DEFAULT_STATE_DOMAINS["dubins"]),
    )


BUILTIN_SYSTEMS = ("double_integrator", "unicycle", "dubins")


def make_system(name: str, dubins_speed: Optional[float] = None) -> ControlAffineSystem:
    """이름 문자열로 빌트인 시스템 생성"""
    if name == "double_integrator":
        return double_integrator()
    if name == "unicycle":
        return unicycle()
    if name == "dubins":
        # 속도 V는 설정에서 반드시 지정
        if dubins_speed is None:
            raise ValueError("system 'dubins' requires 'dubins_speed'")
        return dubins_car(dubins_speed)
    raise ValueError(f"unknown system '{name}', expected one of {list(BUILTIN_SYSTEMS)}")


def system_descriptor(system: ControlAffineSystem, dubins_speed: Optional[float] = None) -> Dict[str, Any]:
    """체크포인트에 기록할 시스템 식별 정보"""
    descriptor = {"name": system.name}
    if system.name == "dubins":
        descriptor["dubins_speed"] = dubins_speed
    return descriptor


def box_vertices(system: ControlAffineSystem) -> np.ndarray:
    """입력 박스의 2^m 꼭짓점 (m, 하한/상한 조합)"""
    pairs = list(zip(system.input_lower, system.input_upper))
    return np.array(list(itertools.product(*pairs)), dtype=float)


def eval_dynamics(system: ControlAffineSystem, x, u) -> np.ndarray:
    """f(x) + g(x)u 계산 (입력 박스 및 유한성 검사 포함)"""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(system.input_dim)
    if x.shape != (system.state_dim,):
        raise ValueError(f"state must have length {system.state_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"state must be finite, got {x}")
    if np.any(u < system.input_lower - INPUT_TOLERANCE) or np.any(u > system.input_upper + INPUT_TOLERANCE):
        raise ValueError(
            f"input {u} outside box [{system.input_lower}, {system.input_upper}]"
        )
    return _rate(system, x, u)


def _rate(system: ControlAffineSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return system.drift(x) + system.actuation(x) @ u


def hamiltonian_max(system: ControlAffineSystem, x, p) -> Tuple[Any, Any]:
    """
    max_{u∈U} pᵀ(f(x) + g(x)u) 를 닫힌 형태로 계산
    pᵀg_j > 0 이면 상한, 아니면(동점 포함) 하한을 최대화 꼭짓점 u*로 반환
    배치 입력 (..., n) 지원. torch 입력이면 u*는 상수로 취급되어 역전파는 활성 꼭짓점만 통과
    """
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError(f"state and costate must be finite, got x={x}, p={p}")
    xp = _backend(x)
    if p.shape[-1] != system.state_dim:
        raise ValueError(f"costate must have length {system.state_dim}, got {p.shape[-1]}")
    lower = _bounds_like(system.input_lower, x)
    upper = _bounds_like(system.input_upper, x)

    drift_term = (p * system.drift(x)).sum(-1)
    switching = xp.einsum("...n,...nm->...m", p, system.actuation(x))
    u_star = xp.where(switching > TIE_TOLERANCE, upper, lower)
    value = drift_term + (switching * u_star).sum(-1)
    return value, u_star


def rk4_step(system: ControlAffineSystem, x, u, dt: float) -> np.ndarray:
    """영차 유지 입력으로 고전 4차 룽게-쿠타 한 스텝"""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float).reshape(system.input_dim)

    k1 = _rate(system, x, u)
    k2 = _rate(system, x + 0.5 * dt * k1, u)
    k3 = _rate(system, x + 0.5 * dt * k2, u)
    k4 = _rate(system, x + dt * k3, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    for stage in (k1, k2, k3, k4, x_next):
        if not np.all(np.isfinite(stage)):
            raise IntegrationError(f"non-finite state during RK4 step from x={x}, u={u}, dt={dt}")
    return x_next
