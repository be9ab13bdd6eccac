"""
폐루프 시뮬레이션 - 함수 기반
스크립트된 장애물 움직임 e(t) 아래에서 기준 제어기 → 안전 필터 → RK4 적분을 반복하고,
학습된 CBF를 격자 위에서 평가
"""

from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from jsonschema import validate

from barriers.environment import eval_constraint, get_preset, radius_slots, validate_tree
from barriers.network import h_forward, load_checkpoint
from barriers.safety_filter import (
    DEFAULT_GAINS,
    STATUS_INFEASIBLE,
    pd_controller,
    safety_filter,
    unicycle_controller,
)
from barriers.storage import load_json, save_to_csv
from barriers.systems import IntegrationError, make_system, rk4_step


SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "system": {"enum": ["double_integrator", "unicycle", "dubins"]},
        "dubins_speed": {"type": "number"},
        "checkpoint": {"type": "string"},
        "environment": {
            "type": "object",
            "properties": {
                "preset": {"type": "string"},
                "tree": {"type": "object"}
            }
        },
        "initial_env": {"type": "array", "items": {"type": "number"}},
        "motion": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "slot": {"type": "integer", "minimum": 0},
                    "breakpoints": {
                        "type": "array",
                        "minItems": 1,
                        "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}
                    }
                },
                "required": ["slot", "breakpoints"]
            }
        },
        "start": {"type": "array", "items": {"type": "number"}},
        "target": {"type": "array", "items": {"type": "number"}},
        "controller": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["pd", "unicycle"]},
                "kp": {"type": "number"},
                "kd": {"type": "number"},
                "k_omega": {"type": "number"},
                "k_v": {"type": "number"}
            },
            "required": ["kind"]
        },
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "start_noise": {"type": "number", "minimum": 0},
        "reach_tolerance": {"type": "number", "exclusiveMinimum": 0},
        "stop_at_target": {"type": "boolean"},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "verbose": {"type": "boolean"}
    },
    "required": ["system", "environment", "initial_env", "start", "target", "controller", "dt", "horizon"]
}

SCENARIO_DEFAULTS = {
    "motion": [],
    "seed": 0,
    "start_noise": 0.0,
    "reach_tolerance": 0.3,
    "stop_at_target": False,
    "verbose": False,
}


class SimulationError(RuntimeError):
    """시뮬레이션 중단 (그때까지의 궤적 포함)"""

    def __init__(self, message: str, trajectory: Dict[str, Any]):
        super().__init__(message)
        self.trajectory = trajectory


def scenario_tree(scenario: Dict[str, Any]) -> Dict[str, Any]:
    environment = scenario["environment"]
    if "tree" in environment:
        return environment["tree"]
    if "preset" in environment:
        return get_preset(environment["preset"])["tree"]
    raise ValueError("scenario 'environment' needs either 'preset' or 'tree'")


def env_at(scenario: Dict[str, Any], t: float) -> np.ndarray:
    """t 시점의 e(t): 움직이는 슬롯은 구간별 선형 보간, 구간 밖에서는 끝값 유지"""
    e = np.array(scenario["initial_env"], dtype=float)
    for script in scenario.get("motion", []):
        times = [p[0] for p in script["breakpoints"]]
        values = [p[1] for p in script["breakpoints"]]
        e[script["slot"]] = np.interp(t, times, values)
    return e


def validate_scenario(scenario: Dict[str, Any]) -> Dict[str, Any]:
    """스키마 검사와 기본값 병합, 차원 및 반지름 양수 조건 확인"""
    validate(instance=scenario, schema=SCENARIO_SCHEMA)
    scenario = {**SCENARIO_DEFAULTS, **scenario}
    system = make_system(scenario["system"], scenario.get("dubins_speed"))
    tree = scenario_tree(scenario)
    n_e = len(scenario["initial_env"])
    validate_tree(tree, n_e, system.state_dim)

    if len(scenario["start"]) != system.state_dim:
        raise ValueError(f"scenario 'start' must have length {system.state_dim}")
    for script in scenario["motion"]:
        if script["slot"] >= n_e:
            raise ValueError(f"motion slot {script['slot']} out of range for n_e={n_e}")
        times = [p[0] for p in script["breakpoints"]]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"motion slot {script['slot']}: breakpoint times must increase")

    # 구간별 선형이므로 반지름 최소값은 초기값이나 중단점에서 나타남
    for slot in radius_slots(tree):
        values = [scenario["initial_env"][slot]]
        for script in scenario["motion"]:
            if script["slot"] == slot:
                values = [p[1] for p in script["breakpoints"]]
        if min(values) <= 0:
            raise ValueError(f"radius slot {slot} becomes non-positive over the horizon")
    return scenario


def load_scenario(path) -> Dict[str, Any]:
    """시나리오 JSON 로드 (checkpoint 경로는 시나리오 파일 기준 상대 경로)"""
    scenario = load_json(path)
    if "checkpoint" in scenario and not Path(scenario["checkpoint"]).is_absolute():
        scenario["checkpoint"] = str(Path(path).parent / scenario["checkpoint"])
    return validate_scenario(scenario)


def reference_input(scenario: Dict[str, Any], x: np.ndarray) -> np.ndarray:
    """설정된 기준 제어기 출력 (포화 없음)"""
    controller = scenario["controller"]
    kind = controller["kind"]
    gains = {**DEFAULT_GAINS[kind], **{k: v for k, v in controller.items() if k != "kind"}}
    if kind == "pd":
        return np.array([pd_controller(x, scenario["target"][0], gains["kp"], gains["kd"])])
    return unicycle_controller(x, scenario["target"], gains["k_omega"], gains["k_v"])


def _reached(scenario: Dict[str, Any], x: np.ndarray) -> bool:
    target = np.asarray(scenario["target"], dtype=float)
    return bool(np.linalg.norm(x[:target.shape[0]] - target) <= scenario["reach_tolerance"])


def _empty_trajectory() -> Dict[str, List[Any]]:
    return {key: [] for key in ("t", "x", "u_ref", "u_safe", "status", "h", "c", "e")}


def summarize(trajectory: Dict[str, Any], scenario: Dict[str, Any]) -> Dict[str, Any]:
    """안전성 감사 요약: 정확한 c 기준 최소값, 목표 도달 여부, 대체 입력 비율"""
    steps = len(trajectory["t"])
    fallback = sum(1 for s in trajectory["status"] if s == STATUS_INFEASIBLE)
    return {
        "steps": steps,
        "min_c": float(min(trajectory["c"])) if steps else float("nan"),
        "reached": any(_reached(scenario, np.asarray(x)) for x in trajectory["x"]),
        "fallback_fraction": fallback / steps if steps else 0.0,
    }


def simulate(scenario: Dict[str, Any], params: Optional[Dict[str, torch.Tensor]] = None,
             model_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    매 스텝: e(t) 평가 → 기준 입력 → 현재 e로 안전 필터 → 영차 유지 RK4 → 기록
    학습은 ė = 0 을 가정하지만 배치 시에는 매 스텝 최신 e를 그대로 사용 (예측 없음)
    """
    scenario = validate_scenario(scenario)
    if params is None:
        if "checkpoint" not in scenario:
            raise ValueError("scenario needs a 'checkpoint' when no params are given")
        params, checkpoint = load_checkpoint(scenario["checkpoint"])
        model_config = checkpoint["model_config"]
    system = make_system(scenario["system"], scenario.get("dubins_speed"))
    tree = scenario_tree(scenario)
    n_e = len(scenario["initial_env"])
    if params["input_lower"].shape[0] != system.state_dim + n_e:
        raise ValueError(
            f"checkpoint input dim {params['input_lower'].shape[0]} does not match "
            f"state ({system.state_dim}) + env ({n_e})"
        )
    gamma = scenario.get("gamma", (model_config or {}).get("gamma", 1.0))
    beta = scenario.get("beta", (model_config or {}).get("beta", 10.0))

    rng = np.random.default_rng(scenario["seed"])
    x = np.array(scenario["start"], dtype=float)
    if scenario["start_noise"] > 0:
        x = x + rng.uniform(-scenario["start_noise"], scenario["start_noise"], size=x.shape)

    trajectory = _empty_trajectory()
    dt = scenario["dt"]
    for k in range(scenario["horizon"]):
        t = k * dt
        e = env_at(scenario, t)
        u_ref = reference_input(scenario, x)
        u_safe, status = safety_filter(params, system, tree, x, e, u_ref, gamma, beta,
                                       verbose=scenario["verbose"])
        trajectory["t"].append(t)
        trajectory["x"].append(x.tolist())
        trajectory["u_ref"].append(np.atleast_1d(u_ref).tolist())
        trajectory["u_safe"].append(u_safe.tolist())
        trajectory["status"].append(status)
        trajectory["h"].append(float(h_forward(params, tree, x, e, beta)))
        trajectory["c"].append(float(eval_constraint(tree, x, e)))
        trajectory["e"].append(e.tolist())

        if scenario["stop_at_target"] and _reached(scenario, x):
            break
        try:
            x = rk4_step(system, x, u_safe, dt)
        except IntegrationError as error:
            raise SimulationError(f"integration failed at t={t}: {error}", trajectory) from error

    summary = summarize(trajectory, scenario)
    print(f"Simulation finished: {summary['steps']} steps, min c={summary['min_c']:.6g}, "
          f"reached={summary['reached']}, fallback={summary['fallback_fraction']:.2%}")
    trajectory["summary"] = summary
    return trajectory


def trajectory_rows(trajectory: Dict[str, Any]):
    """궤적 CSV 헤더와 행"""
    n = len(trajectory["x"][0]) if trajectory["x"] else 0
    m = len(trajectory["u_safe"][0]) if trajectory["u_safe"] else 0
    n_e = len(trajectory["e"][0]) if trajectory["e"] else 0
    header = (["t"] + [f"x{i}" for i in range(n)] + [f"u_ref{j}" for j in range(m)]
              + [f"u_safe{j}" for j in range(m)] + ["status", "h", "c"] + [f"e{i}" for i in range(n_e)])
    rows = []
    for k in range(len(trajectory["t"])):
        rows.append([float(trajectory["t"][k])] + [float(v) for v in trajectory["x"][k]]
                    + [float(v) for v in trajectory["u_ref"][k]] + [float(v) for v in trajectory["u_safe"][k]]
                    + [trajectory["status"][k], float(trajectory["h"][k]), float(trajectory["c"][k])]
                    + [float(v) for v in trajectory["e"][k]])
    return header, rows


def save_trajectory(trajectory: Dict[str, Any], filepath):
    header, rows = trajectory_rows(trajectory)
    return save_to_csv(header, rows, filepath)


def grid_points(axes: List[Dict[str, Any]], fixed_state) -> np.ndarray:
    """격자 노드의 전체 상태 벡터 (행 우선, 첫 축이 가장 느리게 변함)"""
    coordinates = [np.linspace(a["lower"], a["upper"], a["resolution"]) for a in axes]
    mesh = np.meshgrid(*coordinates, indexing="ij")
    states = np.tile(np.asarray(fixed_state, dtype=float), (mesh[0].size, 1))
    for axis, values in zip(axes, mesh):
        states[:, axis["dim"]] = values.reshape(-1)
    return states


def eval_grid(params: Dict[str, torch.Tensor], tree: Dict[str, Any], e, axes: List[Dict[str, Any]],
              beta: float, fixed_state=None) -> Dict[str, Any]:
    """고정된 e와 나머지 좌표에서 격자 노드마다 h_θ 와 c 계산"""
    state_dim = params["input_lower"].shape[0] - len(np.atleast_1d(e))
    if fixed_state is None:
        fixed_state = np.zeros(state_dim)
    if len(fixed_state) != state_dim:
        raise ValueError(f"fixed_state must have length {state_dim}, got {len(fixed_state)}")
    if any(a["dim"] >= state_dim for a in axes):
        raise ValueError(f"grid axis dim out of range for n={state_dim}")

    states = grid_points(axes, fixed_state)
    e = np.asarray(e, dtype=float)
    with torch.no_grad():
        h = h_forward(params, tree, states, e, beta)
    c = eval_constraint(tree, states, e)
    return {
        "axes": axes,
        "dims": [a["dim"] for a in axes],
        "points": states[:, [a["dim"] for a in axes]],
        "h": np.atleast_1d(h),
        "c": np.atleast_1d(c),
    }


def save_grid(report: Dict[str, Any], filepath):
    """격자 CSV (헤더 예: x0,x1,h,c)"""
    header = [f"x{d}" for d in report["dims"]] + ["h", "c"]
    rows = [
        [float(v) for v in point] + [float(h), float(c)]
        for point, h, c in zip(report["points"], report["h"], report["c"])
    ]
    return save_to_csv(header, rows, filepath)
