"""
환경 제약 트리 - 함수 기반
원형 장애물/반공간 프리미티브를 min/max/neg 노드로 조합한 안전 집합 c(x,e),
LSE 기반의 매끄러운 하한 c̲(x,e), 환경 파라미터 샘플링
"""

import math
from typing import Any, Dict, List, Tuple

import numpy as np
import torch
from jsonschema import validate


DEFAULT_BETA = 10.0

PRIMITIVE_KINDS = ("circle_keepout", "halfspace_lower", "halfspace_upper")
COMPOSITE_KINDS = ("min", "max", "neg")

# 제약 트리 JSON 스키마 (노드 종류는 이름, 슬롯은 e의 인덱스)
TREE_SCHEMA = {
    "$ref": "#/definitions/node",
    "definitions": {
        "node": {
            "type": "object",
            "properties": {
                "kind": {"enum": list(PRIMITIVE_KINDS + COMPOSITE_KINDS)},
                "children": {
                    "type": "array",
                    "minItems": 2,
                    "items": {"$ref": "#/definitions/node"}
                },
                "child": {"$ref": "#/definitions/node"},
                "center_slots": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "integer", "minimum": 0}
                },
                "radius_slot": {"type": "integer", "minimum": 0},
                "position_dims": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "integer", "minimum": 0}
                },
                "dim": {"type": "integer", "minimum": 0},
                "bound": {"type": "number"}
            },
            "required": ["kind"],
            "allOf": [
                {"if": {"properties": {"kind": {"enum": ["min", "max"]}}},
                 "then": {"required": ["children"]}},
                {"if": {"properties": {"kind": {"const": "neg"}}},
                 "then": {"required": ["child"]}},
                {"if": {"properties": {"kind": {"const": "circle_keepout"}}},
                 "then": {"required": ["center_slots", "radius_slot"]}},
                {"if": {"properties": {"kind": {"enum": ["halfspace_lower", "halfspace_upper"]}}},
                 "then": {"required": ["dim", "bound"]}}
            ]
        }
    }
}

DISTRIBUTION_SCHEMA = {
    "type": "object",
    "properties": {
        "ranges": {
            "type": "array",
            "items": {
                "type": "array",
                "minItems": 2,
                "maxItems": 2,
                "items": {"type": "number"}
            }
        },
        "names": {"type": "array", "items": {"type": "string"}}
    },
    "required": ["ranges"]
}


def _box(dim0: Tuple[float, float], dim1: Tuple[float, float]) -> List[Dict[str, Any]]:
    return [
        {"kind": "halfspace_lower", "dim": 0, "bound": dim0[0]},
        {"kind": "halfspace_upper", "dim": 0, "bound": dim0[1]},
        {"kind": "halfspace_lower", "dim": 1, "bound": dim1[0]},
        {"kind": "halfspace_upper", "dim": 1, "bound": dim1[1]},
    ]


def _circle(radius_slot: int, center_slots: List[int]) -> Dict[str, Any]:
    return {
        "kind": "circle_keepout",
        "center_slots": center_slots,
        "radius_slot": radius_slot,
        "position_dims": [0, 1],
    }


# 실험 환경 프리셋 (장애물 중심 범위는 안전 박스 전체에서 균등 샘플링한다고 가정)
PRESETS = {
    "double_integrator_free": {
        "system": "double_integrator",
        "tree": {"kind": "min", "children": _box((0.0, 10.0), (-5.0, 5.0))},
        "distribution": {"ranges": [], "names": []},
        "state_box": [[-1.0, 11.0], [-6.0, 6.0]],
    },
    "double_integrator_one_obstacle": {
        "system": "double_integrator",
        "tree": {"kind": "min", "children": _box((0.0, 10.0), (-5.0, 5.0)) + [_circle(0, [1, 2])]},
        "distribution": {
            "ranges": [[1.0, 2.0], [0.0, 10.0], [-5.0, 5.0]],
            "names": ["r1", "xc1", "vc1"],
        },
        "state_box": [[-1.0, 11.0], [-6.0, 6.0]],
    },
    "double_integrator_two_obstacles": {
        "system": "double_integrator",
        "tree": {
            "kind": "min",
            "children": _box((0.0, 10.0), (-5.0, 5.0)) + [_circle(0, [1, 2]), _circle(3, [4, 5])],
        },
        "distribution": {
            "ranges": [[1.0, 2.0], [0.0, 10.0], [-5.0, 5.0], [1.0, 2.0], [0.0, 10.0], [-5.0, 5.0]],
            "names": ["r1", "xc1", "vc1", "r2", "xc2", "vc2"],
        },
        "state_box": [[-1.0, 11.0], [-6.0, 6.0]],
    },
    "unicycle_two_obstacles": {
        "system": "unicycle",
        "tree": {
            "kind": "min",
            "children": _box((0.0, 10.0), (-5.0, 5.0)) + [_circle(0, [1, 2]), _circle(3, [4, 5])],
        },
        "distribution": {
            "ranges": [[1.0, 2.0], [0.0, 10.0], [-5.0, 5.0], [1.0, 2.0], [0.0, 10.0], [-5.0, 5.0]],
            "names": ["r1", "x1", "y1", "r2", "x2", "y2"],
        },
        "state_box": [[-1.0, 11.0], [-6.0, 6.0], [-np.pi, np.pi]],
    },
    "dubins_two_circles": {
        "system": "dubins",
        "tree": {"kind": "min", "children": [_circle(2, [0, 1]), _circle(5, [3, 4])]},
        "distribution": {
            "ranges": [[0.0, 10.0], [-5.0, 5.0], [1.0, 2.0], [0.0, 10.0], [-5.0, 5.0], [1.0, 2.0]],
            "names": ["o1x", "o1y", "r1", "o2x", "o2y", "r2"],
        },
        "state_box": [[-1.0, 11.0], [-6.0, 6.0], [-np.pi, np.pi]],
    },
}


def get_preset(name: str) -> Dict[str, Any]:
    """프리셋 반환"""
    if name not in PRESETS:
        raise ValueError(f"unknown environment preset '{name}', expected one of {sorted(PRESETS)}")
    return PRESETS[name]


def env_dim(dist: Dict[str, Any]) -> int:
    return len(dist["ranges"])


def radius_slots(tree: Dict[str, Any]) -> List[int]:
    """트리에 등장하는 반지름 슬롯 목록"""
    kind = tree["kind"]
    if kind == "circle_keepout":
        return [tree["radius_slot"]]
    if kind == "neg":
        return radius_slots(tree["child"])
    if kind in ("min", "max"):
        slots = []
        for child in tree["children"]:
            slots.extend(s for s in radius_slots(child) if s not in slots)
        return slots
    return []


def tree_depth(tree: Dict[str, Any]) -> int:
    """min/max 노드 깊이 (프리미티브만 있으면 0)"""
    kind = tree["kind"]
    if kind == "neg":
        return tree_depth(tree["child"])
    if kind in ("min", "max"):
        return 1 + max(tree_depth(child) for child in tree["children"])
    return 0


def max_branching(tree: Dict[str, Any]) -> int:
    kind = tree["kind"]
    if kind == "neg":
        return max_branching(tree["child"])
    if kind in ("min", "max"):
        return max([len(tree["children"])] + [max_branching(c) for c in tree["children"]])
    return 1


def validate_tree(tree: Dict[str, Any], n_e: int, state_dim: int) -> None:
    """스키마 검사 후 슬롯/차원 인덱스 범위 확인"""
    validate(instance=tree, schema=TREE_SCHEMA)
    _check_indices(tree, n_e, state_dim)


def _check_indices(node: Dict[str, Any], n_e: int, state_dim: int) -> None:
    kind = node["kind"]
    if kind in ("min", "max"):
        for child in node["children"]:
            _check_indices(child, n_e, state_dim)
    elif kind == "neg":
        _check_indices(node["child"], n_e, state_dim)
    elif kind == "circle_keepout":
        dims = node.get("position_dims", [0, 1])
        slots = node["center_slots"] + [node["radius_slot"]]
        if len(dims) != len(node["center_slots"]):
            raise ValueError(f"circle_keepout: {len(dims)} position_dims but {len(node['center_slots'])} center_slots")
        if any(s >= n_e for s in slots):
            raise ValueError(f"circle_keepout: slot index out of range for n_e={n_e}: {slots}")
        if any(d >= state_dim for d in dims):
            raise ValueError(f"circle_keepout: position dim out of range for n={state_dim}: {dims}")
    elif node["dim"] >= state_dim:
        raise ValueError(f"{kind}: dim {node['dim']} out of range for n={state_dim}")


def validate_distribution(dist: Dict[str, Any]) -> None:
    validate(instance=dist, schema=DISTRIBUTION_SCHEMA)
    for slot, (lower, upper) in enumerate(dist["ranges"]):
        if lower > upper:
            raise ValueError(f"distribution slot {slot}: inverted range [{lower}, {upper}]")


def validate_env_params(tree: Dict[str, Any], e) -> None:
    """반지름 슬롯이 양수인지 확인"""
    e = np.asarray(e, dtype=float)
    for slot in radius_slots(tree):
        if slot >= e.shape[-1]:
            raise ValueError(f"radius slot {slot} out of range for n_e={e.shape[-1]}")
        if np.any(e[..., slot] <= 0):
            raise ValueError(f"radius slot {slot} must be positive, got {e[..., slot]}")


def as_tensors(x, e) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    is_tensor = isinstance(x, torch.Tensor) or isinstance(e, torch.Tensor)
    x = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=float))
    e = e if isinstance(e, torch.Tensor) else torch.as_tensor(np.asarray(e, dtype=float))
    return x, e, is_tensor


def restore_output(value: torch.Tensor, is_tensor: bool):
    if is_tensor:
        return value
    array = value.detach().numpy()
    return float(array) if array.ndim == 0 else array


def _eval_primitive(node: Dict[str, Any], x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    kind = node["kind"]
    if kind == "halfspace_lower":
        return x[..., node["dim"]] - node["bound"]
    if kind == "halfspace_upper":
        return node["bound"] - x[..., node["dim"]]

    slots = node["center_slots"] + [node["radius_slot"]]
    if max(slots) >= e.shape[-1]:
        raise ValueError(f"circle_keepout: slot index out of range for n_e={e.shape[-1]}: {slots}")
    position = x[..., node.get("position_dims", [0, 1])]
    center = e[..., node["center_slots"]]
    radius = e[..., node["radius_slot"]]
    return ((position - center) ** 2).sum(-1) - radius ** 2


def _stack(values: List[torch.Tensor]) -> torch.Tensor:
    return torch.stack(torch.broadcast_tensors(*values), -1)


def _exact(node: Dict[str, Any], x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    kind = node["kind"]
    if kind == "neg":
        return -_exact(node["child"], x, e)
    if kind == "min":
        return _stack([_exact(c, x, e) for c in node["children"]]).amin(-1)
    if kind == "max":
        return _stack([_exact(c, x, e) for c in node["children"]]).amax(-1)
    return _eval_primitive(node, x, e)


def _lse(values: torch.Tensor, beta: float) -> torch.Tensor:
    # logsumexp는 최대값을 빼고 지수화하므로 큰 값에서도 넘치지 않음
    return torch.logsumexp(beta * values, dim=-1) / beta


def _smooth(node: Dict[str, Any], x: torch.Tensor, e: torch.Tensor, beta: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """(하한, 상한) 쌍을 재귀적으로 누적. neg는 두 경계를 뒤집어 교환"""
    kind = node["kind"]
    if kind == "neg":
        lower, upper = _smooth(node["child"], x, e, beta)
        return -upper, -lower
    if kind in ("min", "max"):
        pairs = [_smooth(c, x, e, beta) for c in node["children"]]
        lowers = _stack([p[0] for p in pairs])
        uppers = _stack([p[1] for p in pairs])
        correction = math.log(len(pairs)) / beta
        if kind == "max":
            return _lse(lowers, beta) - correction, _lse(uppers, beta)
        return -_lse(-lowers, beta), -_lse(-uppers, beta) + correction
    value = _eval_primitive(node, x, e)
    return value, value


def eval_constraint(tree: Dict[str, Any], x, e):
    """min/max/neg를 그대로 사용한 정확한 c(x,e)"""
    x, e, is_tensor = as_tensors(x, e)
    return restore_output(_exact(tree, x, e), is_tensor)


def lse(values, beta: float):
    """LSE(y;β) = (1/β) log Σ exp(β y_i), 마지막 축 기준"""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    is_tensor = isinstance(values, torch.Tensor)
    tensor = values if is_tensor else torch.as_tensor(np.asarray(values, dtype=float))
    if tensor.shape[-1] == 0:
        raise ValueError("lse of an empty vector")
    return restore_output(_lse(tensor, beta), is_tensor)


def eval_smooth_bounds(tree: Dict[str, Any], x, e, beta: float = DEFAULT_BETA):
    """매끄러운 (하한, 상한) 쌍: c̲ ≤ c ≤ c̄"""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    x, e, is_tensor = as_tensors(x, e)
    lower, upper = _smooth(tree, x, e, beta)
    return restore_output(lower, is_tensor), restore_output(upper, is_tensor)


def eval_smooth_lower(tree: Dict[str, Any], x, e, beta: float = DEFAULT_BETA):
    """c̲(x,e): 모든 (x,e)에서 eval_constraint 이하인 C¹ 하한"""
    return eval_smooth_bounds(tree, x, e, beta)[0]


def eval_smooth_upper(tree: Dict[str, Any], x, e, beta: float = DEFAULT_BETA):
    return eval_smooth_bounds(tree, x, e, beta)[1]


def sample_environments(dist: Dict[str, Any], count: int, seed: int) -> np.ndarray:
    """
    슬롯별 독립 균등 샘플링. 결과의 각 행이 하나의 EnvParams
    lower == upper 인 퇴화 구간은 허용, 뒤집힌 구간은 거부
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    validate_distribution(dist)
    ranges = np.asarray(dist["ranges"], dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    return rng.uniform(ranges[:, 0], ranges[:, 1], size=(count, ranges.shape[0]))
