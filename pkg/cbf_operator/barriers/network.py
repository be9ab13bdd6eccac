"""
CBF 연산자 네트워크 - 함수 기반
차이 함수 δ_θ (tanh MLP + softplus 출력), 제약된 CBF 연산자 h_θ = c̲ − δ_θ,
공간 기울기 ∇_x h_θ 와 이를 포함한 손실의 파라미터 기울기, 체크포인트 저장/로드
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.autograd.forward_ad as fwAD
from jsonschema import validate

from barriers.environment import as_tensors, eval_smooth_lower, restore_output
from barriers.storage import load_json, now_iso, save_to_json


DTYPE = torch.float64

DEFAULT_MODEL_CONFIG = {
    "hidden_layers": 4,
    "hidden_width": 50,
    "hidden_activation": "tanh",
    "output_activation": "softplus",
    "gamma": 1.0,
    "lambda": 1.0,
    "beta": 10.0,
}

CHECKPOINT_FORMAT = "cbf-operator-checkpoint/v1"

MODEL_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "input_dim": {"type": "integer", "minimum": 1},
        "hidden_layers": {"type": "integer", "minimum": 1},
        "hidden_width": {"type": "integer", "minimum": 1},
        "hidden_activation": {"enum": ["tanh"]},
        "output_activation": {"enum": ["softplus"]},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "lambda": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0},
        "hj_weight": {"type": "number", "minimum": 0}
    },
    "required": ["input_dim", "hidden_layers", "hidden_width", "gamma", "lambda", "beta"]
}

CHECKPOINT_SCHEMA = {
    "type": "object",
    "properties": {
        "format": {"const": CHECKPOINT_FORMAT},
        "saved_at": {"type": "string"},
        "model_config": MODEL_CONFIG_SCHEMA,
        "normalization": {
            "type": "object",
            "properties": {
                "lower": {"type": "array", "items": {"type": "number"}},
                "upper": {"type": "array", "items": {"type": "number"}}
            },
            "required": ["lower", "upper"]
        },
        "layers": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "properties": {
                    "weight": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                    "bias": {"type": "array", "items": {"type": "number"}}
                },
                "required": ["weight", "bias"]
            }
        },
        "system": {"type": "object"},
        "environment": {"type": "object"},
        "train_config": {"type": "object"},
        "training_state": {"type": "object"}
    },
    "required": ["format", "model_config", "normalization", "layers"]
}


def make_model_config(input_dim: int, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """기본값 위에 사용자 설정을 덮어쓴 모델 설정"""
    config = {**DEFAULT_MODEL_CONFIG, **(overrides or {}), "input_dim": int(input_dim)}
    validate(instance=config, schema=MODEL_CONFIG_SCHEMA)
    return config


def layer_shapes(config: Dict[str, Any]) -> List[Tuple[int, int]]:
    """(fan_out, fan_in) 목록: 입력 → 은닉 L개 → 출력 1"""
    width = config["hidden_width"]
    shapes = [(width, config["input_dim"])]
    shapes += [(width, width)] * (config["hidden_layers"] - 1)
    shapes.append((1, width))
    return shapes


def trainable_names(params: Dict[str, torch.Tensor]) -> List[str]:
    """학습 대상 이름을 층 순서대로 (W0, b0, W1, b1, ...)"""
    count = sum(1 for name in params if name.startswith("W"))
    names = []
    for k in range(count):
        names += [f"W{k}", f"b{k}"]
    return names


def _normalization(config: Dict[str, Any], input_box) -> Tuple[torch.Tensor, torch.Tensor]:
    if input_box is None:
        box = np.tile([-1.0, 1.0], (config["input_dim"], 1))
    else:
        box = np.asarray(input_box, dtype=float).reshape(-1, 2)
    if box.shape[0] != config["input_dim"]:
        raise ValueError(f"normalization box has {box.shape[0]} rows, expected {config['input_dim']}")
    return torch.tensor(box[:, 0], dtype=DTYPE), torch.tensor(box[:, 1], dtype=DTYPE)


def init_params(config: Dict[str, Any], seed: int, input_box=None) -> Dict[str, torch.Tensor]:
    """Glorot 균등 초기화 가중치와 0 편향. 같은 seed면 비트 단위로 동일"""
    generator = torch.Generator().manual_seed(int(seed))
    lower, upper = _normalization(config, input_box)
    params = {"input_lower": lower, "input_upper": upper}
    for k, (fan_out, fan_in) in enumerate(layer_shapes(config)):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        uniform = torch.rand((fan_out, fan_in), generator=generator, dtype=DTYPE)
        params[f"W{k}"] = (2.0 * uniform - 1.0) * limit
        params[f"b{k}"] = torch.zeros(fan_out, dtype=DTYPE)
    return params


def zero_params(config: Dict[str, Any], input_box=None) -> Dict[str, torch.Tensor]:
    """모든 가중치가 0인 파라미터 (δ ≡ log 2, 테스트용)"""
    lower, upper = _normalization(config, input_box)
    params = {"input_lower": lower, "input_upper": upper}
    for k, (fan_out, fan_in) in enumerate(layer_shapes(config)):
        params[f"W{k}"] = torch.zeros((fan_out, fan_in), dtype=DTYPE)
        params[f"b{k}"] = torch.zeros(fan_out, dtype=DTYPE)
    return params


def normalize_inputs(params: Dict[str, torch.Tensor], xi: torch.Tensor) -> torch.Tensor:
    """정의역 박스와 환경 범위로 각 차원을 [-1,1]로 아핀 변환 (퇴화 차원은 중심만 이동)"""
    lower, upper = params["input_lower"], params["input_upper"]
    center = 0.5 * (lower + upper)
    width = upper - lower
    scale = torch.where(width > 0, 2.0 / torch.where(width > 0, width, torch.ones_like(width)), torch.ones_like(width))
    return (xi - center) * scale


def _delta(params: Dict[str, torch.Tensor], xi: torch.Tensor) -> torch.Tensor:
    z = normalize_inputs(params, xi)
    last = len(trainable_names(params)) // 2 - 1
    for k in range(last):
        z = torch.tanh(z @ params[f"W{k}"].T + params[f"b{k}"])
    out = (z @ params[f"W{last}"].T + params[f"b{last}"]).squeeze(-1)
    # softplus = log(1 + e^out), 임계값 분기 없이 매끄러움
    return torch.logaddexp(out, torch.zeros_like(out))


def delta_forward(params: Dict[str, torch.Tensor], xi):
    """δ_θ(ξ) ≥ 0, ξ = (x, e)"""
    is_tensor = isinstance(xi, torch.Tensor)
    xi = xi if is_tensor else torch.as_tensor(np.asarray(xi, dtype=float))
    if xi.shape[-1] != params["input_lower"].shape[0]:
        raise ValueError(f"joint state must have length {params['input_lower'].shape[0]}, got {xi.shape[-1]}")
    return restore_output(_delta(params, xi), is_tensor)


def joint_state(x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """배치 차원을 브로드캐스트해 [x, e] 연결"""
    batch = torch.broadcast_shapes(x.shape[:-1], e.shape[:-1])
    return torch.cat([x.expand(*batch, x.shape[-1]), e.expand(*batch, e.shape[-1])], -1)


def _h(params, tree, x: torch.Tensor, e: torch.Tensor, beta: float) -> torch.Tensor:
    return eval_smooth_lower(tree, x, e, beta) - _delta(params, joint_state(x, e))


def _checked_h(params, tree, x: torch.Tensor, e: torch.Tensor, beta: float) -> torch.Tensor:
    if x.shape[-1] + e.shape[-1] != params["input_lower"].shape[0]:
        raise ValueError(
            f"state ({x.shape[-1]}) + env ({e.shape[-1]}) dims do not match network input {params['input_lower'].shape[0]}"
        )
    return _h(params, tree, x, e, beta)


def h_forward(params: Dict[str, torch.Tensor], tree: Dict[str, Any], x, e, beta: float):
    """h_θ(x,e) = c̲(x,e) − δ_θ(x,e)"""
    x, e, is_tensor = as_tensors(x, e)
    return restore_output(_checked_h(params, tree, x, e, beta), is_tensor)


def h_value_and_gradient(params, tree, x, e, beta: float, create_graph: bool = False):
    """
    h_θ 와 ∇_x h_θ 를 함께 계산
    create_graph=True 이면 기울기 계산 그래프를 남겨 θ에 대해 다시 미분 가능 (중첩 미분)
    """
    x, e, is_tensor = as_tensors(x, e)
    with torch.enable_grad():
        x_var = x.detach().clone().requires_grad_(True)
        h = h_forward(params, tree, x_var, e, beta)
        (grad,) = torch.autograd.grad(h.sum(), x_var, create_graph=create_graph)
    if not create_graph:
        h, grad = h.detach(), grad.detach()
    return restore_output(h, is_tensor), restore_output(grad, is_tensor)


def h_gradient_x(params: Dict[str, torch.Tensor], tree: Dict[str, Any], x, e, beta: float):
    """
    ∂h_θ/∂x (상태 블록만; ė = 0 이므로 e 블록은 필요 없음)
    상태 방향마다 순방향 방향미분 채널 하나를 원시 계산과 함께 전파
    """
    x, e, is_tensor = as_tensors(x, e)
    x = x.detach()
    columns = []
    with fwAD.dual_level():
        for i in range(x.shape[-1]):
            direction = torch.zeros_like(x)
            direction[..., i] = 1.0
            h = _checked_h(params, tree, fwAD.make_dual(x, direction), e, beta)
            primal, tangent = fwAD.unpack_dual(h)
            columns.append(torch.zeros_like(primal) if tangent is None else tangent.detach().clone())
    return restore_output(torch.stack(columns, -1), is_tensor)


def loss_param_gradient(
    params: Dict[str, torch.Tensor],
    batch: Sequence[Any],
    loss_spec: Dict[str, float],
    system,
    tree: Dict[str, Any],
    return_terms: bool = False,
):
    """
    배치 손실과 모든 W_k, b_k 에 대한 정확한 기울기
    손실 내부의 ∇_x h_θ 를 그래프째 유지한 뒤 θ로 역전파.
    u*, min, (·)_+ 는 선택된 분기에서 상수로 취급
    """
    from barriers.training import loss_terms

    x, e = batch
    x, e, _ = as_tensors(x, e)
    if x.shape[0] == 0:
        raise ValueError("batch must not be empty")
    names = trainable_names(params)
    working = dict(params)
    for name in names:
        working[name] = params[name].detach().clone().requires_grad_(True)

    with torch.enable_grad():
        terms = loss_terms(working, system, tree, x, e, loss_spec, create_graph=True)
        grads = torch.autograd.grad(terms["total"], [working[name] for name in names])

    gradient = {name: g.detach() for name, g in zip(names, grads)}
    if return_terms:
        return {key: float(value.detach()) for key, value in terms.items()}, gradient
    return float(terms["total"].detach()), gradient


def params_to_layers(params: Dict[str, torch.Tensor]) -> List[Dict[str, Any]]:
    """가중치를 행 우선 중첩 리스트로 변환"""
    names = trainable_names(params)
    return [
        {"weight": params[names[i]].tolist(), "bias": params[names[i + 1]].tolist()}
        for i in range(0, len(names), 2)
    ]


def save_checkpoint(path, params: Dict[str, torch.Tensor], model_config: Dict[str, Any], extra: Optional[Dict[str, Any]] = None):
    """체크포인트 JSON 저장 (설정 echo, 정규화 상수, 가중치, 추가 메타데이터)"""
    checkpoint = {
        "format": CHECKPOINT_FORMAT,
        "saved_at": now_iso(),
        "model_config": model_config,
        "normalization": {
            "lower": params["input_lower"].tolist(),
            "upper": params["input_upper"].tolist(),
        },
        "layers": params_to_layers(params),
        **(extra or {}),
    }
    validate(instance=checkpoint, schema=CHECKPOINT_SCHEMA)
    return save_to_json(checkpoint, path)


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """체크포인트 로드 후 (params, 체크포인트 문서) 반환"""
    checkpoint = load_json(path)
    validate(instance=checkpoint, schema=CHECKPOINT_SCHEMA)
    config = checkpoint["model_config"]
    params = {
        "input_lower": torch.tensor(checkpoint["normalization"]["lower"], dtype=DTYPE),
        "input_upper": torch.tensor(checkpoint["normalization"]["upper"], dtype=DTYPE),
    }
    shapes = layer_shapes(config)
    if len(checkpoint["layers"]) != len(shapes):
        raise ValueError(f"checkpoint has {len(checkpoint['layers'])} layers, config implies {len(shapes)}")
    for k, (layer, shape) in enumerate(zip(checkpoint["layers"], shapes)):
        weight = torch.tensor(layer["weight"], dtype=DTYPE).reshape(shape)
        bias = torch.tensor(layer["bias"], dtype=DTYPE).reshape(shape[0])
        params[f"W{k}"] = weight
        params[f"b{k}"] = bias
    return params, checkpoint
