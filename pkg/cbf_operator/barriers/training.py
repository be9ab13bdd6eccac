"""
CBF 연산자 학습 - 함수 기반
정상상태 HJ 잔차와 CBF 조건 위반 손실, 결합 상태 데이터셋, ADAM, 체크포인트를 남기는 학습 루프
"""

import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from jsonschema import validate

from barriers.environment import as_tensors, restore_output, sample_environments, validate_distribution
from barriers.network import (
    DTYPE,
    delta_forward,
    h_value_and_gradient,
    init_params,
    joint_state,
    load_checkpoint,
    loss_param_gradient,
    save_checkpoint,
    trainable_names,
)
from barriers.storage import read_csv, save_to_csv
from barriers.systems import hamiltonian_max


DEFAULT_TRAIN_CONFIG = {
    "epochs": 10,
    "batch_size": 4096,
    "learning_rate": 1e-3,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "seed": 0,
    "checkpoint_interval": 1000,
    "log_interval": 100,
    "max_steps": None,
}

TRAIN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": "number", "minimum": 0},
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "checkpoint_interval": {"type": "integer", "minimum": 1},
        "log_interval": {"type": "integer", "minimum": 1},
        "max_steps": {"type": ["integer", "null"], "minimum": 0}
    },
    "required": ["epochs", "batch_size", "learning_rate", "seed"]
}

HISTORY_HEADER = ["step", "epoch", "loss_total", "loss_hj", "loss_cbf", "wall_ms"]


class NonFiniteLossError(RuntimeError):
    """손실이 유한하지 않은 경우 (문제 샘플 인덱스 포함)"""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        super().__init__(message)
        self.sample_index = sample_index


def make_train_config(overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    config = {**DEFAULT_TRAIN_CONFIG, **(overrides or {})}
    validate(instance=config, schema=TRAIN_CONFIG_SCHEMA)
    return config


def _pde_terms(params, system, tree, x, e, gamma: float, beta: float, create_graph: bool):
    """(δ_θ, I_γ) 샘플별 계산. c̲ − h_θ 는 매개화에 의해 δ_θ 와 같음"""
    h, grad = h_value_and_gradient(params, tree, x, e, beta, create_graph=create_graph)
    hamiltonian, _ = hamiltonian_max(system, x, grad)
    i_gamma = hamiltonian + gamma * h
    delta = delta_forward(params, joint_state(x, e))
    return delta, i_gamma


def _residual(delta: torch.Tensor, i_gamma: torch.Tensor) -> torch.Tensor:
    # 동점이면 c − h 분기 선택
    return torch.where(delta <= i_gamma, delta, i_gamma)


def _violation(i_gamma: torch.Tensor) -> torch.Tensor:
    return torch.where(i_gamma < 0, -i_gamma, torch.zeros_like(i_gamma))


def residual_hj(params, system, tree, x, e, gamma: float, beta: float):
    """min(c̲ − h_θ, max_u ∇_x h_θ·(f + g u) + γ h_θ)"""
    x, e, is_tensor = as_tensors(x, e)
    delta, i_gamma = _pde_terms(params, system, tree, x, e, gamma, beta, create_graph=False)
    return restore_output(_residual(delta, i_gamma), is_tensor)


def cbf_violation(params, system, tree, x, e, gamma: float, beta: float):
    """(−I_γ)_+ = max(0, −(H(x, ∇_x h_θ) + γ h_θ))"""
    x, e, is_tensor = as_tensors(x, e)
    _, i_gamma = _pde_terms(params, system, tree, x, e, gamma, beta, create_graph=False)
    return restore_output(_violation(i_gamma), is_tensor)


def loss_terms(params, system, tree, x: torch.Tensor, e: torch.Tensor, loss_spec: Dict[str, float],
               create_graph: bool = False) -> Dict[str, torch.Tensor]:
    """
    배치 평균 L_HJ, L_CBF 와 결합 손실 L = w L_HJ + λ L_CBF
    w = loss_spec["hj_weight"] (기본 1). w = 0 이면 L_CBF 만 학습하는 변형
    """
    delta, i_gamma = _pde_terms(params, system, tree, x, e, loss_spec["gamma"], loss_spec["beta"], create_graph)
    residual = _residual(delta, i_gamma)
    violation = _violation(i_gamma)

    finite = torch.isfinite(residual) & torch.isfinite(violation)
    if not bool(finite.all()):
        index = int(torch.nonzero(~finite.reshape(-1))[0])
        rows = joint_state(x, e).detach().reshape(-1, x.shape[-1] + e.shape[-1])
        raise NonFiniteLossError(
            f"non-finite loss at sample {index}: x={rows[index, :x.shape[-1]].tolist()}, "
            f"e={rows[index, x.shape[-1]:].tolist()}",
            sample_index=index,
        )

    loss_hj = (residual ** 2).mean()
    loss_cbf = (violation ** 2).mean()
    return {
        "total": loss_spec.get("hj_weight", 1.0) * loss_hj + loss_spec["lambda"] * loss_cbf,
        "hj": loss_hj,
        "cbf": loss_cbf,
    }


def loss_spec_from(model_config: Dict[str, Any]) -> Dict[str, float]:
    return {"gamma": model_config["gamma"], "lambda": model_config["lambda"], "beta": model_config["beta"],
            "hj_weight": model_config.get("hj_weight", 1.0)}


def combined_loss(params, batch, system, tree, config: Dict[str, Any]):
    """배치의 residual_hj² 평균 + λ · cbf_violation² 평균"""
    x, e = batch
    x, e, is_tensor = as_tensors(x, e)
    if x.reshape(-1, x.shape[-1]).shape[0] == 0:
        raise ValueError("batch must not be empty")
    terms = loss_terms(params, system, tree, x, e, loss_spec_from(config))
    total = terms["total"] if is_tensor else terms["total"].detach()
    return restore_output(total, is_tensor)


def build_dataset(dist: Dict[str, Any], domain_box, num_envs: int, states_per_env: int, seed: int,
                  shared_states: bool = False) -> Dict[str, Any]:
    """
    Ξ = ∪ {e_i} × X_{e_i} 구성
    shared_states=True 이면 하나의 상태 풀을 모든 환경과 짝지음. 결합 쌍은 인덱스로만 표현
    """
    if num_envs < 1 or states_per_env < 1:
        raise ValueError(f"num_envs and states_per_env must be positive, got {num_envs}, {states_per_env}")
    validate_distribution(dist)
    box = np.asarray(domain_box, dtype=float).reshape(-1, 2)
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError(f"domain box has inverted bounds: {box.tolist()}")

    environments = sample_environments(dist, num_envs, seed)
    rng = np.random.default_rng([seed, 1])
    shape = (states_per_env, box.shape[0]) if shared_states else (num_envs, states_per_env, box.shape[0])
    states = rng.uniform(box[:, 0], box[:, 1], size=shape)
    return {
        "environments": environments,
        "states": states,
        "shared_states": bool(shared_states),
        "states_per_env": int(states_per_env),
    }


def dataset_size(dataset: Dict[str, Any]) -> int:
    """|Ξ| = Σ_i |X_{e_i}|"""
    return dataset["environments"].shape[0] * dataset["states_per_env"]


def joint_batch(dataset: Dict[str, Any], indices) -> Tuple[torch.Tensor, torch.Tensor]:
    """평탄화된 결합 인덱스 → (x, e) 배치"""
    indices = np.asarray(indices, dtype=np.int64)
    env_index, state_index = np.divmod(indices, dataset["states_per_env"])
    if dataset["shared_states"]:
        x = dataset["states"][state_index]
    else:
        x = dataset["states"][env_index, state_index]
    e = dataset["environments"][env_index]
    return torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(e, dtype=DTYPE)


def input_box_for(state_box, dist: Dict[str, Any]) -> np.ndarray:
    """네트워크 입력 정규화 박스 = 상태 샘플링 박스 + 환경 범위"""
    rows = np.asarray(state_box, dtype=float).reshape(-1, 2).tolist() + [list(r) for r in dist["ranges"]]
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def init_adam_state(params: Dict[str, torch.Tensor]) -> Dict[str, Any]:
    names = trainable_names(params)
    return {
        "m": {name: torch.zeros_like(params[name]) for name in names},
        "v": {name: torch.zeros_like(params[name]) for name in names},
        "step": 0,
    }


def adam_step(state: Dict[str, Any], params: Dict[str, torch.Tensor], grad: Dict[str, torch.Tensor],
              config: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """편향 보정된 ADAM 한 스텝. 입력은 변경하지 않고 새 상태와 파라미터를 반환"""
    lr = config["learning_rate"]
    beta1, beta2, eps = config["adam_beta1"], config["adam_beta2"], config["adam_eps"]
    step = state["step"] + 1
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step

    new_state = {"m": {}, "v": {}, "step": step}
    new_params = dict(params)
    for name in trainable_names(params):
        g = grad[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(params[name].shape)}")
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * (g * g)
        new_state["m"][name] = m
        new_state["v"][name] = v
        new_params[name] = params[name] - lr * (m / bias1) / (torch.sqrt(v / bias2) + eps)
    return new_state, new_params


def adam_state_to_json(state: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "m": {name: value.tolist() for name, value in state["m"].items()},
        "v": {name: value.tolist() for name, value in state["v"].items()},
        "step": state["step"],
    }


def adam_state_from_json(data: Dict[str, Any]) -> Dict[str, Any]:
    return {
        "m": {name: torch.tensor(value, dtype=DTYPE) for name, value in data["m"].items()},
        "v": {name: torch.tensor(value, dtype=DTYPE) for name, value in data["v"].items()},
        "step": int(data["step"]),
    }


def _load_history(history_path, up_to_step: int) -> List[List[Any]]:
    """재개 시 이전 손실 기록 중 체크포인트 스텝까지의 행"""
    if history_path is None or not Path(history_path).exists():
        return []
    return [[row[key] for key in HISTORY_HEADER] for row in read_csv(history_path)
            if int(row["step"]) <= up_to_step]


def _flush_history(history_path, history: List[List[Any]]) -> None:
    if history_path is not None:
        save_to_csv(HISTORY_HEADER, history, history_path)


def _save(path, params, model_config, config, adam, epoch, batch_in_epoch, extra):
    training_state = {
        "step": adam["step"],
        "epoch": epoch,
        "batch_in_epoch": batch_in_epoch,
        "adam": adam_state_to_json(adam),
    }
    save_checkpoint(path, params, model_config,
                    {**(extra or {}), "train_config": config, "training_state": training_state})


def train(config: Dict[str, Any], dataset: Dict[str, Any], system, tree: Dict[str, Any],
          model_config: Dict[str, Any], input_box=None, params: Optional[Dict[str, torch.Tensor]] = None,
          checkpoint_path=None, history_path=None, resume=None,
          extra: Optional[Dict[str, Any]] = None) -> Dict[str, torch.Tensor]:
    """
    섞인 Ξ 위에서 미니배치 ADAM 학습
    checkpoint_interval 스텝마다 체크포인트와 손실 기록 CSV, 종료 시 최종 체크포인트 저장
    재개하면 기존 손실 기록 뒤에 이어서 기록
    손실이 유한하지 않으면 마지막 정상 파라미터와 그때까지의 기록을 저장하고 예외를 다시 발생
    """
    config = make_train_config(config)
    loss_spec = loss_spec_from(model_config)
    if params is None:
        params = init_params(model_config, config["seed"], input_box)
    adam = init_adam_state(params)
    start_epoch, skip_batches = 0, 0

    if resume is not None:
        params, checkpoint = load_checkpoint(resume)
        state = checkpoint.get("training_state")
        if state is None:
            raise ValueError(f"checkpoint {resume} has no training_state to resume from")
        adam = adam_state_from_json(state["adam"])
        start_epoch, skip_batches = state["epoch"], state["batch_in_epoch"]
        print(f"Resuming from {resume} at step {adam['step']} (epoch {start_epoch})")

    total = dataset_size(dataset)
    batch_size = min(config["batch_size"], total)
    batches_per_epoch = -(-total // batch_size)
    rng = np.random.default_rng([config["seed"], 2])
    # 재개 시에도 같은 섞기 순서를 재현
    for _ in range(start_epoch):
        rng.permutation(total)

    history: List[List[Any]] = _load_history(history_path, adam["step"]) if resume is not None else []
    started = time.perf_counter()
    epoch, batch_in_epoch = start_epoch, skip_batches
    stop = False
    for epoch in range(start_epoch, config["epochs"]):
        order = rng.permutation(total)
        first = skip_batches if epoch == start_epoch else 0
        for batch_in_epoch in range(first, batches_per_epoch):
            if config["max_steps"] is not None and adam["step"] >= config["max_steps"]:
                stop = True
                break
            indices = order[batch_in_epoch * batch_size:(batch_in_epoch + 1) * batch_size]
            try:
                terms, grad = loss_param_gradient(params, joint_batch(dataset, indices), loss_spec,
                                                  system, tree, return_terms=True)
            except NonFiniteLossError as e:
                print(f"Error at step {adam['step'] + 1}: {e}")
                if checkpoint_path is not None:
                    _save(checkpoint_path, params, model_config, config, adam, epoch, batch_in_epoch, extra)
                _flush_history(history_path, history)
                raise

            adam, params = adam_step(adam, params, grad, config)
            wall_ms = (time.perf_counter() - started) * 1000.0
            history.append([adam["step"], epoch, terms["total"], terms["hj"], terms["cbf"], wall_ms])

            if adam["step"] % config["log_interval"] == 0:
                print(f"step {adam['step']} epoch {epoch}: loss={terms['total']:.6e} "
                      f"hj={terms['hj']:.6e} cbf={terms['cbf']:.6e}")
            if checkpoint_path is not None and adam["step"] % config["checkpoint_interval"] == 0:
                _save(checkpoint_path, params, model_config, config, adam, epoch, batch_in_epoch + 1, extra)
                _flush_history(history_path, history)
        if stop:
            break
    else:
        epoch, batch_in_epoch = config["epochs"], 0

    _flush_history(history_path, history)
    if checkpoint_path is not None:
        _save(checkpoint_path, params, model_config, config, adam, epoch,
              batch_in_epoch if stop else 0, extra)
    return params
