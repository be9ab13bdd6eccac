"""
목차:
- CBF 연산자 명령줄 도구
  - train: 실행 설정으로 학습 후 체크포인트와 손실 기록 저장
  - simulate: 시나리오 폐루프 시뮬레이션 후 궤적 CSV 저장
  - grid: 체크포인트의 h_θ 와 c 를 격자 위에서 평가
  - oracle: 격자 값 반복으로 생존 커널 계산
  - check: 체크포인트에 대한 불변식 점검
  - main: 종료 코드 0 성공 / 1 검증 실패 / 2 실행 오류
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# barriers 모듈 import
sys.path.append(str(Path(__file__).parent))

import numpy as np
import torch
from jsonschema import ValidationError, validate

from barriers.environment import (
    eval_constraint,
    get_preset,
    sample_environments,
    validate_distribution,
    validate_env_params,
    validate_tree,
)
from barriers.network import h_forward, h_gradient_x, load_checkpoint, make_model_config
from barriers.oracle import (
    ORACLE_DEFAULTS,
    analytic_double_integrator_kernel,
    grid_viability_kernel,
    make_grid,
    mask_agreement,
    save_kernel,
)
from barriers.simulation import SimulationError, eval_grid, load_scenario, save_grid, save_trajectory, simulate
from barriers.storage import load_json, now_iso, save_to_json
from barriers.systems import make_system, system_descriptor
from barriers.training import build_dataset, cbf_violation, input_box_for, make_train_config, residual_hj, train


THREADS_ENV = "CBF_KIT_THREADS"

RUN_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "system": {"enum": ["double_integrator", "unicycle", "dubins"]},
        "dubins_speed": {"type": "number"},
        "environment": {
            "type": "object",
            "properties": {
                "preset": {"type": "string"},
                "tree": {"type": "object"},
                "distribution": {"type": "object"},
                "state_box": {
                    "type": "array",
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}
                }
            }
        },
        "dataset": {
            "type": "object",
            "properties": {
                "num_envs": {"type": "integer", "minimum": 1},
                "states_per_env": {"type": "integer", "minimum": 1},
                "shared_states": {"type": "boolean"}
            },
            "required": ["num_envs", "states_per_env"]
        },
        "model": {"type": "object"},
        "train": {"type": "object"}
    },
    "required": ["system", "environment", "dataset"]
}

# check 하위 명령 허용 오차
CHECK_DEFAULTS = {
    "samples": 1000,
    "gradient_samples": 20,
    "containment_tolerance": 1e-9,
    "fd_step": 1e-5,
    "gradient_tolerance": 1e-5,
}


def resolve_environment(environment: Dict[str, Any]) -> Dict[str, Any]:
    """프리셋 또는 직접 지정한 tree/distribution/state_box 를 하나로 정리"""
    if "preset" in environment:
        preset = get_preset(environment["preset"])
        resolved = {key: preset[key] for key in ("tree", "distribution", "state_box")}
        resolved.update({k: v for k, v in environment.items() if k in ("tree", "distribution", "state_box")})
        return resolved
    missing = [key for key in ("tree", "distribution", "state_box") if key not in environment]
    if missing:
        raise ValueError(f"environment needs 'preset' or all of tree/distribution/state_box (missing {missing})")
    return {key: environment[key] for key in ("tree", "distribution", "state_box")}


def load_run_config(path) -> Dict[str, Any]:
    """실행 설정 로드와 검증. 시스템 객체와 정리된 환경을 함께 반환"""
    config = load_json(path)
    validate(instance=config, schema=RUN_CONFIG_SCHEMA)
    system = make_system(config["system"], config.get("dubins_speed"))
    environment = resolve_environment(config["environment"])
    validate_distribution(environment["distribution"])
    n_e = len(environment["distribution"]["ranges"])
    validate_tree(environment["tree"], n_e, system.state_dim)
    if len(environment["state_box"]) != system.state_dim:
        raise ValueError(f"state_box must have {system.state_dim} rows for '{system.name}'")
    return {**config, "system_obj": system, "environment": environment}


def parse_axes(text: str) -> List[Dict[str, Any]]:
    """'dim:lo:hi:res,dim:lo:hi:res' 형식의 격자 축"""
    axes = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 4:
            raise ValueError(f"grid axis '{part}' must look like dim:lower:upper:resolution")
        dim, lower, upper, resolution = int(fields[0]), float(fields[1]), float(fields[2]), int(fields[3])
        if resolution < 2 or upper <= lower:
            raise ValueError(f"grid axis '{part}' needs resolution >= 2 and lower < upper")
        axes.append({"dim": dim, "lower": lower, "upper": upper, "resolution": resolution})
    return axes


def parse_vector(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    text = text.strip()
    return [float(v) for v in text.split(",")] if text else []


def parse_env(text: Optional[str]) -> List[float]:
    """--env 값: JSON 파일 경로, 인라인 JSON 배열 또는 {"e": [...]}, 쉼표 구분 숫자"""
    if text is None:
        return []
    if Path(text).is_file():
        data = load_json(text)
    elif text.strip().startswith(("[", "{")):
        data = json.loads(text)
    else:
        return parse_vector(text)
    if isinstance(data, dict):
        data = data.get("e", data.get("initial_env"))
    if not isinstance(data, list):
        raise ValueError("--env must be a list of numbers or an object with an 'e' list")
    return [float(v) for v in data]


def checkpoint_context(checkpoint: Dict[str, Any]):
    """체크포인트에 기록된 시스템과 환경"""
    if "system" not in checkpoint or "environment" not in checkpoint:
        raise ValueError("checkpoint does not record its system and environment")
    descriptor = checkpoint["system"]
    system = make_system(descriptor["name"], descriptor.get("dubins_speed"))
    return system, checkpoint["environment"]


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    system = config["system_obj"]
    environment = config["environment"]
    overrides = dict(config.get("train", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    train_config = make_train_config(overrides)

    dataset_config = config["dataset"]
    dist = environment["distribution"]
    dataset = build_dataset(dist, environment["state_box"], dataset_config["num_envs"],
                            dataset_config["states_per_env"], train_config["seed"],
                            shared_states=dataset_config.get("shared_states", False))
    input_box = input_box_for(environment["state_box"], dist)
    model_config = make_model_config(input_box.shape[0], config.get("model"))

    out = Path(args.out)
    history = out.with_name(f"{out.stem}_history.csv")
    extra = {
        "system": system_descriptor(system, config.get("dubins_speed")),
        "environment": environment,
        "started_at": now_iso(),
    }
    print(f"Training {system.name} on {dataset_config['num_envs']} environments "
          f"x {dataset_config['states_per_env']} states")
    train(train_config, dataset, system, environment["tree"], model_config, input_box=input_box,
          checkpoint_path=out, history_path=history, resume=args.resume, extra=extra)
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    try:
        trajectory = simulate(scenario)
    except SimulationError as error:
        # 중단 전까지의 궤적은 보존
        if error.trajectory["t"]:
            save_trajectory(error.trajectory, args.out)
        raise
    save_trajectory(trajectory, args.out)
    out = Path(args.out)
    save_to_json({**trajectory["summary"], "scenario": scenario.get("name", out.stem), "finished_at": now_iso()},
                 out.with_name(f"{out.stem}_summary.json"))
    return 0


def cmd_grid(args) -> int:
    params, checkpoint = load_checkpoint(args.checkpoint)
    _, environment = checkpoint_context(checkpoint)
    e = parse_env(args.env)
    if len(e) != len(environment["distribution"]["ranges"]):
        raise ValueError(f"checkpoint environment needs {len(environment['distribution']['ranges'])} values, got {len(e)}")
    validate_env_params(environment["tree"], e)
    report = eval_grid(params, environment["tree"], e, parse_axes(args.axes),
                       checkpoint["model_config"]["beta"], fixed_state=parse_vector(args.fixed))
    save_grid(report, args.out)
    return 0


def cmd_oracle(args) -> int:
    system = make_system(args.system)
    preset = get_preset(args.preset)
    if preset["system"] != system.name:
        raise ValueError(f"preset '{args.preset}' is for '{preset['system']}', not '{system.name}'")
    e = parse_env(args.env)
    if len(e) != len(preset["distribution"]["ranges"]):
        raise ValueError(f"preset '{args.preset}' needs {len(preset['distribution']['ranges'])} environment values")
    validate_env_params(preset["tree"], e)

    box = np.asarray(preset["state_box"], dtype=float)
    grid = {"lower": box[:, 0].tolist(), "upper": box[:, 1].tolist(), "resolution": [args.resolution] * 2}
    result = grid_viability_kernel(system, preset["tree"], e, grid, gamma=args.gamma, dt=args.dt,
                                   max_iters=args.max_iters, tol=args.tol)
    print(f"Oracle finished after {result['iterations']} iterations, "
          f"kernel covers {result['mask'].mean():.2%} of the grid")
    if args.preset == "double_integrator_free":
        reference = analytic_double_integrator_kernel(make_grid(grid)["states"])
        print(f"Agreement with the braking-distance kernel: {mask_agreement(result['mask'], reference):.2%}")
    save_kernel(result, args.out)
    return 0


def _central_difference(params, tree, x, e, beta: float, step: float) -> np.ndarray:
    gradient = np.zeros_like(x)
    for i in range(x.shape[0]):
        offset = np.zeros_like(x)
        offset[i] = step
        gradient[i] = (h_forward(params, tree, x + offset, e, beta) - h_forward(params, tree, x - offset, e, beta)) / (2 * step)
    return gradient


def run_checks(params, checkpoint: Dict[str, Any], samples: int = CHECK_DEFAULTS["samples"],
               seed: int = 0) -> Dict[str, Any]:
    """
    무작위 (x, e) 표본에 대해
    - 포함 관계 h_θ ≤ c
    - ∇_x h_θ 와 중심 차분 비교
    - HJ 잔차와 CBF 위반의 평균 제곱
    """
    system, environment = checkpoint_context(checkpoint)
    tree = environment["tree"]
    model_config = checkpoint["model_config"]
    beta, gamma = model_config["beta"], model_config["gamma"]

    box = np.asarray(environment["state_box"], dtype=float)
    e = sample_environments(environment["distribution"], samples, seed) if environment["distribution"]["ranges"] \
        else np.zeros((samples, 0))
    x = np.random.default_rng([seed, 3]).uniform(box[:, 0], box[:, 1], size=(samples, box.shape[0]))

    with torch.no_grad():
        h = np.atleast_1d(h_forward(params, tree, x, e, beta))
    c = np.atleast_1d(eval_constraint(tree, x, e))
    containment_gap = float(np.max(h - c))

    gradient_error = 0.0
    for k in range(min(CHECK_DEFAULTS["gradient_samples"], samples)):
        analytic = np.asarray(h_gradient_x(params, tree, x[k], e[k], beta))
        numeric = _central_difference(params, tree, x[k], e[k], beta, CHECK_DEFAULTS["fd_step"])
        scale = max(1.0, float(np.max(np.abs(numeric))))
        gradient_error = max(gradient_error, float(np.max(np.abs(analytic - numeric))) / scale)

    residual = np.atleast_1d(residual_hj(params, system, tree, x, e, gamma, beta))
    violation = np.atleast_1d(cbf_violation(params, system, tree, x, e, gamma, beta))
    report = {
        "samples": samples,
        "containment_gap": containment_gap,
        "containment_passed": containment_gap <= CHECK_DEFAULTS["containment_tolerance"],
        "gradient_error": gradient_error,
        "gradient_passed": gradient_error <= CHECK_DEFAULTS["gradient_tolerance"],
        "mean_squared_residual": float(np.mean(residual ** 2)),
        "mean_squared_violation": float(np.mean(violation ** 2)),
    }
    report["passed"] = report["containment_passed"] and report["gradient_passed"]
    return report


def cmd_check(args) -> int:
    params, checkpoint = load_checkpoint(args.checkpoint)
    report = run_checks(params, checkpoint, samples=args.samples, seed=args.seed)
    print(f"containment: max(h - c) = {report['containment_gap']:.3e} "
          f"({'ok' if report['containment_passed'] else 'FAILED'})")
    print(f"gradient vs central differences: {report['gradient_error']:.3e} "
          f"({'ok' if report['gradient_passed'] else 'FAILED'})")
    print(f"mean squared HJ residual: {report['mean_squared_residual']:.6e}")
    print(f"mean squared CBF violation: {report['mean_squared_violation']:.6e}")
    if args.out:
        save_to_json({**report, "checkpoint": str(args.checkpoint), "checked_at": now_iso()}, args.out)
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbf_operator", description="Neural CBF operator toolkit")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train a CBF operator from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("simulate", help="run a closed-loop scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_simulate)

    p = commands.add_parser("grid", help="evaluate h and c on a state grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env", help="environment values: file, JSON, or comma separated")
    p.add_argument("--axes", required=True, help="dim:lower:upper:resolution,...")
    p.add_argument("--fixed", help="full state for the non-grid coordinates")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_grid)

    p = commands.add_parser("oracle", help="grid viability kernel by value iteration")
    p.add_argument("--system", default="double_integrator")
    p.add_argument("--preset", default="double_integrator_free")
    p.add_argument("--env")
    p.add_argument("--resolution", type=int, default=ORACLE_DEFAULTS["resolution"][0])
    p.add_argument("--gamma", type=float, default=ORACLE_DEFAULTS["gamma"])
    p.add_argument("--dt", type=float, default=ORACLE_DEFAULTS["dt"])
    p.add_argument("--max-iters", type=int, default=ORACLE_DEFAULTS["max_iters"])
    p.add_argument("--tol", type=float, default=ORACLE_DEFAULTS["tol"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_oracle)

    p = commands.add_parser("check", help="run the invariant suite against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=CHECK_DEFAULTS["samples"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional JSON report")
    p.set_defaults(handler=cmd_check)
    return parser


def configure_threads() -> None:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        count = int(threads)
        if count < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {threads}")
        torch.set_num_threads(count)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_threads()
        return args.handler(args)
    except json.JSONDecodeError as e:
        print(f"Invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        return 1
    except ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path)
        print(f"Validation failed at '{path}': {e.message}")
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"Validation failed: {e}")
        return 1
    except Exception as e:
        print(f"Error running {args.command}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
