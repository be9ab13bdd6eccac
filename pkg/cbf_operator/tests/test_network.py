"""
CBF 연산자 네트워크 테스트
δ_θ 순전파, h_θ 포함 관계, 공간 기울기, 손실의 파라미터 기울기, 체크포인트
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from jsonschema import ValidationError

# 상위 디렉토리의 barriers 모듈을 import하기 위해 경로 추가
sys.path.append(str(Path(__file__).parent.parent))

from barriers.environment import eval_constraint, eval_smooth_lower, get_preset
from barriers.network import (
    DTYPE,
    delta_forward,
    h_forward,
    h_gradient_x,
    h_value_and_gradient,
    init_params,
    load_checkpoint,
    loss_param_gradient,
    make_model_config,
    save_checkpoint,
    trainable_names,
    zero_params,
)
from barriers.systems import double_integrator
from barriers.training import combined_loss, input_box_for, residual_hj


LOG2 = math.log(2.0)
CIRCLE = {"kind": "circle_keepout", "center_slots": [0, 1], "radius_slot": 2}


@pytest.fixture
def two_obstacles():
    """이중 적분기 두 장애물 프리셋과 작은 네트워크"""
    preset = get_preset("double_integrator_two_obstacles")
    box = input_box_for(preset["state_box"], preset["distribution"])
    config = make_model_config(8, {"hidden_layers": 2, "hidden_width": 8})
    return preset, init_params(config, seed=5, input_box=box)


@pytest.fixture
def free_problem():
    """장애물 없는 이중 적분기와 마지막 층을 줄인 작은 네트워크"""
    preset = get_preset("double_integrator_free")
    box = input_box_for(preset["state_box"], preset["distribution"])
    config = make_model_config(2, {"hidden_layers": 2, "hidden_width": 4, "gamma": 1.0, "lambda": 1.0, "beta": 10.0})
    params = init_params(config, seed=11, input_box=box)
    params["W2"] = 0.1 * params["W2"]
    return preset, config, params


class TestInitParams:
    """초기화 테스트"""

    def test_deterministic(self):
        config = make_model_config(4)
        first, second = init_params(config, 3), init_params(config, 3)
        for name in trainable_names(first):
            assert torch.equal(first[name], second[name])

    def test_shapes(self):
        params = init_params(make_model_config(4, {"hidden_width": 50}), 0)
        assert params["W0"].shape == (50, 4)
        assert params["b0"].shape == (50,)
        assert params[trainable_names(params)[-2]].shape == (1, 50)
        assert params["W0"].dtype == DTYPE

    def test_different_seeds_differ(self):
        config = make_model_config(4)
        assert not torch.equal(init_params(config, 0)["W0"], init_params(config, 1)["W0"])

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            make_model_config(4, {"hidden_width": 0})


class TestDeltaForward:
    """차이 함수 δ_θ 테스트"""

    def test_zero_weights_give_log2(self):
        params = zero_params(make_model_config(5))
        assert delta_forward(params, [1.0, -2.0, 3.0, 0.5, 7.0]) == pytest.approx(LOG2)

    def test_hand_computed_two_neurons(self):
        """W0 = I, b = 0, 출력층 = (1, 1)"""
        params = zero_params(make_model_config(2, {"hidden_layers": 1, "hidden_width": 2}))
        params["W0"] = torch.eye(2, dtype=DTYPE)
        params["W1"] = torch.ones((1, 2), dtype=DTYPE)
        expected = math.log1p(math.exp(math.tanh(0.5) + math.tanh(-0.25)))
        assert delta_forward(params, [0.5, -0.25]) == pytest.approx(expected, abs=1e-15)
        assert delta_forward(params, [0.0, 0.0]) == pytest.approx(LOG2, abs=1e-15)

    def test_non_negative(self, two_obstacles):
        _, params = two_obstacles
        xi = np.random.default_rng(0).uniform(-20.0, 20.0, size=(1000, 8))
        assert np.all(delta_forward(params, xi) >= 0.0)

    def test_wrong_length(self, two_obstacles):
        _, params = two_obstacles
        with pytest.raises(ValueError):
            delta_forward(params, [0.0, 1.0])


class TestHForward:
    """h_θ = c̲ − δ_θ 테스트"""

    def test_contained_in_constraint(self, two_obstacles):
        """h_θ ≤ c 는 구조적으로 성립"""
        preset, params = two_obstacles
        rng = np.random.default_rng(2)
        x = rng.uniform([-1.0, -6.0], [11.0, 6.0], size=(2000, 2))
        e = rng.uniform([1, 0, -5, 1, 0, -5], [2, 10, 5, 2, 10, 5], size=(2000, 6))
        h = h_forward(params, preset["tree"], x, e, 10.0)
        assert np.all(h <= eval_constraint(preset["tree"], x, e))

    def test_zero_weights_shift_by_log2(self):
        params = zero_params(make_model_config(5))
        x, e = [2.0, 0.0], [0.0, 0.0, 1.0]
        expected = eval_smooth_lower(CIRCLE, x, e, 10.0) - LOG2
        assert h_forward(params, CIRCLE, x, e, 10.0) == pytest.approx(expected, abs=1e-15)

    def test_dimension_mismatch(self):
        params = zero_params(make_model_config(4))
        with pytest.raises(ValueError):
            h_forward(params, CIRCLE, [2.0, 0.0], [0.0, 0.0, 1.0], 10.0)


class TestGradientX:
    """∇_x h_θ 테스트"""

    def test_zero_weights_circle(self):
        params = zero_params(make_model_config(5))
        grad = h_gradient_x(params, CIRCLE, [2.0, 0.0], [0.0, 0.0, 1.0], 10.0)
        np.testing.assert_allclose(grad, [4.0, 0.0], atol=1e-14)

    @pytest.mark.parametrize("x", [[3.0, 1.0], [7.5, -2.0], [2.0, 3.5]])
    def test_matches_central_differences(self, two_obstacles, x):
        preset, params = two_obstacles
        e = np.array([1.5, 6.0, -2.0, 1.2, 8.0, 3.0])
        x = np.array(x)
        grad = h_gradient_x(params, preset["tree"], x, e, 10.0)
        step = 1e-5
        for i in range(2):
            offset = np.zeros(2)
            offset[i] = step
            numeric = (h_forward(params, preset["tree"], x + offset, e, 10.0)
                       - h_forward(params, preset["tree"], x - offset, e, 10.0)) / (2 * step)
            assert abs(grad[i] - numeric) <= 1e-6 * max(1.0, abs(numeric))

    def test_forward_channels_match_reverse_mode(self, two_obstacles):
        """순방향 방향미분 채널과 역방향 기울기가 일치"""
        preset, params = two_obstacles
        x = np.array([[3.0, 1.0], [7.5, -2.0], [2.0, 3.5]])
        e = np.array([1.5, 6.0, -2.0, 1.2, 8.0, 3.0])
        forward = h_gradient_x(params, preset["tree"], x, e, 10.0)
        _, reverse = h_value_and_gradient(params, preset["tree"], x, e, 10.0)
        np.testing.assert_allclose(forward, reverse, rtol=1e-12, atol=1e-12)

    def test_batched_rows_independent(self, two_obstacles):
        """배치 기울기는 샘플별 기울기와 같음"""
        preset, params = two_obstacles
        x = np.array([[3.0, 1.0], [2.0, 3.5]])
        e = np.array([1.5, 6.0, -2.0, 1.2, 8.0, 3.0])
        batched = h_gradient_x(params, preset["tree"], x, e, 10.0)
        for k in range(2):
            np.testing.assert_allclose(batched[k], h_gradient_x(params, preset["tree"], x[k], e, 10.0), atol=1e-14)


def _finite_difference_gradient(params, batch, system, tree, config):
    gradient = {}
    for name in trainable_names(params):
        flat = params[name].reshape(-1)
        values = torch.zeros_like(flat)
        for k in range(flat.shape[0]):
            step = 1e-6 * max(1.0, abs(float(flat[k])))
            shifted = []
            for sign in (1.0, -1.0):
                perturbed = dict(params)
                copy = flat.clone()
                copy[k] += sign * step
                perturbed[name] = copy.reshape(params[name].shape)
                shifted.append(combined_loss(perturbed, batch, system, tree, config))
            values[k] = (shifted[0] - shifted[1]) / (2 * step)
        gradient[name] = values.reshape(params[name].shape)
    return gradient


class TestLossParamGradient:
    """손실의 파라미터 기울기 (중첩 미분) 테스트"""

    def test_matches_finite_differences(self, free_problem):
        """HJ 분기와 CBF 위반이 모두 활성인 샘플"""
        preset, config, params = free_problem
        system = double_integrator()
        batch = (np.array([[9.5, 3.0]]), np.zeros((1, 0)))
        loss, grad = loss_param_gradient(params, batch, config, system, preset["tree"])
        assert loss == pytest.approx(combined_loss(params, batch, system, preset["tree"], config), rel=1e-12)

        numeric = _finite_difference_gradient(params, batch, system, preset["tree"], config)
        for name in trainable_names(params):
            analytic = grad[name].reshape(-1)
            expected = numeric[name].reshape(-1)
            for a, f in zip(analytic.tolist(), expected.tolist()):
                assert abs(a - f) <= 1e-5 * abs(f) + 1e-8, name

    def test_cbf_only_variant_matches_finite_differences(self, free_problem):
        """HJ 항을 끈 L_CBF 전용 손실의 기울기"""
        preset, config, params = free_problem
        system = double_integrator()
        spec = {**config, "hj_weight": 0.0}
        batch = (np.array([[9.5, 3.0], [8.0, 2.5]]), np.zeros((2, 0)))
        terms, grad = loss_param_gradient(params, batch, spec, system, preset["tree"], return_terms=True)
        assert terms["cbf"] > 0
        assert terms["total"] == pytest.approx(spec["lambda"] * terms["cbf"], rel=1e-12)

        numeric = _finite_difference_gradient(params, batch, system, preset["tree"], spec)
        for name in trainable_names(params):
            for a, f in zip(grad[name].reshape(-1).tolist(), numeric[name].reshape(-1).tolist()):
                assert abs(a - f) <= 1e-5 * abs(f) + 1e-8, name

    def test_delta_branch_isolated(self, free_problem):
        """λ=0 이고 min 이 δ 분기를 고르면 기울기는 ∇_θ δ²"""
        preset, config, params = free_problem
        system = double_integrator()
        spec = {**config, "lambda": 0.0}
        x, e = np.array([[3.0, 1.0]]), np.zeros((1, 0))
        delta = delta_forward(params, x)
        assert residual_hj(params, system, preset["tree"], x, e, 1.0, 10.0) == pytest.approx(delta)

        _, grad = loss_param_gradient(params, (x, e), spec, system, preset["tree"])
        names = trainable_names(params)
        leaves = {name: params[name].clone().requires_grad_(True) for name in names}
        squared = (delta_forward({**params, **leaves}, torch.as_tensor(x)) ** 2).mean()
        expected = torch.autograd.grad(squared, [leaves[name] for name in names])
        for name, value in zip(names, expected):
            torch.testing.assert_close(grad[name], value, atol=1e-12, rtol=1e-10)

    def test_duplicated_sample(self, free_problem):
        """평균 축약: 같은 샘플을 두 번 넣어도 손실과 기울기 동일"""
        preset, config, params = free_problem
        system = double_integrator()
        single = (np.array([[9.5, 3.0]]), np.zeros((1, 0)))
        double = (np.array([[9.5, 3.0], [9.5, 3.0]]), np.zeros((2, 0)))
        loss_one, grad_one = loss_param_gradient(params, single, config, system, preset["tree"])
        loss_two, grad_two = loss_param_gradient(params, double, config, system, preset["tree"])
        assert loss_two == pytest.approx(loss_one, rel=1e-12)
        for name in trainable_names(params):
            torch.testing.assert_close(grad_two[name], grad_one[name], atol=1e-14, rtol=1e-12)

    def test_empty_batch(self, free_problem):
        preset, config, params = free_problem
        with pytest.raises(ValueError):
            loss_param_gradient(params, (np.zeros((0, 2)), np.zeros((0, 0))), config,
                                double_integrator(), preset["tree"])

    def test_params_not_modified(self, free_problem):
        preset, config, params = free_problem
        before = {name: params[name].clone() for name in trainable_names(params)}
        loss_param_gradient(params, (np.array([[9.5, 3.0]]), np.zeros((1, 0))), config,
                            double_integrator(), preset["tree"])
        for name, value in before.items():
            assert torch.equal(params[name], value)
            assert not params[name].requires_grad


class TestCheckpoint:
    """체크포인트 저장/로드 테스트"""

    def test_save_and_load(self, tmp_path, two_obstacles):
        preset, params = two_obstacles
        config = make_model_config(8, {"hidden_layers": 2, "hidden_width": 8})
        path = save_checkpoint(tmp_path / "model.json", params, config, {"environment": {"tree": preset["tree"]}})
        loaded, checkpoint = load_checkpoint(path)
        assert checkpoint["environment"]["tree"] == preset["tree"]
        x, e = [3.0, 1.0], [1.5, 6.0, -2.0, 1.2, 8.0, 3.0]
        assert h_forward(loaded, preset["tree"], x, e, 10.0) == h_forward(params, preset["tree"], x, e, 10.0)

    def test_layer_count_mismatch(self, tmp_path, two_obstacles):
        _, params = two_obstacles
        config = make_model_config(8, {"hidden_layers": 2, "hidden_width": 8})
        path = save_checkpoint(tmp_path / "model.json", params, config)
        document = json.loads(path.read_text(encoding="utf-8"))
        document["model_config"]["hidden_layers"] = 3
        path.write_text(json.dumps(document), encoding="utf-8")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text(json.dumps({"format": "something-else"}), encoding="utf-8")
        with pytest.raises(ValidationError):
            load_checkpoint(path)
