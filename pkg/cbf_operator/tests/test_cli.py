"""
명령줄 도구 테스트
하위 명령별 종료 코드와 출력 파일
"""

import json
import sys
from pathlib import Path

import pytest

# 상위 디렉토리의 cli 와 barriers 모듈을 import하기 위해 경로 추가
sys.path.append(str(Path(__file__).parent.parent))

from barriers.environment import get_preset
from barriers.network import load_checkpoint, make_model_config, save_checkpoint, zero_params
from barriers.storage import load_json, read_csv
from cli import main, parse_axes, parse_env, parse_vector, resolve_environment, run_checks


FREE_ENVIRONMENT = {
    **{key: get_preset("double_integrator_free")[key] for key in ("tree", "distribution", "state_box")},
}


def write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.fixture
def zero_checkpoint(tmp_path):
    """가중치 0 (δ ≡ log 2) 인 장애물 없는 이중 적분기 체크포인트"""
    config = make_model_config(2)
    path = tmp_path / "zero.json"
    save_checkpoint(path, zero_params(config, [[-1.0, 11.0], [-6.0, 6.0]]), config,
                    {"system": {"name": "double_integrator"}, "environment": FREE_ENVIRONMENT})
    return path


@pytest.fixture
def tiny_run_config(tmp_path):
    return write_json(tmp_path / "run.json", {
        "system": "double_integrator",
        "environment": {"preset": "double_integrator_one_obstacle"},
        "dataset": {"num_envs": 2, "states_per_env": 8},
        "model": {"hidden_layers": 1, "hidden_width": 4},
        "train": {"epochs": 5, "batch_size": 4, "learning_rate": 0.01, "seed": 1, "max_steps": 3},
    })


class TestParsing:
    """인자 파싱 보조 함수"""

    def test_axes(self):
        axes = parse_axes("0:0:10:5, 1:-5:5:3")
        assert axes == [
            {"dim": 0, "lower": 0.0, "upper": 10.0, "resolution": 5},
            {"dim": 1, "lower": -5.0, "upper": 5.0, "resolution": 3},
        ]

    @pytest.mark.parametrize("text", ["0:0:10", "0:10:0:5", "0:0:10:1"])
    def test_bad_axes(self, text):
        with pytest.raises(ValueError):
            parse_axes(text)

    def test_env_forms(self, tmp_path):
        path = write_json(tmp_path / "env.json", {"e": [1, 2, 3]})
        assert parse_env(None) == []
        assert parse_env("1.5,6,-2") == [1.5, 6.0, -2.0]
        assert parse_env("[1, 2]") == [1.0, 2.0]
        assert parse_env(str(path)) == [1.0, 2.0, 3.0]

    def test_env_object_without_list(self):
        with pytest.raises(ValueError):
            parse_env('{"radius": 2}')

    def test_vector(self):
        assert parse_vector(None) is None
        assert parse_vector("") == []
        assert parse_vector("1,2") == [1.0, 2.0]

    def test_resolve_environment(self):
        resolved = resolve_environment({"preset": "double_integrator_free", "state_box": [[0, 1], [0, 1]]})
        assert resolved["state_box"] == [[0, 1], [0, 1]]
        assert resolved["tree"] == get_preset("double_integrator_free")["tree"]

        with pytest.raises(ValueError):
            resolve_environment({"tree": FREE_ENVIRONMENT["tree"]})


class TestTrainCommand:

    def test_writes_checkpoint_and_history(self, tmp_path, tiny_run_config):
        out = tmp_path / "model.json"
        assert main(["train", "--config", str(tiny_run_config), "--out", str(out)]) == 0

        params, checkpoint = load_checkpoint(out)
        assert checkpoint["system"] == {"name": "double_integrator"}
        assert checkpoint["environment"]["distribution"]["names"] == ["r1", "xc1", "vc1"]
        assert checkpoint["training_state"]["adam"]["step"] == 3
        assert params["input_lower"].shape[0] == 5
        assert len(read_csv(tmp_path / "model_history.csv")) == 3

    def test_invalid_json(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"system": "double_integrator",', encoding="utf-8")

        assert main(["train", "--config", str(path), "--out", str(tmp_path / "m.json")]) == 1
        assert "Invalid JSON" in capsys.readouterr().out

    def test_schema_violation(self, tmp_path):
        path = write_json(tmp_path / "run.json", {"system": "bicycle", "environment": {}, "dataset": {}})
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "m.json")]) == 1

    def test_unknown_preset(self, tmp_path):
        path = write_json(tmp_path / "run.json", {
            "system": "double_integrator",
            "environment": {"preset": "nowhere"},
            "dataset": {"num_envs": 1, "states_per_env": 1},
        })
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "m.json")]) == 1

    def test_dubins_without_speed(self, tmp_path):
        path = write_json(tmp_path / "run.json", {
            "system": "dubins",
            "environment": {"preset": "dubins_two_circles"},
            "dataset": {"num_envs": 1, "states_per_env": 1},
        })
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "m.json")]) == 1


class TestSimulateCommand:

    def scenario(self, **overrides):
        return {
            "name": "still",
            "system": "double_integrator",
            "checkpoint": "zero.json",
            "environment": {"preset": "double_integrator_free"},
            "initial_env": [],
            "start": [5.0, 0.0],
            "target": [5.0],
            "controller": {"kind": "pd"},
            "dt": 0.05,
            "horizon": 10,
            **overrides,
        }

    def test_trajectory_and_summary(self, tmp_path, zero_checkpoint):
        path = write_json(tmp_path / "scenario.json", self.scenario())
        out = tmp_path / "traj.csv"

        assert main(["simulate", "--scenario", str(path), "--out", str(out)]) == 0
        assert len(read_csv(out)) == 10
        summary = load_json(tmp_path / "traj_summary.json")
        assert summary["scenario"] == "still"
        assert summary["steps"] == 10

    def test_horizon_zero(self, tmp_path, zero_checkpoint):
        path = write_json(tmp_path / "scenario.json", self.scenario(horizon=0))
        assert main(["simulate", "--scenario", str(path), "--out", str(tmp_path / "traj.csv")]) == 1

    def test_integration_failure(self, tmp_path, zero_checkpoint):
        """적분 실패는 실행 오류(2), 그때까지의 궤적은 저장"""
        path = write_json(tmp_path / "scenario.json", self.scenario(dt=1e300, target=[9.0]))
        out = tmp_path / "traj.csv"

        assert main(["simulate", "--scenario", str(path), "--out", str(out)]) == 2
        assert len(read_csv(out)) == 1


class TestGridCommand:

    def test_writes_grid(self, tmp_path, zero_checkpoint):
        out = tmp_path / "grid.csv"
        code = main(["grid", "--checkpoint", str(zero_checkpoint), "--axes", "0:0:10:3,1:-5:5:4", "--out", str(out)])

        assert code == 0
        rows = read_csv(out)
        assert list(rows[0]) == ["x0", "x1", "h", "c"]
        assert len(rows) == 12
        assert all(float(r["h"]) <= float(r["c"]) for r in rows)

    def test_env_length_must_match_checkpoint(self, tmp_path, zero_checkpoint):
        """장애물 없는 체크포인트에 환경 값 두 개를 주면 입력 오류"""
        code = main(["grid", "--checkpoint", str(zero_checkpoint), "--env", "1,2", "--axes", "0:0:10:3",
                     "--out", str(tmp_path / "g.csv")])

        assert code == 1
        assert not (tmp_path / "g.csv").exists()

    def test_checkpoint_without_context(self, tmp_path):
        config = make_model_config(2)
        path = tmp_path / "bare.json"
        save_checkpoint(path, zero_params(config), config)

        assert main(["grid", "--checkpoint", str(path), "--axes", "0:0:10:3", "--out", str(tmp_path / "g.csv")]) == 1

    def test_missing_checkpoint(self, tmp_path):
        code = main(["grid", "--checkpoint", str(tmp_path / "none.json"), "--axes", "0:0:10:3",
                     "--out", str(tmp_path / "g.csv")])
        assert code == 1


class TestOracleCommand:

    def test_small_grid(self, tmp_path, capsys):
        out = tmp_path / "kernel.csv"
        code = main(["oracle", "--resolution", "21", "--dt", "0.05", "--max-iters", "200", "--out", str(out)])

        assert code == 0
        assert len(read_csv(out)) == 21 * 21
        assert "Agreement with the braking-distance kernel" in capsys.readouterr().out

    def test_preset_for_other_system(self, tmp_path):
        code = main(["oracle", "--system", "unicycle", "--out", str(tmp_path / "kernel.csv")])
        assert code == 1

    def test_wrong_env_length(self, tmp_path):
        code = main(["oracle", "--preset", "double_integrator_one_obstacle", "--env", "1,5",
                     "--out", str(tmp_path / "kernel.csv")])
        assert code == 1


class TestCheckCommand:

    def test_zero_network_passes(self, zero_checkpoint):
        params, checkpoint = load_checkpoint(zero_checkpoint)
        report = run_checks(params, checkpoint, samples=50, seed=2)

        assert report["containment_passed"]
        assert report["containment_gap"] < 0
        assert report["gradient_passed"]
        assert report["mean_squared_residual"] >= 0
        assert report["passed"]

    def test_report_file(self, tmp_path, zero_checkpoint):
        out = tmp_path / "report.json"
        assert main(["check", "--checkpoint", str(zero_checkpoint), "--samples", "30", "--out", str(out)]) == 0
        report = load_json(out)
        assert report["samples"] == 30
        assert "checked_at" in report

    def test_trained_checkpoint_with_obstacle(self, tmp_path, tiny_run_config):
        out = tmp_path / "model.json"
        assert main(["train", "--config", str(tiny_run_config), "--out", str(out)]) == 0
        assert main(["check", "--checkpoint", str(out), "--samples", "40"]) == 0
