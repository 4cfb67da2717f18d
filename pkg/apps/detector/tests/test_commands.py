import json
from io import StringIO
from pathlib import Path

import pytest
from django.core.management import call_command
from django.core.management.base import CommandError

from apps.metric import services as metric_services

SMOKE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def run(name, *args):
    out = StringIO()
    call_command(name, *args, stdout=out)
    return out.getvalue()


@pytest.fixture(autouse=True)
def artifacts_dir(settings, tmp_path):
    settings.FSOD_ARTIFACTS_DIR = tmp_path / "artifacts"
    return settings.FSOD_ARTIFACTS_DIR


@pytest.fixture
def checkpoint(tmp_path):
    payload = json.loads(run("train", "--config", str(SMOKE_CONFIG), "--out", str(tmp_path / "train")))
    return Path(payload["checkpoints"][-1])


class TestTrainCommand:
    def test_smoke_run(self, checkpoint):
        assert checkpoint.exists()
        assert checkpoint.with_suffix(".bin").exists()

    def test_default_output_directory(self, artifacts_dir):
        payload = json.loads(run("train", "--config", str(SMOKE_CONFIG)))
        assert payload["steps_run"] == 2
        assert Path(payload["metrics"]).parent == artifacts_dir / "train"

    def test_missing_key_is_a_validation_error(self, tmp_path):
        data = json.loads(SMOKE_CONFIG.read_text())
        del data["meta_lr"]
        path = tmp_path / "broken.json"
        path.write_text(json.dumps(data))

        with pytest.raises(CommandError) as excinfo:
            call_command("train", "--config", str(path), stdout=StringIO())
        assert excinfo.value.returncode == 1
        assert "meta_lr" in str(excinfo.value)

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(CommandError) as excinfo:
            call_command("train", "--config", str(tmp_path / "absent.json"), stdout=StringIO())
        assert excinfo.value.returncode == 2


class TestEvalCommand:
    def test_writes_report(self, tmp_path, checkpoint):
        weights = checkpoint.with_suffix(".bin").read_bytes()
        out = tmp_path / "eval.json"
        run("eval", "--checkpoint", str(checkpoint), "--episodes", "2", "--seed-groups", "1", "--out", str(out))

        report = json.loads(out.read_text())
        assert 0.0 <= report["ap50"] <= 1.0
        assert report["n_episodes"] == 2
        assert report["config"]["split"] == "novel"
        assert checkpoint.with_suffix(".bin").read_bytes() == weights

    def test_ablation_switches(self, checkpoint):
        report = json.loads(
            run(
                "eval",
                "--checkpoint", str(checkpoint),
                "--episodes", "1",
                "--seed-groups", "1",
                "--metric", "cosine",
                "--no-mr",
            )
        )
        assert report["config"]["metric_kind"] == "cosine"
        assert report["config"]["mr_enabled"] is False

    def test_crowded_preset(self, checkpoint):
        report = json.loads(
            run("eval", "--checkpoint", str(checkpoint), "--episodes", "1", "--seed-groups", "1", "--preset", "crowded")
        )
        assert report["config"]["score_threshold"] == 0.4
        assert report["config"]["inner_steps"] == 50

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CommandError) as excinfo:
            call_command("eval", "--checkpoint", str(tmp_path / "none.json"), stdout=StringIO())
        assert excinfo.value.returncode == 2

    def test_zero_episodes_rejected(self, checkpoint):
        with pytest.raises(CommandError) as excinfo:
            call_command("eval", "--checkpoint", str(checkpoint), "--episodes", "0", stdout=StringIO())
        assert excinfo.value.returncode == 1


class TestInferCommand:
    def test_dump_is_deterministic(self, tmp_path, checkpoint):
        first, second = tmp_path / "a.json", tmp_path / "b.json"
        run("infer", "--checkpoint", str(checkpoint), "--seed", "7", "--out", str(first))
        run("infer", "--checkpoint", str(checkpoint), "--seed", "7", "--out", str(second))
        assert first.read_text() == second.read_text()

        dump = json.loads(first.read_text())
        assert dump["score_threshold"] == 0.7
        for scene in dump["scenes"]:
            assert all(d["score"] >= 0.7 for d in scene["detections"])

    def test_embeddings_export(self, tmp_path, checkpoint):
        path = tmp_path / "embeddings.csv"
        run("infer", "--checkpoint", str(checkpoint), "--embeddings", str(path))
        assert path.read_text().startswith("episode_id,role,class_index")


class TestGradcheckCommand:
    def test_small_run(self, tmp_path):
        out = tmp_path / "gradcheck.json"
        run("gradcheck", "--dims", "8", "--trials", "2", "--out", str(out))
        report = json.loads(out.read_text())
        assert report["passed"] is True
        assert report["max_rel_error"] < 1e-4

    def test_zero_trials(self):
        report = json.loads(run("gradcheck", "--trials", "0"))
        assert report["empty"] is True
        assert report["passed"] is True

    def test_bad_dims(self):
        with pytest.raises(CommandError) as excinfo:
            call_command("gradcheck", "--dims", "1,8", stdout=StringIO())
        assert excinfo.value.returncode == 1

    def test_corrupted_gradient_fails(self, monkeypatch):
        original = metric_services.pearson_grad_query
        monkeypatch.setattr(metric_services, "pearson_grad_query", lambda v, s, epsilon=1e-12: -original(v, s, epsilon))
        with pytest.raises(CommandError) as excinfo:
            call_command("gradcheck", "--dims", "8", "--trials", "2", stdout=StringIO())
        assert excinfo.value.returncode == 2
        assert "metric.pearson_chain" in str(excinfo.value)


class TestAblateCommand:
    def test_untrained_variants(self, tmp_path):
        with pytest.raises(CommandError) as excinfo:
            call_command("ablate", "--config", str(SMOKE_CONFIG), "--dir", str(tmp_path / "empty"), stdout=StringIO())
        assert excinfo.value.returncode == 2

    def test_train_and_compare(self, tmp_path):
        out = tmp_path / "ablation.json"
        run(
            "ablate",
            "--config", str(SMOKE_CONFIG),
            "--dir", str(tmp_path / "variants"),
            "--train",
            "--episodes", "1",
            "--seed-groups", "1",
            "--out", str(out),
        )
        table = json.loads(out.read_text())["variants"]
        assert [row["variant"] for row in table] == ["no-mr+pearson", "mr+cosine", "mr+pearson"]
        assert all(0.0 <= row["ap50"] <= 1.0 for row in table)
        assert (tmp_path / "variants" / "mr+cosine").is_dir()
        report = json.loads(out.read_text())
        assert {r["variant"] for r in report["ranking"]} == {row["variant"] for row in table}
        assert isinstance(report["ordering_holds"], bool)
        assert all(row["ap50_spread"] == 0.0 for row in table)
