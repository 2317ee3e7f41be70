import json

import pytest

from lesionnet import cli
from lesionnet.synthetic import separable_dataset, write_image_folder

SMALL_SPACE = {"input_shape": [3, 8, 8], "channel_choices": [4, 8], "stem_channels": 4, "max_stages": 2}


def write_predictions(path, tp=174, fn=47, fp=49, tn=172):
    rows = (
        ["malignant,malignant"] * tp
        + ["malignant,benign"] * fn
        + ["benign,malignant"] * fp
        + ["benign,benign"] * tn
    )
    path.write_text("\n".join(["label,prediction"] + rows) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------- analyze


def test_analyze_reference(capsys):
    exit_code = cli.main(["analyze", "resnet50"])
    out = capsys.readouterr().out.splitlines()

    assert exit_code == cli.EXIT_OK
    assert out[0] == "Architecture: resnet50"
    assert out[1].startswith("  Params: 23.51M, FLOPs: 7.7")


def test_analyze_compare_json(capsys):
    exit_code = cli.main(["analyze", "resnet50", "tiny", "--compare", "--json"])
    payload = json.loads(capsys.readouterr().out)

    assert exit_code == cli.EXIT_OK
    assert [report["name"] for report in payload["reports"]] == ["resnet50", "tiny"]
    assert payload["comparison"]["rows"][1]["best"]["params"] is True


def test_analyze_file_with_new_input_size(tmp_path, capsys, small_arch_text):
    arch = tmp_path / "small.arch"
    arch.write_text(small_arch_text, encoding="utf-8")

    exit_code = cli.main(["analyze", str(arch), "--input-size", "32", "--per-layer"])
    out = capsys.readouterr().out

    assert exit_code == cli.EXIT_OK
    assert "Architecture: small" in out
    assert "-> 16x8x8" in out


def test_analyze_unknown_architecture(capsys):
    exit_code = cli.main(["analyze", "does-not-exist"])

    assert exit_code == cli.EXIT_USAGE
    assert "does-not-exist" in capsys.readouterr().err


def test_invalid_flag_value_exits_with_usage_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["--log-level", "LOUD", "analyze", "tiny"])

    assert info.value.code == 2


# --------------------------------------------------------------------------- eval / config


def test_eval_predictions(tmp_path, capsys):
    predictions = write_predictions(tmp_path / "pred.csv")

    exit_code = cli.main(["eval", "--predictions", str(predictions), "--output", str(tmp_path / "run")])
    out = capsys.readouterr().out.splitlines()

    assert exit_code == cli.EXIT_OK
    assert out[0] == "Accuracy 78.3 / Sensitivity 78.7 / PPV 78.0"
    saved = json.loads((tmp_path / "run" / "metrics.json").read_text(encoding="utf-8"))
    assert saved["confusion"] == {"tp": 174, "fn": 47, "fp": 49, "tn": 172}
    run = json.loads((tmp_path / "run" / "run_config.json").read_text(encoding="utf-8"))
    assert run["command"] == "eval"


def test_output_directory_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env-out"))
    predictions = write_predictions(tmp_path / "pred.csv", 10, 0, 0, 10)

    assert cli.main(["eval", "--predictions", str(predictions)]) == cli.EXIT_OK
    assert (tmp_path / "env-out" / "metrics.json").is_file()


def test_config_file_sets_defaults_and_flags_win(tmp_path, capsys):
    predictions = write_predictions(tmp_path / "pred.csv", 5, 1, 1, 5)
    config = tmp_path / "run.json"
    config.write_text(
        json.dumps({"seed": 7, "eval": {"predictions": str(predictions), "output": str(tmp_path / "cfg")}}),
        encoding="utf-8",
    )

    assert cli.main(["--config", str(config), "eval"]) == cli.EXIT_OK
    first = json.loads((tmp_path / "cfg" / "run_config.json").read_text(encoding="utf-8"))
    assert first["seed"] == 7

    assert cli.main(["--config", str(config), "eval", "--seed", "3"]) == cli.EXIT_OK
    second = json.loads((tmp_path / "cfg" / "run_config.json").read_text(encoding="utf-8"))
    assert second["seed"] == 3


@pytest.mark.parametrize(
    "content",
    [
        {"eval": {"colour": "red"}},
        {"sede": 7},
        {"eval": ["not", "an", "object"]},
    ],
)
def test_bad_config_is_a_usage_error(tmp_path, capsys, content):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps(content), encoding="utf-8")

    assert cli.main(["--config", str(config), "analyze", "tiny"]) == cli.EXIT_USAGE
    assert capsys.readouterr().err.startswith("lesionnet:")


def test_eval_without_source_is_a_usage_error(tmp_path, capsys):
    assert cli.main(["eval", "--output", str(tmp_path)]) == cli.EXIT_USAGE


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path, capsys):
    checkpoint = tmp_path / "broken.lnck"
    checkpoint.write_bytes(b"LNCK\x01")

    exit_code = cli.main(["eval", "--checkpoint", str(checkpoint), "--synthetic", "8", "--output", str(tmp_path)])

    assert exit_code == cli.EXIT_RUNTIME


# --------------------------------------------------------------------------- prepare / train / explain


def test_prepare_writes_split(tmp_path, capsys):
    manifest = write_image_folder(separable_dataset(12, size=8), tmp_path / "images")

    exit_code = cli.main(
        ["prepare", "--manifest", str(manifest), "--test-per-class", "2", "--output", str(tmp_path / "prep")]
    )
    out = capsys.readouterr().out

    assert exit_code == cli.EXIT_OK
    assert "test: 2 benign / 2 malignant" in out
    assert (tmp_path / "prep" / "split.csv").is_file()


def test_prepare_with_too_small_manifest(tmp_path, capsys):
    manifest = write_image_folder(separable_dataset(4, size=8), tmp_path / "images")

    assert cli.main(["prepare", "--manifest", str(manifest), "--output", str(tmp_path / "prep")]) == cli.EXIT_USAGE


def test_train_eval_explain_on_synthetic_data(tmp_path, capsys):
    run = tmp_path / "run"
    exit_code = cli.main(
        ["train", "--synthetic", "16", "--epochs", "1", "--max-steps", "2", "--batch-size", "8", "--output", str(run)]
    )
    assert exit_code == cli.EXIT_OK
    assert (run / "checkpoint.lnck").is_file()
    assert (run / "history.csv").read_text(encoding="utf-8").startswith("epoch,loss,val_accuracy")
    capsys.readouterr()

    checkpoint = str(run / "checkpoint.lnck")
    assert cli.main(["eval", "--checkpoint", checkpoint, "--synthetic", "16", "--output", str(tmp_path / "ev")]) == 0
    assert capsys.readouterr().out.startswith("Accuracy ")

    exit_code = cli.main(
        ["explain", "--checkpoint", checkpoint, "--synthetic", "8", "--limit", "2", "--output", str(tmp_path / "ex")]
    )
    assert exit_code == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("Audit: ")
    audit = json.loads((tmp_path / "ex" / "audit.json").read_text(encoding="utf-8"))
    assert len(audit["entries"]) == 2
    assert (tmp_path / "ex" / "overlays" / "img_0000.png").is_file()


def test_train_from_split_csv(tmp_path, capsys):
    manifest = write_image_folder(separable_dataset(12, size=8), tmp_path / "images")
    assert cli.main(["prepare", "--manifest", str(manifest), "--test-per-class", "2", "--output", str(tmp_path)]) == 0
    arch = tmp_path / "toy.arch"
    arch.write_text("input 3 8 8\nconv c1 out=4\nhead 2\n", encoding="utf-8")

    exit_code = cli.main(
        [
            "train",
            "--arch",
            str(arch),
            "--split-csv",
            str(tmp_path / "split.csv"),
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--workers",
            "2",
            "--json",
            "--output",
            str(tmp_path / "train"),
        ]
    )
    capsys.readouterr()

    assert exit_code == cli.EXIT_OK
    assert (tmp_path / "train" / "checkpoint.lnck").is_file()


# --------------------------------------------------------------------------- search


def test_search_writes_archive(tmp_path, capsys):
    space = tmp_path / "space.json"
    space.write_text(json.dumps(SMALL_SPACE), encoding="utf-8")

    exit_code = cli.main(
        [
            "search",
            "--space",
            str(space),
            "--budget",
            "3",
            "--population",
            "2",
            "--train-steps",
            "1",
            "--proxy-batch-size",
            "4",
            "--synthetic",
            "8",
            "--baseline-accuracy",
            "0.0",
            "--output",
            str(tmp_path / "search"),
        ]
    )
    out = capsys.readouterr().out

    assert exit_code == cli.EXIT_OK
    assert out.startswith("Evaluated 3 candidates")
    payload = json.loads((tmp_path / "search" / "search.json").read_text(encoding="utf-8"))
    assert payload["evaluated"] == 3
    assert (tmp_path / "search" / "archive" / "index.csv").is_file()
