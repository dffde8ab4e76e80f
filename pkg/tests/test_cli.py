import json
import re

import pytest

from coal import metrics, priors
from coal import tensor as T
from coal.cli import (
    DATA_FLAGS,
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VALIDATION,
    TRACK_FLAGS,
    TRAIN_FLAGS,
    build_parser,
    main,
)
from coal.config import ConfigError, RunConfig, load_config
from coal.tracker import OutputRecord, format_records
from coal.validation import validate_dataset

SMALL_MODEL = ["--dim", "8", "--heads", "2", "--map-height", "8", "--map-width", "8", "--precision", "f64"]


def gen(out, *extra):
    args = ["gen-data", "--out", str(out), "--frames", "4", "--objects", "2", "--expressions", "2"]
    args += ["--counterfactuals", "2", *extra]
    return main(args)


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert gen(root) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    argv = ["train", "--dataset", str(dataset), "--checkpoint", str(path), "--epochs", "2", "--n-queries", "2"]
    assert main(argv + SMALL_MODEL) == EXIT_OK
    return path


# ---- config -----------------------------------------------------------------


def test_config_round_trip_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train.epochs": 5, "tracker.tau_high": 0.5, "train.lr": 1}))
    config = load_config(path)
    assert config.train.epochs == 5 and config.tracker.tau_high == 0.5
    assert config.train.lr == 1.0 and isinstance(config.train.lr, float)
    assert RunConfig.from_flat(json.loads(config.dumps())).to_flat() == config.to_flat()


@pytest.mark.parametrize(
    "values",
    [{"train.momentum": 0.9}, {"nosection": 1}, {"train.epochs": "ten"}, {"train.epochs": 2.5}, {"train.cf_enabled": 1}],
)
def test_config_rejects_bad_values(values):
    with pytest.raises(ConfigError):
        RunConfig.from_flat(values)


def test_every_field_has_a_default():
    flat = RunConfig().to_flat()
    for flags in (DATA_FLAGS, TRAIN_FLAGS, TRACK_FLAGS):
        for flag in flags:
            assert flag.key in flat


def test_bad_config_file_is_a_usage_error(tmp_path, dataset):
    path = tmp_path / "c.json"
    path.write_text("[1, 2]")
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--config", str(path)]) == EXIT_USAGE
    path.write_text(json.dumps({"train.heads": 3}))
    argv = ["train", "--dataset", str(dataset), "--checkpoint", str(tmp_path / "m.ckpt"), "--config", str(path)]
    assert main(argv) == EXIT_USAGE


# ---- help -------------------------------------------------------------------


@pytest.mark.parametrize("command", ["gen-data", "train", "track", "eval", "gradcheck", "validate"])
def test_help_lists_every_flag_with_default(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    sub = next(a for a in build_parser()._subparsers._group_actions[0].choices.items() if a[0] == command)[1]
    for action in sub._actions:
        if action.dest == "help" or action.required:
            continue
        assert action.option_strings[0] in text
    optional = [a for a in sub._actions if a.dest != "help" and not a.required]
    assert text.count("(default:") >= len(optional)


def test_train_help_shows_recipe_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for expected in ["training epochs (default: 30)", "(default: 0.0001)", "(default: 42)", "(default: 10)"]:
        assert expected in text


# ---- gen-data / validate ----------------------------------------------------


def test_gen_data_is_byte_identical(tmp_path):
    assert gen(tmp_path / "a", "--sequences", "2") == EXIT_OK
    assert gen(tmp_path / "b", "--sequences", "2") == EXIT_OK
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b and "seq-001/counterfactuals.json" in a
    assert gen(tmp_path / "c", "--sequences", "2", "--seed", "7") == EXIT_OK
    assert tree(tmp_path / "c") != a


def test_zero_frames_is_a_valid_dataset(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "z"), "--frames", "0"]) == EXIT_OK
    assert main(["validate", "--dataset", str(tmp_path / "z")]) == EXIT_OK
    assert "0 error(s)" in capsys.readouterr().out


def test_generated_noisy_dataset_validates(tmp_path):
    assert gen(tmp_path / "n", "--caption-error-rate", "0.3", "--box-jitter", "0.03", "--spurious-rate", "1") == EXIT_OK
    report = validate_dataset(tmp_path / "n")
    assert report.errors == []


def _copy(src, dst):
    for name, data in tree(src).items():
        (dst / name).parent.mkdir(parents=True, exist_ok=True)
        (dst / name).write_bytes(data)


def test_counterfactual_without_change_is_reported(tmp_path, dataset, capsys):
    _copy(dataset, tmp_path)
    path = tmp_path / "seq-000" / "counterfactuals.json"
    raw = json.loads(path.read_text())
    eid = sorted(raw)[0]
    raw[eid][1]["new_value"] = raw[eid][1]["original_value"]
    path.write_text(json.dumps(raw))
    assert main(["validate", "--dataset", str(tmp_path)]) == EXIT_VALIDATION
    out = capsys.readouterr().out
    assert re.search(rf"counterfactuals\.json:{eid}\[1\]: ", out)


def test_unknown_positive_object_is_reported(tmp_path, dataset):
    _copy(dataset, tmp_path)
    path = tmp_path / "seq-000" / "expressions.json"
    raw = json.loads(path.read_text())
    eid = sorted(raw)[0]
    raw[eid]["positives"]["0"] = [999]
    path.write_text(json.dumps(raw))
    report = validate_dataset(tmp_path)
    assert [e.record for e in report.errors] == [f"{eid} positives[0]"]
    assert "unknown object_id 999" in report.errors[0].message


def test_missing_dataset_is_a_validation_failure(tmp_path):
    assert main(["validate", "--dataset", str(tmp_path / "nope")]) == EXIT_VALIDATION


# ---- train / track / eval ---------------------------------------------------


def test_train_refuses_invalid_dataset(tmp_path, dataset, capsys):
    _copy(dataset, tmp_path / "bad")
    (tmp_path / "bad" / "seq-000" / "expressions.json").write_text("{not json")
    argv = ["train", "--dataset", str(tmp_path / "bad"), "--checkpoint", str(tmp_path / "m.ckpt")]
    assert main(argv) == EXIT_VALIDATION
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "m.ckpt").exists()


def test_train_requires_checkpoint(dataset):
    assert main(["train", "--dataset", str(dataset)]) == EXIT_USAGE


def test_train_writes_log_checkpoint_and_echo(checkpoint):
    lines = [json.loads(line) for line in open(str(checkpoint) + ".log.jsonl")]
    assert [r["epoch"] for r in lines] == [1, 2]
    echo = json.loads(open(str(checkpoint) + ".run.json").read())
    assert echo["train.epochs"] == 2 and echo["train.dim"] == 8 and echo["train.cf_enabled"] is True


@pytest.mark.parametrize("flag, key", [("--no-cfl", "train.cf_enabled"), ("--no-esi", "train.esi_enabled")])
def test_ablation_flags(tmp_path, dataset, flag, key):
    path = tmp_path / "m.ckpt"
    argv = ["train", "--dataset", str(dataset), "--checkpoint", str(path), "--epochs", "1", "--n-queries", "2", flag]
    assert main(argv + SMALL_MODEL) == EXIT_OK
    assert json.loads(open(str(path) + ".run.json").read())[key] is False
    if flag == "--no-cfl":
        log = [json.loads(line) for line in open(str(path) + ".log.jsonl")]
        assert log[0]["cf"] == 0.0


def test_track_writes_one_file_per_expression(tmp_path, dataset, checkpoint):
    out = tmp_path / "pred"
    assert main(["track", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(out)]) == EXIT_OK
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.txt"))
    expressions = json.loads((dataset / "seq-000" / "expressions.json").read_text())
    assert files == [f"seq-000/{eid}.txt" for eid in sorted(expressions)]
    echo = json.loads((out / "run_config.json").read_text())
    assert (echo["tracker.tau_high"], echo["tracker.tau_low"], echo["tracker.epsilon"]) == (0.4, 0.1, 0.4)


def test_track_expression_filter(tmp_path, dataset, checkpoint):
    out = tmp_path / "pred"
    argv = ["track", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(out)]
    eid = sorted(json.loads((dataset / "seq-000" / "expressions.json").read_text()))[0]
    assert main(argv + ["--expression", eid, "--no-esi"]) == EXIT_OK
    assert [p.name for p in out.rglob("*.txt")] == [f"{eid}.txt"]


def test_track_missing_checkpoint_is_io_error(tmp_path, dataset):
    argv = ["track", "--checkpoint", str(tmp_path / "none.ckpt"), "--dataset", str(dataset), "--out", str(tmp_path)]
    assert main(argv) == EXIT_IO


def test_track_on_empty_sequence_writes_empty_files(tmp_path, dataset, checkpoint):
    _copy(dataset, tmp_path / "z")
    (tmp_path / "z" / "seq-000" / "frames.jsonl").write_text("")
    expressions_path = tmp_path / "z" / "seq-000" / "expressions.json"
    raw = json.loads(expressions_path.read_text())
    for obj in raw.values():
        obj["positives"] = {}
    expressions_path.write_text(json.dumps(raw))
    out = tmp_path / "pred"
    assert main(["track", "--checkpoint", str(checkpoint), "--dataset", str(tmp_path / "z"), "--out", str(out)]) == EXIT_OK
    files = list(out.rglob("*.txt"))
    assert len(files) == len(raw) and all(p.read_text() == "" for p in files)


def test_eval_of_perfect_predictions_is_100(tmp_path, dataset, capsys):
    out = tmp_path / "pred"
    for sequence in priors.read_dataset(dataset):
        for eid in sequence.expressions:
            gt = metrics.ground_truth(sequence, eid)
            records = [OutputRecord(f, i, b, 1.0) for f in sorted(gt) for i, b in gt[f]]
            path = metrics.prediction_path(out, sequence.sequence_id, eid)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(format_records(records))
    report_dir = tmp_path / "report"
    assert main(["eval", "--dataset", str(dataset), "--predictions", str(out), "--out", str(report_dir)]) == EXIT_OK
    table = capsys.readouterr().out
    aggregate = next(line for line in table.splitlines() if line.startswith("aggregate"))
    assert aggregate.split()[1:] == ["100.00"] * 8
    assert (report_dir / "report.txt").read_text() == table
    assert json.loads((report_dir / "report.jsonl").read_text().splitlines()[-1])["hota"] == pytest.approx(1.0)


def test_eval_missing_directory_is_io_error(tmp_path, dataset):
    assert main(["eval", "--dataset", str(dataset), "--predictions", str(tmp_path / "none")]) == EXIT_IO


def test_train_track_eval_pipeline(tmp_path, dataset, checkpoint, capsys):
    pred = tmp_path / "pred"
    assert main(["track", "--checkpoint", str(checkpoint), "--dataset", str(dataset), "--out", str(pred)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--dataset", str(dataset), "--predictions", str(pred)]) == EXIT_OK
    header = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("name"))
    assert header.split()[1:] == ["HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA"]


# ---- gradcheck --------------------------------------------------------------


def test_gradcheck_command_reports_every_op(capsys):
    status = main(["gradcheck", "--coords-per-param", "3"])
    out = capsys.readouterr().out
    assert status == EXIT_OK
    assert "max_rel_error=" in out and "end-to-end frame" in out
    for name in ("exp", "matmul", "softmax"):
        assert re.search(rf"PASS  {name}\s", out)


def test_gradcheck_command_fails_on_corrupted_rule(monkeypatch, capsys):
    original = T.OPS["exp"]
    monkeypatch.setitem(T.OPS, "exp", T.OpDef("exp", original.forward, lambda s, g, needs: (2.0 * g * s,)))
    status = main(["gradcheck", "--coords-per-param", "3"])
    assert status == EXIT_NUMERIC
    assert "FAIL  exp" in capsys.readouterr().out
