import subprocess
import sys

import numpy as np
import pytest

from flamegaze import cli
from flamegaze.cli import CONFIG_KEYS, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main, parse_config_text, resolve_config
from flamegaze.model import ConfigError
from flamegaze.trainer import read_history, read_report

TINY = ["--preset", "tiny", "--resolution", "30", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "30", "--seed", "7", "--subjects", "10", "--out", str(d)]) == EXIT_OK
    return d


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_counts_and_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--n", "12", "--seed", "7", "--out", str(a)]) == EXIT_OK
    assert "wrote 12 records" in capsys.readouterr().out
    assert main(["synth", "--n", "12", "--seed", "7", "--out", str(b)]) == EXIT_OK
    assert len((a / "manifest.tsv").read_text().splitlines()) == 13
    assert len(list((a / "landmarks").glob("*.json"))) == 12
    assert tree_bytes(a) == tree_bytes(b)


def test_synth_noise_changes_landmark_files(tmp_path):
    main(["synth", "--n", "4", "--seed", "7", "--out", str(tmp_path / "a")])
    main(["synth", "--n", "4", "--seed", "7", "--noise", "0.5", "--out", str(tmp_path / "b")])
    for f in sorted((tmp_path / "a" / "landmarks").glob("*.json")):
        assert f.read_bytes() != (tmp_path / "b" / "landmarks" / f.name).read_bytes()


def test_train_writes_history_lines_and_is_idempotent(dataset, tmp_path, capsys):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        code = main(["train", "--data", str(dataset), "--variant", "F_B", "--epochs", "3", *TINY, "--out", str(out)])
        assert code == EXIT_OK
        outs.append(out)
    assert len(read_history(outs[0] / "history.tsv")) == 3
    assert "epoch" in capsys.readouterr().out
    for name in ("checkpoint_final.ckpt", "checkpoint_best.ckpt", "predictions.tsv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_round_trip(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--variant", "F_B", "--epochs", "1", *TINY, "--out", str(out)]) == 0
    pred = tmp_path / "eval.tsv"
    code = main(["eval", "--checkpoint", str(out / "checkpoint_final.ckpt"), "--data", str(dataset), "--out", str(pred)])
    assert code == EXIT_OK
    assert "F_B: mean" in capsys.readouterr().out
    assert pred.read_bytes() == (out / "predictions.tsv").read_bytes()


def test_gradcheck_prints_pass(capsys):
    assert main(["gradcheck", "--preset", "tiny", "--variant", "F_B"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max rel error" in out and out.strip().endswith("PASS")


def test_gradcheck_fail_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "GRADCHECK_TOL", 0.0)
    assert main(["gradcheck", "--variant", "F_B"]) == EXIT_RUNTIME
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_ablate_writes_reference_columns(dataset, tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--data", str(dataset), "--epochs", "1", *TINY, "--variants", "F_B,F_AF", "--out", str(out)])
    assert code == EXIT_OK
    rows = read_report(out / "ablation.tsv")
    assert [r["variant"] for r in rows] == ["F_B", "F_AF"]
    assert rows[0]["paper_columbiagaze_mean"] == "5.93" and rows[1]["paper_eyediap_std"] == "3.03"


def test_resolution_command(dataset, tmp_path):
    out = tmp_path / "res"
    code = main(["resolution", "--data", str(dataset), "--epochs", "1", "--preset", "tiny", "--variant", "F_B",
                 "--resolutions", "60", "30", "--out", str(out)])
    assert code == EXIT_OK
    assert [r["resolution"] for r in read_report(out / "resolution.tsv")] == ["60", "30"]


def test_plot_single_epoch_history_and_predictions(dataset, tmp_path):
    run = tmp_path / "run"
    main(["train", "--data", str(dataset), "--variant", "F_B", "--epochs", "1", *TINY, "--out", str(run)])
    figs = tmp_path / "figs"
    assert main(["plot", str(run), "--out", str(figs)]) == EXIT_OK
    names = sorted(p.name for p in figs.glob("*.png"))
    assert names == ["error_boxes.png", "error_histogram.png", "history_run.png", "pred_vs_truth_run.png"]
    assert all(p.stat().st_size > 1000 for p in figs.glob("*.png"))


def test_plot_parse_error_names_file_and_line(tmp_path, capsys):
    bad = tmp_path / "history.tsv"
    bad.write_text("epoch\tlr\ttrain_loss\tval_mean_deg\tval_std_deg\twall_seconds\n0\tx\t1\t1\t1\t1\n")
    assert main(["plot", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "history.tsv:2" in capsys.readouterr().err


def test_unknown_config_key_exits_1(dataset, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 2\nlearning_rate = 0.1\n")
    code = main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_INVALID
    err = capsys.readouterr().err
    assert "learning_rate" in err and "run.cfg:2" in err and "Traceback" not in err


def test_bad_arguments_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "two", "--data", "x", "--out", "y"])
    assert exc.value.code == EXIT_INVALID


def test_missing_dataset_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_diverged_training_exits_2(dataset, tmp_path, monkeypatch):
    from flamegaze import trainer

    monkeypatch.setattr(trainer, "vector_loss_grad_angles", lambda p, t: (float("nan"), np.zeros_like(p)))
    code = main(["train", "--data", str(dataset), "--epochs", "1", *TINY, "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME


class Args:
    def __init__(self, **kw):
        self.__dict__.update(kw)


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nseed = 5\nepochs = 7\nbatch_size = 4\nsplit_ratios = 6 2 2\n")
    monkeypatch.setenv("FLAME_SEED", "3")
    c, split = resolve_config(Args())
    assert c.seed == 3
    c, split = resolve_config(Args(config=str(cfg)))
    assert (c.seed, c.epochs, c.batch_size, split.ratios) == (5, 7, 4, (6, 2, 2))
    c, _ = resolve_config(Args(config=str(cfg), set=["epochs=9"]))
    assert c.epochs == 9
    c, _ = resolve_config(Args(config=str(cfg), set=["epochs=9"], epochs=11, seed=1))
    assert (c.epochs, c.seed) == (11, 1)


def test_flame_seed_must_be_integer(monkeypatch):
    monkeypatch.setenv("FLAME_SEED", "abc")
    with pytest.raises(ConfigError):
        resolve_config(Args())


def test_config_value_errors():
    with pytest.raises(ConfigError, match="<config>:1"):
        parse_config_text("epochs = many")
    with pytest.raises(ConfigError):
        parse_config_text("deterministic = maybe")
    with pytest.raises(ConfigError):
        parse_config_text("just words")
    assert parse_config_text("deterministic = off\nlr_milestones = 1,2,3") == {
        "deterministic": False,
        "lr_milestones": (1, 2, 3),
    }


@pytest.mark.parametrize("command", ["train", "ablate", "resolution"])
def test_help_lists_every_config_key(command, capsys):
    with pytest.raises(SystemExit):
        main([command, "--help"])
    out = capsys.readouterr().out
    for key in CONFIG_KEYS:
        assert f"  {key} = " in out


def test_eval_help_lists_its_keys(capsys):
    with pytest.raises(SystemExit):
        main(["eval", "--help"])
    out = capsys.readouterr().out
    for key in ("split_seed", "split_ratios", "eval_eye"):
        assert key in out


def test_console_script_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "flamegaze.cli", "synth", "--n", "2", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert res.returncode == 0 and "wrote 2 records" in res.stdout
    res = subprocess.run([sys.executable, "-m", "flamegaze.cli", "bogus"], capture_output=True, text=True)
    assert res.returncode == EXIT_INVALID
