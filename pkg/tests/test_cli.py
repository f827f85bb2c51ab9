import time

import pytest

from graphinfer.cli import main
from graphinfer.dataio import save_dataset
from graphinfer.toys import toy_bundle


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy"
    bundle = toy_bundle(classes=3, per_class=4, seed=2, train_per_class=2,
                        val_per_class=1)
    save_dataset(bundle, path)
    return path


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.txt"
    path.write_text(
        "pretrain_iters=10\nmeta_iters=20\nbatch_size=6\nwidths=6,5\n"
        "dropout=0.2\nd_p_override=2\neval_every=10\n"
    )
    return path


def test_train_smoke_writes_outputs(toy_dir, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    started = time.perf_counter()
    code = main([
        "train", "--dataset", str(toy_dir), "--config", str(config_file),
        "--out", str(out), "--seed", "3",
    ])
    elapsed = time.perf_counter() - started
    assert code == 0
    assert elapsed < 5.0
    for fname in ("checkpoint.bin", "metrics.tsv", "results.tsv", "config.txt"):
        assert (out / fname).is_file()
    assert "test_accuracy=" in capsys.readouterr().out


def test_missing_dataset_exits_2(capsys):
    code = main(["train", "--dataset", "/nonexistent/ds", "--out", "/tmp/x"])
    assert code == 2
    assert "/nonexistent/ds" in capsys.readouterr().err


def test_unknown_flag_exits_2(toy_dir):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--dataset", str(toy_dir), "--out", "/tmp/x", "--bogus"])
    assert exc.value.code == 2


def test_config_echo_reproduces_run(toy_dir, config_file, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(out1), "--seed", "5"]) == 0
    # re-run from the echoed config alone
    assert main(["train", "--dataset", str(toy_dir), "--config",
                 str(out1 / "config.txt"), "--out", str(out2)]) == 0
    assert (out1 / "metrics.tsv").read_text() != ""
    r1 = (out1 / "results.tsv").read_text()
    r2 = (out2 / "results.tsv").read_text()
    assert r1 == r2
    assert (out1 / "checkpoint.bin").read_bytes() == (out2 / "checkpoint.bin").read_bytes()


def test_eval_and_steps_from_checkpoint(toy_dir, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(out)]) == 0
    trained = capsys.readouterr().out

    assert main(["eval", "--dataset", str(toy_dir), "--checkpoint",
                 str(out / "checkpoint.bin")]) == 0
    evaluated = capsys.readouterr().out
    acc_train = trained.split("test_accuracy=")[1].split()[0]
    acc_eval = evaluated.split("test_accuracy=")[1].split()[0]
    assert float(acc_eval) == pytest.approx(float(acc_train), abs=1e-4)

    assert main(["steps", "--dataset", str(toy_dir), "--checkpoint",
                 str(out / "checkpoint.bin")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "bucket\tcount\tcumulative_accuracy"
    counts = [int(line.split("\t")[1]) for line in lines[1:]]
    assert counts == sorted(counts)  # cumulative counts never decrease
    assert lines[-1].startswith("inf\t")


def test_checkpoint_config_mismatch_rejected(toy_dir, config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(out)]) == 0
    capsys.readouterr()
    code = main([
        "eval", "--dataset", str(toy_dir),
        "--checkpoint", str(out / "checkpoint.bin"),
        "--config", str(config_file), "--seed", "999",
    ])
    assert code == 2
    assert "config" in capsys.readouterr().err


def test_ablate_variant(toy_dir, config_file, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(out), "--variant", "fe_only"]) == 0
    results = (out / "results.tsv").read_text()
    assert "config\tvariant\tfe_only" in results


def test_unknown_variant_exits_2(toy_dir, config_file, tmp_path, capsys):
    code = main(["ablate", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(tmp_path / "x"),
                 "--variant", "bogus"])
    assert code == 2
    assert "full" in capsys.readouterr().err


def test_label_sweep_two_rates(toy_dir, config_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    code = main([
        "label-sweep", "--dataset", str(toy_dir), "--config", str(config_file),
        "--out", str(out), "--rates", f"{3/12},{6/12}",
    ])
    assert code == 0
    rows = (out / "sweep.tsv").read_text().strip().splitlines()
    assert len(rows) == 3  # header + 2 rates
    labeled = [int(r.split("\t")[1]) for r in rows[1:]]
    assert labeled[0] < labeled[1]  # reference count grows with rate


def test_label_sweep_parallel_matches_serial(toy_dir, config_file, tmp_path):
    serial, parallel = tmp_path / "s", tmp_path / "p"
    args = ["label-sweep", "--dataset", str(toy_dir), "--config",
            str(config_file), "--rates", f"{3/12},{6/12}"]
    assert main(args + ["--out", str(serial)]) == 0
    assert main(args + ["--out", str(parallel), "--jobs", "2"]) == 0
    assert (serial / "sweep.tsv").read_text() == (parallel / "sweep.tsv").read_text()


def test_meta_grad_flag_echoed(toy_dir, config_file, tmp_path):
    out = tmp_path / "full"
    assert main(["train", "--dataset", str(toy_dir), "--config",
                 str(config_file), "--out", str(out), "--meta-grad", "full"]) == 0
    assert "meta_grad_mode=full" in (out / "config.txt").read_text()


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_oracle_tests_command(capsys):
    assert main(["oracle-tests"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    assert "FAIL" not in out
