import json
import socket
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from fedretina import __version__
from fedretina.cli import build_parser, main
from fedretina.data_utils import ingest
from fedretina.image_utils import psnr

TINY_INI = """\
[experiment]
seed = 3
crossval_folds = 2
crossval_depths = 0

[model]
depth = 1
image_size = 32

[train]
epochs = 2
batch_size = 8
lr_halving_patience = 1
early_stop_patience = 2
federated_lr_halving_patience = 1

[federation]
max_rounds = 2

[independent_test]
size = 10

[institution:H1]
per_class = 8
local_epochs = 1

[institution:H2]
per_class = 8
local_epochs = 1
degrade = 40:60
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as info:
        main(["train-everything"])
    assert info.value.code == 2


def test_common_flags_on_every_subcommand():
    parser = build_parser()
    for command in ("gen-data", "train-local", "federate", "experiment1", "experiment2", "crossval", "report"):
        args = parser.parse_args([command, "--seed", "5", "--out", "x", "-vv"])
        assert (args.seed, args.out, args.verbose) == (5, "x", 2)


def test_gen_data_rejects_empty_classes(tmp_path, capsys):
    assert main(["gen-data", "--per-class", "0", "--out", str(tmp_path / "data")]) == 2
    assert "per_class" in capsys.readouterr().err


def test_gen_data_writes_splits(tmp_path, capsys):
    out = tmp_path / "data"
    code = main(["gen-data", "--institutions", "2", "--per-class", "10", "--image-size", "32",
                 "--degrade-last", "30:50", "--out", str(out), "--seed", "2"])
    assert code == 0
    for site in ("H1", "H2"):
        for part in ("train", "validation", "test"):
            assert (out / site / part / "labels.csv").exists()
    assert (out / "independent_test" / "labels.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["institution:H2"]["degrade"] == "30:50"
    assert "H1" in capsys.readouterr().out


def gen_data(out, *extra):
    return main(["gen-data", "--institutions", "2", "--per-class", "10", "--image-size", "32",
                 "--seed", "4", "--out", str(out), *extra])


def data_files(root):
    return {path.relative_to(root): path.read_bytes() for path in sorted(root.rglob("*"))
            if path.is_file() and path.name != "manifest.json"}


def test_gen_data_reruns_are_byte_identical(tmp_path):
    assert gen_data(tmp_path / "a") == 0
    assert gen_data(tmp_path / "b") == 0
    first, second = data_files(tmp_path / "a"), data_files(tmp_path / "b")
    assert len(first) > 50
    assert first == second


def test_degrade_last_changes_only_the_last_institution(tmp_path):
    assert gen_data(tmp_path / "clean", "--degrade-last", "100:100") == 0
    assert gen_data(tmp_path / "poor", "--degrade-last", "5:10") == 0
    clean, poor = tmp_path / "clean", tmp_path / "poor"
    assert data_files(clean / "H1") == data_files(poor / "H1")
    assert (clean / "H2" / "train" / "labels.csv").read_text() == (poor / "H2" / "train" / "labels.csv").read_text()
    sharp = ingest(clean / "H2" / "train", image_size=32).pixels
    blurred = ingest(poor / "H2" / "train", image_size=32).pixels
    assert np.mean([psnr(a, b) for a, b in zip(sharp, blurred)]) < 40.0


def test_bad_degrade_range(tmp_path):
    assert main(["gen-data", "--degrade-last", "90:10", "--out", str(tmp_path)]) == 2


def test_missing_config(tmp_path, capsys):
    assert main(["federate", "--config", str(tmp_path / "absent.ini")]) == 2
    assert "does not exist" in capsys.readouterr().err


def test_unknown_institution(tiny_ini, tmp_path):
    assert main(["train-local", "--config", str(tiny_ini), "--institution", "H9",
                 "--out", str(tmp_path / "r")]) == 2


def test_experiment2_without_checkpoints(tiny_ini, tmp_path, capsys):
    assert main(["experiment2", "--config", str(tiny_ini), "--out", str(tmp_path / "r")]) == 2
    assert "experiment1" in capsys.readouterr().err


def test_report_without_reports(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_client_needs_known_id(tiny_ini):
    assert main(["client", "--config", str(tiny_ini), "--client-id", "H7"]) == 2


def test_serve_rejects_bad_address(tiny_ini):
    assert main(["serve", "--config", str(tiny_ini), "--bind", "localhost"]) == 2


@pytest.mark.slow
def test_full_run(tiny_ini, tmp_path, capsys):
    out = tmp_path / "results"
    common = ["--config", str(tiny_ini), "--out", str(out)]
    assert main(["experiment1", *common, "--max-rounds", "1"]) == 0
    assert main(["experiment2", *common]) == 0
    assert main(["crossval", *common]) == 0
    assert main(["evaluate", *common, "--test-set", "H2"]) == 0
    assert main(["report", *common]) == 0
    printed = capsys.readouterr().out
    assert "reports agree" in printed
    assert (out / "evaluation_federated_H2.json").exists()
    assert json.loads((out / "manifest.json").read_text())["command"] == "crossval"
    assert Path(out / "rounds.csv").read_text().count("\n") == 2
    assert json.loads((out / "evaluation_federated_H2.json").read_text())["n_samples"] > 0


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_for_listener(port, timeout=120.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=1.0).close()
            return
        except OSError:
            time.sleep(0.2)
    raise AssertionError(f"nothing listening on port {port}")


@pytest.mark.slow
def test_serve_and_clients_match_federate(tiny_ini, tmp_path, capsys):
    port = free_port()
    address = f"127.0.0.1:{port}"
    served, local = tmp_path / "served", tmp_path / "local"
    common = ["--config", str(tiny_ini), "--max-rounds", "1"]
    with ThreadPoolExecutor(max_workers=3) as pool:
        server = pool.submit(main, ["serve", *common, "--out", str(served), "--bind", address])
        wait_for_listener(port)
        clients = [pool.submit(main, ["client", *common, "--server", address, "--client-id", name])
                   for name in ("H1", "H2")]
        assert [client.result(timeout=600) for client in clients] == [0, 0]
        assert server.result(timeout=600) == 0
    assert main(["federate", *common, "--out", str(local)]) == 0

    printed = capsys.readouterr().out
    assert "H1: served 1 rounds" in printed
    assert "H2: served 1 rounds" in printed
    assert f"listening on 127.0.0.1:{port}" in printed
    assert (served / "rounds.csv").read_text().count("\n") == 2
    assert ((served / "checkpoints" / "federated.fdck").read_bytes()
            == (local / "checkpoints" / "federated.fdck").read_bytes())
    assert json.loads((served / "manifest.json").read_text())["command"] == "serve"
