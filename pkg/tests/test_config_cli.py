from __future__ import annotations

import json
import socket

import pytest

from pmig import cli
from pmig.bench import builtin_config
from pmig.config import load_config, parse_size, spawn_from_config
from pmig.core import Node
from pmig.errors import GuestSpecError, InvalidCombination, PortBusy, UnknownSubsystem
from pmig.guest import ResourcePolicy
from pmig.proto import Daemon, DaemonServer

CONFIG = """
[guest]
threads = 3
address_space = 64KiB
count = 2

[region:r0]
length = 8KiB
base_page = 0

[file:5]
path = /x
offset = 7
mode = rw
policy = forward

[workload]
steps = 2
write_rate = 1
seed = 9
"""


@pytest.mark.parametrize("text,value", [("4096", 4096), ("64KiB", 65536), ("1MiB", 1 << 20),
                                        ("2G", 2 << 30), (512, 512), (" 3 k ", 3072)])
def test_parse_size(text, value):
    assert parse_size(text) == value


def test_parse_size_rejects_garbage():
    with pytest.raises(GuestSpecError):
        parse_size("lots")


def test_load_config_text_and_spawn():
    cfg = load_config(CONFIG)
    assert cfg.count == 2 and (cfg.steps, cfg.write_rate, cfg.seed) == (2, 1, 9)
    assert cfg.guest.thread_count == 3
    assert cfg.guest.shared_attachments[0].page_count == 2
    assert cfg.guest.files[0].policy is ResourcePolicy.FORWARD_TO_SOURCE
    with Node("n", scanner=False) as node:
        procs = spawn_from_config(node, cfg)
        assert len(procs) == 2
        assert "r0" in node.regions
        assert procs[0].regions["r0"] is procs[1].regions["r0"]


def test_config_errors(tmp_path):
    with pytest.raises(GuestSpecError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(GuestSpecError):
        load_config("[bogus]\nx = 1\n")
    with pytest.raises(GuestSpecError):
        load_config("[guest]\ncount = 0\n")
    with pytest.raises(GuestSpecError):
        load_config("[file:1]\npolicy = teleport\n")


@pytest.mark.parametrize("name", ["fig3", "fig5", "fig6", "precopy"])
def test_builtin_configs_load(name):
    cfg = builtin_config(name)
    assert cfg.guest.page_size == 4096


@pytest.fixture
def server():
    node = Node("cli-dst")
    srv = DaemonServer(Daemon(node), port=0)
    yield srv
    srv.close()
    node.close()


def dest(srv):
    host, port = srv.endpoint
    return f"{host}:{port}"


@pytest.mark.parametrize("strategy", ["stop-and-copy", "pre-copy:3:4", "lazy"])
def test_cli_migrate(server, capsys, strategy):
    assert cli.main(["migrate", "--dest", dest(server), "--strategy", strategy, "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] and out["negotiation_msgs"] == 3


def test_cli_migrate_invalid_combination(capsys):
    code = cli.main(["migrate", "--dest", "127.0.0.1:1", "--strategy", "lazy", "--medium", "image-file"])
    assert code == cli.EXIT_INVALID_COMBINATION
    assert "InvalidCombination" in capsys.readouterr().err


def test_cli_migrate_unreachable():
    assert cli.main(["migrate", "--dest", "127.0.0.1:1"]) == cli.EXIT_CONNECT_REFUSED


def test_cli_unknown_pid(server):
    assert cli.main(["migrate", "--dest", dest(server), "--pid", "77"]) == cli.EXIT_UNKNOWN_PID


def test_cli_usage_errors():
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["migrate", "--strategy", "teleport"]) == cli.EXIT_USAGE
    assert cli.main(["spawn", "--modules", "cpu,gpu"]) == cli.EXIT_UNKNOWN_MODULE


def test_cli_status(server, capsys):
    cli.main(["migrate", "--dest", dest(server)])
    capsys.readouterr()
    assert cli.main(["status", "--dest", dest(server)]) == 0
    status = json.loads(capsys.readouterr().out)
    assert len(status["batches"]) == 1


def test_cli_spawn(capsys, tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(CONFIG)
    assert cli.main(["spawn", "--config", str(path), "--json"]) == 0
    assert len(json.loads(capsys.readouterr().out)["processes"]) == 2


def test_cli_checkpoint_restart(tmp_path, capsys):
    img = tmp_path / "p.img"
    assert cli.main(["checkpoint", "--image", str(img), "--json"]) == 0
    [row] = json.loads(capsys.readouterr().out)["images"]
    assert cli.main(["restart", "--image", str(img), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["digest"] == row["digest"]
    img.write_bytes(img.read_bytes()[:-100])
    assert cli.main(["restart", "--image", str(img)]) == cli.EXIT_TRUNCATED


def test_cli_checkpoint_corrupt_image(tmp_path):
    img = tmp_path / "p.img"
    cli.main(["checkpoint", "--image", str(img)])
    data = bytearray(img.read_bytes())
    data[len(data) // 2] ^= 0xFF
    img.write_bytes(bytes(data))
    assert cli.main(["restart", "--image", str(img)]) == cli.EXIT_CHECKSUM


def test_cli_restart_missing_module(tmp_path):
    img = tmp_path / "c.img"
    assert cli.main(["checkpoint", "--modules", "cpu,mem,file,counter", "--image", str(img)]) == 0
    assert cli.main(["restart", "--image", str(img)]) == cli.EXIT_UNKNOWN_SUBSYSTEM


def test_cli_port_busy():
    with socket.create_server(("127.0.0.1", 0)) as taken:
        port = taken.getsockname()[1]
        assert cli.main(["daemon", "--port", str(port), "--max-seconds", "0.1"]) == cli.EXIT_PORT_BUSY


def test_cli_daemon_runs_briefly(capsys):
    assert cli.main(["daemon", "--port", "0", "--max-seconds", "0.1"]) == 0
    assert "listening on" in capsys.readouterr().out


def test_exit_code_mapping():
    assert cli.exit_code_for(InvalidCombination("x")) == cli.EXIT_INVALID_COMBINATION
    assert cli.exit_code_for(PortBusy("x")) == cli.EXIT_PORT_BUSY
    assert cli.exit_code_for(UnknownSubsystem("gpu")) == cli.EXIT_UNKNOWN_SUBSYSTEM
    assert cli.exit_code_for(RuntimeError()) == cli.EXIT_ERROR


def test_cli_bench_to_file(tmp_path):
    out = tmp_path / "b.csv"
    assert cli.main(["bench", "fig5", "--points", "1,2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("scenario,n_processes,address_space_bytes,strategy,latency")
    assert len(lines) == 3
