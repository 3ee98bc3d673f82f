import pytest
import torch

from hybrid_ssm.model import preset

torch.set_num_threads(1)


def small_config(name="tiny-7b-style", **overrides):
    base = dict(d_model=32, n_mamba_layers=4, attn_every=2, attn_heads=2,
                ssm={"n_heads": 2, "d_state": 8, "chunk_len": 8}, max_seq_len=256)
    base.update(overrides)
    return preset(name, **base)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def small_cfg64():
    return small_config(dtype="f64")


def pytest_terminal_summary(terminalreporter):
    lines = [value for report in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
             for key, value in getattr(report, "user_properties", ()) if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
