import sys
from pathlib import Path

import numpy as np
import pytest

from utune import tensor as tn
from utune.cli import main


@pytest.fixture(autouse=True)
def _restore_precision():
    before = tn.get_dtype()
    yield
    tn.set_precision("f64" if before == np.float64 else "f32")


@pytest.fixture(scope="session")
def pretrained_checkpoint(tmp_path_factory) -> Path:
    """Desk backbone pretrained for 5 epochs (seed 0, f32), saved as a named-tensor file."""
    out = tmp_path_factory.mktemp("pretrained")
    code = main(["pretrain", "--out", str(out), "--precision", "f32", "--seed", "0", "--pretrain-epochs", "5"])
    assert code == 0
    return out / "backbone.utnt"


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
