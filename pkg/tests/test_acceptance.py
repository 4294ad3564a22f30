"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 7 trains the full desk-scale pipeline (roughly an hour on two CPU
cores) and caches its artifacts in the session work directory; the final
criterion reruns everything through the command-line reproduction harness
against the same cache. Set STORYDIFF_ACCEPTANCE_DIR to reuse artifacts
across sessions.
"""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from storydiff import acceptance


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    env = os.environ.get("STORYDIFF_ACCEPTANCE_DIR")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("acceptance")


def _check(result):
    print(f"criterion {result.cid}: {'PASS' if result.passed else 'FAIL'} "
          f"({result.seconds}s) - {result.description}")
    assert result.passed, result.details


def test_criterion_1_guidance_algebra():
    _check(acceptance.criterion_1())


def test_criterion_2_forward_marginal():
    _check(acceptance.criterion_2())


def test_criterion_3_ddim_inversion():
    _check(acceptance.criterion_3())


def test_criterion_4_gradient_check():
    _check(acceptance.criterion_4())


def test_criterion_5_freeze_exactness():
    _check(acceptance.criterion_5())


def test_criterion_6_context_timestep_rule():
    _check(acceptance.criterion_6())


def test_criterion_7_directional_consistency(workdir):
    _check(acceptance.criterion_7(workdir))


def test_criterion_8_alignment_oracle():
    _check(acceptance.criterion_8())


def test_criterion_9_dedup_correctness():
    _check(acceptance.criterion_9())


def test_criterion_10_frechet_metric():
    _check(acceptance.criterion_10())


def test_criterion_11_best_of_n_contract():
    _check(acceptance.criterion_11())


def test_criterion_12_repro_harness(workdir, tmp_path):
    out = tmp_path / "repro"
    proc = subprocess.run(
        [sys.executable, "-m", "storydiff.cli", "repro", "--suite", "acceptance",
         "--out", str(out), "--cache-dir", str(workdir)],
        capture_output=True, text=True)
    print(proc.stdout[-2000:])
    assert proc.returncode == 0, proc.stderr[-2000:]
    report = json.loads((out / "acceptance_report.json").read_text())
    assert report["all_passed"] is True
    assert [c["cid"] for c in report["criteria"]] == list(range(1, 12))
    print("criterion 12: PASS - repro harness ran criteria 1-11 and exited 0")
