import numpy as np
import pytest

from laddernat.blocks import BlockConfig
from laddernat.models import LatentConfig, ModelBundle

TINY = BlockConfig(d_model=16, heads=2, ffn_dim=32, layers=1, dropout=0.0, max_positions=32)
TINY_LATENT = LatentConfig(t_z=4, d_z=6, rho=1.0)


def tiny_bundle(kind, seed=0, rho=1.0, vocab=20):
    lat = None if kind == "AT" else LatentConfig(TINY_LATENT.t_z, TINY_LATENT.d_z, rho)
    return ModelBundle(kind, TINY, lat, vocab, vocab, seed=seed).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------

ACCEPTANCE_LINES = {}


def pytest_runtest_logreport(report):
    crit = None
    if report.when == "call" and "test_acceptance" in report.nodeid:
        props = dict(report.user_properties)
        crit = props.get("criterion", crit)
        if crit is None and "criterion_" in report.nodeid:
            crit = int(report.nodeid.split("criterion_")[1].split("_")[0])
        if crit is not None:
            ACCEPTANCE_LINES[crit] = (report.outcome, report.nodeid.split("::")[-1], props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_LINES):
        outcome, name, detail = ACCEPTANCE_LINES[crit]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {crit}: {verdict}  {name}  {detail}".rstrip())
