"""Shared trained policies and the per-criterion summary printed at the end of a run.

Desk trainings are expensive (minutes each), so each (env, seed, horizon)
combination is trained at most once per session.  Setting ``DDRL_TEST_CACHE``
to a directory also keeps the checkpoints across sessions; training is
bit-reproducible, so a cached checkpoint equals a fresh one.
"""

import hashlib
import json
import os
from dataclasses import replace
from pathlib import Path

import pytest

from ddrl.envsim import env_to_dict, lift_static, preset
from ddrl.oracle import GridSpec, dp_solve
from ddrl.policy import Architecture, load_checkpoint, save_checkpoint
from ddrl.trainer import DESK_HIDDEN, TrainConfig, train

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and report.outcome == "passed":
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    n, title = crit
    _CRITERIA.setdefault(n, (title, []))[1].append(report.outcome)


def pytest_runtest_setup(item):
    m = item.get_closest_marker("criterion")
    if m is not None:
        item.user_properties.append(("criterion", tuple(m.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[n]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {title}")


class DeskPolicies:
    """Lazily trained desk-scale policies keyed by (preset, seed, horizon, epochs).

    ``epochs`` overrides the desk default of 5 while keeping 500k samples per
    epoch, so the learning rate keeps decaying by 0.9 per extra epoch.
    """

    def __init__(self, cache_dir):
        self._mem = {}
        self._dir = Path(cache_dir) if cache_dir else None

    def __call__(self, name: str, seed: int = 0, horizon: int = 50, epochs: int | None = None):
        key = (name, seed, horizon, epochs)
        if key not in self._mem:
            self._mem[key] = self._load_or_train(name, seed, horizon, epochs)
        return self._mem[key]

    def _load_or_train(self, name, seed, horizon, epochs):
        env = preset(name)
        arch = Architecture(lift_static(env).input_dim, DESK_HIDDEN)
        cfg = TrainConfig.desk(seed=seed, horizon=horizon, log_every=0)
        if epochs is not None:
            cfg = replace(cfg, epochs=epochs)
        ident = json.dumps([env_to_dict(env), cfg.to_dict(), list(DESK_HIDDEN)], sort_keys=True)
        path = None
        if self._dir is not None:
            path = self._dir / f"{name}-s{seed}-T{horizon}-e{cfg.epochs}-{hashlib.sha256(ident.encode()).hexdigest()[:12]}.ckpt"
            if path.exists():
                return load_checkpoint(path)[0]
        params, _ = train(env, arch, cfg)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, params, {"preset": name, "seed": seed, "horizon": horizon})
        return params


@pytest.fixture(scope="session")
def desk_policy():
    return DeskPolicies(os.environ.get("DDRL_TEST_CACHE"))


@pytest.fixture(scope="session")
def mono_oracle():
    return dp_solve(preset("mono_l1"), GridSpec(), horizon=50)
