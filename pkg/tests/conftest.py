"""Shared trained models.

Training at the desk preset takes several minutes per model, so checkpoints are
kept under pytest's cache directory, keyed by a hash of the training config.
``pytest --cache-clear`` retrains from scratch.
"""

import hashlib
import json
import time

import pytest

from cdmatch import harness as H
from cdmatch.nets import load_json


def _key(cfg: H.ExperimentConfig, parts: tuple[str, ...]) -> str:
    blob = json.dumps({p: cfg.model_dump()[p] for p in parts}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class ModelStore:
    def __init__(self, root):
        base = H.load_config(setting="2D", scale="desk", seed=0)
        key = _key(base, ("setting", "seed", "normalizer_n", "schedule", "uncond", "cond", "cm", "x0_clip", "sweep"))
        self.cfg = base.model_copy(update={"out": str(root / f"2D-{key}")})
        self.train_seconds: dict[str, float] = {}

    def path(self, name: str):
        p = self.cfg.checkpoint(name)
        if not p.exists():
            train = {"uncond": H.train_uncond, "cond": H.train_cond, "cm": H.train_cm,
                     "sweep_prior": H.train_sweep_prior}[name]
            t0 = time.perf_counter()
            train(self.cfg)
            self.train_seconds[name] = time.perf_counter() - t0
        return p

    def load(self, name: str):
        kind = "ict" if name == "cm" else "ddpm"
        return H._load_model(self.path(name), kind)

    def raw(self, name: str) -> dict:
        return load_json(self.path(name))


@pytest.fixture(scope="session")
def models(request) -> ModelStore:
    return ModelStore(request.config.cache.mkdir("cdmatch-models"))


# ---- acceptance criteria: one pass/fail line each at the end of the run

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "detail": []})
    if rep.failed:
        entry["ok"] = False
        msg = str(rep.longrepr.reprcrash.message) if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry["detail"].append(msg.splitlines()[0][:160])
    for name, text in rep.user_properties:
        if name == "detail":
            entry["detail"].append(text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))
