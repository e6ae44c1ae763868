import json

import numpy as np
import pytest

from persona_probe import runner as R
from persona_probe.client import Refusal, ScriptedRespondent, TransportError

GRID = dict(id="t", questionnaire="pvq", permutations=3, respondent={"policy": "random", "seed": 1}, workers=3)


def config(**kw):
    return R.ExperimentConfig(**{**GRID, **kw})


class Crash(BaseException):
    pass


class CrashAfter:
    """Wraps a respondent and dies hard after ``n`` calls."""

    def __init__(self, inner, n):
        self.inner, self.n, self.calls = inner, n, 0

    def select(self, bundle):
        self.calls += 1
        if self.calls > self.n:
            raise Crash()
        return self.inner.select(bundle)


def test_task_counts():
    cfg = config(perspectives="default", permutations=50)
    assert len(R.expand_grid(cfg)) == 1 * 4 * 1 * 50 * 40
    cfg = config(contexts=["none", "format/latex"], induction_variants="all", permutations=2)
    assert len(R.expand_grid(cfg)) == 2 * 4 * 4 * 2 * 40
    cfg = config(perspectives="none", contexts=["none", "wiki/jazz"], induction_variants="all")
    tasks = R.expand_grid(cfg)
    assert len(tasks) == 2 * 1 * 1 * 3 * 40
    assert {t.variant for t in tasks} == {"none"}


def test_task_order_and_ids():
    tasks = R.expand_grid(config(permutations=2))
    assert tasks[0].task_id == "none|openness_to_change|system/2nd|r000|" + tasks[0].item_id
    assert [t.index for t in tasks] == list(range(len(tasks)))
    assert tasks[40].permutation == 1 and tasks[80].perspective != tasks[0].perspective
    assert len({t.task_id for t in tasks}) == len(tasks)


def test_config_validation(tmp_path):
    with pytest.raises(R.ConfigError, match="exactly one"):
        R.ExperimentConfig(id="x", questionnaire="pvq")
    with pytest.raises(R.ConfigError, match="unknown config"):
        R.ExperimentConfig.from_mapping({**GRID, "colour": "red"})
    with pytest.raises(R.ConfigError, match="variants"):
        config(induction_variants=["system/4th"])
    with pytest.raises(R.ConfigError, match="questionnaire"):
        config(questionnaire="nope").load_questionnaire()
    path = tmp_path / "c.yaml"
    path.write_text("id: y\nquestionnaire: vsm\nrespondent: {policy: first}\npermutations: 2\n", encoding="utf-8")
    cfg = R.ExperimentConfig.load(path)
    assert cfg.questionnaire == "vsm" and cfg.digest() == R.ExperimentConfig.load(path).digest()


def test_custom_perspectives():
    cfg = config(perspectives=[{"targets": {"power": "high"}, "label": "pow"}, {"text": "You are a cat.",
                                                                              "label": "cat"}, "none"])
    q = cfg.load_questionnaire()
    assert [p.label for p in cfg.perspective_specs(q)] == ["pow", "cat", "none"]
    with pytest.raises(R.ConfigError, match="unknown target"):
        config(perspectives=[{"targets": {"wealth": "high"}}]).perspective_specs(q)


def run(tmp_path, name="a", respondent=None, **kw):
    exp = R.Experiment(config(**kw), tmp_path / name, respondent=respondent)
    exp.execute()
    return exp


def test_runs_are_deterministic(tmp_path):
    a = run(tmp_path, "a")
    b = run(tmp_path, "b", workers=1)
    ra = (a.root / "ledger" / "records.jsonl").read_bytes()
    assert ra == (b.root / "ledger" / "records.jsonl").read_bytes()
    assert len(ra.splitlines()) == 4 * 3 * 40
    ta, tb = a.save_tensors()["system/2nd"], b.save_tensors()["system/2nd"]
    assert np.array_equal(ta.raw, tb.raw)
    for ext in ("tsv", "json"):
        assert (a.root / "tensors" / f"system-2nd.{ext}").read_bytes() == \
               (b.root / "tensors" / f"system-2nd.{ext}").read_bytes()


def test_crash_and_resume_matches_clean_run(tmp_path):
    clean = run(tmp_path, "clean")
    cfg = config()
    total = len(R.expand_grid(cfg))
    inner = R.scripted_from_config(cfg.respondent, cfg.load_questionnaire())
    crashed = R.Experiment(cfg, tmp_path / "crash", respondent=CrashAfter(inner, total // 2))
    with pytest.raises(Crash):
        crashed.execute()
    records = crashed.root / "ledger" / "records.jsonl"
    done = len(records.read_bytes().splitlines())
    assert 0 < done <= total // 2
    # Simulate a torn final write as well.
    with open(records, "ab") as fh:
        fh.write(b'{"task": "half')
    resumed = R.Experiment.resume(cfg.id, tmp_path / "crash")
    assert resumed.status()["DONE"] == done
    resumed.execute()
    assert records.read_bytes() == (clean.root / "ledger" / "records.jsonl").read_bytes()


def test_resume_of_finished_run_is_a_noop(tmp_path):
    exp = run(tmp_path)
    before = (exp.root / "ledger" / "records.jsonl").read_bytes()
    again = R.Experiment.resume("t", tmp_path / "a")
    assert again.execute()["DONE"] == len(exp.tasks)
    assert (exp.root / "ledger" / "records.jsonl").read_bytes() == before


def test_config_tamper_detected(tmp_path):
    exp = run(tmp_path)
    with pytest.raises(R.LedgerError, match="digest mismatch"):
        R.Experiment(config(seed=99), tmp_path / "a")
    path = exp.root / "ledger" / "config.json"
    doc = json.loads(path.read_text())
    doc["config"]["seed"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(R.LedgerError, match="modified"):
        R.Experiment.resume("t", tmp_path / "a")


def test_fixed_option_policy_gives_constant_scores(tmp_path):
    cfg = config(respondent={"policy": "option", "value": 6})
    exp = R.Experiment(cfg, tmp_path / "o")
    exp.execute()
    t = exp.assemble()["system/2nd"]
    assert np.all(t.raw == 6.0) and np.all(t.normalized == 1.0)


class Flaky:
    """Refuses on one item, fails on another, answers the rest."""

    def __init__(self, refuse_item, fail_item):
        self.inner = ScriptedRespondent.first()
        self.refuse_item, self.fail_item = refuse_item, fail_item
        self.calls = []

    def select(self, bundle):
        self.calls.append(bundle.meta["task_id"])
        if bundle.meta["item_id"] == self.refuse_item and bundle.meta["permutation"] == 1:
            raise Refusal("no", b"I will not", None)
        if bundle.meta["item_id"] == self.fail_item and bundle.meta["permutation"] == 2:
            raise TransportError("down")
        return self.inner.select(bundle)


def test_refusals_and_failures(tmp_path):
    cfg = config(perspectives=[{"targets": {"power": "high"}, "label": "pow"}], retry_budget=2,
                 max_consecutive_failures=1000)
    flaky = Flaky("pvq05", "pvq07")
    exp = R.Experiment(cfg, tmp_path / "f", respondent=flaky)
    counts = exp.execute()
    assert counts == {"PENDING": 0, "DONE": 118, "FAILED": 1, "REFUSED": 1}
    t = exp.assemble()["system/2nd"]
    assert np.isnan(t.raw[0, 0, 1]).all() and np.isnan(t.raw[0, 0, 2]).all()
    assert not np.isnan(t.raw[0, 0, 0]).any()
    assert [e["permutation"] for e in t.meta["excluded"]] == [1, 2]
    with pytest.raises(R.LedgerError, match="non-DONE"):
        exp.assemble(exclude=False)
    # FAILED is retried within the budget; REFUSED never is.
    for _ in range(4):
        flaky.calls.clear()
        exp.execute()
    assert exp.ledger.attempts["none|pow|system/2nd|r002|pvq07"] == 3
    assert exp.ledger.attempts["none|pow|system/2nd|r001|pvq05"] == 1
    assert flaky.calls == []


def test_consecutive_failures_abort(tmp_path):
    class Down:
        def select(self, bundle):
            raise TransportError("down")

    exp = R.Experiment(config(max_consecutive_failures=5, workers=1), tmp_path / "d", respondent=Down())
    with pytest.raises(R.RunAborted):
        exp.execute()
    assert exp.status()["FAILED"] == 5


def test_unsupported_system_role_drops_variants(tmp_path):
    cfg = config(induction_variants="all", respondent={"policy": "first", "supports_system_role": False})
    assert cfg.variants() == ["user/2nd", "user/3rd"]
    assert cfg.unsupported_variants() == ["system/2nd", "system/3rd"]
    exp = R.Experiment(cfg, tmp_path / "u")
    exp.execute()
    assert sorted(exp.assemble()) == ["user/2nd", "user/3rd"]


def test_pending_cells_raise(tmp_path):
    exp = R.Experiment(config(), tmp_path / "p")
    exp.execute(limit=10)
    with pytest.raises(R.LedgerError, match="pending"):
        exp.assemble()


def test_tensor_meta(tmp_path):
    t = run(tmp_path).assemble()["system/2nd"]
    assert t.meta["targets"]["self_enhancement"] == ["achievement", "power"]
    assert t.meta["config_digest"] == config().digest()
    assert t.raw.shape == (1, 4, 3, 10)
