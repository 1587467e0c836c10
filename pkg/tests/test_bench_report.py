import json

import pytest

from sparserl.bench import aggregate, arm_id, plan, prepare, run_benchmark
from sparserl.config import loads
from sparserl.errors import DataError
from sparserl.report import build_tables, load_bundle, tables_text, write_report

from conftest import TINY_BENCH, bundle_bytes


def arm(method, seed, scores, dataset="d", status="ok"):
    return {"arm": arm_id(method, dataset, seed), "method": method, "dataset": dataset, "seed": seed,
            "status": status, "param_count": 10, "error": None if status == "ok" else "boom",
            "evals": [{"epoch": 10 * (i + 1), "score": s} for i, s in enumerate(scores)]}


def manifest(methods, regime="sparse", datasets=("d",)):
    return {"methods": list(methods), "seeds": [0, 1], "datasets": {d: {"regime": regime} for d in datasets}}


def test_single_seed_cell():
    cells = aggregate([arm("bc", 0, [0.2, 0.6, 0.4])], {"d": "sparse"})
    cell = cells["d/bc"]
    assert cell["single_seed"] and cell["seeds"] == [0]
    assert all(p["std"] == 0.0 for p in cell["curve"])
    assert cell["best"] == {"mean": 0.6, "std": 0.0, "epoch": 20}
    assert cell["final"]["mean"] == 0.4 and cell["headline"] == cell["best"]
    table = build_tables(manifest(["bc"]), cells, [])[0]
    assert "(1 seed)" in tables_text([table])


def test_two_seed_mean_between_curves():
    cells = aggregate([arm("bc", 0, [0.2, 0.8]), arm("bc", 1, [0.4, 0.6])], {"d": "sparsified"})
    cell = cells["d/bc"]
    assert not cell["single_seed"]
    assert [p["mean"] for p in cell["curve"]] == pytest.approx([0.3, 0.7], abs=1e-15)
    assert [p["std"] for p in cell["curve"]] == pytest.approx([0.1, 0.1], abs=1e-15)
    assert cell["headline"] == cell["final"]


def test_best_series_is_running_max():
    cells = aggregate([arm("dt", 0, [0.5, 0.3, 0.9, 0.1])], {"d": "sparse"})
    assert [p["best"] for p in cells["d/dt"]["curve"]] == [0.5, 0.5, 0.9, 0.9]


def test_aggregation_independent_of_arm_order():
    arms = [arm("bc", s, [0.1 * s, 0.3, 0.1 + s / 7]) for s in range(5)]
    a = aggregate(arms, {"d": "sparse"})
    b = aggregate(list(reversed([dict(x) for x in arms])), {"d": "sparse"})
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_ties_are_all_bolded():
    arms = [arm("bc", 0, [0.5]), arm("fbc", 0, [0.9]), arm("dt", 0, [0.9]), arm("fdt", 0, [0.8999])]
    tables = build_tables(manifest(["bc", "fbc", "dt", "fdt"]), aggregate(arms, {"d": "sparse"}), arms)
    bold = {m: c["bold"] for m, c in tables[0]["rows"][0]["cells"].items()}
    assert bold == {"bc": False, "fbc": True, "dt": True, "fdt": True}


def test_average_row_with_several_datasets():
    arms = [arm("bc", 0, [0.2], "a"), arm("bc", 0, [0.6], "b")]
    tables = build_tables(manifest(["bc"], datasets=("a", "b")), aggregate(arms, {"a": "sparse", "b": "sparse"}), arms)
    rows = tables[0]["rows"]
    assert [r["dataset"] for r in rows] == ["a", "b", "average"]
    assert rows[-1]["cells"]["bc"]["mean"] == pytest.approx(0.4)


def test_failed_seeds_are_recorded():
    arms = [arm("bc", 0, [0.5]), arm("bc", 1, [], status="failed")]
    tables = build_tables(manifest(["bc"]), aggregate(arms, {"d": "sparse"}), arms)
    cell = tables[0]["rows"][0]["cells"]["bc"]
    assert cell["failed_seeds"] == [1] and cell["single_seed"]
    assert "(1 failed)" in tables_text(tables)


@pytest.fixture(scope="module")
def tiny_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    summary = run_benchmark(loads(TINY_BENCH), out, parallel=1, plots=True)
    return out, summary


def test_bundle_layout(tiny_bundle):
    out, summary = tiny_bundle
    for name in ("manifest.json", "summary.json", "summary.csv", "summary.txt", "timing.json",
                 "plots/pr.svg", "plots/cr.svg", "curves/pr__bc.csv"):
        assert (out / name).is_file(), name
    assert len(list((out / "arms").glob("*.json"))) == 16
    man = json.loads((out / "manifest.json").read_text())
    assert all(a["status"] == "ok" and a["param_count"] > 0 for a in man["arms"])
    assert len(man["datasets"]["pr"]["content_hash"]) == 64
    assert {t["regime"]: t["metric"] for t in summary["tables"]} == {"sparse": "best", "sparsified": "final"}


def test_report_is_pure(tiny_bundle, tmp_path):
    out, _ = tiny_bundle
    write_report(out, tmp_path, plots=True)
    again = bundle_bytes(tmp_path)
    original = bundle_bytes(out)
    for name, data in again.items():
        assert original[name] == data, name


def test_failed_arm_is_reported_not_raised(tmp_path):
    text = TINY_BENCH.replace('mixture = [{ quality = "expert", count = 3 }, { quality = "random", count = 3 }]',
                              'mixture = [{ quality = "random", count = 2 }]')
    cfg = loads(text.replace('methods = ["bc", "fbc", "dt", "fdt"]', 'methods = ["bc", "fbc"]')
                .replace("seeds = [0, 1]", "seeds = [0]"))
    summary = run_benchmark(cfg, tmp_path, plots=False)
    failed = {f["arm"]: f["error"] for f in summary["failed_arms"]}
    assert set(failed) == {"pr__fbc__s0"} and "EmptyFilterError" in failed["pr__fbc__s0"]
    assert "failed" in (tmp_path / "summary.txt").read_text()


def test_plan_counts_steps():
    cfg = loads(TINY_BENCH)
    rows = plan(cfg, prepare(cfg))
    assert len(rows) == 16
    bc = next(r for r in rows if r["arm"] == "pr__bc__s0")
    assert bc["steps"] == 2 * -(-bc["train_transitions"] // 64)


def test_missing_bundle(tmp_path):
    with pytest.raises(DataError):
        load_bundle(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    (tmp_path / "arms").mkdir()
    with pytest.raises(DataError):
        load_bundle(tmp_path)


def test_one_arm_bundle(tmp_path):
    text = (TINY_BENCH.replace('methods = ["bc", "fbc", "dt", "fdt"]', 'methods = ["bc"]')
            .replace("seeds = [0, 1]", "seeds = [3]"))
    text = text[: text.index('[[datasets]]\nname = "cr"')]
    summary = run_benchmark(loads(text), tmp_path, plots=False)
    assert [p.name for p in (tmp_path / "curves").iterdir()] == ["pr__bc.csv"]
    (table,) = summary["tables"]
    assert len(table["rows"]) == 1 and table["rows"][0]["cells"]["bc"]["single_seed"]
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(lines) == 2
