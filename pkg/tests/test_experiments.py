import json
import math

import numpy as np
import pytest

import pathineq.experiments as ex
import pathineq.pathcore as pc

FAST = dict(steps=20, n_paths=64, n_entropy=512, bootstrap=8)


def tiny(name="tiny-wiener", **kw):
    base = dict(FAST)
    base.update(kw)
    return ex.ExperimentSpec(name=name, recipe="brownian", seed=5, **base)


# ---------------------------------------------------------------- spec checks


def test_unknown_recipe_rejected():
    with pytest.raises(ValueError, match="recipe"):
        ex.ExperimentSpec(name="x", recipe="nope")


def test_bad_name_rejected():
    with pytest.raises(ValueError, match="name"):
        ex.ExperimentSpec(name="a/b", recipe="brownian")
    with pytest.raises(ValueError, match="name"):
        ex.ExperimentSpec(name="", recipe="brownian")


def test_sampling_preconditions_checked():
    with pytest.raises(ValueError, match="n_paths"):
        tiny(n_paths=5000)
    with pytest.raises(ValueError, match="steps"):
        tiny(steps=0)
    with pytest.raises(ValueError, match="horizon"):
        tiny(horizon=0.0)
    with pytest.raises(ValueError, match="bootstrap"):
        tiny(bootstrap=1)


def test_model_preconditions_checked_at_construction():
    with pytest.raises(KeyError, match="generator"):
        ex.ExperimentSpec(
            name="x", recipe="bsde-lipschitz", **FAST,
            model={"generator": "no-such-generator"},
        )
    with pytest.raises(KeyError, match="obstacle"):
        ex.ExperimentSpec(
            name="x", recipe="snell", **FAST,
            model={"obstacle": "no-such-obstacle"},
        )
    with pytest.raises(KeyError, match="model"):
        ex.ExperimentSpec(
            name="x", recipe="sde-zvonkin", **FAST,
            model={"name": "no-such-sde"},
        )


def test_unknown_check_name_rejected():
    with pytest.raises(ValueError, match="no checks named"):
        tiny(checks={"tree": {}})


def test_output_switch_validated():
    with pytest.raises(ValueError, match="output"):
        ex.ExperimentSpec(
            name="x", recipe="bsde-lipschitz", **FAST,
            model={"output": "w"},
        )
    with pytest.raises(ValueError, match="Lipschitz"):
        ex.ExperimentSpec(
            name="x", recipe="bsde-quadratic", **FAST,
            model={"output": "z"},
        )


# ---------------------------------------------------------------- suite


def test_standard_suite_shape():
    suite = ex.standard_suite()
    assert len(suite) >= 7
    names = [s.name for s in suite]
    assert len(set(names)) == len(names)
    seeds = [s.seed for s in suite]
    assert len(set(seeds)) == len(seeds)
    for spec in suite:
        assert spec.claim
        assert spec.recipe in ex.RECIPES
        assert spec.horizon == 1.0
        assert spec.steps == 100
        assert spec.n_paths == 512


def test_suite_covers_every_verified_claim_family():
    recipes = {s.recipe for s in ex.standard_suite()}
    assert {"brownian", "snell", "bsde-lipschitz", "bsde-quadratic",
            "utility-max", "sde-zvonkin"} <= recipes
    thetas = {
        float(s.verifier.get("theta", 0.5)) for s in ex.standard_suite()
    }
    assert 0.25 in thetas  # the quartic-root control-process inequality


# ---------------------------------------------------------------- running


def test_run_writes_report_and_passes(tmp_path):
    res = ex.run_experiment(tiny(), out_dir=tmp_path)
    assert res.verdict == "Pass"
    out = tmp_path / "tiny-wiener"
    assert sorted(p.name for p in out.iterdir()) == [
        "report.json", "samples.bin", "tails.csv"
    ]
    payload = json.loads((out / "report.json").read_text())
    assert payload["schema_version"] == ex.SCHEMA_VERSION
    assert payload["verifier"]["C"] == 2.0
    assert payload["verifier"]["derived_C"] is True
    assert len(payload["transport"]["records"]) == 5
    assert payload["verdict"] == "Pass"
    header = (out / "tails.csv").read_text().splitlines()
    assert header[0].startswith("#TAILS1 ")
    assert header[1] == "source,label,x,y"
    assert sum(line.startswith("transport,") for line in header) == 5
    bundle = pc.load_bundle(out / "samples.bin")
    assert bundle.n == FAST["n_paths"]
    assert bundle.grid.steps == FAST["steps"]


def test_reruns_are_bit_identical(tmp_path):
    spec = tiny(checks={"gaussian_tail": {"n": 1500}})
    a = ex.run_experiment(spec, out_dir=tmp_path / "a")
    b = ex.run_experiment(spec, out_dir=tmp_path / "b")
    for fname in ("report.json", "tails.csv", "samples.bin"):
        fa = (tmp_path / "a" / spec.name / fname).read_bytes()
        fb = (tmp_path / "b" / spec.name / fname).read_bytes()
        assert fa == fb, fname
    assert a.verdict == b.verdict


def test_failed_run_leaves_no_partial_directory(tmp_path):
    # batches below the resolution floor are rejected by the probe at run
    # time, after the wiring validated — the atomic abort path
    spec = tiny(checks={"empirical": {"batches": 10}})
    with pytest.raises(ValueError, match="batches"):
        ex.run_experiment(spec, out_dir=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_pinned_constant_overrides_derived(tmp_path):
    spec = tiny(name="pinned", verifier={"C": 123.0})
    res = ex.run_experiment(spec, out_dir=tmp_path)
    payload = json.loads(
        (tmp_path / "pinned" / "report.json").read_text())
    assert payload["verifier"]["C"] == 123.0
    assert payload["verifier"]["derived_C"] is False
    assert res.transport.C == 123.0


def test_custom_tilt_list_is_used():
    spec = tiny(tilts=({"name": "zero"}, {"name": "constant", "value": 0.25}))
    res = ex.run_experiment(spec)
    assert [r.label for r in res.transport.records] == [
        "zero", "constant(0.25)"
    ]


def test_failing_check_downgrades_verdict():
    spec = ex.ExperimentSpec(
        name="neg", recipe="sde-zvonkin", seed=3, **FAST,
        model={"name": "zero_drift"},
        checks={"crossvalidate": {"factor": 1e-9, "n": 64}},
    )
    res = ex.run_experiment(spec)
    assert res.transport.overall == "Pass"
    assert res.checks["crossvalidate"]["passed"] is False
    assert res.verdict == "Fail"


def test_derived_constants_match_owning_modules():
    snell = ex.ExperimentSpec(
        name="sn", recipe="snell", seed=1, **FAST,
        model={"obstacle": "put", "obstacle_params": {"strike": 0.0}},
    )
    res = ex.run_experiment(snell)
    assert res.transport.C == 2.0  # 2 L_Gamma^2 with L_Gamma = 1

    bsde = ex.ExperimentSpec(
        name="bs", recipe="bsde-lipschitz", seed=1, **FAST,
        model={"generator": "zero", "terminal": "terminal_value"},
    )
    res2 = ex.run_experiment(bsde)
    assert res2.transport.C == 2.0  # 2 L_F^2 at L_g = 0
    assert res2.constants["C_y"] == 2.0


def test_control_process_output_theta_quarter():
    spec = ex.ExperimentSpec(
        name="ctrl", recipe="bsde-lipschitz", seed=2, **FAST,
        model={"generator": "zero", "terminal": "running_max",
               "output": "z"},
        verifier={"theta": 0.25},
    )
    grid = spec.grid()
    wiring = ex._build_wiring(spec)
    out = wiring.process(pc.sample_brownian(grid, 1, 8, 0))
    assert out.values.shape == (8, FAST["steps"] + 1, 1)
    # control paths are padded by repeating the last step value at T
    assert np.array_equal(out.values[:, -1, :], out.values[:, -2, :])

    res = ex.run_experiment(spec)
    C = res.transport.C
    for rec in res.transport.records:
        if rec.entropy > 0:
            assert math.isclose(rec.rhs, C * rec.entropy**0.25,
                                rel_tol=1e-12)


def test_quadratic_y0_close_to_closed_form():
    spec = ex.ExperimentSpec(
        name="q", recipe="bsde-quadratic", seed=4,
        steps=20, n_paths=512, n_entropy=512, bootstrap=8,
        model={"terminal": "terminal_value"},
        checks={"dual_gap": {"n": 2048}},
    )
    res = ex.run_experiment(spec)
    gap = res.checks["dual_gap"]
    assert gap["passed"] is True
    # the optimal constant tilt reproduces Y_0 = T/2 up to both errors
    assert abs(gap["best_dual"] - 0.5) < 5.0 * 0.016 + 0.02


def test_utility_generator_identity_is_exact():
    spec = ex.ExperimentSpec(
        name="u", recipe="utility-max", seed=6, **FAST,
        model={"alpha": 2.0, "theta": [0.5, -0.25]},
        checks={"generator_identity": {}},
    )
    res = ex.run_experiment(spec)
    rep = res.checks["generator_identity"]
    assert rep["max_abs_difference"] == 0.0
    assert rep["passed"] is True
    assert res.transport.records[0].label == "zero"


def test_empirical_check_runs_on_brownian():
    spec = tiny(
        name="emp", steps=4,
        checks={"empirical": {"N": 8, "batches": 210}},
    )
    res = ex.run_experiment(spec)
    rep = res.checks["empirical"]
    assert rep["flag"] in ("ok", "too-few-points")
    assert rep["batches"] == 210


# ---------------------------------------------------------------- toml


def roundtrip(spec):
    text = ex.to_toml(spec)
    back = ex.from_toml(text)
    assert back == spec
    return text


def test_toml_roundtrip_plain():
    roundtrip(tiny())


def test_toml_roundtrip_nested_and_tilts():
    spec = ex.ExperimentSpec(
        name="rich", recipe="bsde-lipschitz", seed=9, **FAST,
        claim="value process transport bound",
        model={
            "generator": "linear",
            "generator_params": {"beta": 0.5, "gamma": 0.5},
            "terminal": "terminal_value",
            "m": 1, "d": 1,
        },
        verifier={"theta": 0.5, "tilt_scale": 0.5},
        tilts=({"name": "zero"}, {"name": "sin_time", "amplitude": 0.75}),
        checks={"z_bound": {"slack": 0.05}, "lipschitz_probe": {}},
    )
    text = roundtrip(spec)
    assert "[model.generator_params]" in text
    assert "[[tilts]]" in text
    assert "[checks.z_bound]" in text
    assert 'schema_version = 1' in text


def test_toml_roundtrip_whole_suite():
    for spec in ex.standard_suite():
        roundtrip(spec)


def test_toml_rejects_bad_versions_and_keys():
    spec = tiny()
    text = ex.to_toml(spec)
    with pytest.raises(ValueError, match="schema_version"):
        ex.from_toml(text.replace("schema_version = 1", "schema_version = 2"))
    with pytest.raises(ValueError, match="schema_version"):
        ex.from_toml(text.replace("schema_version = 1\n", ""))
    with pytest.raises(ValueError, match="experiment"):
        ex.from_toml("[model]\nd = 1\n")
    with pytest.raises(ValueError, match="unknown"):
        ex.from_toml(text.replace("seed = 5", "seed = 5\nwallclock = 3"))


def test_spec_file_roundtrip(tmp_path):
    spec = tiny(name="disk")
    path = tmp_path / "disk.toml"
    ex.save_spec(spec, path)
    assert ex.load_spec(path) == spec
