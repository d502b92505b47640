from pathlib import Path

import pytest

from fpflow.config import ConfigError, apply_desk_scale, load_config, parse_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

BASE = {
    "problem": "toy2d",
    "seed": 4,
    "train": {
        "epochs": 3,
        "rounds": 2,
        "batch": 128,
        "time_grid": {"kind": "uniform", "n": 5},
        "counts": {"kind": "constant", "base": 50},
    },
}


def _doc(**updates):
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in BASE.items()}
    doc["train"] = dict(BASE["train"])
    doc["train"].update(updates.pop("train", {}))
    doc.update(updates)
    return doc


def test_bundled_configs_parse():
    names = ["toy2d", "linear_osc", "nonlinear_osc", "advdiff4d", "advdiff8d"]
    for name in names:
        cfg, notes = load_config(CONFIG_DIR / f"{name}.json")
        assert notes == []
        prob = cfg.make_problem()
        assert prob.d >= 2
        cfg2, notes2 = load_config(CONFIG_DIR / f"{name}.json", desk_scale=True)
        assert notes2, name  # every bundled config carries desk overrides
        assert all(n.startswith("desk_scale: ") for n in notes2)


def test_bundled_configs_mirror_reported_settings():
    cfg, _ = load_config(CONFIG_DIR / "toy2d.json")
    assert (cfg.train.epochs, cfg.train.epoch_growth, cfg.train.rounds) == (20, 2.0, 5)
    assert cfg.train.batch == 1000 and cfg.flow.depth == 6 and not cfg.flow.spline
    assert cfg.train.time_grid.n == 20 and cfg.train.counts.base == 1000

    cfg, _ = load_config(CONFIG_DIR / "nonlinear_osc.json")
    assert cfg.flow.spline and cfg.flow.bins == 50
    assert cfg.train.time_grid.kind == "piecewise"
    grid = cfg.train.time_grid.build(3.0)
    assert len(grid) == 299  # 100 + 200 nodes sharing the 1.5 join


def test_seed_propagates_to_training():
    cfg = parse_config(_doc(seed=11))
    assert cfg.seed == 11 and cfg.train.seed == 11


def test_batch_zero_names_field():
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(train={"batch": 0}))
    assert exc.value.path == "train.batch"


def test_unknown_key_rejected():
    doc = _doc()
    doc["train"]["batch_sz"] = 7
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.path == "train.batch_sz"
    doc = _doc()
    doc["totally_new"] = 1
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert exc.value.path == "totally_new"


def test_type_errors_name_field():
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(train={"epochs": "many"}))
    assert exc.value.path == "train.epochs"
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(train={"epochs": True}))  # bools are not integers
    assert exc.value.path == "train.epochs"
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(eval={"times": [0.0, "end"]}))
    assert exc.value.path == "eval.times"


def test_unknown_problem_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(problem="heat_eq"))
    assert exc.value.path == "problem"


def test_piecewise_grid_parsing():
    doc = _doc(train={"time_grid": {"kind": "piecewise", "segments": [[0, 1, 3], [1, 2, 3]]}})
    cfg = parse_config(doc)
    assert cfg.train.time_grid.segments == ((0.0, 1.0, 3), (1.0, 2.0, 3))
    bad = _doc(train={"time_grid": {"kind": "piecewise", "segments": [[0, 1]]}})
    with pytest.raises(ConfigError) as exc:
        parse_config(bad)
    assert exc.value.path == "train.time_grid.segments"


def test_eval_defaults_and_times():
    cfg = parse_config(_doc())
    assert cfg.eval.resolved_times(3.0) == (0.0, 1.5, 3.0)
    cfg = parse_config(_doc(eval={"times": [0.25, 0.5]}))
    assert cfg.eval.resolved_times(3.0) == (0.25, 0.5)
    with pytest.raises(ConfigError) as exc:
        parse_config(_doc(eval={"grid_n": 0}))
    assert exc.value.path == "eval.grid_n"


def test_desk_scale_merge_and_notes():
    doc = _doc()
    doc["desk_scale"] = {"train": {"batch": 32}, "eval": {"n_v": 500}}
    merged, notes = apply_desk_scale(doc)
    assert merged["train"]["batch"] == 32
    assert merged["train"]["epochs"] == 3  # untouched fields survive
    assert "desk_scale" not in merged
    assert sorted(notes) == [
        "desk_scale: eval.n_v = 500 (was '(default)')",
        "desk_scale: train.batch = 32 (was 128)",
    ]
    cfg = parse_config(merged)
    assert cfg.train.batch == 32 and cfg.eval.n_v == 500


def test_desk_scale_ignored_without_flag(tmp_path):
    import json

    doc = _doc()
    doc["desk_scale"] = {"train": {"batch": 32}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg, notes = load_config(path)
    assert cfg.train.batch == 128 and notes == []
    cfg, notes = load_config(path, desk_scale=True)
    assert cfg.train.batch == 32 and len(notes) == 1


def test_desk_scale_cannot_nest():
    doc = _doc()
    doc["desk_scale"] = {"desk_scale": {"seed": 1}}
    with pytest.raises(ConfigError):
        apply_desk_scale(doc)


def test_invalid_json_message(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"problem": "toy2d",')
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)
