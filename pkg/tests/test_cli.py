import csv
import json

import pytest

from e2e import CONFIGS
from fedtsdp.cli import AlignmentError, export_plot_data, main, read_log, scalar_fields
from fedtsdp.config import (
    ConfigParseError, ExperimentConfig, apply_overrides, parse_config, parse_text, serialize,
)

TINY = """
[data]
classes = 3
features = 4
per_class = 30
public_per_class = 20

[model]
hidden = 6

[federation]
client_count = 4
rounds = 3
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_empty_config_gives_published_defaults():
    cfg = parse_text("")
    t, f = cfg.train, cfg.fed
    assert (f.client_count, f.connect_ratio, f.rounds) == (20, 1.0, 200)
    assert (t.local_epochs, t.batch_size, t.learning_rate, t.momentum, t.lr_decay) == (2, 50, 0.05, 0.5, 0.95)
    assert (f.dbscan1.eps, f.dbscan2.eps, f.dbscan1.min_pts, f.dbscan2.min_pts) == (0.15, 3.5, 2, 2)
    assert (f.hopkins.threshold, f.dampening) == (0.65, 0.98)
    assert cfg == ExperimentConfig()


def test_golden_defaults_output(capsys):
    assert main(["defaults"]) == 0
    text = capsys.readouterr().out
    for line in ("client_count = 20", "connect_ratio = 1.0", "rounds = 200", "local_epochs = 2",
                 "batch_size = 50", "learning_rate = 0.05", "momentum = 0.5", "lr_decay = 0.95",
                 "eps1 = 0.15", "eps2 = 3.5", "min_pts = 2", "hopkins_threshold = 0.65", "dampening = 0.98"):
        assert line in text.splitlines()


def test_roundtrip(tiny):
    cfg = apply_overrides(parse_config(tiny), ["data.scheme=dirichlet", "data.beta=0.3", "federation.eps2=2.25",
                                               "output.path=x.jsonl", "federation.initial_shared_layers=1.5"])
    again = parse_text(serialize(cfg))
    assert again == cfg
    assert serialize(again) == serialize(cfg)
    for path in sorted(CONFIGS.glob("*.ini")):
        shipped = parse_config(path)
        assert parse_text(serialize(shipped)) == shipped


@pytest.mark.parametrize("text,fragment", [
    ("[federation]\nconnect_ratio = 1.5\n", "connect_ratio"),
    ("[federation]\nwarp = 3\n", "federation.warp"),
    ("[gpu]\nx = 1\n", "[gpu]"),
    ("[train]\nbatch_size = ten\n", "train.batch_size"),
    ("[data]\nscheme = dirichlet\n", "[data]"),
    ("[federation]\njs_variant = odd\n", "js_variant"),
])
def test_parse_errors_name_the_key(text, fragment):
    with pytest.raises(ConfigParseError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_text(text)


def test_override_syntax():
    with pytest.raises(ConfigParseError):
        apply_overrides(ExperimentConfig(), ["rounds=3"])
    cfg = apply_overrides(ExperimentConfig(), ["federation.rounds=3", "model.hidden=5, 7"])
    assert cfg.fed.rounds == 3 and cfg.hidden == (5, 7)


def test_run_twice_is_byte_identical(tiny, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", str(tiny), "--seed", "7", "--out", str(a)]) == 0
    assert main(["run", str(tiny), "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert len(lines) == 4
    recs = [json.loads(x) for x in lines]
    assert [r["round"] for r in recs[:-1]] == [1, 2, 3]
    assert recs[-1]["summary"] and recs[-1]["seed"] == 7
    assert "wall_ms" not in recs[0]


def test_timing_is_opt_in(tiny, tmp_path):
    out = tmp_path / "t.jsonl"
    assert main(["run", str(tiny), "--out", str(out), "--override", "output.record_timing=true"]) == 0
    assert all("wall_ms" in r for r in read_log(out))


def test_missing_config_path(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["run", str(missing), "--out", str(tmp_path / "o.jsonl")]) != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert str(missing) in err["message"] and err["error"] == "ConfigParseError"


def test_bad_range_is_reported(tiny, tmp_path, capsys):
    code = main(["run", str(tiny), "--out", str(tmp_path / "o.jsonl"), "--override", "federation.connect_ratio=1.5"])
    assert code == 2
    assert "connect_ratio" in json.loads(capsys.readouterr().err)["message"]


def test_paired_strategies_export(tiny, tmp_path):
    logs = []
    for strategy in ("fedtsd", "fedavg"):
        out = tmp_path / f"{strategy}.jsonl"
        assert main(["run", str(tiny), "--strategy", strategy, "--out", str(out)]) == 0
        logs.append(out)
    single = tmp_path / "single.csv"
    header = export_plot_data([logs[0]], single)
    assert header == ["round"] + [f"fedtsd:{m}" for m in scalar_fields(read_log(logs[0]))]
    both = tmp_path / "both.csv"
    assert main(["export", *map(str, logs), "--out", str(both)]) == 0
    rows = list(csv.reader(both.open()))
    n_metrics = len(scalar_fields(read_log(logs[0])))
    assert len(rows[0]) == 1 + 2 * n_metrics
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]


def test_export_alignment_error(tiny, tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["run", str(tiny), "--out", str(a)])
    main(["run", str(tiny), "--out", str(b), "--override", "federation.rounds=2"])
    with pytest.raises(AlignmentError):
        export_plot_data([a, b], tmp_path / "x.csv")
    assert main(["export", str(a), str(b), "--out", str(tmp_path / "x.csv")]) == 1


def test_iid_hopkins_column_stays_below_threshold(tmp_path):
    log = tmp_path / "iid.jsonl"
    assert main(["run", str(CONFIGS / "iid.ini"), "--out", str(log)]) == 0
    table = tmp_path / "iid.csv"
    export_plot_data([log], table)
    rows = list(csv.DictReader(table.open()))
    assert len(rows) == 40
    assert max(float(r["iid:hopkins_H"]) for r in rows) <= 0.65
