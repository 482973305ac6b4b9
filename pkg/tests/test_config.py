import pytest

from amodalseg.config import DEFAULTS, dumps, parse_lines, resolve, section
from amodalseg.manifest import SchemaError


def test_defaults_match_library_defaults():
    from amodalseg.losses import LossConfig
    from amodalseg.training import TrainConfig

    assert DEFAULTS["train.lr"] == TrainConfig().lr
    assert DEFAULTS["train.batch_size"] == TrainConfig().batch_size
    assert DEFAULTS["loss.lambda_iou"] == LossConfig().lambda_iou
    assert DEFAULTS["train.modal_probability"] == 0.5


def test_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nseed = 3\ntrain.lr = 0.01  # inline\nsynth.dual = false\n")
    cfg = resolve(p, ["train.lr=2e-3"], seed=None)
    assert cfg["seed"] == 3 and cfg["train.lr"] == 2e-3 and cfg["synth.dual"] is False
    assert resolve(p, [], seed=9)["seed"] == 9


def test_type_coercion():
    out = parse_lines(["train.iterations = 5.0", "model.trainable_parts = decoder,encoder",
                       "filter.stuff_list = /tmp/x.txt", "train.lr = 1"])
    assert out["train.iterations"] == 5 and isinstance(out["train.iterations"], int)
    assert out["model.trainable_parts"] == ["decoder", "encoder"]
    assert out["filter.stuff_list"] == "/tmp/x.txt"
    assert out["train.lr"] == 1.0 and isinstance(out["train.lr"], float)


@pytest.mark.parametrize("line", ["nope = 1", "train.iterations = 2.5", "synth.dual = maybe",
                                  "train.lr = fast", "just text"])
def test_bad_lines(line):
    with pytest.raises(SchemaError):
        parse_lines([line])


def test_missing_file(tmp_path):
    with pytest.raises(SchemaError):
        resolve(tmp_path / "none.cfg")


def test_dumps_roundtrip():
    cfg = resolve(None, ["seed=4"])
    assert resolve_text(dumps(cfg)) == cfg
    assert section(cfg, "loss")["gamma"] == 2.0


def resolve_text(text):
    cfg = dict(DEFAULTS)
    cfg.update(parse_lines(text.splitlines()))
    return cfg
