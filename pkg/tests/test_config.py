import dataclasses

import pytest

from mixflowlm.config import (
    ConfigParseError,
    RunConfig,
    load_config,
    parse_config,
    serialize_config,
    toy_markov_config,
)
from mixflowlm.conditioners import ConfigError

from instances import tiny_config

EXAMPLE = """\
# a small run
[data]
source = synthetic:markov
vocab = "abcd"
chunk_len = 16
markov_row = 0.5, 0.3, 0.2

[stack]
latent_dim = 2
progressive_blocks = 1;2
progressive_steps = 50

[layer.1]
kind = mixd
tie_codebook = true
V = 3

[layer.2]
kind = mix1
direction = r2l

[optim]
lr = 1e-3

[run]
steps = 7
"""


def test_parse_example():
    cfg = parse_config(EXAMPLE)
    assert cfg.data.vocab == "abcd"
    assert cfg.data.markov_row == [0.5, 0.3, 0.2]
    assert cfg.stack.progressive_blocks == [[1], [2]]
    assert cfg.stack.progressive_steps == [50]
    assert [l.kind for l in cfg.layers] == ["mixd", "mix1"]
    assert cfg.layers[0].tie_codebook is True
    assert cfg.layers[1].direction == "r2l"
    assert cfg.optim.lr == 1e-3
    assert cfg.optim.batch_size == 16
    assert cfg.run.steps == 7


@pytest.mark.parametrize("cfg", [toy_markov_config(), tiny_config(), RunConfig(), parse_config(EXAMPLE)])
def test_round_trip(cfg):
    text = serialize_config(cfg)
    back = parse_config(text)
    assert dataclasses.asdict(back) == dataclasses.asdict(cfg)
    assert serialize_config(back) == text


def test_load_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(EXAMPLE)
    assert dataclasses.asdict(load_config(p)) == dataclasses.asdict(parse_config(EXAMPLE))


def test_strings_with_special_characters():
    cfg = RunConfig()
    cfg.data = dataclasses.replace(cfg.data, vocab='a "q"\n#;=,')
    assert parse_config(serialize_config(cfg)).data.vocab == 'a "q"\n#;=,'


@pytest.mark.parametrize("text,line,col,match", [
    ("[data]\nchunk_len = ten\n", 2, 13, "expected int"),
    ("[data]\n  bogus = 1\n", 2, 3, "unknown key"),
    ("[nonsense]\n", 1, 2, "unknown section"),
    ("[run]\nseed = 1\nseed = 2\n", 3, 1, "duplicate key"),
    ("[run]\n[run]\n", 2, 2, "duplicate section"),
    ("steps = 3\n", 1, 1, "outside"),
    ("[run]\nsteps\n", 2, 1, "key = value"),
    ("[run]\nclamp_codebook = maybe\n", 2, 18, "expected bool"),
    ("[optim\n", 1, 6, "unterminated"),
    ("[data]\nmarkov_row = 0.5, x\n", 2, 14, "expected float"),
])
def test_errors_carry_position(text, line, col, match):
    with pytest.raises(ConfigParseError, match=match) as ei:
        parse_config(text)
    assert (ei.value.line, ei.value.col) == (line, col)
    assert f"line {line}, column {col}" in str(ei.value)


def test_layer_gap():
    with pytest.raises(ConfigError, match="without gaps"):
        parse_config("[layer.1]\n[layer.3]\n")


def test_validate_catches_stack_errors():
    cfg = parse_config("[layer.1]\nkind = mixd\ntie_codebook = true\nV = 3\n")
    with pytest.raises(ConfigError, match="vocab"):
        cfg.validate(vocab_size=4)


def test_toy_config_shape():
    cfg = toy_markov_config()
    cfg.validate(4)
    assert cfg.stack.latent_dim == 4
    assert len(cfg.layers) == 2
    assert cfg.layers[0].tie_codebook and cfg.layers[0].kind == "mixd"
