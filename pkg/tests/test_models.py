import pytest

from srftkv.errors import ConfigError
from srftkv.models import GB, ModelConfig, list_presets, load_model_config, memtable
from srftkv.quantizer import QuantScheme

TABLE = {
    "smollm2-1.7b": (3.072, 24.576, 6.912),
    "llama-3.1-8b": (2.048, 16.384, 4.352),
    "llama-3-70b": (5.12, 40.96, 10.88),
}


def test_presets_listed():
    names = list_presets()
    for n in ("qwen2.5-1.5b", "gemma-3-1b", "smollm2-135m", *TABLE):
        assert n in names


@pytest.mark.parametrize("name", sorted(TABLE))
def test_memtable_cells(name):
    fp16_16k, fp16_128k, int4_128k = TABLE[name]
    rows = memtable(load_model_config(name), [16384, 131072])
    assert abs(rows[0]["gb_fp16"] - fp16_16k) / fp16_16k < 0.01
    assert abs(rows[1]["gb_fp16"] - fp16_128k) / fp16_128k < 0.01
    assert abs(rows[1]["gb_quant"] - int4_128k) / int4_128k < 0.01


def test_gb_convention():
    assert GB == 1_048_576_000


def test_gemma_windows():
    g = load_model_config("gemma-3-1b")
    w = g.layer_windows()
    assert len(w) == 26 and w.count(None) == 4 and w[0] == 512 and w[5] is None


def test_load_from_file(tmp_path):
    p = tmp_path / "m.cfg"
    p.write_text("name = Tiny\nn_layers = 2\nn_kv_heads: 1\nhead_dim = 64  # d\n")
    m = load_model_config(p)
    assert (m.name, m.n_layers, m.head_dim, m.layer_windows()) == ("Tiny", 2, 64, [None, None])
    rows = memtable(m, [0, 10], QuantScheme(8, "per_token", 64))
    assert rows[0]["bytes_fp16"] == 0 and rows[1]["bytes_quant"] == 2 * 2 * 10 * 68


def test_bad_configs(tmp_path):
    with pytest.raises(ConfigError):
        load_model_config("no-such-model")
    p = tmp_path / "bad.cfg"
    p.write_text("n_layers = two\nn_kv_heads = 1\nhead_dim = 64\n")
    with pytest.raises(ConfigError):
        load_model_config(p)
    with pytest.raises(ConfigError):
        ModelConfig("x", 2, 1, 64, global_layers=(5,))
