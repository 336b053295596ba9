"""Shared oracles for the unit and acceptance suites."""
import numpy as np

from tsformer.model import ModelConfig, TsformerModel, decoder_forward, encoder_forward, forward_batch

NEG = -np.inf

# Literal 7-day encoder / 5-day decoder masks, transcribed cell by cell.
_o, _x = 0.0, NEG
ENCODER_SOURCE_7 = np.array([
    [_o, _x, _x, _x, _x, _x, _x],
    [_o, _o, _x, _x, _x, _x, _x],
    [_o, _o, _o, _x, _x, _x, _x],
    [_o, _o, _o, _o, _x, _x, _x],
    [_o, _o, _o, _o, _o, _x, _x],
    [_o, _o, _o, _o, _o, _o, _x],
    [_o, _o, _o, _o, _o, _o, _o],
])
DECODER_TARGET_5 = np.array([
    [_o, _x, _x, _x, _x],
    [_o, _o, _x, _x, _x],
    [_o, _o, _o, _x, _x],
    [_o, _o, _o, _o, _x],
    [_o, _o, _o, _o, _o],
])
DECODER_MEMORY_5_7 = np.array([
    [_o, _o, _o, _x, _x, _x, _x],
    [_o, _o, _o, _o, _x, _x, _x],
    [_o, _o, _o, _o, _o, _x, _x],
    [_o, _o, _o, _o, _o, _o, _x],
    [_o, _o, _o, _o, _o, _o, _o],
])

CAUSALITY_CONFIGS = [(7, 5, 1), (10, 8, 3), (4, 4, 1)]


def causal_model(l_enc, l_dec, h, seed=0, feature_dim=3):
    cfg = ModelConfig(l_enc, l_dec, h, d_model=8, heads=2, encoder_layers=2, decoder_layers=2,
                      ffn_dim=16, dropout=0.0, feature_dim=feature_dim)
    return TsformerModel.initialize(cfg, seed)


def causality_violations(model, trials=20, seed=0):
    """Count bitwise violations of the three perturbation invariants.

    Returns a dict with keys ``encoder``, ``decoder``, ``memory``.
    """
    cfg = model.config
    le, ld, f = cfg.encoder_input_length, cfg.decoder_input_length, cfg.feature_dim
    off = le - ld
    rng = np.random.default_rng(seed)
    bad = {"encoder": 0, "decoder": 0, "memory": 0}
    for _ in range(trials):
        x = rng.normal(size=(1, le, f))
        y = rng.normal(size=(1, ld, f))
        mem, _ = encoder_forward(x, model)
        out, _ = forward_batch(x, y, model)

        j = int(rng.integers(0, le))
        x2 = x.copy()
        x2[0, j] += rng.normal(size=f) * 3.0
        mem2, _ = encoder_forward(x2, model)
        if not np.array_equal(mem.data[0, :j], mem2.data[0, :j]):
            bad["encoder"] += 1
        out_m, _ = forward_batch(x2, y, model)
        blind = [i for i in range(ld) if j > i + off]
        if blind and not np.array_equal(out.data[0, blind], out_m.data[0, blind]):
            bad["memory"] += 1

        j = int(rng.integers(0, ld))
        y2 = y.copy()
        y2[0, j] += rng.normal(size=f) * 3.0
        out_d, _, _ = decoder_forward(y2, mem, model)
        if not np.array_equal(out.data[0, :j], out_d.data[0, :j]):
            bad["decoder"] += 1
    return bad
