import numpy as np
import pytest

from adaeval import cells, ndgrad as ng
from adaeval.rng import SplitMix64


def _randn(rng, *shape):
    return rng.gaussian(int(np.prod(shape))).reshape(shape)


# scalar re-implementation of the four-gate equations, independent of ndgrad
def _scalar_lstm_step(W, b, x, h, c, hidden):
    xh = list(x) + list(h)
    z = [sum(xh[k] * W[k][j] for k in range(len(xh))) + b[j] for j in range(4 * hidden)]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    h_new, c_new = [], []
    for j in range(hidden):
        i = sig(z[j])
        f = sig(z[hidden + j])
        o = sig(z[2 * hidden + j])
        g = np.tanh(z[3 * hidden + j])
        cj = f * c[j] + i * g
        c_new.append(cj)
        h_new.append(o * np.tanh(cj))
    return h_new, c_new


def test_lstm_step_zero_params_zero_state():
    p = cells.init_lstm(SplitMix64(0), 3, 2)
    p.W.values[:] = 0.0
    p.b.values[:] = 0.0
    state = cells.zero_state(1, 2)
    out = cells.lstm_step(p, ng.constant(_randn(SplitMix64(1), 1, 3)), state)
    assert np.array_equal(out.h.values, np.zeros((1, 2)))
    assert np.array_equal(out.c.values, np.zeros((1, 2)))


def test_lstm_step_matches_scalar_oracle():
    rng = SplitMix64(42)
    p = cells.init_lstm(rng, 3, 2)
    x = _randn(rng, 1, 3)
    h0 = _randn(rng, 1, 2)
    c0 = _randn(rng, 1, 2)
    out = cells.lstm_step(p, ng.constant(x), cells.LSTMState(ng.constant(h0), ng.constant(c0)))
    h_ref, c_ref = _scalar_lstm_step(p.W.values, p.b.values, x[0], h0[0], c0[0], 2)
    assert np.allclose(out.h.values[0], h_ref, atol=1e-14)
    assert np.allclose(out.c.values[0], c_ref, atol=1e-14)


def test_lstm_hidden_stays_in_open_unit_interval():
    rng = SplitMix64(7)
    p = cells.init_lstm(rng, 4, 3)
    state = cells.zero_state(5, 3)
    for _ in range(20):
        state = cells.lstm_step(p, ng.constant(_randn(rng, 5, 4) * 3), state)
        assert np.all(np.abs(state.h.values) < 1.0)


def test_lstm_step_gradient_matches_finite_differences():
    rng = SplitMix64(3)
    p = cells.init_lstm(rng, 3, 2)
    x = ng.constant(_randn(rng, 1, 3))
    h0 = ng.constant(_randn(rng, 1, 2))
    c0 = ng.constant(_randn(rng, 1, 2))

    def f():
        out = cells.lstm_step(p, x, cells.LSTMState(h0, c0))
        return ng.mean(out.h)

    assert ng.grad_check(f, [p.W, p.b], eps=1e-5) <= 1e-4


def test_lstm_step_rejects_wrong_input_dim():
    p = cells.init_lstm(SplitMix64(0), 3, 2)
    with pytest.raises(ng.ShapeError, match="lstm_step"):
        cells.lstm_step(p, ng.constant(np.zeros((1, 5))), cells.zero_state(1, 2))


def test_gate_logits_zero_params():
    g = cells.init_gate(SplitMix64(0), 4, 3)
    g.W.values[:] = 0.0
    g.b.values[:] = 0.0
    out = cells.gate_logits(g, ng.constant(np.ones((1, 4))),
                            ng.constant(np.ones((1, 3))), ng.constant(np.ones((1, 3))))
    assert np.array_equal(out.values, np.zeros((1, 2)))


def test_gate_logits_matches_matvec_oracle():
    rng = SplitMix64(11)
    g = cells.init_gate(rng, 4, 3)
    v_c, h_f, c_f = _randn(rng, 1, 4), _randn(rng, 1, 3), _randn(rng, 1, 3)
    out = cells.gate_logits(g, ng.constant(v_c), ng.constant(h_f), ng.constant(c_f))
    joint = np.concatenate([v_c[0], h_f[0], c_f[0]])
    ref = [sum(joint[k] * g.W.values[k][j] for k in range(len(joint))) + g.b.values[j]
           for j in range(2)]
    assert np.allclose(out.values[0], ref, atol=1e-13)


def test_gate_logits_additive_in_each_input():
    rng = SplitMix64(13)
    g = cells.init_gate(rng, 4, 3)
    h_f, c_f = ng.constant(_randn(rng, 1, 3)), ng.constant(_randn(rng, 1, 3))
    a, b = _randn(rng, 1, 4), _randn(rng, 1, 4)
    la = cells.gate_logits(g, ng.constant(a), h_f, c_f).values
    lb = cells.gate_logits(g, ng.constant(b), h_f, c_f).values
    lab = cells.gate_logits(g, ng.constant(a + b), h_f, c_f).values
    zero = cells.gate_logits(g, ng.constant(np.zeros((1, 4))), h_f, c_f).values
    assert np.allclose(lab, la + lb - zero, atol=1e-12)


def test_classify_zero_params_uniform():
    c = cells.init_classifier(3, 4)
    out = cells.classify(c, ng.constant(np.ones((2, 3))))
    assert np.allclose(out.values, 0.25, atol=1e-15)


def test_classify_bias_dominates():
    c = cells.init_classifier(3, 4)
    c.b.values[:] = [5.0, 0.0, 0.0, 0.0]
    out = cells.classify(c, ng.constant(np.zeros((1, 3))))
    assert int(np.argmax(out.values[0])) == 0


def test_classify_matches_scalar_softmax_oracle():
    rng = SplitMix64(17)
    c = cells.init_classifier(3, 4)
    c.W.values[:] = _randn(rng, 3, 4)
    c.b.values[:] = _randn(rng, 4)
    h = _randn(rng, 1, 3)
    out = cells.classify(c, ng.constant(h))
    logits = [sum(h[0][k] * c.W.values[k][j] for k in range(3)) + c.b.values[j]
              for j in range(4)]
    mx = max(logits)
    exps = [np.exp(v - mx) for v in logits]
    ref = [e / sum(exps) for e in exps]
    assert np.allclose(out.values[0], ref, atol=1e-9)
    assert abs(out.values.sum() - 1.0) <= 1e-9


def test_classify_argmax_shift_invariant():
    rng = SplitMix64(19)
    c = cells.init_classifier(3, 4)
    c.W.values[:] = _randn(rng, 3, 4)
    h = ng.constant(_randn(rng, 1, 3))
    base = np.argmax(cells.classify(c, h).values[0])
    c.b.values[:] += 100.0
    assert np.argmax(cells.classify(c, h).values[0]) == base


def test_init_statistics():
    p = cells.init_lstm(SplitMix64(23), 8, 16)
    bound = 1.0 / np.sqrt(8 + 16)
    assert np.all(np.abs(p.W.values) <= bound)
    assert np.all(p.b.values[16:32] == 1.0)  # forget block
    assert np.all(p.b.values[:16] == 0.0)
    g = cells.init_gate(SplitMix64(23), 4, 3)
    assert g.b.values.tolist() == [0.0, 1.0]
    c = cells.init_classifier(5, 3)
    assert not c.W.values.any() and not c.b.values.any()


def test_param_block_roundtrip(tmp_path):
    rng = SplitMix64(29)
    blocks = {"a.W": _randn(rng, 3, 4), "a.b": _randn(rng, 4), "z": _randn(rng, 2, 2, 2)}
    cells.write_param_blocks(tmp_path, blocks, extra_header={"note": 1})
    loaded, header = cells.read_param_blocks(tmp_path)
    assert set(loaded) == set(blocks)
    for name in blocks:
        assert loaded[name].tobytes() == blocks[name].tobytes()
    assert header["note"] == 1


def test_param_block_truncation_detected(tmp_path):
    cells.write_param_blocks(tmp_path, {"w": np.ones((4, 4))})
    raw = (tmp_path / "params.bin").read_bytes()
    (tmp_path / "params.bin").write_bytes(raw[:-8])
    with pytest.raises(cells.CheckpointError, match="bytes"):
        cells.read_param_blocks(tmp_path)
