import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradsketch import _ops
from gradsketch import factgrass as fg
from gradsketch.grass import SpecParseError
from gradsketch.mask import apply_mask, random_mask
from gradsketch.model import LinearLayerTrace, init_mlp, per_sample_grads, vec_kron
from gradsketch.sketch import sjlt_materialize

from conftest import rel_err


def _trace(rng, d_in, d_out, T, dtype=np.float64):
    return LinearLayerTrace(0, rng.standard_normal((d_in, T)).astype(dtype), rng.standard_normal((d_out, T)).astype(dtype))


def _bind(text, d_in, d_out, layer=0):
    return fg.bind_layer(fg.parse_factorized(text).entries[0], d_in, d_out, layer)


def _oracle(comp, trace):
    g = fg.materialize_layer_grad(trace).astype(np.float64)
    if comp.mode in (fg.FactMode.LOGRA, fg.FactMode.FACTSJLT):
        P_in, P_out = comp._factor_matrices()
        return np.kron(P_in, P_out) @ g
    out = apply_mask(fg.kron_mask(comp.mask_in, comp.mask_out), g)
    return out if comp.final is None else sjlt_materialize(comp.final) @ out


SPECS = [
    "logra:layer=*,kin=6,kout=5,seed=2",
    "factsjlt:layer=*,kin=6,kout=5,s=2,seed=2",
    "factmask:layer=*,kin=6,kout=5,seed=2",
    "factgrass:layer=*,k=30,kin=6,kout=5,seed=2",
    "factgrass:layer=*,k=16,kin=4,kout=4,kin'=20,kout'=3*kout,s=3,seed=2",
]


@pytest.mark.parametrize("text", SPECS)
@pytest.mark.parametrize("dtype, tol", [(np.float64, 1e-12), (np.float32, 1e-6)])
def test_layer_compressors_match_flat_oracle(rng, text, dtype, tol):
    for T in (1, 2, 4):
        trace = _trace(rng, 40, 33, T, dtype)
        comp = _bind(text, 40, 33)
        assert rel_err(comp.compress(trace), _oracle(comp, trace)) <= tol


def test_kron_mask_index_convention(rng):
    m_in, m_out = random_mask(7, 3, 1), random_mask(5, 2, 2)
    tr = _trace(rng, 7, 5, 3)
    flat = apply_mask(fg.kron_mask(m_in, m_out), vec_kron(tr.z_in, tr.dz_out))
    masked = vec_kron(tr.z_in[m_in.indices], tr.dz_out[m_out.indices])
    np.testing.assert_allclose(flat, masked, rtol=1e-14)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10**6))
def test_kron_mask_sorted_and_sized(d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    m_in = random_mask(d_in, int(rng.integers(1, d_in + 1)), seed)
    m_out = random_mask(d_out, int(rng.integers(1, d_out + 1)), seed + 1)
    k = fg.kron_mask(m_in, m_out)
    assert k.size == m_in.size * m_out.size and k.input_dim == d_in * d_out


def test_parse_roundtrip_and_defaults():
    spec = fg.parse_factorized("factgrass:layer=*,k=4096,kin'=2*kin,kout'=2*kout,s=1,seed=9")
    assert fg.parse_factorized(spec.to_string()) == spec
    comp = fg.bind_layer(spec.entries[0], 512, 512)
    assert (comp.k_l, comp.mask_in.size, comp.mask_out.size) == (4096, 128, 128)
    multi = fg.parse_factorized("logra:layer=0,kin=2,kout=2;factgrass:layer=*,kin=2,kout=2")
    assert multi.entry_for(0).mode is fg.FactMode.LOGRA and multi.entry_for(3).mode is fg.FactMode.FACTGRASS


@pytest.mark.parametrize(
    "text, fragment",
    [("nope:k=4", "unknown factorized"), ("logra:k=x", "integer"), ("logra:zz=1", "bad factorized"), ("factgrass:kin'=2*k", "kin'")],
)
def test_parse_errors(text, fragment):
    with pytest.raises(SpecParseError, match=fragment):
        fg.parse_factorized(text)


def test_bind_errors():
    with pytest.raises(ValueError, match="square"):
        _bind("logra:k=10", 20, 20)
    with pytest.raises(ValueError, match="exceed"):
        _bind("factgrass:kin=8,kout=8", 10, 10)
    with pytest.raises(ValueError, match="exceeds k_l'"):
        _bind("factgrass:k=100,kin=2,kout=2,kin'=4,kout'=4", 10, 10)


def test_layer_seeds_differ_for_wildcard():
    a = _bind("factgrass:kin=4,kout=4,seed=1", 64, 64, layer=0)
    b = _bind("factgrass:kin=4,kout=4,seed=1", 64, 64, layer=1)
    assert a.mask_in != b.mask_in


def test_model_compression_concatenates_blocks(rng):
    model = init_mlp([6, 8, 4], seed=0, dtype=np.float64)
    X, y = rng.standard_normal((3, 6)), rng.integers(0, 4, 3)
    _, traces = per_sample_grads(model, X, y)
    comps = fg.bind_model(fg.parse_factorized("factgrass:layer=*,kin=2,kout=2,seed=4"), fg.model_layer_dims(model))
    res = fg.compress_model(comps, traces.sample(1))
    assert res.vector.shape == (8,) and res.block_dims == [4, 4]
    batch = fg.compress_model_batch(comps, traces)
    np.testing.assert_allclose(np.concatenate([b[1] for b in batch]), res.vector, rtol=1e-12, atol=1e-15)
    for comp, ops in zip(comps, res.op_counts):
        assert dict(ops) == fg.op_model(comp)
    with pytest.raises(KeyError):
        fg.compress_model(comps, traces.sample(0)[:1])


def test_trace_shape_mismatch():
    comp = _bind("logra:kin=2,kout=2", 10, 10)
    with pytest.raises(ValueError, match="expects"):
        comp.compress(_trace(np.random.default_rng(0), 10, 9, 1))


def test_factgrass_cheaper_than_logra_until_threshold():
    d, k_side = 256, 16
    logra = _bind(f"logra:kin={k_side},kout={k_side}", d, d)
    cheap = _bind(f"factgrass:kin={k_side},kout={k_side},kin'=2*kin,kout'=2*kout", d, d)
    dear = _bind(f"factgrass:kin={k_side},kout={k_side},kin'=128,kout'=128", d, d)
    assert sum(fg.op_model(cheap).values()) < sum(fg.op_model(logra).values())
    assert dear.k_prime > np.sqrt(dear.k_l * d * d)
    assert sum(fg.op_model(dear).values()) > sum(fg.op_model(logra).values())


def test_factgrass_memory_is_order_k_prime():
    rng = np.random.default_rng(0)
    d = 512
    trace = _trace(rng, d, d, 4, np.float32)
    comp = _bind("factgrass:kin=64,kout=64,kin'=2*kin,kout'=2*kout,seed=1", d, d)
    comp.compress(trace)
    tracemalloc.start()
    try:
        base = tracemalloc.get_traced_memory()[0]
        tracemalloc.reset_peak()
        comp.compress(trace)
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    assert peak <= 4 * comp.k_prime * 4
    assert peak < d * d * 4


def test_materialize_guard():
    big = LinearLayerTrace(0, np.zeros((4000, 1)), np.zeros((4000, 1)))
    with pytest.raises(MemoryError):
        fg.materialize_layer_grad(big)


def test_op_counter_totals(rng):
    comp = _bind("logra:kin=3,kout=3", 12, 10)
    with _ops.count_ops() as ops:
        comp.compress(_trace(rng, 12, 10, 2))
    assert ops["project"] == 2 * (3 * 12 + 3 * 10) and ops["reconstruct"] == 2 * 9
