import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradsketch import _ops
from gradsketch.grass import SpecParseError, build_compressor, compress, looks_flat, parse_compressor
from gradsketch.mask import apply_mask, mask_matrix, random_mask, write_mask
from gradsketch.sketch import SketchKind, SketchSpec, sjlt_materialize, sjlt_project

from conftest import rel_err


def test_parse_examples():
    single = parse_compressor("sjlt:k=1024,s=1,seed=7")
    assert len(single.stages) == 1 and single.stages[0].k == 1024 and single.stages[0].seed == 7
    grass = parse_compressor("mask:k=4096,seed=1+sjlt:k=1024,seed=2")
    assert grass.is_grass and grass.output_dim == 1024


def test_chain_violation_message():
    with pytest.raises(SpecParseError, match=r"k \(20\) exceeds stage input dim \(10\)") as info:
        parse_compressor("mask:k=10+sjlt:k=20")
    assert info.value.position == 10


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "empty"),
        ("blur:k=3", "unknown stage"),
        ("sjlt:s=2", "missing its dim"),
        ("sjlt:k=x", "integer"),
        ("mask:k=4,s=2", "does not take"),
        ("smask:k=4", "path"),
        ("sjlt:k=4,s=5", "exceeds k"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(SpecParseError, match=fragment):
        parse_compressor(text)


def test_input_dim_checked_at_construction():
    with pytest.raises(SpecParseError):
        parse_compressor("mask:k=100+sjlt:k=10", input_dim=50)
    with pytest.raises(SpecParseError):
        build_compressor(parse_compressor("sjlt:k=100"), 50)


def test_fingerprint_frozen_and_sensitive():
    spec = parse_compressor("mask:k=4096,seed=1+sjlt:k=1024,seed=2").with_input_dim(8192)
    assert spec.fingerprint() == "949658d70558984a9c8be943d4b1c8d9a5300185d4220ad6098a287fdd8b0d5f"
    other = parse_compressor("mask:k=4096,seed=1+sjlt:k=1024,seed=3").with_input_dim(8192)
    assert other.fingerprint() != spec.fingerprint()
    assert spec.with_input_dim(8193).fingerprint() != spec.fingerprint()


_stage = st.one_of(
    st.builds(lambda k, s: f"mask:k={k},seed={s}", st.integers(64, 128), st.integers(0, 99)),
    st.builds(lambda k, s, n: f"sjlt:k={k},s={n},seed={s}", st.integers(8, 32), st.integers(0, 99), st.integers(1, 4)),
    st.builds(lambda k, s: f"gaussian:k={k},seed={s},normalize=1", st.integers(8, 32), st.integers(0, 99)),
)


@given(_stage, st.one_of(st.none(), _stage))
def test_to_string_roundtrip(first, second):
    text = first if second is None or not second.startswith(("sjlt", "gaussian")) or first.startswith(("sjlt", "gaussian")) else first + "+" + second
    spec = parse_compressor(text)
    assert parse_compressor(spec.to_string()) == spec


def test_grass_equals_composed_matrices(rng):
    p, kp, k = 2048, 512, 128
    comp = build_compressor(parse_compressor(f"mask:k={kp},seed=1+sjlt:k={k},s=2,seed=2"), p)
    mask, sj = comp.ops
    g = rng.standard_normal(p)
    oracle = sjlt_materialize(sj) @ (mask_matrix(mask) @ g)
    assert rel_err(comp.compress(g), oracle) <= 1e-12
    assert rel_err(comp.compress_batch(g[None])[0], oracle) <= 1e-12


def test_limiting_cases(rng):
    p, k = 1000, 64
    g = rng.standard_normal(p)
    full = build_compressor(parse_compressor(f"mask:k={p},seed=0+sjlt:k={k},seed=5"), p)
    np.testing.assert_array_equal(full.compress(g), sjlt_project(SketchSpec(SketchKind.SJLT, p, k, seed=5), g))
    only = build_compressor(parse_compressor(f"mask:k={k},seed=3"), p)
    np.testing.assert_array_equal(only.compress(g), apply_mask(random_mask(p, k, 3), g))


def test_grass_op_count_bound(rng):
    p, kp, k, s = 100_000, 512, 64, 2
    comp = build_compressor(parse_compressor(f"mask:k={kp},seed=1+sjlt:k={k},s={s},seed=2"), p)
    with _ops.count_ops() as ops:
        comp.compress(rng.standard_normal(p))
    assert sum(ops.values()) <= 2 * kp + kp * s


@given(st.integers(0, 10**6), st.floats(-5, 5), st.floats(-5, 5))
def test_compress_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 300))
    spec = parse_compressor("mask:k=120,seed=1+sjlt:k=30,s=2,seed=2")
    lhs = compress(spec, a * x + b * y)
    rhs = a * compress(spec, x) + b * compress(spec, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_smask_stage_reads_file(tmp_path, rng):
    m = random_mask(300, 40, 4)
    path = write_mask(tmp_path / "sel.gmsk", m)
    comp = build_compressor(parse_compressor(f"smask:path={path}+sjlt:k=16,seed=1"), 300)
    g = rng.standard_normal(300)
    np.testing.assert_array_equal(comp.ops[0].indices, m.indices)
    assert comp.compress(g).shape == (16,)
    with pytest.raises(ValueError, match="dim"):
        build_compressor(parse_compressor(f"smask:path={path}"), 301)


def test_looks_flat():
    assert looks_flat("mask:k=3") and looks_flat("SJLT:k=3")
    assert not looks_flat("factgrass:layer=*,k=16")
