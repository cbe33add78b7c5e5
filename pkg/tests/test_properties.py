"""Property-based checks over the quantizer, coder, and Pareto selection."""

import numpy as np
from hypothesis import given, settings, strategies as st

from icm import codec, entropy, oracles, rdeval
from icm.autograd import Tensor
from icm.rdeval import RDPoint

settings.register_profile("repo", derandomize=True, max_examples=60, deadline=None)
settings.load_profile("repo")


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.03125, 0.0625, 0.125, 0.25]))
def test_quantizer_idempotent_and_bijective(seed, step):
    rng = np.random.default_rng(seed)
    y = (rng.uniform(-20, 20, (2, 3, 3)) ** 3 / 50).astype(np.float32)
    q1 = codec.quantize(Tensor(y), step)
    assert q1.symbols.min() >= 0 and q1.symbols.max() <= 63
    np.testing.assert_array_equal(
        q1.values.data, ((q1.symbols - 32) * np.float32(step)).astype(np.float32))
    q2 = codec.quantize(Tensor(q1.values.data), step)
    np.testing.assert_array_equal(q1.symbols, q2.symbols)
    np.testing.assert_array_equal(q1.values.data, q2.values.data)


@given(st.integers(0, 2**32 - 1), st.integers(0, 80))
def test_range_coder_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    cdfs = []
    syms = []
    for _ in range(n):
        p = rng.dirichlet(np.full(64, rng.uniform(0.02, 6.0)))
        cdfs.append(entropy.quantize_cdf(p))
        syms.append(int(rng.integers(0, 64)))
    payload = entropy.range_encode(syms, cdfs)
    assert entropy.range_decode(payload, cdfs, n) == syms


@given(st.integers(0, 2**32 - 1))
def test_quantize_cdf_partition(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(64, rng.uniform(0.01, 10.0)))
    cdf = entropy.quantize_cdf(p)
    spans = np.diff(cdf)
    assert cdf[0] == 0 and cdf[-1] == 65536
    assert spans.min() >= 1


@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_pareto_front_equals_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pts = [RDPoint(float(b), float(m), f"{i:03d}")
           for i, (b, m) in enumerate(zip(rng.uniform(0.01, 1, n), rng.uniform(0, 1, n)))]
    got = {(p.bpp, p.metric, p.label) for p in rdeval.pareto_front(pts).points}
    want = set(oracles.exhaustive_pareto([(p.bpp, p.metric, p.label) for p in pts]))
    assert got == want
