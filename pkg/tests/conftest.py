import numpy as np
import pytest

from matrain.modelzoo import BlockMLP, TinyAttention, TinyConv, build_network

SMALL_ARCHS = {
    "block": BlockMLP(d_input=3, width=6, layers=2, blocks_per_layer=3, d_output=2),
    "head": TinyAttention(vocab=6, seq_len=4, d_model=8, heads=2, layers=2),
    "conv": TinyConv(height=4, width=4, in_channels=1, filters=4, groups_per_layer=2, layers=2),
}


def inputs_for(arch, n, seed=0):
    rng = np.random.default_rng(seed)
    if isinstance(arch, TinyAttention):
        return rng.integers(0, arch.vocab, size=(n, arch.seq_len)).astype(float)
    return rng.standard_normal((n, arch.d_in))


@pytest.fixture(params=sorted(SMALL_ARCHS))
def small_net(request):
    arch = SMALL_ARCHS[request.param]
    return build_network(arch, 7)


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
