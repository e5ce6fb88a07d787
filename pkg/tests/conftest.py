import numpy as np
import pytest

from face.diffcore import Tensor, backward_grads, precision, trace_branches


def _evaluate(f):
    with trace_branches() as trace:
        value = float(np.asarray(f()).reshape(-1)[0])
    return value, tuple(trace)


def fd_grad(f, arr, h=1e-3, idx=None, richardson=False):
    """Central differences of scalar ``f()`` w.r.t. float64 ``arr`` (perturbed in place).

    Returns ``(grad, valid)``. An entry is invalid when ``f`` at ``x + h`` or
    ``x - h`` took a different ReLU / max-pool branch than at ``x``: the
    stencil then straddles a kink and the difference quotient is meaningless.
    ``idx`` restricts the check to some flat indices (others stay 0 / valid).
    ``richardson`` combines steps h and h/2 as (4 D(h/2) - D(h)) / 3, which
    cancels the O(h^2) truncation term of the plain central difference.
    """
    g = np.zeros(arr.shape, dtype=np.float64)
    valid = np.ones(arr.shape, dtype=bool)
    flat, gf, vf = arr.reshape(-1), g.reshape(-1), valid.reshape(-1)
    _, branches = _evaluate(f)
    for i in range(flat.size) if idx is None else idx:
        old = flat[i]
        steps = (h, h / 2) if richardson else (h,)
        diffs = []
        for step in steps:
            flat[i] = old + step
            fp, bp = _evaluate(f)
            flat[i] = old - step
            fm, bm = _evaluate(f)
            flat[i] = old
            diffs.append((fp - fm) / (2 * step))
            vf[i] = vf[i] and bp == branches and bm == branches
        gf[i] = (4 * diffs[1] - diffs[0]) / 3 if richardson else diffs[0]
    return g, valid


def assert_rel_close(analytic, numeric, rtol=1e-3, atol=1e-7, where=None):
    """Every entry within ``rtol`` relative error (atol guards exact zeros)."""
    analytic = np.asarray(analytic, np.float64)
    numeric = np.asarray(numeric, np.float64)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    bad = err > bound
    if where is not None:
        bad &= where
    assert not bad.any(), (
        f"{bad.sum()} entries outside rtol={rtol}: worst rel err "
        f"{(err[bad] / np.maximum(np.abs(numeric[bad]), 1e-300)).max():.3e}"
    )


def gradcheck(build, arrays: dict, rtol=1e-3, h=1e-3, sample: dict | None = None, max_skip=0.0, rng=None,
              richardson=False):
    """Compare reverse-mode gradients of scalar ``build(**tensors)`` with central differences.

    Everything runs in float64. ``sample`` maps an input name to how many of
    its entries to check (default: all). At most ``max_skip`` of the checked
    entries may be excluded for straddling a kink. Returns (checked, skipped).
    """
    rng = rng or np.random.default_rng(0)
    with precision(np.float64):
        arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        out = build(**leaves)
        assert out.size == 1
        names = list(arrays)
        gs = backward_grads(out, [leaves[n] for n in names])

        def f():
            return build(**{k: Tensor(v) for k, v in arrays.items()}).data

        checked = skipped = 0
        for n, g in zip(names, gs):
            idx = None
            if sample and n in sample and sample[n] < arrays[n].size:
                idx = rng.choice(arrays[n].size, size=sample[n], replace=False)
            num, valid = fd_grad(f, arrays[n], h, idx, richardson)
            mask = valid if idx is None else np.isin(np.arange(valid.size), idx).reshape(valid.shape) & valid
            total = valid.size if idx is None else len(idx)
            checked += total
            skipped += total - int(mask.sum())
            assert_rel_close(g.data, num, rtol, where=mask)
    assert skipped <= max_skip * checked, f"{skipped}/{checked} entries straddled a kink"
    return checked, skipped


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criteria append "PASS/FAIL ..." lines here; they are repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
