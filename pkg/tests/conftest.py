import numpy as np
import pytest

from dota import tensor as T


def check_gradients(
    out_fn,
    params,
    rng,
    n_coords=20,
    step=1e-3,
    rtol=1e-3,
    atol=1e-4,
    probe=None,
):
    """Compare tape gradients against a central finite-difference oracle.

    ``out_fn()`` rebuilds the op output tensor from ``params``. The scalar
    under test is ``sum(out * probe)``; the tape differentiates the float32
    composition while the oracle reduces the float32 outputs in float64,
    so the comparison is not polluted by rounding of the reduction itself.

    A coordinate passes when ``|analytic - fd| <= atol + rtol * max(|.|)``;
    the absolute term only matters where float32 forward quantization
    dominates, i.e. for gradients near zero.
    """
    out0 = out_fn()
    if probe is None:
        probe = rand32(rng, *out0.shape) if out0.shape else np.ones((), np.float32)
    probe64 = probe.astype(np.float64)
    # Quantization of the float32 forward bounds what the oracle can resolve:
    # each output element carries up to ~ulp/2 of rounding jitter per
    # evaluation, so the difference quotient sees an absolute noise floor.
    quant = np.float32(6e-8) * np.linalg.norm(out0.data.astype(np.float64) * probe64)
    atol = max(atol, 3.0 * float(quant) / step)

    def tape_loss():
        return T.sum_(T.mul(out_fn(), T.Tensor(probe)))

    def oracle_loss():
        with T.no_grad():
            return float((out_fn().data.astype(np.float64) * probe64).sum())

    for p in params:
        p.grad = None
    T.backward(tape_loss())
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        assert p.grad.shape == p.data.shape
        n = min(n_coords, p.data.size)
        idx = rng.choice(p.data.size, size=n, replace=False)
        flat = p.data.ravel()
        for i in idx:
            i = int(i)
            saved = flat[i]
            flat[i] = saved + step
            hi = oracle_loss()
            flat[i] = saved - step
            lo = oracle_loss()
            flat[i] = saved
            fd = (hi - lo) / (2.0 * step)
            an = float(p.grad.ravel()[i])
            err = abs(an - fd)
            bound = atol + rtol * max(abs(an), abs(fd))
            worst = max(worst, err / max(bound, 1e-300))
            assert err <= bound, (
                f"gradient mismatch at coord {i}: analytic={an} fd={fd} |diff|={err}"
            )
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand32(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)
