import numpy as np

from fedbasin.nn import ModelSpec, init_params, pack_params, unpack_params


def perturbed_model(spec: ModelSpec, rng, scale: float = 0.3,
                    bias_shift: float = 0.0):
    """Random model near the default init; optional first-layer bias shift
    pushes hidden units away from their kinks."""
    p = init_params(spec, int(rng.integers(0, 2**31)))
    p.values += rng.normal(scale=scale, size=p.values.size)
    if bias_shift:
        layers = unpack_params(p, spec)
        w0, b0 = layers[0]
        p = pack_params(spec, [(w0, b0 + bias_shift)] + layers[1:])
    return p


def kink_stable_inputs(spec: ModelSpec, models, center, x: np.ndarray) -> np.ndarray:
    """Rows of x whose first-layer activation signs cannot flip anywhere on
    the segments between ``center`` and each model (so the outputs of all
    contracted models are exactly polynomial in the contraction factor)."""
    wc, bc = unpack_params(center, spec)[0]
    zc = x @ wc + bc
    ok = np.ones(x.shape[0], dtype=bool)
    for m in models:
        wm, bm = unpack_params(m, spec)[0]
        zm = x @ wm + bm
        ok &= np.all(np.abs(zm - zc) < np.abs(zc), axis=1)
    return x[ok]
