"""Generator for the SURROGATE aerodynamic dataset shipped with the package.

The real F-18/HARV tables are not public in machine-readable form, so the
package ships smooth, F-18-class shapes sampled onto an alpha grid. Values are
plausible, not identified: lift rises then stalls past ~0.6 rad, pitch and roll
damping stay negative, directional stability degrades at high alpha.

Regenerate the bundled file with::

    python -m hybridflight.surrogate src/hybridflight/data/surrogate_aero.json
"""

import json
import sys

import numpy as np

ALPHA_MIN = -0.244
ALPHA_MAX = 1.571
GRID_STEP = 0.02


def _stall(alpha):
    # smooth 0 -> 1 transition centred near 0.65 rad
    return 1.0 / (1.0 + np.exp(-(alpha - 0.65) / 0.06))


def surrogate_functions():
    """Return ``{name: f(alpha)}`` for all 27 derivatives."""
    s = np.sin
    c = np.cos
    return {
        "C_L0": lambda a: 0.08 + 1.55 * s(2.6 * a) * (1 - _stall(a)) + 1.15 * s(2 * a) * _stall(a),
        "C_Lq": lambda a: 3.0 * c(a),
        "C_Lde": lambda a: 0.40 * c(a) ** 2 + 0.05,
        "C_D0": lambda a: 0.022 + 1.9 * s(a) ** 2,
        "C_Dq": lambda a: 0.5 * s(a) ** 2,
        "C_Dde": lambda a: 0.02 + 0.35 * s(a),
        "C_m0": lambda a: 0.02 - 0.35 * s(a) - 0.05 * s(a) ** 3,
        "C_mq": lambda a: -5.0 + 2.0 * s(a) ** 2,
        "C_mde": lambda a: -0.90 + 0.30 * s(a) ** 2,
        "C_Ybeta": lambda a: -0.75 - 0.25 * s(a),
        "C_Yp": lambda a: 0.05 * s(a),
        "C_Yr": lambda a: 0.45 * c(a),
        "C_Yde": lambda a: 0.0 * a,
        "C_Yda": lambda a: 0.03 * c(a),
        "C_Ydr": lambda a: 0.16 * c(a) ** 2,
        "C_lbeta": lambda a: -0.06 - 0.10 * s(a),
        "C_lp": lambda a: -0.32 + 0.15 * s(a) ** 2,
        "C_lr": lambda a: 0.08 + 0.20 * s(a),
        "C_lde": lambda a: 0.0 * a,
        "C_lda": lambda a: 0.085 * c(a) + 0.01,
        "C_ldr": lambda a: 0.012 * c(a),
        "C_nbeta": lambda a: 0.12 * c(2 * a),
        "C_np": lambda a: -0.04 - 0.06 * s(a),
        "C_nr": lambda a: -0.32 + 0.12 * s(a) ** 2,
        "C_nde": lambda a: 0.0 * a,
        "C_nda": lambda a: -0.006 + 0.01 * s(a),
        "C_ndr": lambda a: -0.075 * c(a) ** 2 - 0.005,
    }


def surrogate_grid(step=GRID_STEP):
    n = int(np.ceil((ALPHA_MAX - ALPHA_MIN) / step))
    return np.linspace(ALPHA_MIN, ALPHA_MAX, n + 1)


def build_surrogate_document(step=GRID_STEP):
    grid = surrogate_grid(step)
    tables = {}
    for name, fn in surrogate_functions().items():
        values = np.asarray(fn(grid), dtype=float) + 0.0
        tables[name] = [[round(float(a), 6), round(float(v), 8)] for a, v in zip(grid, values)]
    return {
        "format": "hybridflight-aero/1",
        "label": "SURROGATE - synthetic F-18-class shapes, not identified flight data",
        "alpha_units": "rad",
        "interpolation": "cubic",
        "tables": tables,
    }


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    doc = build_surrogate_document()
    text = json.dumps(doc, indent=1)
    if argv:
        with open(argv[0], "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


if __name__ == "__main__":
    main()
