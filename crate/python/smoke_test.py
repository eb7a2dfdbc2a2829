"""Smoke test for the ifcorrnet Python bindings.

Build first with `maturin develop --release -m crates/py/pyproject.toml`.
"""

import math
import random
import sys

import ifcorrnet


def main() -> int:
    assert ifcorrnet.SAMPLE_RATE == 16000

    full = ifcorrnet.parameter_count("full")
    small = ifcorrnet.parameter_count("small")
    print(f"parameters: full {full}, small {small}")
    assert 8_500_000 <= full <= 11_500_000
    assert 1_680_000 <= small <= 2_520_000

    rng = random.Random(0)
    x = [rng.gauss(0.0, 0.1) for _ in range(16000)]
    re, im = ifcorrnet.stft(x)
    assert len(re[0]) == 257 and len(im) == len(re)
    y = ifcorrnet.round_trip(x)
    err = max(abs(a - b) for a, b in zip(x, y))
    print(f"round trip max error {err:.2e}")
    assert len(y) == len(x) and err < 1e-6

    m = ifcorrnet.synth_mixture(seed=7, t60=0.5, duration=1.0)
    mix, target = m["mixture"], m["target"]
    same = ifcorrnet.evaluate(target, target)
    rev = ifcorrnet.evaluate(mix, target)
    print(f"reverberant: {rev}")
    assert same["cd"] < 1e-9 and same["llr"] < 1e-9
    assert rev["fwsnr"] < same["fwsnr"]
    assert all(math.isfinite(v) for v in rev.values())

    toml = ifcorrnet.resolve_config(overrides=["model.channels=16"], seed=5)
    assert "channels = 16" in toml and "seed = 5" in toml

    try:
        ifcorrnet.resolve_config(overrides=["model.bogus=1"])
    except ValueError as e:
        print(f"rejected bad key: {e}")
    else:
        raise AssertionError("unknown key accepted")

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
