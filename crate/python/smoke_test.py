"""Smoke test for the mixmem extension module.

Build with `maturin develop -m crates/python/Cargo.toml`, or
`cargo build -p mixmem-py --features extension-module --release` and put
`target/release/libmixmem_py.so` on the path as `mixmem.so`.
"""

import json
import math

import mixmem


def main():
    truth, data = mixmem.simulate(p=15, k=3, d=4, alpha_h=0.1, n=800, seed=4)
    assert (data.n, data.p) == (800, 15)
    assert truth.alpha0 is not None and abs(truth.alpha0 - 0.3) < 1e-12

    result = mixmem.fit(data, k=3, alpha0=0.3, seed=4, workers=2)
    est = result.model
    assert (est.p, est.k) == (15, 3)
    for theta in est.thetas:
        for h in range(3):
            assert abs(sum(row[h] for row in theta) - 1.0) < 1e-9
    err = mixmem.rmse(est, truth)
    assert 0.0 < err < 0.3, err
    assert mixmem.rmse(truth, truth) == 0.0

    again = mixmem.Model.from_json(truth.to_json())
    assert again.thetas == truth.thetas
    assert json.loads(truth.to_json())["k"] == 3

    frac = mixmem.negative_fraction(data, 0.3, [[0], [1], [2]])
    assert 0.0 <= frac <= 1.0

    a = [[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]]
    swapped = [[r[1], r[0]] for r in a]
    assert mixmem.match_columns(a, swapped) == [1, 0]

    cube = [[[a[i][0] * a[j][0] * a[l][0] for l in range(3)] for j in range(3)] for i in range(3)]
    out = mixmem.factorize(cube, 1, max_iters=2000)
    assert out["objective"] < 1e-6 * math.sqrt(sum(v * v for s in cube for f in s for v in f))

    try:
        mixmem.fit(data, k=3, alpha0=0.3, matcher="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad matcher accepted")

    print(f"ok: rmse {err:.4f}, negative fraction {frac:.3f}, partitions {len(result.partitions)}")


if __name__ == "__main__":
    main()
