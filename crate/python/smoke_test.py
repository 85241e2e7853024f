"""Smoke test for the `tavit` extension module.

Build first with

    cargo build --release -p tavit-py --features extension-module

then run `python3 python/smoke_test.py`. If `tavit` is not importable the
script loads the freshly built library from `target/`.
"""

import importlib.util
import math
import pathlib
import random
import shutil
import sys
import tempfile


def load_tavit():
    try:
        import tavit

        return tavit
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libtavit.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp()) / "tavit.so"
            shutil.copy(lib, tmp)
            spec = importlib.util.spec_from_file_location("tavit", tmp)
            mod = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(mod)
            return mod
    sys.exit("tavit is not built; see the module docstring")


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    tavit = load_tavit()

    p = tavit.phantom(3, size=16, depth=4)
    d, h, w = p.extents
    assert (d, h, w) == (4, 16, 16)
    assert len(p.t1w) == len(p.t1c) == len(p.labels) == d * h * w
    assert 0.0 <= min(p.t1c) and max(p.t1c) <= 1.0
    again = tavit.phantom(3, size=16, depth=4)
    assert again.t1c == p.t1c

    g = [True] * 4 + [False] * 4
    q = [False, False, True, True, True, True, False, False]
    assert tavit.dsc(g, q) == 0.5
    assert close(tavit.jaccard(g, q), 1 / 3, 1e-15)
    assert close(tavit.rmsd([3.0, 4.0], [0.0, 0.0]), math.sqrt(12.5), 1e-12)
    assert tavit.nmse([1.0, 0.0, 0.0, 0.0], [0.0] * 4) == 0.25
    assert close(tavit.psnr([0.1, -0.1], [0.0, 0.0]), 20.0, 1e-12)
    assert close(tavit.ncc([1.0, 2.0, 4.0], [2.0, 4.0, 8.0]), 1.0, 1e-12)
    assert close(tavit.ssim(p.t1w, p.t1w, p.extents), 1.0, 1e-12)
    t, pv = tavit.paired_ttest([0.3, 0.5, 0.9], [0.3, 0.5, 0.9])
    assert pv == 1.0
    try:
        tavit.ncc([1.0, 1.0], [0.0, 1.0])
        raise AssertionError("constant input must raise")
    except ValueError:
        pass

    rng = random.Random(0)
    shape = [1, 2, 37, 8]
    n = math.prod(shape)
    qkv = [[rng.uniform(-1, 1) for _ in range(n)] for _ in range(3)]
    dense = tavit.attention(*qkv, shape)
    tiled = tavit.attention(*qkv, shape, tile=5)
    assert max(abs(a - b) for a, b in zip(dense, tiled)) <= 1e-10

    m = tavit.Model(in_channels=2, image_size=16, conditioned=True, seed=1)
    c, s, _ = m.latent_shape
    x = [rng.uniform(-1, 1) for _ in range(2 * 16 * 16)]
    lat = [rng.uniform(-1, 1) for _ in range(c * s * s)]
    y = m.predict(x, 1, lat)
    assert len(y) == 16 * 16 and all(-1.0 <= v <= 1.0 for v in y)
    try:
        m.predict(x, 1)
        raise AssertionError("conditioned model must require a latent")
    except ValueError:
        pass

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "m.tavc"
        m.save(str(path))
        back = tavit.Model.load(str(path))
        assert back.predict(x, 1, lat) == y
        h1 = tavit.generate_dataset(str(pathlib.Path(tmp) / "a"), patients=3, image_size=16, depth=2)
        h2 = tavit.generate_dataset(str(pathlib.Path(tmp) / "b"), patients=3, image_size=16, depth=2)
        assert h1 == h2 and len(h1) == 16

    print(f"tavit {tavit.__version__}: smoke test passed ({m.num_parameters} parameters)")


if __name__ == "__main__":
    main()
