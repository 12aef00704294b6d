#!/usr/bin/env python3
"""Smoke test for the Python bindings.

Builds nothing itself: run `cargo build -p patchgen-py` first, then
`python3 python/smoke_test.py`. The script locates the built cdylib,
exposes it as an importable module, and exercises the main types and
operations end to end.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_patchgen():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("debug", "release")
        for name in ("libpatchgen.so", "libpatchgen.dylib", "patchgen.dll")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("build the bindings first: cargo build -p patchgen-py")
    stage = Path(tempfile.mkdtemp(prefix="patchgen_py_"))
    suffix = ".pyd" if built.suffix == ".dll" else ".so"
    shutil.copy2(built, stage / f"patchgen{suffix}")
    sys.path.insert(0, str(stage))
    import patchgen

    return patchgen


def main():
    pg = import_patchgen()

    # Order planning.
    omega = pg.plan_order(2, 2)
    assert omega == [(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)], omega
    zeta_star = pg.plan_order(2, 2, 1, "zeta_star")
    assert zeta_star == [(1, 0, 0), (0, 0, 0), (1, 1, 0), (0, 1, 0)], zeta_star
    assert pg.plan_matrix(3, 3) == "1 2 3\n4 5 6\n7 8 9\n"

    ring, prefix = pg.plan_outpaint(3, 3, 1, 1, 1, 1)
    assert prefix == 1 and len(ring) == 9 and ring[0] == (1, 1, 0)
    assert sorted(ring) == sorted((r, c, 0) for r in range(3) for c in range(3))

    # Relative-position table grows with the extent.
    assert pg.rpe_table_len(0, 0, 0) == 1
    assert pg.rpe_table_len(1, 1, 0) < pg.rpe_table_len(2, 2, 0) <= pg.rpe_table_len(2, 2, 1)

    # Codec: render, classify, serialize, decode.
    grid, caption, family = pg.synth(1, 2, 2, seed=5)[0]
    assert grid.classify() == family, (grid.classify(), family)
    assert isinstance(caption, str) and caption.split()[0] == family
    blob = grid.nwit_bytes()
    assert blob[:4] == b"NWIT"
    back = pg.Grid.from_nwit_bytes(blob)
    assert back == grid
    ppm = grid.ppm_bytes()
    assert ppm.startswith(b"P6\n")

    checker = pg.render_pattern("checker", base=3, delta=9, period=2)
    assert checker.classify() == "checker"

    # Gradient checks on a few random cases per op.
    rows = pg.gradcheck(seed=1, cases=2)
    assert len(rows) >= 15 and all(ok for _, _, ok in rows), rows

    # A tiny engine: train a few steps, then generate deterministically.
    eng = pg.Engine(layers=1, dim=16, heads=2, m_side=2, vocab=64, seed=3)
    before = eng.eval_patterns(count=4, seed=9)
    assert abs(before - math.log(64)) / math.log(64) < 0.1, before
    eng.train_patterns(count=32, steps=24, batch=4, seed=3)
    after = eng.eval_patterns(count=4, seed=9)
    assert after < before, (before, after)

    g1 = eng.generate(2, 3, text="vstripes period2 v1 v0", seed=11)
    g2 = eng.generate(2, 3, text="vstripes period2 v1 v0", seed=11)
    assert g1 == g2 and g1.dims == (2, 3, 1, 2, 64)

    out = eng.outpaint(g1, 0, 0, 3, 4, seed=2)
    assert out.patch(0, 0, 0) == g1.patch(0, 0, 0)
    anim = eng.animate(g1, frames=3, seed=2)
    assert anim.dims[2] == 3
    assert anim.patch(1, 1, 0) == g1.patch(1, 1, 0)

    # Checkpoint round trip preserves behavior.
    with tempfile.TemporaryDirectory() as d:
        prefix = str(Path(d) / "model")
        eng.save(prefix)
        loaded = pg.Engine.load(prefix)
        g3 = loaded.generate(2, 3, text="vstripes period2 v1 v0", seed=11)
        assert g3 == g1

    print("python bindings smoke test: OK")


if __name__ == "__main__":
    main()
