"""Smoke test for the pyradlads extension.

Build and install the wheel first:

    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/radlads_python-*.whl

then run `python python/smoke_test.py` from the repository root.
"""

import math
import os
import random
import sys
import tempfile

import pyradlads as rl

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def close(a, b, tol):
    return all(abs(x - y) <= tol for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def kernels():
    rng = random.Random(3)
    t, width, heads = 6, 8, 2
    d = width // heads

    def draw(lo, hi):
        return [[rng.uniform(lo, hi) for _ in range(width)] for _ in range(t)]

    r, k, v = draw(-1, 1), draw(-1, 1), draw(-1, 1)
    w, a = draw(0.05, 1), draw(0, 1)
    scan = rl.wkv6(r, k, v, w, heads)
    assert close(scan, rl.wkv6(r, k, v, w, heads, parallel=True), 1e-12)

    kappa = []
    for row in draw(-1, 1):
        out = []
        for h in range(heads):
            seg = row[h * d:(h + 1) * d]
            n = math.sqrt(sum(x * x for x in seg))
            out += [x / n for x in seg]
        kappa.append(out)
    scan = rl.wkv7(r, w, k, kappa, a, v, heads)
    assert close(scan, rl.wkv7(r, w, k, kappa, a, v, heads, parallel=True), 1e-12)
    print("kernels: scan and sum forms agree")


def pipeline():
    cfg = rl.Config(os.path.join(ROOT, "crates/core/tests/fixtures/tiny.cfg"))
    cfg.set("data.corpus", os.path.join(ROOT, "data/shakespeare.txt"))
    cfg.set("student.mixer", "rad_rwkv7")
    assert cfg.mixer == "rad_rwkv7"
    try:
        cfg.set("model.d_modle", "3")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    with tempfile.TemporaryDirectory() as out:
        p = rl.Pipeline(cfg, out)
        try:
            p.run("transfer")
        except ValueError as e:
            assert "pretrain-teacher" in str(e)
        else:
            raise AssertionError("transfer ran without a teacher")
        for stage in ["init-teacher", "pretrain-teacher", "transfer", "step1", "step2"]:
            p.run(stage)
        report = p.run("eval")["report"]
        print(f"pipeline: kl {report['kl']:.4f}  agreement {report['agreement']:.3f}")
        names = [n for n, _, _, _ in rl.read_archive(p.path("student_step2.radt"))]
        assert names and all(isinstance(n, str) for n in names)


def main():
    assert f"{rl.relative_score(69.2, 75.8, 0.0):.1f}" == "91.3"
    summary = rl.oracle_check(seed=1, draws=500)
    assert summary["passed"], summary
    print("oracle check: pass")
    kernels()
    pipeline()
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
