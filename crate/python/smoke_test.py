"""Smoke test for the pyfreqseg extension module."""

import math
import tempfile

import pyfreqseg as fs


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok  {msg}")


def main():
    x = fs.Tensor.randn([16, 16, 3], 1.0, 7)
    s = fs.dfft2(x)
    back = fs.idfft2(s)
    check(back.max_abs_diff(x) < 1e-10, "fft round trip")
    energy = sum(v * v for v in x.tolist())
    check(abs(s.energy() - energy) <= 1e-9 * energy, "parseval")

    hi, lo = fs.split_bands(s, 0.5, "radial")
    total = [a + b for a, b in zip(hi.re.tolist(), lo.re.tolist())]
    check(total == s.re.tolist(), "band partition")

    e = fs.Tensor.randn([8, 8, 2], 1.0, 3)
    f = fs.fem_enhance(e, e, 0.5, "radial")
    vals = f.tolist()
    first = [vals[p * 4 + c] for p in range(64) for c in range(2)]
    second = [vals[p * 4 + 2 + c] for p in range(64) for c in range(2)]
    check(max(abs(v) for v in first) < 1e-5, "fem zero complement, first half")
    check(max(abs(a - 2 * b) for a, b in zip(second, e.tolist())) < 1e-5, "fem zero complement, second half")

    image, mask = fs.generate_scene(0, seed=0, h=32, w=32)
    check(image.shape == [32, 32, 3] and len(mask) == 32 * 32, "scene shapes")

    counts = {k: fs.Model(attention=k, width=16).num_params() for k in ("ca", "mca", "maca")}
    check(counts["ca"] < counts["mca"] < counts["maca"], f"parameter order {counts}")

    m = fs.Model(attention="maca", width=16, heads=2, agents=4, seed=1)
    logits = m.forward(image)
    check(logits.shape == [32, 32, 4], "logit shape")
    pred = m.predict(image)
    check(all(0 <= p < 4 for p in pred), "prediction range")
    with tempfile.TemporaryDirectory() as d:
        m.save(d)
        again = fs.Model.load(d).forward(image)
        check(again.tolist() == logits.tolist(), "checkpoint round trip")

    check(fs.miou(mask, mask, 4) == 1.0, "perfect miou")
    check(fs.boundary_f_score(mask, mask, 32, 32) == 1.0 or max(mask) == 0, "boundary identity")

    err, worst = fs.grad_check("head", trials=3)
    check(err < 1e-6 and math.isfinite(err), f"head gradcheck {err:.2e} at {worst}")

    lines = fs.verify("spectral")
    check(all(ok for ok, _ in lines), f"spectral suite ({len(lines)} checks)")

    try:
        fs.Model(attention="dense")
    except ValueError:
        print("ok  bad attention kind rejected")
    else:
        raise AssertionError("bad attention kind accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
