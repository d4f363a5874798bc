"""Smoke test for the fusion_py extension module.

Build and install first, e.g. ``maturin develop -m crates/py/Cargo.toml``,
then run ``python python/smoke_test.py``.
"""

import math
import os
import random
import tempfile

import fusion_py as fp


def rand_tensor(shape, seed):
    rng = random.Random(seed)
    n = 1
    for s in shape:
        n *= s
    return fp.Tensor([rng.random() for _ in range(n)], list(shape))


def max_abs_diff(a, b):
    return max(abs(x - y) for x, y in zip(a.data, b.data))


def check_spectral():
    x = rand_tensor((3, 9, 12), 1)
    mag, phase = fp.fft2(x)
    assert mag.shape == [3, 9, 12]
    assert max_abs_diff(fp.ifft2(mag, phase), x) < 1e-9

    doubled = fp.Tensor([2.0 * m for m in mag.data], mag.shape)
    y = fp.ifft2(doubled, phase)
    assert all(abs(a - 2.0 * b) < 1e-9 for a, b in zip(y.data, x.data))


def check_metrics():
    a = rand_tensor((3, 16, 16), 2)
    assert fp.psnr(a, a) == math.inf
    assert fp.ssim(a, a) == 1.0
    zero, quarter = fp.Tensor.zeros([3, 16, 16]), fp.Tensor.full([3, 16, 16], 0.25)
    assert abs(fp.psnr(zero, quarter) - 12.0412) < 1e-4
    scores = fp.uiqm(a)
    assert set(scores) == {"uicm", "uism", "uiconm", "uiqm"}
    try:
        fp.psnr(a, zero.__class__.zeros([3, 8, 8]))
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")


def check_model():
    model = fp.FusionModel("tiny", seed=0)
    assert model.num_parameters == 4104
    assert fp.FusionModel("paper").num_parameters == 272848
    assert len(fp.ABLATIONS) == 9

    x = rand_tensor((3, 13, 17), 3)
    y = model.forward(x)
    assert y.shape == [3, 13, 17]
    assert all(0.0 < v < 1.0 for v in y.data)

    clean = rand_tensor((3, 12, 12), 4)
    assert fp.degrade(clean, depth=0.0).data == clean.data

    checks = model.gradcheck(rand_tensor((3, 8, 8), 5), rand_tensor((3, 8, 8), 6))
    assert checks and all(ok for _, _, ok in checks), [c for c in checks if not c[2]]

    pairs = fp.synthetic_pairs(3, size=16, seed=1)
    history = model.fit(pairs[:2], pairs[2:], epochs=2, batch_size=2, lr=1e-3, seed=0)
    assert [h["epoch"] for h in history] == [1, 2]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.fusn")
        model.save(path)
        again = fp.FusionModel.load(path)
        assert again.forward(x).data == model.forward(x).data
        with open(path, "r+b") as f:
            f.seek(40)
            b = f.read(1)
            f.seek(40)
            f.write(bytes([b[0] ^ 1]))
        try:
            fp.FusionModel.load(path)
        except fp.CheckpointError:
            pass
        else:
            raise AssertionError("corrupted checkpoint accepted")

    try:
        fp.FusionModel("tiny", ablation="nonsense")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown ablation accepted")


if __name__ == "__main__":
    check_spectral()
    check_metrics()
    check_model()
    print("fusion_py smoke test passed")
