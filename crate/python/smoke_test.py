"""Smoke test for the embryoseg_py extension.

Builds the extension with cargo, loads it from a temporary directory and
exercises volumes, phantoms, pose, metrics and networks.

    python3 python/smoke_test.py
"""

import importlib.util
import pathlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension(tmp):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "embryoseg-py"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libembryoseg_py.so"
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    dest = pathlib.Path(tmp) / ("embryoseg_py" + suffix)
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("embryoseg_py", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as tmp:
        es = load_extension(tmp)

        v = es.Volume([2, 2, 2], [float(i) for i in range(8)])
        path = pathlib.Path(tmp) / "v.mvf"
        v.write(str(path))
        assert es.Volume.read(str(path)) == v
        assert es.Volume.from_bytes(v.to_bytes()) == v
        assert v.values()[7] == 7.0

        p = es.generate_phantom(seed=3, mutant=True, vol_dims=[48, 48, 48])
        assert p["label"] == "mutant"
        bv = p["bv_mask"]
        assert bv.is_mask and bv.count_nonzero() > 0
        assert es.dice(bv, bv) == 1.0

        canon = es.canonicalize(bv, [32, 32, 32])
        assert canon.dims == [32, 32, 32]

        acc, sens, spec = es.summarize(92, 11, 12, 451)
        assert abs(acc - 543 / 566) < 1e-12
        assert abs(sens - 92 / 103) < 1e-12 and abs(spec - 451 / 463) < 1e-12

        net = es.Network("classifier", 2, [32, 32, 32], seed=1)
        assert net.weight_layer_count() == 9
        label, prob = es.predict(canon, net)
        assert label in ("mutant", "normal") and 0.0 <= prob <= 1.0
        sal = es.saliency(canon, net)
        assert sal.dims == [32, 32, 32]

        ckpt = pathlib.Path(tmp) / "c.mck"
        net.save(str(ckpt))
        again = es.Network.load(str(ckpt))
        assert again.kind == "classifier" and again.param_count == net.param_count

        fcn = es.Network("fcn_segmenter", 2, [16, 16, 16])
        body = es.segment_body(p["image"].normalized(), fcn, [16, 16, 16])
        assert body.dims == [48, 48, 48]

    print("embryoseg_py smoke test passed")


if __name__ == "__main__":
    sys.exit(main())
